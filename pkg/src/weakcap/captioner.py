"""Tree-conditioned caption decoder.

A single round of role-aware message passing turns a dependency tree into
relation-aware features (head, relation, tail per edge plus a root
self-feature).  A two-layer recurrent decoder then generates words: the
first (attention) layer reads the global video feature, the previous word
and the language layer's previous state, and drives additive attention over
the relation-aware features; the second (language) layer reads the attended
feature and the attention state and predicts the next word.

Gradients are computed by hand (back-propagation through time).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .binio import Reader, Writer
from .errors import ArgumentError, IngestError, ShapeError
from .grounding import softmax

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
SPECIALS = (BOS, EOS, UNK)
LM_MAGIC = b"WCLM"
LM_VERSION = 1

GCN_NAMES = ("g_self", "g_down", "g_up", "g_rel", "g_bias", "rel_emb")
DEC_NAMES = ("emb", "a_W", "a_b", "l_W", "l_b", "att_Wa", "att_Wh", "att_w", "out_W", "out_b")


@dataclass
class DecodeConfig:
    beam: int = 5
    max_len: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.beam < 1 or self.max_len < 1:
            raise ValueError("beam and max_len must be >= 1")


class Dictionary:
    def __init__(self, words):
        self.words = list(SPECIALS) + sorted(set(words) - set(SPECIALS))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    @property
    def bos(self):
        return self.index[BOS]

    @property
    def eos(self):
        return self.index[EOS]

    @property
    def unk(self):
        return self.index[UNK]

    def encode(self, tokens) -> tuple[list[int], int]:
        ids, unknown = [], 0
        for w in tokens:
            i = self.index.get(w)
            if i is None:
                i, unknown = self.unk, unknown + 1
            ids.append(i)
        return ids, unknown

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids if i != self.eos]


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def init_params(h: int, n_rel: int, dx: int, vocab_size: int, hidden: int, word_dim: int,
                att_dim: int, rng, rel_init=None) -> dict[str, np.ndarray]:
    F = 3 * h
    H = hidden

    def mat(rows, cols):
        return rng.uniform(-1.0, 1.0, size=(rows, cols)) / np.sqrt(cols)

    p = {
        "g_self": np.eye(h) + mat(h, h) * 0.1,
        "g_down": mat(h, h) * 0.1,
        "g_up": mat(h, h) * 0.1,
        "g_rel": mat(h, h) * 0.1,
        "g_bias": np.zeros(h),
        "rel_emb": rng.normal(0.0, 0.1, size=(n_rel, h)) if rel_init is None else np.array(rel_init, float),
        "emb": rng.normal(0.0, 0.1, size=(vocab_size, word_dim)),
        "a_W": mat(4 * H, dx + word_dim + 2 * H),
        "a_b": np.zeros(4 * H),
        "l_W": mat(4 * H, F + 2 * H),
        "l_b": np.zeros(4 * H),
        "att_Wa": mat(att_dim, F),
        "att_Wh": mat(att_dim, H),
        "att_w": rng.uniform(-1.0, 1.0, size=att_dim) / np.sqrt(att_dim),
        "out_W": mat(vocab_size, H),
        "out_b": np.zeros(vocab_size),
    }
    # forget-gate bias
    p["a_b"][H:2 * H] = 1.0
    p["l_b"][H:2 * H] = 1.0
    return p


# ---------------------------------------------------------------- relation-aware features


def _canonical_edges(edges):
    return sorted((int(p), r, int(c)) for p, r, c in edges)


def relation_features(node_emb: np.ndarray, edges, rel_index: dict, params, cache=False):
    """Relation-aware features of a tree.

    ``node_emb`` holds one input vector per node (node 0 is the root) and
    ``edges`` the (parent, relation, child) triples.  Returns an array of
    shape (len(edges) + 1, 3h): the root self-feature first, then one row per
    edge in the given order.
    """
    node_emb = np.asarray(node_emb, float)
    n, h = node_emb.shape
    if params["g_self"].shape != (h, h):
        raise ShapeError(f"node embeddings of size {h} do not match GCN size {params['g_self'].shape}")
    R = params["rel_emb"]
    pre = node_emb @ params["g_self"].T + params["g_bias"]
    for p, rel, c in _canonical_edges(edges):
        e = R[rel_index[rel]] @ params["g_rel"].T
        pre[c] += params["g_down"] @ node_emb[p] + e
        pre[p] += params["g_up"] @ node_emb[c] + e
    upd = np.maximum(pre, 0.0)
    feats = [np.concatenate([upd[0], np.zeros(h), upd[0]])]
    for p, rel, c in edges:
        feats.append(np.concatenate([upd[p], R[rel_index[rel]], upd[c]]))
    feats = np.array(feats)
    if cache:
        return feats, {"pre": pre, "node_emb": node_emb, "edges": list(edges), "rel_index": rel_index}
    return feats


def relation_features_backward(dfeats, params, cache, grads):
    pre, node_emb, edges, rel_index = cache["pre"], cache["node_emb"], cache["edges"], cache["rel_index"]
    n, h = node_emb.shape
    dupd = np.zeros_like(pre)
    dupd[0] += dfeats[0, :h] + dfeats[0, 2 * h:]
    for row, (p, rel, c) in enumerate(edges, start=1):
        dupd[p] += dfeats[row, :h]
        grads["rel_emb"][rel_index[rel]] += dfeats[row, h:2 * h]
        dupd[c] += dfeats[row, 2 * h:]
    dpre = dupd * (pre > 0)
    grads["g_self"] += dpre.T @ node_emb
    grads["g_bias"] += dpre.sum(axis=0)
    R = params["rel_emb"]
    for p, rel, c in _canonical_edges(edges):
        r = rel_index[rel]
        grads["g_down"] += np.outer(dpre[c], node_emb[p])
        grads["g_up"] += np.outer(dpre[p], node_emb[c])
        de = dpre[c] + dpre[p]
        grads["g_rel"] += np.outer(de, R[r])
        grads["rel_emb"][r] += params["g_rel"].T @ de


# ---------------------------------------------------------------- decoder


def _lstm(W, b, inp, c_prev):
    H = c_prev.shape[0]
    z = W @ inp + b
    i = sigmoid(z[:H])
    f = sigmoid(z[H:2 * H])
    o = sigmoid(z[2 * H:3 * H])
    g = np.tanh(z[3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (i, f, o, g, tc)


def _lstm_back(W, inp, c_prev, gates, dh, dc):
    i, f, o, g, tc = gates
    do = dh * tc
    dc = dc + dh * o * (1.0 - tc * tc)
    di = dc * g
    df = dc * c_prev
    dg = dc * i
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)])
    return np.outer(dz, inp), dz, W.T @ dz, dc * f


def zero_state(params):
    H = params["att_Wh"].shape[1]
    return (np.zeros(H), np.zeros(H), np.zeros(H), np.zeros(H))


def precompute(params, feats):
    return feats @ params["att_Wa"].T


def step(params, state, prev_word: int, x, feats, proj=None, full=False):
    """One decoding step.

    ``state`` is (h1, c1, h2, c2).  Returns ``(new_state, word distribution)``
    or, with ``full=True``, also the intermediate values needed for backprop.
    """
    h1p, c1p, h2p, c2p = state
    if proj is None:
        proj = precompute(params, feats)
    u = params["emb"][prev_word]
    in1 = np.concatenate([x, u, h2p, h1p])
    h1, c1, g1 = _lstm(params["a_W"], params["a_b"], in1, c1p)
    q = params["att_Wh"] @ h1
    th = np.tanh(proj + q)
    beta = softmax(th @ params["att_w"])
    att = beta @ feats
    in2 = np.concatenate([att, h1, h2p])
    h2, c2, g2 = _lstm(params["l_W"], params["l_b"], in2, c2p)
    p = softmax(params["out_W"] @ h2 + params["out_b"])
    new = (h1, c1, h2, c2)
    if full:
        return new, p, dict(in1=in1, g1=g1, c1p=c1p, h1=h1, th=th, beta=beta, in2=in2, g2=g2, c2p=c2p, h2=h2)
    return new, p


def sequence_loss(params, x, feats, ids, bos: int, eos: int, grad=True):
    """Teacher-forced negative log-likelihood of ``ids + [eos]`` and its gradients.

    Gradients include d(loss)/d(feats) under the key ``"_feats"``.
    """
    targets = list(ids) + [eos]
    prev = [bos] + list(ids)
    proj = precompute(params, feats)
    state = zero_state(params)
    loss = 0.0
    tape = []
    for w_prev, w in zip(prev, targets):
        state, p, c = step(params, state, w_prev, x, feats, proj, full=True)
        loss -= math.log(max(p[w], 1e-300))
        tape.append((w_prev, w, p, c))
    if not grad:
        return loss, None
    grads = {k: np.zeros_like(params[k]) for k in DEC_NAMES}
    dfeats = np.zeros_like(feats)
    dproj = np.zeros_like(proj)
    H = params["att_Wh"].shape[1]
    dx_len = len(x)
    Uw = params["emb"].shape[1]
    F = feats.shape[1]
    dh1n = np.zeros(H)
    dc1n = np.zeros(H)
    dh2n = np.zeros(H)
    dc2n = np.zeros(H)
    for w_prev, w, p, c in reversed(tape):
        dlogit = p.copy()
        dlogit[w] -= 1.0
        grads["out_W"] += np.outer(dlogit, c["h2"])
        grads["out_b"] += dlogit
        dh2 = params["out_W"].T @ dlogit + dh2n
        dW, db, din2, dc2p = _lstm_back(params["l_W"], c["in2"], c["c2p"], c["g2"], dh2, dc2n)
        grads["l_W"] += dW
        grads["l_b"] += db
        datt = din2[:F]
        dh1 = din2[F:F + H] + dh1n
        dh2p = din2[F + H:]
        beta = c["beta"]
        dfeats += np.outer(beta, datt)
        dbeta = feats @ datt
        de = beta * (dbeta - beta @ dbeta)
        grads["att_w"] += c["th"].T @ de
        dth = np.outer(de, params["att_w"]) * (1.0 - c["th"] ** 2)
        dproj += dth
        dq = dth.sum(axis=0)
        grads["att_Wh"] += np.outer(dq, c["h1"])
        dh1 = dh1 + params["att_Wh"].T @ dq
        dW, db, din1, dc1p = _lstm_back(params["a_W"], c["in1"], c["c1p"], c["g1"], dh1, dc1n)
        grads["a_W"] += dW
        grads["a_b"] += db
        grads["emb"][w_prev] += din1[dx_len:dx_len + Uw]
        dh2n = dh2p + din1[dx_len + Uw:dx_len + Uw + H]
        dh1n = din1[dx_len + Uw + H:]
        dc1n = dc1p
        dc2n = dc2p
    grads["att_Wa"] += dproj.T @ feats
    dfeats += dproj @ params["att_Wa"]
    grads["_feats"] = dfeats
    return loss, grads



# ---------------------------------------------------------------- model


def tree_features(params, trees, rel_index, cache=False):
    """Stack relation-aware features of several trees given as (node_emb, edges)."""
    feats, caches = [], []
    for node_emb, edges in trees:
        f, c = relation_features(node_emb, edges, rel_index, params, cache=True)
        feats.append(f)
        caches.append(c)
    feats = np.vstack(feats)
    return (feats, caches) if cache else feats


def pair_loss(params, x, trees, ids, rel_index, bos, eos, grad=True):
    """Negative log-likelihood of one target sentence with gradients for GCN and decoder."""
    feats, caches = tree_features(params, trees, rel_index, cache=True)
    loss, g = sequence_loss(params, x, feats, ids, bos, eos, grad=grad)
    if not grad:
        return loss, None
    dfeats = g.pop("_feats")
    for k in GCN_NAMES:
        g[k] = np.zeros_like(params[k])
    row = 0
    for c in caches:
        n = len(c["edges"]) + 1
        relation_features_backward(dfeats[row:row + n], params, c, g)
        row += n
    return loss, g


def caption_loss(params, pairs, rel_index, bos, eos, grad=True):
    """Mean over pairs of the summed per-step negative log-likelihood.

    ``pairs`` is a sequence of (x, trees, ids).  Raises on an empty batch.
    """
    if not pairs:
        raise ArgumentError("caption_loss needs at least one pair")
    total = 0.0
    grads = {k: np.zeros_like(params[k]) for k in GCN_NAMES + DEC_NAMES} if grad else None
    for x, trees, ids in pairs:
        loss, g = pair_loss(params, x, trees, ids, rel_index, bos, eos, grad=grad)
        total += loss
        if grad:
            for k, v in g.items():
                grads[k] += v
    n = len(pairs)
    if grad:
        for v in grads.values():
            v /= n
    return total / n, grads


def beam_decode(params, x, feats, bos: int, eos: int, cfg: DecodeConfig):
    """Beam search over ``step``; returns (token ids without the end token, total log-probability).

    Hypotheses are ranked by total log-probability, ties by the smaller
    token-id sequence.  A hypothesis stops at the end token or after
    ``cfg.max_len`` words.
    """
    proj = precompute(params, feats)
    live = [(0.0, (), zero_state(params))]
    finished = []
    for t in range(cfg.max_len):
        cands = []
        for score, toks, state in live:
            new, p = step(params, state, toks[-1] if toks else bos, x, feats, proj)
            logp = np.log(np.maximum(p, 1e-300))
            top = np.argsort(-logp, kind="stable")[:cfg.beam]
            for w in top:
                cands.append((score + float(logp[w]), toks + (int(w),), new))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for c in cands[:cfg.beam]:
            (finished if c[1][-1] == eos else live).append(c)
        if finished and live:
            best_done = max(f[0] for f in finished)
            live = [c for c in live if c[0] > best_done]
        if not live:
            break
    finished.extend(live)
    score, toks, _ = min(finished, key=lambda c: (-c[0], c[1]))
    ids = [w for w in toks if w != eos]
    return ids, score


def greedy_decode(params, x, feats, bos, eos, max_len):
    proj = precompute(params, feats)
    state = zero_state(params)
    prev, ids, total = bos, [], 0.0
    for _ in range(max_len):
        state, p = step(params, state, prev, x, feats, proj)
        w = int(np.argmax(p))
        total += math.log(max(p[w], 1e-300))
        if w == eos:
            break
        ids.append(w)
        prev = w
    return ids, total


# ---------------------------------------------------------------- checkpoint


def save_params(path, params: dict, meta: dict):
    """Write named float64 tensors plus a JSON metadata section."""
    with open(path, "wb") as f:
        w = Writer(f)
        w.raw(LM_MAGIC)
        w.u32(LM_VERSION)
        w.text(json.dumps(meta, sort_keys=True))
        names = sorted(params)
        w.u32(len(names))
        for name in names:
            a = np.asarray(params[name], float)
            w.text(name)
            w.u32(a.ndim)
            for s in a.shape:
                w.u32(s)
            w.array(a)


def load_params(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    r.magic(LM_MAGIC)
    version = r.u32()
    if version != LM_VERSION:
        raise IngestError(f"{path}: unsupported model checkpoint version {version}")
    meta = json.loads(r.text())
    params = {}
    for _ in range(r.u32()):
        name = r.text()
        shape = tuple(r.u32() for _ in range(r.u32()))
        params[name] = r.array(shape).copy()
    r.done()
    return params, meta
