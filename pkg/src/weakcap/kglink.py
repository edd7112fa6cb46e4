"""Rotation-based knowledge-graph embeddings with a gated noun-verb head.

Entities are atomic phrases (one noun or one verb lemma) embedded as complex
vectors; a relation is a vector of phases, i.e. a unit-modulus complex
rotation.  A noun-verb head is a per-coordinate blend of its noun and verb
embeddings, weighted by a sigmoid gate that also sees the tail.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import optim
from .binio import Reader, Writer
from .corpusio import Phrase, Triplet
from .errors import ArgumentError, DivergenceError, IngestError, ShapeError, TrainError

log = logging.getLogger(__name__)

MAGIC = b"WCKG"
VERSION = 1


def score_triplet(h: np.ndarray, theta: np.ndarray, t: np.ndarray) -> float:
    """Sum over coordinates of |h(k) e^{i theta(k)} - t(k)|; zero iff the rotated head hits the tail."""
    h, theta, t = np.asarray(h), np.asarray(theta), np.asarray(t)
    if not (h.shape == theta.shape == t.shape) or h.ndim != 1:
        raise ShapeError(f"dimension mismatch: h{h.shape} r{theta.shape} t{t.shape}")
    return float(np.abs(h * np.exp(1j * theta) - t).sum())


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def interleave(*vecs: np.ndarray) -> np.ndarray:
    """Real concatenation of complex vectors as (re, im) pairs per coordinate."""
    parts = []
    for v in vecs:
        pair = np.stack([v.real, v.imag], axis=-1)
        parts.append(pair.reshape(pair.shape[:-2] + (-1,)))
    return np.concatenate(parts, axis=-1)


def gate(h_o, h_a, t, W, b) -> np.ndarray:
    return _sigmoid(interleave(h_o, h_a, t) @ W + b)


def compose_head(h_o, h_a, t, W, b) -> np.ndarray:
    if h_o is None and h_a is None:
        raise ArgumentError("compose_head needs at least one of h_o, h_a")
    if h_a is None:
        return h_o
    if h_o is None:
        return h_a
    k = gate(h_o, h_a, t, W, b)
    return k * h_o + (1.0 - k) * h_a


@dataclass
class KgConfig:
    dim: int = 64
    gamma: float = 6.0
    negatives: int = 4
    steps: int = 2000
    lr: float = 0.5
    batch: int = 64
    optimizer: str = "sgd"
    seed: int = 0


@dataclass
class KgModel:
    entities: list[Phrase]
    relations: list[str]
    params: dict[str, np.ndarray]
    gamma: float
    triplets: list[Triplet] = field(default_factory=list)
    s_max: float | None = None

    def __post_init__(self):
        self.entity_index = {p: i for i, p in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @property
    def dim(self) -> int:
        return self.params["re"].shape[1]

    @property
    def W(self):
        return self.params["W"]

    @property
    def b(self):
        return self.params["b"]

    def entity(self, phrase: Phrase) -> np.ndarray | None:
        i = self.entity_index.get(phrase)
        if i is None:
            return None
        return self.params["re"][i] + 1j * self.params["im"][i]

    def phases(self, relation: str) -> np.ndarray:
        return self.params["phase"][self.relation_index[relation]]

    def _atomic(self, phrase: Phrase) -> np.ndarray:
        vec = self.entity(phrase)
        if vec is None:
            log.warning("unknown entity %s; using the zero embedding", phrase.key)
            vec = np.zeros(self.dim, dtype=complex)
        return vec

    def head_embedding(self, head: Phrase, t: np.ndarray) -> np.ndarray:
        if head.kind != "NounVerb":
            return self._atomic(head)
        return compose_head(self._atomic(Phrase("Noun", noun=head.noun)),
                            self._atomic(Phrase("Verb", verb=head.verb)), t, self.W, self.b)

    def tail_embedding(self, tail: Phrase) -> np.ndarray:
        if tail.kind == "NounVerb":
            raise ArgumentError(f"composite tail {tail.key} is not supported")
        return self._atomic(tail)

    def score(self, head: Phrase, relation: str, tail: Phrase) -> float:
        t = self.tail_embedding(tail)
        return score_triplet(self.head_embedding(head, t), self.phases(relation), t)

    def encode(self, triplets) -> np.ndarray:
        """Rows of (head1, head2, relation, tail) indices; head2 = -1 for atomic heads."""
        rows = []
        for tr in triplets:
            if tr.head.kind == "NounVerb":
                h1 = self.entity_index[Phrase("Noun", noun=tr.head.noun)]
                h2 = self.entity_index[Phrase("Verb", verb=tr.head.verb)]
            else:
                h1, h2 = self.entity_index[tr.head], -1
            if tr.tail.kind == "NounVerb":
                raise TrainError(f"composite tail {tr.tail.key} is not supported")
            rows.append((h1, h2, self.relation_index[tr.relation], self.entity_index[tr.tail]))
        return np.array(rows, dtype=np.int64).reshape(-1, 4)


def _atoms(phrase: Phrase) -> list[Phrase]:
    if phrase.kind == "NounVerb":
        return [Phrase("Noun", noun=phrase.noun), Phrase("Verb", verb=phrase.verb)]
    return [phrase]


def init_model(triplets, config: KgConfig, extra_entities=()) -> KgModel:
    entities = set(extra_entities)
    relations = set()
    for tr in triplets:
        entities.update(_atoms(tr.head))
        entities.update(_atoms(tr.tail))
        relations.add(tr.relation)
    entities = sorted(entities, key=lambda p: p.key)
    relations = sorted(relations)
    rng = np.random.default_rng(config.seed)
    E = config.dim
    params = {
        "re": rng.uniform(-0.5, 0.5, size=(len(entities), E)),
        "im": rng.uniform(-0.5, 0.5, size=(len(entities), E)),
        "phase": rng.uniform(0.0, 2 * np.pi, size=(len(relations), E)),
        "W": np.zeros((6 * E, E)),
        "b": np.zeros(E),
    }
    return KgModel(entities, relations, params, config.gamma, list(triplets))


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def row_scores(params, rows, return_cache=False):
    """Scores of encoded triplet rows (head1, head2, rel, tail)."""
    ent = params["re"] + 1j * params["im"]
    h1, h2, rel, tl = rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3]
    comp = h2 >= 0
    ho = ent[h1]
    t = ent[tl]
    r = np.exp(1j * params["phase"][rel])
    h = ho.copy()
    k = xg = ha = None
    if comp.any():
        ha = ent[h2[comp]]
        xg = interleave(ho[comp], ha, t[comp])
        k = _sigmoid(xg @ params["W"] + params["b"])
        h[comp] = k * ho[comp] + (1.0 - k) * ha
    d = h * r - t
    m = np.abs(d)
    s = m.sum(axis=1)
    if return_cache:
        return s, dict(ho=ho, ha=ha, h=h, t=t, r=r, d=d, m=m, comp=comp, k=k, xg=xg)
    return s


def row_grads(params, rows, dlds, cache) -> dict[str, np.ndarray]:
    """Backpropagate per-row dL/ds into all parameters."""
    E = params["re"].shape[1]
    d, m, r, h = cache["d"], cache["m"], cache["r"], cache["h"]
    u = np.where(m > 0, d / np.where(m > 0, m, 1.0), 0.0)
    w = dlds[:, None]
    g_h = u * np.conj(r) * w
    g_t = -u * w
    g_phase = np.real(np.conj(u) * 1j * h * r) * w

    comp = cache["comp"]
    g_ho = g_h.copy()
    grads = {"W": np.zeros_like(params["W"]), "b": np.zeros_like(params["b"])}
    if comp.any():
        k, xg, ho_c, ha = cache["k"], cache["xg"], cache["ho"][comp], cache["ha"]
        gh_c = g_h[comp]
        diff = ho_c - ha
        g_k = gh_c.real * diff.real + gh_c.imag * diff.imag
        g_z = g_k * k * (1.0 - k)
        grads["W"] = xg.T @ g_z
        grads["b"] = g_z.sum(axis=0)
        gx = g_z @ params["W"].T
        gx_c = gx[:, 0::2] + 1j * gx[:, 1::2]
        g_ho[comp] = k * gh_c + gx_c[:, :E]
        g_ha = (1.0 - k) * gh_c + gx_c[:, E:2 * E]
        g_t[comp] += gx_c[:, 2 * E:]

    g_ent = np.zeros(params["re"].shape, dtype=complex)
    np.add.at(g_ent, rows[:, 0], g_ho)
    np.add.at(g_ent, rows[:, 3], g_t)
    if comp.any():
        np.add.at(g_ent, rows[comp, 1], g_ha)
    grads["re"] = g_ent.real
    grads["im"] = g_ent.imag
    g_p = np.zeros_like(params["phase"])
    np.add.at(g_p, rows[:, 2], g_phase)
    grads["phase"] = g_p
    return grads


def ns_loss(params, pos, neg, gamma, grad=True):
    """Negative-sampling loss, averaged over positives.

    ``pos`` has shape (B, 4) and ``neg`` shape (B, n, 4).  Per positive the
    loss is -log s(gamma - d_pos) - (1/n) sum_j log s(d_neg_j - gamma).
    """
    B, n = neg.shape[0], neg.shape[1]
    rows = np.concatenate([pos, neg.reshape(-1, 4)])
    s, cache = row_scores(params, rows, return_cache=True)
    sp, sn = s[:B], s[B:].reshape(B, n)
    loss = (-_log_sigmoid(gamma - sp).sum() - _log_sigmoid(sn - gamma).sum() / n) / B
    if not grad:
        return loss, None
    dlds = np.concatenate([_sigmoid(sp - gamma) / B, (-_sigmoid(gamma - sn) / (n * B)).ravel()])
    return loss, row_grads(params, rows, dlds, cache)


def corrupt(pos, n_entities, n, rng) -> np.ndarray:
    """n corruptions per positive: replace the head (as an atomic entity) or the tail, each with prob 1/2."""
    B = len(pos)
    neg = np.repeat(pos[:, None, :], n, axis=1)
    which = rng.random((B, n)) < 0.5
    ents = rng.integers(0, n_entities, size=(B, n))
    neg[..., 0] = np.where(which, ents, neg[..., 0])
    neg[..., 1] = np.where(which, -1, neg[..., 1])
    neg[..., 3] = np.where(which, neg[..., 3], ents)
    return neg


def train_kg(triplets, config: KgConfig | None = None, extra_entities=()) -> KgModel:
    config = config or KgConfig()
    triplets = list(dict.fromkeys(triplets))
    if not triplets:
        raise TrainError("no triplets to train on")
    model = init_model(triplets, config, extra_entities)
    rows = model.encode(triplets)
    opt = optim.make(config.optimizer, config.lr)
    params = model.params
    for step in range(config.steps):
        rng = np.random.default_rng([config.seed, step + 1])
        size = min(config.batch, len(rows))
        pos = rows[rng.choice(len(rows), size=size, replace=False)]
        neg = corrupt(pos, len(model.entities), config.negatives, rng)
        loss, grads = ns_loss(params, pos, neg, config.gamma)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite KG loss at step {step}", step=step)
        opt.step(params, grads)
        np.mod(params["phase"], 2 * np.pi, out=params["phase"])
        if step % 500 == 0:
            log.debug("kg step %d loss %.4f", step, loss)
    model.s_max = calibrate_s_max(model)
    return model


def calibrate_s_max(model: KgModel, q: float = 25.0) -> float:
    s = row_scores(model.params, model.encode(model.triplets))
    return float(np.percentile(s, q))


# ---------------------------------------------------------------- prediction


def predict_links(model: KgModel, in_tree, candidates, s_max: float = math.inf):
    """All (head, relation, tail, score) links with score <= s_max, best first.

    Sorted by score, then relation label, then tail and head keys, so the
    order is total.
    """
    out = []
    for v in candidates:
        t = model.tail_embedding(v)
        for u in in_tree:
            for rel in model.relations:
                h = model.head_embedding(u, t)
                s = score_triplet(h, model.phases(rel), t)
                if s <= s_max:
                    out.append((u, rel, v, s))
    out.sort(key=lambda x: (x[3], x[1], x[2].key, x[0].key))
    return out


def _rank(scores, true_idx, mask):
    target = scores[true_idx]
    others = scores[mask]
    return 1 + int((others < target).sum())


def ranking_metrics(model: KgModel, test, known, ks=(1, 3, 10)) -> dict:
    """Filtered MRR and Hits@k, averaged over head and tail prediction."""
    known_rows = {tuple(r) for r in model.encode(known)}
    test_rows = model.encode(test)
    n_ent = len(model.entities)
    all_ent = np.arange(n_ent)
    ranks = []
    for h1, h2, rel, tl in test_rows:
        # tail prediction
        cand = np.empty((n_ent, 4), dtype=np.int64)
        cand[:] = (h1, h2, rel, tl)
        cand[:, 3] = all_ent
        s = row_scores(model.params, cand)
        mask = np.array([(i != tl) and (h1, h2, rel, i) not in known_rows for i in all_ent])
        ranks.append(_rank(s, tl, mask))
        # head prediction over atomic heads, plus the true (possibly composite) head
        cand = np.empty((n_ent + 1, 4), dtype=np.int64)
        cand[:n_ent] = (0, -1, rel, tl)
        cand[:n_ent, 0] = all_ent
        cand[n_ent] = (h1, h2, rel, tl)
        s = row_scores(model.params, cand)
        mask = np.array([(i, -1, rel, tl) not in known_rows and not (h2 < 0 and i == h1)
                         for i in all_ent] + [False])
        ranks.append(_rank(s, n_ent, mask))
    ranks = np.array(ranks, dtype=float)
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in ks:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out


# ---------------------------------------------------------------- checkpoint


def _triplet_key(tr: Triplet) -> str:
    return f"{tr.head.key}\t{tr.relation}\t{tr.tail.key}"


def save_kg(model: KgModel, path):
    with open(path, "wb") as f:
        w = Writer(f)
        w.raw(MAGIC)
        w.u32(VERSION)
        w.u32(model.dim)
        w.names([p.key for p in model.entities])
        w.names(model.relations)
        w.names([_triplet_key(t) for t in model.triplets])
        for name in ("re", "im", "phase", "W", "b"):
            w.array(model.params[name])
        w.f64(model.gamma)
        w.f64(math.nan if model.s_max is None else model.s_max)


def load_kg(path) -> KgModel:
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    r.magic(MAGIC)
    version = r.u32()
    if version != VERSION:
        raise IngestError(f"{path}: unsupported KG checkpoint version {version}")
    E = r.u32()
    entities = [Phrase.from_key(k) for k in r.names()]
    relations = r.names()
    triplets = []
    for line in r.names():
        h, rel, t = line.split("\t")
        triplets.append(Triplet(Phrase.from_key(h), rel, Phrase.from_key(t)))
    n, m = len(entities), len(relations)
    params = {
        "re": r.array((n, E)),
        "im": r.array((n, E)),
        "phase": r.array((m, E)),
        "W": r.array((6 * E, E)),
        "b": r.array((E,)),
    }
    gamma = r.f64()
    s_max = r.f64()
    r.done()
    return KgModel(entities, relations, params, gamma, triplets, None if math.isnan(s_max) else s_max)
