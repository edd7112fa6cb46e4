"""Concept grounding: attention of feature maps by concept embeddings, concept classifiers.

Each stream (``"o"`` objects, ``"a"`` actions) owns a transformation ``T``
(d x h) mapping word embeddings into the visual space and a softmax
classifier (``W``: N x d, ``b``: N) over that stream's concepts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer
from .corpusio import ConceptVocabulary, Phrase, noun, verb
from .errors import IngestError, ShapeError

STREAMS = ("o", "a")
EPS = 1e-12
FM_MAGIC = b"WCFM"
GF_MAGIC = b"WCGF"
FM_VERSION = 1
STREAM_TAGS = {"o": 0, "a": 1, "s": 2}


@dataclass
class Thresholds:
    theta_c: float = 0.99
    delta: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.theta_c <= 1.0:
            raise ValueError(f"theta_c must lie in (0, 1], got {self.theta_c}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass
class VideoRecord:
    video_id: str
    fmap_o: np.ndarray
    fmap_a: np.ndarray
    x: np.ndarray
    annotation: Phrase | None = None
    ghat_o: np.ndarray | None = None
    ghat_a: np.ndarray | None = None
    alphas: dict = field(default_factory=dict)

    def fmap(self, stream: str) -> np.ndarray:
        return self.fmap_o if stream == "o" else self.fmap_a

    def ghat(self, stream: str) -> np.ndarray:
        return self.ghat_o if stream == "o" else self.ghat_a

    def active(self, vocab: ConceptVocabulary) -> list[Phrase]:
        out = [noun(vocab.objects[i]) for i in np.flatnonzero(self.ghat_o)]
        out += [verb(vocab.actions[i]) for i in np.flatnonzero(self.ghat_a)]
        return out


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def init_params(d: int, h: int, n_objects: int, n_actions: int, rng) -> dict[str, np.ndarray]:
    params = {}
    for k, n in (("o", n_objects), ("a", n_actions)):
        params[f"T_{k}"] = rng.normal(0.0, 1.0 / np.sqrt(d * h), size=(d, h))
        params[f"W_{k}"] = rng.normal(0.0, 0.01, size=(n, d))
        params[f"b_{k}"] = np.zeros(n)
    return params


def attend(fmap: np.ndarray, e: np.ndarray, T: np.ndarray):
    """Attention of the q feature-map rows by one embedding: (attended d-vector, alpha over rows)."""
    fmap, e, T = np.asarray(fmap, float), np.asarray(e, float), np.asarray(T, float)
    if fmap.ndim != 2 or T.shape != (fmap.shape[1], e.shape[0]):
        raise ShapeError(f"fmap{fmap.shape}, T{T.shape}, e{e.shape} do not agree")
    alpha = softmax(fmap @ (T @ e))
    return alpha @ fmap, alpha


def concept_probabilities(attended: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return softmax(W @ attended + b)


def _embedding_matrix(vocab: ConceptVocabulary, stream: str) -> np.ndarray:
    return np.array([vocab.embedding(w) for w in vocab.concepts(stream)]).reshape(-1, vocab.dim)


def attend_all(fmap, E, T):
    """Attention for every concept at once: alpha (q x N), attended (N x d)."""
    alpha = softmax(fmap @ T @ E.T, axis=0)
    return alpha, alpha.T @ fmap


def concept_scores(video: VideoRecord, vocab: ConceptVocabulary, params) -> dict:
    """Per stream: (own-class probabilities p_i[i], alpha matrix q x N)."""
    out = {}
    for k in STREAMS:
        E = _embedding_matrix(vocab, k)
        if len(E) == 0:
            out[k] = (np.zeros(0), np.zeros((video.fmap(k).shape[0], 0)))
            continue
        alpha, att = attend_all(video.fmap(k), E, params[f"T_{k}"])
        P = softmax(att @ params[f"W_{k}"].T + params[f"b_{k}"], axis=1)
        out[k] = (np.diag(P).copy(), alpha)
    return out


def generate_concepts(video: VideoRecord, vocab: ConceptVocabulary, params, theta_c: float,
                      scores=None):
    """Indicator vectors g_o, g_a: concept i is on when its own-class probability reaches theta_c.

    Attention coefficients of every concept switched on are cached on the
    record under ``(stream, index)``.
    """
    scores = scores or concept_scores(video, vocab, params)
    g = {}
    for k in STREAMS:
        diag, alpha = scores[k]
        g[k] = (diag >= theta_c).astype(np.int8)
        for i in np.flatnonzero(g[k]):
            video.alphas[(k, int(i))] = alpha[:, i].copy()
    return g["o"], g["a"]


def cache_alphas(video: VideoRecord, vocab: ConceptVocabulary, params, scores=None):
    """Cache attention coefficients for all concepts active in the current indicators."""
    scores = scores or concept_scores(video, vocab, params)
    video.alphas = {}
    for k in STREAMS:
        alpha = scores[k][1]
        for i in np.flatnonzero(video.ghat(k)):
            video.alphas[(k, int(i))] = alpha[:, i].copy()


def spatial_distance(alpha_o, alpha_a) -> float:
    """Total-variation distance between two attention distributions."""
    alpha_o, alpha_a = np.asarray(alpha_o, float), np.asarray(alpha_a, float)
    if alpha_o.shape != alpha_a.shape:
        raise ShapeError(f"attention lengths differ: {alpha_o.shape} vs {alpha_a.shape}")
    return float(0.5 * np.abs(alpha_o - alpha_a).sum())


def concept_loss(videos, vocab: ConceptVocabulary, params, grad=True):
    """Normalised cross-entropy of the active concepts' own-class probabilities.

    Returns ``(loss, grads, n_clamped)``.  Probabilities below ``EPS`` are
    clamped before the log and contribute no gradient.
    """
    n_v = len(videos)
    grads = {name: np.zeros_like(p) for name, p in params.items() if name[:2] in ("T_", "W_", "b_")}
    if n_v == 0:
        return 0.0, grads, 0
    c = 1.0 / (n_v * (vocab.n_objects + vocab.n_actions))
    loss = 0.0
    clamped = 0
    embs = {k: _embedding_matrix(vocab, k) for k in STREAMS}
    for video in sorted(videos, key=lambda v: v.video_id):
        for k in STREAMS:
            active = np.flatnonzero(video.ghat(k))
            if len(active) == 0:
                continue
            f = video.fmap(k)
            T, W, b = params[f"T_{k}"], params[f"W_{k}"], params[f"b_{k}"]
            Ea = embs[k][active]
            alpha, att = attend_all(f, Ea, T)
            P = softmax(att @ W.T + b, axis=1)
            p_own = P[np.arange(len(active)), active]
            ok = p_own >= EPS
            clamped += int((~ok).sum())
            loss -= c * np.log(np.maximum(p_own, EPS)).sum()
            if not grad:
                continue
            dZ = c * P
            dZ[np.arange(len(active)), active] -= c
            dZ[~ok] = 0.0
            grads[f"W_{k}"] += dZ.T @ att
            grads[f"b_{k}"] += dZ.sum(axis=0)
            datt = dZ @ W
            dalpha = f @ datt.T
            ds = alpha * (dalpha - (alpha * dalpha).sum(axis=0, keepdims=True))
            grads[f"T_{k}"] += f.T @ ds @ Ea
    return float(loss), grads, clamped


# ---------------------------------------------------------------- file formats


def write_feature_map(path, fmap: np.ndarray, stream: str = "s"):
    fmap = np.asarray(fmap)
    with open(path, "wb") as f:
        w = Writer(f)
        w.raw(FM_MAGIC)
        w.u32(FM_VERSION)
        w.u8(STREAM_TAGS[stream])
        w.u32(fmap.shape[0])
        w.u32(fmap.shape[1])
        w.array(fmap, "<f4")


def read_feature_map(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    r.magic(FM_MAGIC)
    version = r.u32()
    if version != FM_VERSION:
        raise IngestError(f"{path}: unsupported feature-map version {version}")
    tag = r.u8()
    stream = {v: k for k, v in STREAM_TAGS.items()}.get(tag)
    if stream is None:
        raise IngestError(f"{path}: bad stream tag {tag}")
    q, d = r.u32(), r.u32()
    if q < 1:
        raise IngestError(f"{path}: feature map has no regions")
    fmap = r.array((q, d), "<f4")
    r.done()
    if not np.isfinite(fmap).all():
        raise IngestError(f"{path}: non-finite feature values")
    return stream, fmap


def write_global_feature(path, x: np.ndarray):
    x = np.asarray(x).ravel()
    with open(path, "wb") as f:
        w = Writer(f)
        w.raw(GF_MAGIC)
        w.u32(len(x))
        w.array(x, "<f4")


def read_global_feature(path) -> np.ndarray:
    with open(path, "rb") as f:
        r = Reader(f.read(), str(path))
    r.magic(GF_MAGIC)
    x = r.array((r.u32(),), "<f4")
    r.done()
    return x


def read_annotations(path) -> list[tuple[str, Phrase]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in ("o", "a"):
                raise IngestError(f"{path}:{lineno}: expected 'video_id<TAB>lemma<TAB>o|a'")
            lemma = parts[1].strip().lower()
            out.append((parts[0], noun(lemma) if parts[2] == "o" else verb(lemma)))
    return out
