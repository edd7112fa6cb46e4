"""Iterative refinement: alternate pseudo-sentence generation and model fine-tuning."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import captioner, grounding, metrics, optim
from .corpusio import OBJ, ConceptVocabulary, Phrase
from .errors import ArgumentError, DivergenceError
from .grounding import VideoRecord
from .kglink import KgModel
from .treespan import DependencyTree, SpanConfig, linearize, pseudo_record, span_tree, span_video

log = logging.getLogger(__name__)


@dataclass
class RefineConfig:
    lam: float = 0.1
    reg: float = 1.0
    lr: float = 1e-4
    optimizer: str = "rmsprop"
    epochs: int = 3
    batch: int = 16
    theta_c: float = 0.99
    delta: float = 0.1
    beam: int = 5
    max_len: int = 20
    max_iterations: int = 20
    min_iterations: int = 1
    patience: int = 1
    s_max: float | None = None
    max_nodes: int = 6
    hidden: int = 32
    word_dim: int = 32
    att_dim: int = 32
    seed: int = 0


@dataclass(frozen=True)
class TrainingPair:
    video_id: str
    indicators: tuple
    tokens: tuple
    origin: str
    trees: tuple = field(compare=False, default=())

    @property
    def key(self):
        return (self.video_id, self.tokens)


@dataclass
class RefineData:
    vocab: ConceptVocabulary
    train: list[VideoRecord]
    val: list[VideoRecord] = field(default_factory=list)
    val_refs: dict | None = None


@dataclass
class RefineState:
    params: dict
    pool: dict = field(default_factory=dict)
    iteration: int = 0
    flag: int = 1
    captions: dict = field(default_factory=dict)
    caption_trees: dict = field(default_factory=dict)
    known: dict = field(default_factory=dict)
    initial: dict = field(default_factory=dict)
    best_cider: float = -np.inf
    history: list = field(default_factory=list)
    last_trees: list = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.pool)

    def unique_pseudo(self) -> int:
        return len({p.tokens for p in self.pool.values() if p.origin == "pseudo"})


def update_indicators(g, index_set) -> np.ndarray:
    """Force the indicators listed in ``index_set`` on, keep the rest as generated."""
    g = np.asarray(g)
    out = g.copy()
    for i in index_set:
        if not 0 <= i < len(g):
            raise ArgumentError(f"index {i} outside indicator vector of length {len(g)}")
        out[i] = 1
    return out


def regularizer(params, names=None):
    """Sum of the L2 norms of the given tensors, with its gradient."""
    total = 0.0
    grads = {}
    for name in names or sorted(params):
        p = params[name]
        n = float(np.sqrt((p * p).sum()))
        total += n
        grads[name] = p / n if n > 0 else np.zeros_like(p)
    return total, grads


def total_loss(l_m: float, l_c: float, reg: float, lam: float) -> float:
    if lam < 0:
        raise ArgumentError("lambda must be non-negative")
    return lam * l_m + l_c + reg


class Refiner:
    """Holds the fixed inputs of a run (vocabulary, KG, videos) and the model layout."""

    def __init__(self, data: RefineData, kg: KgModel, cfg: RefineConfig):
        self.data = data
        self.vocab = data.vocab
        self.kg = kg
        self.cfg = cfg
        words = set(self.vocab.objects) | set(self.vocab.actions) | (set(self.vocab.relations) - {OBJ})
        self.dictionary = captioner.Dictionary(words)
        self.rel_index = {r: i for i, r in enumerate(self.vocab.relations)}
        s_max = cfg.s_max if cfg.s_max is not None else kg.s_max
        if s_max is None:
            raise ArgumentError("no link-score ceiling: set s_max or calibrate the KG")
        self.span_cfg = SpanConfig(s_max=s_max, max_nodes=cfg.max_nodes, delta=cfg.delta)
        self.videos = {v.video_id: v for v in data.train}

    # ------------------------------------------------------------ setup

    def init_state(self) -> RefineState:
        cfg, vocab = self.cfg, self.vocab
        rng = np.random.default_rng(cfg.seed)
        sample = (self.data.train or self.data.val)[0]
        d, h = sample.fmap_o.shape[1], vocab.dim
        params = grounding.init_params(d, h, vocab.n_objects, vocab.n_actions, rng)
        rel_init = np.array([vocab.embeddings[r] if r in vocab.embeddings else rng.normal(0, 0.1, h)
                             for r in vocab.relations]).reshape(-1, h)
        params.update(captioner.init_params(h, len(vocab.relations), len(sample.x), len(self.dictionary),
                                            cfg.hidden, cfg.word_dim, cfg.att_dim, rng, rel_init))
        state = RefineState(params=params)
        for v in sorted(self.data.train, key=lambda v: v.video_id):
            if v.annotation is None:
                raise ArgumentError(f"training video {v.video_id} has no weak annotation")
            v.ghat_o = np.zeros(vocab.n_objects, dtype=np.int8)
            v.ghat_a = np.zeros(vocab.n_actions, dtype=np.int8)
            stream, i = vocab.phrase_index(v.annotation)
            state.initial[v.video_id] = {(stream, i)}
            state.known[v.video_id] = {(stream, i)}
            v.ghat(stream)[i] = 1
        return state

    def _node_inputs(self, tree: DependencyTree):
        emb = np.array([self.vocab.phrase_embedding(p) for p in tree.nodes])
        return emb, list(tree.edges)

    def features(self, params, trees):
        return captioner.tree_features(params, [self._node_inputs(t) for t in trees], self.rel_index)

    def _indicators(self, v: VideoRecord) -> tuple:
        return tuple(int(x) for x in np.concatenate([v.ghat_o, v.ghat_a]))

    # ------------------------------------------------------------ generation

    def seed_pairs(self):
        pairs = []
        for vid in sorted(self.videos):
            v = self.videos[vid]
            tree = DependencyTree([v.annotation], [], vid, 0)
            pairs.append(TrainingPair(vid, self._indicators(v), tuple(linearize(tree)), "pseudo", (tree,)))
        return pairs

    def generate_pseudo(self, state: RefineState):
        pairs, trees_by_video = [], {}
        for vid in sorted(self.videos):
            v = self.videos[vid]
            grounding.cache_alphas(v, self.vocab, state.params)
            prior = [state.captions[vid]] if vid in state.captions else []
            trees = span_video(v, self.vocab, self.kg, self.span_cfg, prior, state.iteration)
            trees_by_video[vid] = trees
            for tree in trees:
                pairs.append(TrainingPair(vid, self._indicators(v), tuple(linearize(tree)), "pseudo", (tree,)))
        return pairs, trees_by_video

    # ------------------------------------------------------------ training

    def batch_loss(self, params, pairs, grad=True):
        cfg = self.cfg
        vids = sorted({p.video_id for p in pairs})
        l_m, g_m, _ = grounding.concept_loss([self.videos[v] for v in vids], self.vocab, params, grad=grad)
        cap_pairs = []
        for p in pairs:
            ids, _ = self.dictionary.encode(p.tokens)
            cap_pairs.append((self.videos[p.video_id].x, [self._node_inputs(t) for t in p.trees], ids))
        l_c, g_c = captioner.caption_loss(params, cap_pairs, self.rel_index,
                                          self.dictionary.bos, self.dictionary.eos, grad=grad)
        r, g_r = regularizer(params)
        loss = total_loss(l_m, l_c, cfg.reg * r, cfg.lam)
        if not grad:
            return loss, None
        grads = {}
        for name in params:
            g = cfg.reg * g_r[name]
            if name in g_m:
                g = g + cfg.lam * g_m[name]
            if name in g_c:
                g = g + g_c[name]
            grads[name] = g
        return loss, grads

    def fine_tune(self, state: RefineState) -> float:
        cfg = self.cfg
        opt = optim.make(cfg.optimizer, cfg.lr)
        pairs = [state.pool[k] for k in sorted(state.pool)]
        losses = []
        for epoch in range(cfg.epochs):
            rng = np.random.default_rng([cfg.seed, state.iteration, epoch])
            order = rng.permutation(len(pairs))
            for start in range(0, len(order), cfg.batch):
                batch = [pairs[i] for i in order[start:start + cfg.batch]]
                loss, grads = self.batch_loss(state.params, batch)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss in iteration {state.iteration}, epoch {epoch}",
                                          iteration=state.iteration, epoch=epoch)
                opt.step(state.params, grads)
                losses.append(loss)
        return float(np.mean(losses)) if losses else 0.0

    # ------------------------------------------------------------ captions and concepts

    def decode(self, params, video: VideoRecord, trees):
        feats = self.features(params, trees)
        dcfg = captioner.DecodeConfig(beam=self.cfg.beam, max_len=self.cfg.max_len, seed=self.cfg.seed)
        ids, logp = captioner.beam_decode(params, video.x, feats, self.dictionary.bos, self.dictionary.eos, dcfg)
        return self.dictionary.decode(ids), logp

    def caption_concepts(self, tokens) -> set:
        out = set()
        for w in tokens:
            i = self.vocab.object_index(w)
            if i is not None:
                out.add(("o", i))
            j = self.vocab.action_index(w)
            if j is not None:
                out.add(("a", j))
        return out

    def refresh_indicators(self, state: RefineState):
        for vid in sorted(self.videos):
            v = self.videos[vid]
            g_o, g_a = grounding.generate_concepts(v, self.vocab, state.params, self.cfg.theta_c)
            known = state.known[vid]
            known |= self.caption_concepts(state.captions.get(vid, ()))
            v.ghat_o = update_indicators(g_o, [i for k, i in known if k == "o"])
            v.ghat_a = update_indicators(g_a, [i for k, i in known if k == "a"])

    def eval_trees(self, params, video: VideoRecord):
        """Trees for a video without annotation: attention-generated concepts only.

        When no spatially consistent pair exists, the root falls back to the
        most probable action joined with the most probable object attending
        within ``delta`` of it (or the closest object if none does).
        """
        scores = grounding.concept_scores(video, self.vocab, params)
        g_o, g_a = grounding.generate_concepts(video, self.vocab, params, self.cfg.theta_c, scores)
        video.ghat_o, video.ghat_a = g_o, g_a
        grounding.cache_alphas(video, self.vocab, params, scores)
        video.annotation = self.fallback_root(scores)
        return span_video(video, self.vocab, self.kg, self.span_cfg, (), 0)

    def fallback_root(self, scores) -> Phrase:
        (p_o, a_o), (p_a, a_a) = scores["o"], scores["a"]
        if len(p_a) == 0 or len(p_o) == 0:
            k = "o" if len(p_o) else "a"
            return self.vocab.concept_phrase(k, int(np.argmax(scores[k][0])))
        j = int(np.argmax(p_a))
        dist = [grounding.spatial_distance(a_o[:, i], a_a[:, j]) for i in range(len(p_o))]
        i = min(range(len(p_o)), key=lambda i: (dist[i] > self.cfg.delta, -p_o[i], dist[i], i))
        return Phrase("NounVerb", self.vocab.objects[i], self.vocab.actions[j])

    def validate(self, params):
        """Captions for the validation videos and their CIDEr against the references."""
        captions, refs = {}, {}
        for v in sorted(self.data.val, key=lambda v: v.video_id):
            trees = self.eval_trees(params, v)
            captions[v.video_id] = self.decode(params, v, trees)
            if self.data.val_refs is not None:
                refs[v.video_id] = self.data.val_refs[v.video_id]
            else:
                refs[v.video_id] = [linearize(t) for t in trees]
        if not captions:
            return float("nan"), captions
        cands = {vid: toks for vid, (toks, _) in captions.items()}
        return metrics.cider(cands, refs), captions

    # ------------------------------------------------------------ one iteration

    def run_iteration(self, state: RefineState) -> dict:
        if not self.videos:
            state.flag = 0
            return {"new_pseudo": 0, "loss": 0.0}
        state.iteration += 1
        if state.flag == 1:
            new = self.seed_pairs()
            trees_by_video = {}
        else:
            new, trees_by_video = self.generate_pseudo(state)
            for vid in sorted(state.captions):
                v = self.videos[vid]
                new.append(TrainingPair(vid, self._indicators(v), tuple(state.captions[vid]), "caption",
                                        tuple(state.caption_trees[vid])))
        added_pseudo = 0
        seen_pseudo = {p.tokens for p in state.pool.values() if p.origin == "pseudo"}
        for p in new:
            if p.key in state.pool or not p.tokens:
                continue
            state.pool[p.key] = p
            if p.origin == "pseudo" and p.tokens not in seen_pseudo:
                seen_pseudo.add(p.tokens)
                added_pseudo += 1
        state.last_trees = [t for vid in sorted(trees_by_video) for t in trees_by_video[vid]]
        loss = self.fine_tune(state)
        if state.flag != 1:
            for vid in sorted(self.videos):
                trees = trees_by_video[vid]
                state.captions[vid] = self.decode(state.params, self.videos[vid], trees)[0]
                state.caption_trees[vid] = trees
        self.refresh_indicators(state)
        state.flag = 0
        return {"new_pseudo": added_pseudo, "loss": loss}


@dataclass
class RunResult:
    params: dict
    history: list
    best_iteration: int
    state: RefineState
    val_captions: dict


def run(data: RefineData, kg: KgModel, cfg: RefineConfig, run_dir=None) -> RunResult:
    """Refine until no new pseudo sentences appear, validation CIDEr stalls, or the iteration cap."""
    if not data.train:
        raise ArgumentError("no training videos")
    if not data.val:
        raise ArgumentError("no validation videos")
    refiner = Refiner(data, kg, cfg)
    state = refiner.init_state()
    writer = RunWriter(run_dir, refiner) if run_dir is not None else None
    best = None
    stall = 0
    while state.iteration < cfg.max_iterations:
        info = refiner.run_iteration(state)
        score, val_caps = refiner.validate(state.params)
        entry = {
            "iter": state.iteration,
            "cider": score,
            "new_pseudo": info["new_pseudo"],
            "unique_pseudo": state.unique_pseudo(),
            "pool_size": state.n_pairs,
            "loss": info["loss"],
        }
        state.history.append(entry)
        log.info("iteration %d: cider %.4f, new pseudo %d, pool %d, loss %.4f", state.iteration, score,
                 info["new_pseudo"], state.n_pairs, info["loss"])
        improved = best is None or score > state.best_cider
        if improved:
            state.best_cider = score
            best = (state.iteration, copy.deepcopy(state.params), val_caps)
            stall = 0
        else:
            stall += 1
        if writer:
            writer.iteration(state, val_caps)
        if state.iteration < cfg.min_iterations:
            continue
        if info["new_pseudo"] == 0 and state.iteration > 1:
            log.info("stopping: no new pseudo sentences")
            break
        if stall > cfg.patience:
            log.info("stopping: validation CIDEr did not improve for %d iterations", stall)
            break
    result = RunResult(best[1], state.history, best[0], state, best[2])
    if writer:
        writer.finish(result)
    return result


# ---------------------------------------------------------------- run directory


def checkpoint_meta(refiner: Refiner) -> dict:
    cfg = refiner.cfg
    return {
        "dictionary": refiner.dictionary.words,
        "relations": refiner.vocab.relations,
        "objects": refiner.vocab.objects,
        "actions": refiner.vocab.actions,
        "theta_c": cfg.theta_c,
        "delta": cfg.delta,
        "beam": cfg.beam,
        "max_len": cfg.max_len,
    }


def _dump_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def caption_rows(captions: dict, iteration: int) -> list[dict]:
    return [{"video_id": vid, "iteration": iteration, "caption": " ".join(toks), "logprob": logp}
            for vid, (toks, logp) in sorted(captions.items())]


class RunWriter:
    def __init__(self, run_dir, refiner: Refiner):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.refiner = refiner
        self.history = self.dir / "history.jsonl"
        self.history.write_text("")

    def iteration(self, state: RefineState, val_caps):
        it_dir = self.dir / f"iter_{state.iteration:03d}"
        it_dir.mkdir(exist_ok=True)
        captioner.save_params(it_dir / "model.wclm", state.params, checkpoint_meta(self.refiner))
        _dump_jsonl(it_dir / "pseudo.jsonl", [pseudo_record(t) for t in state.last_trees])
        train_caps = [{"video_id": vid, "iteration": state.iteration, "caption": " ".join(toks)}
                      for vid, toks in sorted(state.captions.items())]
        _dump_jsonl(it_dir / "train_captions.jsonl", train_caps)
        _dump_jsonl(it_dir / "captions.jsonl", caption_rows(val_caps, state.iteration))
        with open(self.history, "a", encoding="utf-8") as f:
            f.write(json.dumps(state.history[-1], sort_keys=True) + "\n")

    def finish(self, result: RunResult):
        manifest = {
            "best_iteration": result.best_iteration,
            "iterations": len(result.history),
            "best_checkpoint": f"iter_{result.best_iteration:03d}/model.wclm",
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        _dump_jsonl(self.dir / "captions.jsonl", caption_rows(result.val_captions, result.best_iteration))
