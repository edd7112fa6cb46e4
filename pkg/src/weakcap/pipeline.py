"""Stages of a run, each reading its inputs from a :class:`RunConfig`."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import captioner, kglink, refine
from .config import RunConfig
from .corpusio import (ConceptVocabulary, ParsedSentence, extract_triplets, build_vocabulary, load_embeddings,
                       read_conllu, read_hypernyms)
from .errors import IngestError, VocabError
from .grounding import VideoRecord, read_annotations, read_feature_map, read_global_feature
from .kglink import KgConfig, KgModel

log = logging.getLogger(__name__)


@dataclass
class Ingested:
    sentences: list[ParsedSentence]
    skipped: list
    vocab: ConceptVocabulary
    triplets: list
    missing_embeddings: list


def ingest(cfg: RunConfig) -> Ingested:
    skipped = []
    sentences = read_conllu(cfg.corpus, skipped)
    hypernyms = read_hypernyms(cfg.hypernyms) if cfg.hypernyms else []
    vocab = build_vocabulary(sentences, hypernyms)
    table = load_embeddings(cfg.embeddings, vocab, extra_words=vocab.relations)
    vocab.embeddings = table.vectors
    concepts = set(vocab.objects) | set(vocab.actions)
    triplets = []
    for s in sentences:
        for t in extract_triplets(s):
            # links to pruned hypernyms would pull in concepts the grounding model never sees
            if set(t.head.lemmas) <= concepts and set(t.tail.lemmas) <= concepts:
                triplets.append(t)
    triplets = list(dict.fromkeys(triplets))
    log.info("ingest: %d sentences (%d skipped), %d triplets", len(sentences), len(skipped), len(triplets))
    return Ingested(sentences, skipped, vocab, triplets, table.missing)


def write_ingest(out: Path, data: Ingested):
    out.mkdir(parents=True, exist_ok=True)
    vocab_json = data.vocab.to_json()
    (out / "vocab.json").write_text(json.dumps(vocab_json, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "triplets.tsv", "w", encoding="utf-8") as f:
        for t in data.triplets:
            f.write(f"{t.head.key}\t{t.relation}\t{t.tail.key}\n")
    report = {
        "sentences": len(data.sentences),
        "skipped": [{"source_id": sid, "reason": why} for sid, why in data.skipped],
        "triplets": len(data.triplets),
        "missing_embeddings": data.missing_embeddings,
    }
    (out / "ingest_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def kg_config(cfg: RunConfig, steps=None) -> KgConfig:
    return KgConfig(dim=cfg.kg_dim, gamma=cfg.gamma, negatives=cfg.negatives,
                    steps=cfg.kg_steps if steps is None else steps, lr=cfg.kg_lr, batch=cfg.kg_batch,
                    seed=cfg.seed)


def build_kg(cfg: RunConfig, data: Ingested, steps=None) -> KgModel:
    concepts = [p for p in _concept_phrases(data.vocab)]
    model = kglink.train_kg(data.triplets, kg_config(cfg, steps), extra_entities=concepts)
    model.s_max = kglink.calibrate_s_max(model, cfg.s_max_percentile)
    return model


def _concept_phrases(vocab):
    return [vocab.concept_phrase("o", i) for i in range(vocab.n_objects)] + \
           [vocab.concept_phrase("a", i) for i in range(vocab.n_actions)]


def read_id_list(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def load_video(cfg: RunConfig, vid: str) -> VideoRecord:
    base = Path(cfg.features)
    try:
        if cfg.shared_features:
            _, fmap = read_feature_map(base / f"{vid}.wcfm")
            fmap_o = fmap_a = fmap
        else:
            _, fmap_o = read_feature_map(base / f"{vid}.o.wcfm")
            _, fmap_a = read_feature_map(base / f"{vid}.a.wcfm")
        x = read_global_feature(base / f"{vid}.wcgf")
    except FileNotFoundError as exc:
        raise IngestError(f"video {vid}: missing feature file {exc.filename}") from exc
    if fmap_o.shape[1] != fmap_a.shape[1]:
        raise IngestError(f"video {vid}: object and action feature widths differ")
    return VideoRecord(vid, fmap_o.astype(np.float64), fmap_a.astype(np.float64), x.astype(np.float64))


def load_videos(cfg: RunConfig, vocab: ConceptVocabulary):
    """Training videos (those with a usable weak annotation) and validation videos."""
    train = []
    seen = set()
    for vid, phrase in read_annotations(cfg.annotations):
        if vid in seen:
            log.warning("video %s: extra annotation %s ignored", vid, phrase.key)
            continue
        try:
            vocab.phrase_index(phrase)
        except VocabError:
            log.warning("video %s: annotation %s is not a vocabulary concept, skipped", vid, phrase.key)
            continue
        seen.add(vid)
        v = load_video(cfg, vid)
        v.annotation = phrase
        train.append(v)
    val_ids = read_id_list(cfg.val_videos)
    overlap = sorted(set(val_ids) & seen)
    if overlap:
        raise IngestError(f"videos in both training and validation: {', '.join(overlap)}")
    val = [load_video(cfg, vid) for vid in val_ids]
    dims = {v.fmap_o.shape[1] for v in train + val}
    if len(dims) > 1:
        raise IngestError(f"feature maps of differing widths: {sorted(dims)}")
    return sorted(train, key=lambda v: v.video_id), sorted(val, key=lambda v: v.video_id)


def read_refs(path) -> dict:
    from .metrics import read_jsonl, tokenize
    return {r["video_id"]: [tokenize(x) for x in r["refs"]] for r in read_jsonl(path)}


def refine_config(cfg: RunConfig) -> refine.RefineConfig:
    return refine.RefineConfig(
        lam=cfg.lam, reg=cfg.reg, lr=cfg.lr, optimizer=cfg.optimizer, epochs=cfg.epochs, batch=cfg.batch,
        theta_c=cfg.theta_c, delta=cfg.delta, beam=cfg.beam, max_len=cfg.max_len,
        max_iterations=cfg.max_iterations, min_iterations=cfg.min_iterations, patience=cfg.patience,
        s_max=None if math.isnan(cfg.s_max) else cfg.s_max, max_nodes=cfg.max_nodes, hidden=cfg.hidden,
        word_dim=cfg.word_dim, att_dim=cfg.att_dim, seed=cfg.seed)


def train(cfg: RunConfig, out: Path) -> refine.RunResult:
    data = ingest(cfg)
    if cfg.kg_checkpoint:
        kg = kglink.load_kg(cfg.kg_checkpoint)
    else:
        kg = build_kg(cfg, data)
    kglink.save_kg(kg, out / "kg.wckg")
    (out / "vocab.json").write_text(json.dumps(data.vocab.to_json(), indent=1, sort_keys=True) + "\n",
                                    encoding="utf-8")
    train_v, val_v = load_videos(cfg, data.vocab)
    refs = None
    if cfg.val_refs:
        refs = read_refs(cfg.val_refs)
        missing = sorted(v.video_id for v in val_v if v.video_id not in refs)
        if missing:
            raise IngestError(f"validation videos without references: {', '.join(missing)}")
    rdata = refine.RefineData(data.vocab, train_v, val_v, refs)
    return refine.run(rdata, kg, refine_config(cfg), out)


def caption(cfg: RunConfig, checkpoint, kg_path, video_ids) -> list[dict]:
    """Captions for videos without annotation using a trained checkpoint."""
    params, meta = captioner.load_params(checkpoint)
    data = ingest(cfg)
    vocab = data.vocab
    if vocab.objects != meta["objects"] or vocab.actions != meta["actions"]:
        raise IngestError("checkpoint vocabulary does not match the configured corpus")
    kg = kglink.load_kg(kg_path)
    rcfg = refine_config(cfg)
    refiner = refine.Refiner(refine.RefineData(vocab, []), kg, rcfg)
    rows = []
    for vid in video_ids:
        v = load_video(cfg, vid)
        trees = refiner.eval_trees(params, v)
        toks, logp = refiner.decode(params, v, trees)
        rows.append({"video_id": vid, "caption": " ".join(toks), "logprob": logp})
    return rows
