"""Deterministic synthetic data: a toy captioning world and a planted rotation KG."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpusio import Triplet, noun, parse_template, serialize_conllu
from .grounding import write_feature_map, write_global_feature

SUBJECTS = ["man", "woman", "boy", "girl", "dog", "cat"]
THINGS = ["bike", "horse", "ball", "guitar"]
PLACES = {"street": "on", "field": "in"}
OBJECTS = SUBJECTS + THINGS + list(PLACES)
ACTIONS = ["ride", "play", "kick", "throw", "chase", "run", "jump", "walk"]
PREPOSITIONS = sorted(set(PLACES.values()))
HUMANS = SUBJECTS[:4]
ANIMALS = SUBJECTS[4:]

# action -> (allowed subjects, allowed direct objects; empty = intransitive)
FRAMES = {
    "ride": (HUMANS, ["bike", "horse"]),
    "play": (HUMANS, ["guitar", "ball"]),
    "kick": (HUMANS, ["ball"]),
    "throw": (HUMANS, ["ball"]),
    "chase": (ANIMALS, ["ball", "cat", "dog"]),
    "run": (SUBJECTS, []),
    "jump": (SUBJECTS, []),
    "walk": (HUMANS + ["dog"], []),
}

HYPERNYMS = [("animal", "dog"), ("animal", "cat"), ("person", "man"), ("person", "woman")]


def all_scenes():
    scenes = []
    for act in ACTIONS:
        subjects, objs = FRAMES[act]
        for s in subjects:
            for o in objs or [None]:
                if o == s:
                    continue
                for place in PLACES:
                    scenes.append((s, act, o, place))
    return scenes


def scene_tokens(scene, with_place=True) -> list[str]:
    s, a, o, place = scene
    toks = [s, a]
    if o:
        toks.append(o)
    if with_place and place:
        toks += [PLACES[place], place]
    return toks


def make_toy(out_dir, seed: int = 7, n_videos: int = 40, n_val: int = 10, n_sentences: int = 60,
             q: int = 5, d: int = 24, h: int = 16):
    """Write a toy dataset (corpus, embeddings, features, annotations, references, config) to ``out_dir``.

    Every concept owns a visual signature.  Object and action feature maps
    share a region layout, and the actor region carries the subject in one
    stream and the action in the other, so the two attend to the same place.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    scenes = all_scenes()
    order = rng.permutation(len(scenes))
    corpus_scenes = [scenes[i] for i in sorted(order[:n_sentences - 2])]
    video_scenes = [scenes[i] for i in rng.choice(len(scenes), size=n_videos, replace=False)]

    # corpus: template sentences plus two that only feed hypernym pruning
    sentences = []
    for k, sc in enumerate(corpus_scenes):
        sentences.append(parse_template(scene_tokens(sc), OBJECTS + ["animal", "person"], ACTIONS,
                                        PREPOSITIONS, f"t{k + 1:03d}"))
    for k, toks in enumerate([["animal", "run", "in", "field"], ["person", "walk", "on", "street"]]):
        sentences.append(parse_template(toks, OBJECTS + ["animal", "person"], ACTIONS, PREPOSITIONS,
                                        f"h{k + 1:03d}"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.conllu").write_text(serialize_conllu(sentences), encoding="utf-8")
    (out / "hypernyms.tsv").write_text("".join(f"{a}\t{b}\n" for a, b in HYPERNYMS), encoding="utf-8")

    words = OBJECTS + ACTIONS + PREPOSITIONS + ["animal", "person"]
    vecs = rng.normal(0.0, 1.0, size=(len(words), h))
    with open(out / "embeddings.txt", "w", encoding="utf-8") as f:
        for w, v in zip(words, vecs):
            f.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")

    concepts = OBJECTS + ACTIONS
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    signature = {c: 5.0 * basis[:, i] for i, c in enumerate(concepts)}

    feat_dir = out / "features"
    feat_dir.mkdir(exist_ok=True)
    ann_lines, refs, truth = [], [], []
    train_ids, val_ids = [], []
    for k, sc in enumerate(video_scenes):
        vid = f"vid{k:03d}"
        s, a, o, place = sc
        # object and action streams share one region layout: the actor region
        # holds the subject in the object stream and the action in the other
        obj_regions = [signature[s]] + ([signature[o]] if o else []) + [signature[place]]
        act_regions = [signature[a]]
        perm = rng.permutation(q)
        fmaps = []
        for regions in (obj_regions, act_regions):
            fm = np.zeros((q, d))
            fm[:len(regions)] = regions
            fm += rng.normal(0.0, 0.05, size=(q, d))
            fmaps.append(fm[perm])
        x = sum(signature[c] for c in (s, a, o, place) if c) + rng.normal(0.0, 0.05, size=d)
        truth.append({"video_id": vid, "scene": " ".join(scene_tokens(sc))})
        write_feature_map(feat_dir / f"{vid}.o.wcfm", fmaps[0], "o")
        write_feature_map(feat_dir / f"{vid}.a.wcfm", fmaps[1], "a")
        write_global_feature(feat_dir / f"{vid}.wcgf", x)
        if k < n_videos - n_val:
            train_ids.append(vid)
            options = [(s, "o"), (a, "a"), (place, "o")] + ([(o, "o")] if o else [])
            lemma, stream = options[rng.integers(len(options))]
            ann_lines.append(f"{vid}\t{lemma}\t{stream}\n")
        else:
            val_ids.append(vid)
            refs.append({"video_id": vid, "refs": [" ".join(scene_tokens(sc)),
                                                   " ".join(scene_tokens(sc, with_place=False))]})
    (out / "annotations.tsv").write_text("".join(ann_lines), encoding="utf-8")
    (out / "val_videos.txt").write_text("".join(v + "\n" for v in val_ids), encoding="utf-8")
    with open(out / "val_refs.jsonl", "w", encoding="utf-8") as f:
        for r in refs:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    with open(out / "truth.jsonl", "w", encoding="utf-8") as f:
        for r in truth:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "toy.cfg").write_text(TOY_CONFIG.format(seed=seed), encoding="utf-8")
    return out


TOY_CONFIG = """\
# toy dataset written by `weakcap synth`
corpus = corpus.conllu
embeddings = embeddings.txt
hypernyms = hypernyms.tsv
features = features
shared_features = false
annotations = annotations.tsv
val_videos = val_videos.txt
val_refs = val_refs.jsonl
output = run
seed = {seed}
theta_c = 0.95
delta = 0.1
lambda = 1.0
lr = 0.003
epochs = 50
batch = 8
reg = 0.001
hidden = 32
word_dim = 16
att_dim = 16
max_iterations = 8
min_iterations = 4
patience = 2
kg_dim = 32
kg_steps = 1500
s_max_percentile = 90
max_nodes = 4
beam = 5
max_len = 8
"""


# ---------------------------------------------------------------- planted KG


def planted_kg(seed: int = 0, n_entities: int = 30, n_relations: int = 5, n_triplets: int = 200,
               freqs=(1, 2, 3)):
    """Triplets from a hidden rotation model over a cyclic entity layout.

    Entity j sits at phases 2*pi*f*j/n for each frequency f; relation r
    rotates by a hidden offset m_r.  Every (head, relation) pair contributes
    its exact image as tail; the remaining triplets use the runner-up tail of
    randomly chosen pairs.
    """
    rng = np.random.default_rng(seed)
    freqs = np.asarray(freqs)
    offsets = rng.choice(np.arange(1, n_entities), size=n_relations, replace=False)
    ent = np.exp(2j * np.pi * np.outer(np.arange(n_entities), freqs) / n_entities)
    ranked = []
    for h in range(n_entities):
        for r in range(n_relations):
            rot = np.exp(2j * np.pi * freqs * offsets[r] / n_entities)
            s = np.abs(ent[h] * rot - ent).sum(axis=1)
            ranked.append((h, r, np.argsort(s, kind="stable")))
    rows = [(h, r, int(o[0])) for h, r, o in ranked]
    if n_triplets < len(rows):
        rows = [rows[i] for i in sorted(rng.choice(len(rows), size=n_triplets, replace=False))]
    else:
        extra = rng.choice(len(ranked), size=n_triplets - len(rows), replace=False)
        rows += [(ranked[i][0], ranked[i][1], int(ranked[i][2][1])) for i in sorted(extra)]
    names = [noun(f"e{j:02d}") for j in range(n_entities)]
    triplets = [Triplet(names[h], f"r{r}", names[t]) for h, r, t in rows]
    return triplets, names


def split(items, frac: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(items))
    cut = int(round(frac * len(items)))
    return [items[i] for i in perm[:cut]], [items[i] for i in perm[cut:]]
