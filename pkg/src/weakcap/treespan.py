"""Dependency-tree spanning from grounded concepts, and realization into pseudo sentences."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpusio import OBJ, ConceptVocabulary, Phrase, noun_verb
from .grounding import VideoRecord, spatial_distance
from .kglink import KgModel, predict_links


@dataclass
class SpanConfig:
    s_max: float
    max_nodes: int = 6
    delta: float = 0.1

    def __post_init__(self):
        if self.max_nodes < 1:
            raise ValueError("max_nodes must be >= 1")


@dataclass
class DependencyTree:
    nodes: list[Phrase]
    edges: list[tuple[int, str, int]] = field(default_factory=list)
    video_id: str = ""
    iteration: int = 0

    @property
    def root(self) -> Phrase:
        return self.nodes[0]

    def validate(self):
        n = len(self.nodes)
        if n == 0:
            raise ValueError("tree has no nodes")
        if len(self.edges) != n - 1:
            raise ValueError(f"{len(self.edges)} edges for {n} nodes")
        parent = {}
        for p, rel, c in self.edges:
            if not (0 <= p < n and 0 < c < n) or c in parent or not rel:
                raise ValueError(f"bad edge {(p, rel, c)}")
            parent[c] = p
        for c in range(1, n):
            seen, cur = set(), c
            while cur != 0:
                if cur in seen or cur not in parent:
                    raise ValueError(f"node {c} is not connected to the root")
                seen.add(cur)
                cur = parent[cur]
        if len(set(self.nodes)) != n:
            raise ValueError("duplicate nodes")

    def children(self, i: int) -> list[tuple[str, int]]:
        return [(rel, c) for p, rel, c in self.edges if p == i]

    def lemmas(self) -> set[str]:
        return {w for p in self.nodes for w in p.lemmas}


def generate_roots(video: VideoRecord, vocab: ConceptVocabulary, delta: float,
                   prior_captions=()) -> list[Phrase]:
    """Subject-predicate root phrases for one video.

    Pairs an active object with an active action when their attention maps
    lie within ``delta`` of each other, adds the first object/action word
    pair of each prior caption, and falls back to the weak annotation alone
    when no pair forms.
    """
    roots = set()
    objs = [i for (k, i) in video.alphas if k == "o"]
    acts = [j for (k, j) in video.alphas if k == "a"]
    for i in objs:
        for j in acts:
            if spatial_distance(video.alphas[("o", i)], video.alphas[("a", j)]) <= delta:
                roots.add(noun_verb(vocab.objects[i], vocab.actions[j]))
    for tokens in prior_captions:
        n = next((w for w in tokens if vocab.object_index(w) is not None), None)
        v = next((w for w in tokens if vocab.action_index(w) is not None), None)
        if n is not None and v is not None:
            roots.add(noun_verb(n, v))
    if not roots:
        return [video.annotation] if video.annotation is not None else []
    return sorted(roots, key=lambda p: (p.noun, p.verb))


def span_tree(root: Phrase, candidates, kg: KgModel, cfg: SpanConfig,
              video_id: str = "", iteration: int = 0) -> DependencyTree:
    """Greedy best-first attachment of candidate concepts to the tree.

    Each round attaches the single lowest-scoring link from any tree node to
    any unattached candidate, while that score is within ``cfg.s_max`` and
    the node budget allows.
    """
    taken = set(root.lemmas)
    remaining = [c for c in dict.fromkeys(candidates) if not (set(c.lemmas) & taken)]
    tree = DependencyTree([root], [], video_id, iteration)
    while remaining and len(tree.nodes) < cfg.max_nodes:
        links = predict_links(kg, tree.nodes, remaining, cfg.s_max)
        if not links:
            break
        head, rel, tail, _ = links[0]
        tree.edges.append((tree.nodes.index(head), rel, len(tree.nodes)))
        tree.nodes.append(tail)
        remaining.remove(tail)
    return tree


def span_video(video: VideoRecord, vocab: ConceptVocabulary, kg: KgModel, cfg: SpanConfig,
               prior_captions=(), iteration: int = 0) -> list[DependencyTree]:
    roots = generate_roots(video, vocab, cfg.delta, prior_captions)
    candidates = video.active(vocab)
    return [span_tree(r, candidates, kg, cfg, video.video_id, iteration) for r in roots]


def linearize(tree: DependencyTree) -> list[str]:
    """Depth-first realization: a node's lemmas, then its object children, then
    its prepositional children (preposition token first) ordered by relation."""
    tokens: list[str] = []

    def visit(i: int):
        tokens.extend(tree.nodes[i].lemmas)
        kids = tree.children(i)
        objs = sorted((c for rel, c in kids if rel == OBJ), key=lambda c: tree.nodes[c].key)
        preps = sorted(((rel, c) for rel, c in kids if rel != OBJ), key=lambda x: (x[0], tree.nodes[x[1]].key))
        for c in objs:
            visit(c)
        for rel, c in preps:
            tokens.append(rel)
            visit(c)

    visit(0)
    return tokens


def pseudo_record(tree: DependencyTree, tokens=None) -> dict:
    return {
        "video_id": tree.video_id,
        "iteration": tree.iteration,
        "root": str(tree.root),
        "nodes": [n.key for n in tree.nodes],
        "tokens": list(tokens if tokens is not None else linearize(tree)),
        "tree": [[p, rel, c] for p, rel, c in tree.edges],
    }


def write_pseudo(path, trees):
    with open(path, "w", encoding="utf-8") as f:
        for tree in trees:
            f.write(json.dumps(pseudo_record(tree), sort_keys=True) + "\n")
