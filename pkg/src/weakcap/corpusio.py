"""Sentence corpus ingestion: CoNLL-U reading, phrase/triplet extraction, vocabulary."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import IngestError, VocabError

log = logging.getLogger(__name__)

NOUN_TAGS = frozenset({"NOUN", "PROPN"})
VERB_TAGS = frozenset({"VERB"})
CLAUSE_DEPRELS = frozenset({"ccomp", "advcl", "conj", "parataxis"})
SUBJECT_DEPRELS = frozenset({"nsubj", "nsubj:pass", "nsubjpass"})
OBJECT_DEPRELS = frozenset({"obj", "dobj"})
OBLIQUE_DEPRELS = frozenset({"obl", "nmod", "obl:arg"})
OBJ = "obj"


@dataclass(frozen=True)
class TokenRow:
    index: int
    surface: str
    lemma: str
    upos: str
    head: int
    deprel: str


@dataclass(frozen=True)
class ParsedSentence:
    tokens: tuple[TokenRow, ...]
    source_id: str = ""

    def __len__(self):
        return len(self.tokens)

    def token(self, index: int) -> TokenRow:
        return self.tokens[index - 1]

    def children(self, index: int) -> list[TokenRow]:
        return [t for t in self.tokens if t.head == index]


@dataclass(frozen=True, order=True)
class Phrase:
    """A noun, verb or noun-verb (subject-predicate) phrase, held as lemmas."""

    kind: str
    noun: str | None = None
    verb: str | None = None

    def __post_init__(self):
        if self.kind == "Noun":
            ok = self.noun is not None and self.verb is None
        elif self.kind == "Verb":
            ok = self.verb is not None and self.noun is None
        elif self.kind == "NounVerb":
            ok = self.noun is not None and self.verb is not None
        else:
            raise ValueError(f"unknown phrase kind {self.kind!r}")
        if not ok:
            raise ValueError(f"inconsistent lemmas for {self.kind}: {self.noun!r}, {self.verb!r}")
        for lemma in (self.noun, self.verb):
            if lemma is not None and (not lemma or lemma != lemma.lower()):
                raise ValueError(f"lemmas must be non-empty lowercase, got {lemma!r}")

    @property
    def lemmas(self) -> tuple[str, ...]:
        return tuple(x for x in (self.noun, self.verb) if x is not None)

    @property
    def key(self) -> str:
        if self.kind == "Noun":
            return f"n:{self.noun}"
        if self.kind == "Verb":
            return f"v:{self.verb}"
        return f"nv:{self.noun}|{self.verb}"

    @classmethod
    def from_key(cls, key: str) -> "Phrase":
        tag, _, rest = key.partition(":")
        if tag == "n":
            return noun(rest)
        if tag == "v":
            return verb(rest)
        if tag == "nv":
            n, _, v = rest.partition("|")
            return noun_verb(n, v)
        raise ValueError(f"bad phrase key {key!r}")

    def __str__(self):
        return " ".join(self.lemmas)


def noun(lemma: str) -> Phrase:
    return Phrase("Noun", noun=lemma)


def verb(lemma: str) -> Phrase:
    return Phrase("Verb", verb=lemma)


def noun_verb(n: str, v: str) -> Phrase:
    return Phrase("NounVerb", noun=n, verb=v)


@dataclass(frozen=True)
class Triplet:
    head: Phrase
    relation: str
    tail: Phrase

    def __post_init__(self):
        if not self.relation:
            raise ValueError("empty relation label")
        if self.head == self.tail:
            raise ValueError(f"head equals tail: {self.head}")


# ---------------------------------------------------------------- CoNLL-U


def _check_tree(tokens: Sequence[TokenRow]) -> str | None:
    n = len(tokens)
    if n == 0:
        return "empty sentence"
    for i, t in enumerate(tokens, start=1):
        if t.index != i:
            return f"token ids not consecutive at {t.index}"
        if not 0 <= t.head <= n:
            return f"head {t.head} out of range"
        if t.head == t.index:
            return f"token {i} heads itself"
    roots = [t for t in tokens if t.head == 0]
    if len(roots) != 1:
        return f"{len(roots)} roots"
    for t in tokens:
        seen = set()
        cur = t.index
        while cur != 0:
            if cur in seen:
                return f"cycle through token {cur}"
            seen.add(cur)
            cur = tokens[cur - 1].head
    return None


def _norm_lemma(lemma: str, surface: str) -> str:
    lemma = lemma if lemma not in ("", "_") else surface
    return lemma.strip().lower()


def parse_conllu(text: str | bytes, skipped: list | None = None) -> list[ParsedSentence]:
    """Parse a CoNLL-U document.

    Sentences that fail to parse or do not form a single rooted tree are
    dropped; if ``skipped`` is given, a ``(source_id, reason)`` entry is
    appended for each one.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IngestError(f"document is not valid UTF-8: {exc}") from exc

    sentences: list[ParsedSentence] = []
    blocks: list[list[str]] = [[]]
    for line in text.splitlines():
        if line.strip():
            blocks[-1].append(line)
        elif blocks[-1]:
            blocks.append([])

    count = 0
    for block in blocks:
        if not block:
            continue
        count += 1
        source_id = f"s{count}"
        rows: list[TokenRow] = []
        error = None
        for line in block:
            if line.startswith("#"):
                key, eq, value = line[1:].partition("=")
                if eq and key.strip() == "sent_id":
                    source_id = value.strip()
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                error = f"expected 10 columns, got {len(cols)}"
                break
            if "-" in cols[0] or "." in cols[0]:
                continue  # multiword ranges and empty nodes carry no syntax here
            try:
                index, head = int(cols[0]), int(cols[6])
            except ValueError:
                error = f"non-integer id/head in {line!r}"
                break
            rows.append(TokenRow(index, cols[1], _norm_lemma(cols[2], cols[1]), cols[3], head, cols[7]))
        if error is None:
            error = _check_tree(rows)
        if error is not None:
            log.debug("skipping sentence %s: %s", source_id, error)
            if skipped is not None:
                skipped.append((source_id, error))
            continue
        sentences.append(ParsedSentence(tuple(rows), source_id))
    return sentences


def serialize_conllu(sentences: Iterable[ParsedSentence]) -> str:
    out = []
    for s in sentences:
        out.append(f"# sent_id = {s.source_id}")
        for t in s.tokens:
            cols = [str(t.index), t.surface, t.lemma, t.upos, "_", "_", str(t.head), t.deprel, "_", "_"]
            out.append("\t".join(cols))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def read_conllu(path, skipped: list | None = None) -> list[ParsedSentence]:
    with open(path, "rb") as f:
        return parse_conllu(f.read(), skipped)


# ---------------------------------------------------------------- extraction


def extract_phrases(sentence: ParsedSentence) -> list[Phrase]:
    phrases: dict[Phrase, None] = {}
    for t in sentence.tokens:
        if t.upos in NOUN_TAGS:
            phrases[noun(t.lemma)] = None
        elif t.upos in VERB_TAGS:
            phrases[verb(t.lemma)] = None
    return list(phrases)


def clause_components(sentence: ParsedSentence, clause_deprels=CLAUSE_DEPRELS) -> list[int]:
    """Sub-sentence id per token: the index of the nearest clause-boundary ancestor (or the root)."""
    comp = []
    for t in sentence.tokens:
        cur = t
        while cur.head != 0 and cur.deprel not in clause_deprels:
            cur = sentence.token(cur.head)
        comp.append(cur.index)
    return comp


def _preposition(sentence: ParsedSentence, tok: TokenRow, comp: list[int]) -> str | None:
    for c in sentence.children(tok.index):
        if c.deprel == "case" and comp[c.index - 1] == comp[tok.index - 1]:
            return c.lemma
    return None


def extract_triplets(sentence: ParsedSentence, clause_deprels=CLAUSE_DEPRELS) -> list[Triplet]:
    """Dependency triplets between content phrases of each sub-sentence.

    A verb with a nominal subject heads its links as a noun-verb phrase;
    direct objects link with relation ``obj`` and prepositional dependents
    (obl/nmod with a ``case`` marker) link with the preposition lemma.
    """
    comp = clause_components(sentence, clause_deprels)
    found: dict[Triplet, None] = {}

    def same(a: TokenRow, b: TokenRow) -> bool:
        return comp[a.index - 1] == comp[b.index - 1]

    def add(head: Phrase, rel: str, tail: Phrase):
        if head != tail:
            found[Triplet(head, rel, tail)] = None

    for tok in sentence.tokens:
        if tok.upos in VERB_TAGS:
            deps = [c for c in sentence.children(tok.index) if same(tok, c)]
            subj = next((c for c in deps if c.deprel in SUBJECT_DEPRELS and c.upos in NOUN_TAGS), None)
            head = noun_verb(subj.lemma, tok.lemma) if subj is not None else verb(tok.lemma)
        elif tok.upos in NOUN_TAGS:
            deps = [c for c in sentence.children(tok.index) if same(tok, c)]
            head = noun(tok.lemma)
        else:
            continue
        for c in deps:
            if c.upos not in NOUN_TAGS:
                continue
            if c.deprel in OBJECT_DEPRELS and tok.upos in VERB_TAGS:
                add(head, OBJ, noun(c.lemma))
            elif c.deprel in OBLIQUE_DEPRELS:
                prep = _preposition(sentence, c, comp)
                if prep:
                    add(head, prep, noun(c.lemma))
    return list(found)


def parse_template(tokens: Sequence[str], objects, actions, prepositions, source_id: str = "") -> ParsedSentence:
    """Deterministic parse of a lemma sequence under a subject-verb-object-(prep noun)* grammar.

    Nouns before the verb are subjects; a noun right after the verb (or
    after another object) is a direct object; a preposition governs the next
    noun, which attaches to the verb as an oblique.  Without a verb the
    first noun is the root and prepositional nouns attach to it.
    """
    objects, actions, prepositions = set(objects), set(actions), set(prepositions)
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot parse an empty token sequence")
    upos = []
    for w in tokens:
        if w in actions and (w not in objects or "VERB" not in upos):
            upos.append("VERB")
        elif w in objects:
            upos.append("NOUN")
        elif w in prepositions:
            upos.append("ADP")
        else:
            upos.append("X")
    verbs = [i for i, u in enumerate(upos) if u == "VERB"]
    nouns = [i for i, u in enumerate(upos) if u == "NOUN"]
    if verbs:
        root = verbs[0]
    elif nouns:
        root = nouns[0]
    else:
        root = 0
    heads = [root + 1] * n
    deprels = ["dep"] * n
    heads[root], deprels[root] = 0, "root"
    subject_done = False
    pending_prep = None
    for i, u in enumerate(upos):
        if i == root:
            continue
        if u == "ADP":
            pending_prep = i
            continue
        if u == "NOUN":
            if pending_prep is not None:
                deprels[i] = "obl" if upos[root] == "VERB" else "nmod"
                heads[pending_prep] = i + 1
                deprels[pending_prep] = "case"
                pending_prep = None
            elif i < root and upos[root] == "VERB" and not subject_done:
                deprels[i] = "nsubj"
                subject_done = True
            elif i > root and upos[root] == "VERB":
                deprels[i] = "obj"
            continue
        if u == "VERB":
            deprels[i] = "conj"
    rows = tuple(
        TokenRow(i + 1, w, w, upos[i], heads[i], deprels[i]) for i, w in enumerate(tokens)
    )
    return ParsedSentence(rows, source_id)


# ---------------------------------------------------------------- vocabulary


@dataclass
class ConceptVocabulary:
    objects: list[str]
    actions: list[str]
    relations: list[str]
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    pruned: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._obj_index = {w: i for i, w in enumerate(self.objects)}
        self._act_index = {w: i for i, w in enumerate(self.actions)}

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def dim(self) -> int:
        if not self.embeddings:
            raise VocabError("vocabulary has no embeddings loaded")
        return len(next(iter(self.embeddings.values())))

    def object_index(self, lemma: str) -> int | None:
        return self._obj_index.get(lemma)

    def action_index(self, lemma: str) -> int | None:
        return self._act_index.get(lemma)

    def concepts(self, stream: str) -> list[str]:
        return self.objects if stream == "o" else self.actions

    def phrase_index(self, phrase: Phrase) -> tuple[str, int]:
        """Stream tag and index of an atomic phrase."""
        if phrase.kind == "Noun" and phrase.noun in self._obj_index:
            return "o", self._obj_index[phrase.noun]
        if phrase.kind == "Verb" and phrase.verb in self._act_index:
            return "a", self._act_index[phrase.verb]
        raise VocabError(f"{phrase.key} is not a vocabulary concept")

    def concept_phrase(self, stream: str, i: int) -> Phrase:
        return noun(self.objects[i]) if stream == "o" else verb(self.actions[i])

    def embedding(self, word: str) -> np.ndarray:
        vec = self.embeddings.get(word)
        if vec is None:
            return np.zeros(self.dim)
        return vec

    def phrase_embedding(self, phrase: Phrase) -> np.ndarray:
        return np.mean([self.embedding(w) for w in phrase.lemmas], axis=0)

    def to_json(self) -> dict:
        return {
            "objects": self.objects,
            "actions": self.actions,
            "relations": self.relations,
            "pruned": self.pruned,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ConceptVocabulary":
        return cls(list(data["objects"]), list(data["actions"]), list(data["relations"]),
                   pruned=list(data.get("pruned", [])))


def build_vocabulary(sentences: Sequence[ParsedSentence], hypernyms=()) -> ConceptVocabulary:
    """Object/action lemma sets of a corpus, minus hypernyms of other retained lemmas."""
    if not sentences:
        raise VocabError("empty corpus")
    objects, actions, relations = set(), set(), set()
    for s in sentences:
        for p in extract_phrases(s):
            (objects if p.kind == "Noun" else actions).add(p.lemmas[0])
        relations.update(t.relation for t in extract_triplets(s))
    if not objects and not actions:
        raise VocabError("corpus contains no noun or verb lemmas")

    pruned = set()
    for hyper, hypo in hypernyms:
        for pool in (objects, actions):
            if hyper in pool and hypo in pool and hyper != hypo:
                pruned.add(hyper)
    vocab = ConceptVocabulary(
        objects=sorted(objects - pruned),
        actions=sorted(actions - pruned),
        relations=sorted(relations),
        pruned=sorted(pruned),
    )
    log.info("vocabulary: %d objects, %d actions, %d relations, %d pruned",
             vocab.n_objects, vocab.n_actions, len(vocab.relations), len(pruned))
    return vocab


def read_hypernyms(path) -> list[tuple[str, str]]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise IngestError(f"{path}:{lineno}: expected 'hypernym<TAB>hyponym'")
            pairs.append((parts[0].strip().lower(), parts[1].strip().lower()))
    return pairs


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddingTable:
    vectors: dict[str, np.ndarray]
    dim: int
    missing: list[str]


def load_embeddings(path, vocab: ConceptVocabulary, extra_words: Iterable[str] = ()) -> EmbeddingTable:
    """Look up vectors for every vocabulary lemma (plus ``extra_words``) in a word-vector text file.

    Multiword lemmas take the mean of their word vectors; lemmas with no
    known word get the zero vector and are listed in ``missing``.
    """
    wanted = set(vocab.objects) | set(vocab.actions) | set(extra_words)
    words = {w for lemma in wanted for w in lemma.split()}
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise IngestError(f"{path}:{lineno}: no vector components")
            elif len(parts) - 1 != dim:
                raise IngestError(f"{path}:{lineno}: expected {dim} components, got {len(parts) - 1}")
            if parts[0] in words and parts[0] not in found:
                try:
                    found[parts[0]] = np.array([float(x) for x in parts[1:]])
                except ValueError as exc:
                    raise IngestError(f"{path}:{lineno}: {exc}") from exc
    if dim is None:
        raise IngestError(f"{path}: no vectors")

    vectors, missing = {}, []
    for lemma in sorted(wanted):
        parts = [found[w] for w in lemma.split() if w in found]
        if parts:
            vectors[lemma] = np.mean(parts, axis=0)
        else:
            vectors[lemma] = np.zeros(dim)
            missing.append(lemma)
    if missing:
        log.warning("%d lemmas without embeddings: %s", len(missing), ", ".join(missing[:10]))
    return EmbeddingTable(vectors, dim, missing)
