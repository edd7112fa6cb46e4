"""Caption metrics: corpus BLEU-4, ROUGE-L and CIDEr (tf-idf n-gram consensus)."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter

from .errors import EvalError

log = logging.getLogger(__name__)

MAX_N = 4
ROUGE_BETA = 1.2
CIDER_SCALE = 10.0


def tokenize(caption: str) -> list[str]:
    return caption.lower().strip().rstrip(".!?,;:").split()


def ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _bleu_stats(cand, refs):
    matches, totals = [], []
    for n in range(1, MAX_N + 1):
        cn = ngrams(cand, n)
        best = Counter()
        for r in refs:
            best |= ngrams(r, n)
        matches.append(sum(min(c, best[g]) for g, c in cn.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, len(cand), _closest_ref_len(len(cand), refs)


def _bleu_from(matches, totals, c, r) -> float:
    if c == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / MAX_N
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu4(candidates: dict, references: dict) -> float:
    """Corpus BLEU-4: clipped n-gram precisions pooled over the corpus, brevity penalty, no smoothing."""
    _check(candidates, references)
    M, T = [0] * MAX_N, [0] * MAX_N
    c_len = r_len = 0
    for vid in sorted(candidates):
        m, t, c, r = _bleu_stats(candidates[vid], references[vid])
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        c_len += c
        r_len += r
    return _bleu_from(M, T, c_len, r_len)


def sentence_bleu4(cand, refs) -> float:
    return _bleu_from(*_bleu_stats(cand, refs))


def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand, refs, beta=ROUGE_BETA) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


def rouge_l(candidates: dict, references: dict) -> float:
    _check(candidates, references)
    scores = [rouge_l_sentence(candidates[v], references[v]) for v in sorted(candidates)]
    return sum(scores) / len(scores)


class CiderScorer:
    """Document frequencies over the reference corpus; one document per video."""

    def __init__(self, references: dict):
        self.n_docs = len(references)
        if self.n_docs < 2:
            log.warning("CIDEr over %d reference set(s): idf is degenerate", self.n_docs)
        self.df = Counter()
        for refs in references.values():
            seen = set()
            for r in refs:
                for n in range(1, MAX_N + 1):
                    seen.update(ngrams(r, n))
            self.df.update(seen)
        self.log_n = math.log(max(self.n_docs, 1))

    def _vec(self, tokens, n):
        counts = ngrams(tokens, n)
        total = sum(counts.values())
        return {g: (c / total) * (self.log_n - math.log(max(1, self.df[g]))) for g, c in counts.items()}

    @staticmethod
    def _cos(a, b) -> float:
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return sum(v * b[g] for g, v in a.items() if g in b) / (na * nb)

    def score(self, cand, refs) -> float:
        """Mean over references of the cosine averaged over the n-gram orders present in either sentence."""
        total = 0.0
        for r in refs:
            sims = []
            for n in range(1, MAX_N + 1):
                if len(cand) < n and len(r) < n:
                    continue
                sims.append(self._cos(self._vec(cand, n), self._vec(r, n)))
            total += sum(sims) / len(sims) if sims else 0.0
        return CIDER_SCALE * total / len(refs)


def cider_per_video(candidates: dict, references: dict) -> dict:
    _check(candidates, references)
    scorer = CiderScorer({v: references[v] for v in sorted(references)})
    return {v: scorer.score(candidates[v], references[v]) for v in sorted(candidates)}


def cider(candidates: dict, references: dict) -> float:
    per = cider_per_video(candidates, references)
    return sum(per.values()) / len(per)


def _check(candidates, references):
    if not candidates:
        raise EvalError("no candidates")
    missing = sorted(set(candidates) - set(references))
    if missing:
        raise EvalError(f"candidates without references: {', '.join(missing)}")
    empty = sorted(v for v in candidates if not references[v])
    if empty:
        raise EvalError(f"videos with an empty reference list: {', '.join(empty)}")


def score_all(candidates: dict, references: dict) -> dict:
    """Corpus-level and per-video scores for all three metrics."""
    _check(candidates, references)
    cid = cider_per_video(candidates, references)
    per_video = {
        v: {
            "bleu4": sentence_bleu4(candidates[v], references[v]),
            "rouge_l": rouge_l_sentence(candidates[v], references[v]),
            "cider": cid[v],
        }
        for v in sorted(candidates)
    }
    corpus = {
        "bleu4": bleu4(candidates, references),
        "rouge_l": rouge_l(candidates, references),
        "cider": sum(cid.values()) / len(cid),
    }
    return {"corpus": corpus, "per_video": per_video}


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def evaluate(cand_path, refs_path) -> dict:
    """Score a candidates file against a references file (both JSON lines).

    Candidate rows carry ``caption``; reference rows carry a ``refs`` list or
    a single ``caption``, so a captions file can serve as its own reference.
    """
    try:
        cands = {r["video_id"]: tokenize(r["caption"]) for r in read_jsonl(cand_path)}
        refs = {r["video_id"]: [tokenize(x) for x in (r["refs"] if "refs" in r else [r["caption"]])]
                for r in read_jsonl(refs_path)}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise EvalError(f"malformed evaluation input: {exc}") from exc
    if not cands:
        raise EvalError(f"{cand_path}: no candidates")
    missing = sorted(set(cands) ^ set(refs))
    if missing:
        raise EvalError(f"video ids present on one side only: {', '.join(missing)}")
    return score_all(cands, refs)
