"""Sentence- and corpus-level caption metrics: BLEU-4, ROUGE-L, METEOR-lite,
and CIDEr.

These scores serve three roles in the pipeline: evaluation tables, the
per-reference quality weights of the discriminative cross-entropy loss, and
the reward signal of the policy-gradient boosting phase.

METEOR here is an exact-match variant ("METEOR-lite"): the alignment and
fragmentation penalty structure is kept but no synonym/stemming resources
are consulted. CIDEr uses the count-clipped similarity and Gaussian length
penalty of the leaderboard variant, scaled to [0, 10].
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

MAX_NGRAM = 4

# kind -> inclusive value bounds
SCORE_BOUNDS = {"B4": (0.0, 1.0), "M": (0.0, 1.0), "R": (0.0, 1.0), "C": (0.0, 10.0)}
METRIC_KINDS = ("B4", "M", "R", "C")
METRIC_HEADER = "B@4\tM\tR\tC"

ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9
METEOR_GAMMA = 0.5
METEOR_THETA = 3.0
CIDER_SIGMA = 6.0


def ngram_counts(words: list[str], n: int) -> Counter:
    """Multiset of all contiguous n-grams of order n (empty when len < n)."""
    if not 1 <= n <= MAX_NGRAM:
        raise ValueError(f"n-gram order must be in 1..{MAX_NGRAM}, got {n}")
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu4(candidate: list[str], references: list[list[str]]) -> float:
    """Sentence-level BLEU-4 with add-one smoothing on orders 2..4.

    Modified n-gram precisions clip candidate counts by the maximum count over
    references. The brevity penalty uses the reference length closest to the
    candidate length (ties broken toward the shorter reference). Smoothing is
    applied to numerator and denominator for n >= 2 only, so a candidate with
    no unigram overlap still scores 0.
    """
    _require_refs(references)
    if not candidate:
        return 0.0
    precisions = []
    for n in range(1, MAX_NGRAM + 1):
        cand = ngram_counts(candidate, n)
        total = max(0, len(candidate) - n + 1)
        max_ref: Counter = Counter()
        for ref in references:
            for gram, c in ngram_counts(ref, n).items():
                if c > max_ref[gram]:
                    max_ref[gram] = c
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        if n == 1:
            p = clipped / total
        else:
            p = (clipped + 1) / (total + 1)
        precisions.append(p)
    if precisions[0] == 0.0:
        return 0.0
    c_len = len(candidate)
    r_len = min((len(r) for r in references), key=lambda L: (abs(L - c_len), L))
    bp = min(1.0, math.exp(1.0 - r_len / c_len))
    return bp * math.prod(precisions) ** 0.25


def lcs_len(a: list[str], b: list[str]) -> int:
    """Length of the longest common subsequence (classic dynamic program)."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], references: list[list[str]], beta: float = ROUGE_BETA) -> float:
    """ROUGE-L F-score, maximized over references."""
    _require_refs(references)
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if not candidate:
        return 0.0
    best = 0.0
    b2 = beta * beta
    for ref in references:
        if not ref:
            continue
        lcs = lcs_len(candidate, ref)
        if lcs == 0:
            continue
        p = lcs / len(candidate)
        r = lcs / len(ref)
        f = (1 + b2) * p * r / (r + b2 * p)
        best = max(best, f)
    return best


def _align(candidate: list[str], ref: list[str]) -> tuple[int, int]:
    """Greedy one-to-one exact alignment: (matches, chunks).

    Match count is the maximum possible (sum of min word counts). Chunks are
    grown greedily left to right: a candidate word prefers the reference
    position that extends the current contiguous run, else the leftmost
    unused occurrence.
    """
    budget = {}
    ref_counts = Counter(ref)
    for w, c in Counter(candidate).items():
        budget[w] = min(c, ref_counts[w])
    matches = sum(budget.values())
    if matches == 0:
        return 0, 0
    used = [False] * len(ref)
    positions = {}
    for i, w in enumerate(ref):
        positions.setdefault(w, []).append(i)
    chunks = 0
    prev = -2
    for w in candidate:
        if budget.get(w, 0) <= 0:
            continue
        nxt = prev + 1
        if 0 <= nxt < len(ref) and ref[nxt] == w and not used[nxt]:
            idx = nxt
        else:
            idx = next(i for i in positions[w] if not used[i])
        used[idx] = True
        budget[w] -= 1
        if idx != prev + 1:
            chunks += 1
        prev = idx
    return matches, chunks


def meteor_lite(candidate: list[str], references: list[list[str]]) -> float:
    """Exact-match METEOR: harmonic P/R mean times a fragmentation penalty.

    Per reference: m exact one-to-one matches, F = PR / (alpha*P + (1-alpha)*R),
    penalty = gamma * (chunks/m)^theta, score = F * (1 - penalty); the best
    reference wins. No matches scores 0.
    """
    _require_refs(references)
    if not candidate:
        return 0.0
    best = 0.0
    for ref in references:
        if not ref:
            continue
        m, chunks = _align(candidate, ref)
        if m == 0:
            continue
        p = m / len(candidate)
        r = m / len(ref)
        f = p * r / (METEOR_ALPHA * p + (1 - METEOR_ALPHA) * r)
        penalty = METEOR_GAMMA * (chunks / m) ** METEOR_THETA
        best = max(best, f * (1 - penalty))
    return best


@dataclass(frozen=True, eq=False)  # identity hash so cached vectors can key on it
class IdfTable:
    """N-gram document frequencies over a corpus of reference sets."""

    df: dict[tuple, int]
    num_docs: int

    def idf(self, gram: tuple) -> float:
        # Unseen n-grams are treated as occurring in one document, which
        # gives them the maximal weight log(num_docs).
        return math.log(self.num_docs / max(self.df.get(gram, 0), 1))


def build_idf(reference_corpus: dict[str, list[list[str]]]) -> IdfTable:
    """Document frequency of every n-gram (order 1..4) over reference sets.

    A "document" is one video's reference set; an n-gram counts once per video
    no matter how many references contain it.
    """
    if not reference_corpus:
        raise ValueError("reference corpus is empty")
    df: dict[tuple, int] = {}
    for refs in reference_corpus.values():
        seen = set()
        for ref in refs:
            for n in range(1, MAX_NGRAM + 1):
                seen.update(ngram_counts(ref, n))
        for gram in seen:
            df[gram] = df.get(gram, 0) + 1
    return IdfTable(df=df, num_docs=len(reference_corpus))


def _tfidf_vec(words: list[str], idf: IdfTable, n: int) -> tuple[dict, float]:
    vec = {}
    norm = 0.0
    for gram, count in ngram_counts(words, n).items():
        w = count * idf.idf(gram)
        vec[gram] = w
        norm += w * w
    return vec, math.sqrt(norm)


@lru_cache(maxsize=65536)
def _ref_tfidf_vec(words: tuple[str, ...], idf: IdfTable, n: int) -> tuple[dict, float]:
    # Reference vectors are recomputed for every candidate scored against the
    # same video (rewards, baselines, leave-one-out weights), so memoize them.
    return _tfidf_vec(list(words), idf, n)


def cider(
    candidate: list[str],
    references: list[list[str]],
    idf: IdfTable,
    sigma: float = CIDER_SIGMA,
) -> float:
    """Consensus score: TF-IDF n-gram similarity averaged over references.

    For each order n, candidate TF-IDF entries are clipped by the reference's
    before the dot product (so repeating a rewarded n-gram does not inflate
    the score), normalized by both norms, and damped by a Gaussian penalty on
    the length difference. The four orders are averaged and scaled by 10.
    A single-video idf degenerates every weight to 0 and the score to 0.
    """
    _require_refs(references)
    if not candidate:
        return 0.0
    c_len = len(candidate)
    total = 0.0
    for n in range(1, MAX_NGRAM + 1):
        c_vec, c_norm = _tfidf_vec(candidate, idf, n)
        acc = 0.0
        for ref in references:
            r_vec, r_norm = _ref_tfidf_vec(tuple(ref), idf, n)
            if c_norm == 0.0 or r_norm == 0.0:
                continue
            dot = 0.0
            for gram, cw in c_vec.items():
                rw = r_vec.get(gram)
                if rw is not None:
                    dot += min(cw, rw) * rw
            delta = c_len - len(ref)
            acc += dot / (c_norm * r_norm) * math.exp(-(delta * delta) / (2 * sigma * sigma))
        total += acc / len(references)
    return 10.0 * total / MAX_NGRAM


def sentence_score(
    kind: str,
    candidate: list[str],
    references: list[list[str]],
    idf: IdfTable | None = None,
) -> float:
    """Dispatch a sentence-level metric by kind ('B4', 'M', 'R', 'C')."""
    if kind == "B4":
        return bleu4(candidate, references)
    if kind == "M":
        return meteor_lite(candidate, references)
    if kind == "R":
        return rouge_l(candidate, references)
    if kind == "C":
        if idf is None:
            raise ValueError("CIDEr requires an IdfTable")
        return cider(candidate, references, idf)
    raise ValueError(f"unknown metric kind {kind!r}")


def corpus_score(
    candidates: dict[str, list[str]],
    references: dict[str, list[list[str]]],
    kind: str,
    idf: IdfTable | None = None,
) -> float:
    """Arithmetic mean of per-video sentence scores.

    CIDEr shares one IdfTable across videos (built by the caller, normally
    over the evaluation corpus). Every candidate video must have references.
    """
    if not candidates:
        raise ValueError("no candidates to score")
    total = 0.0
    for vid in candidates:
        if vid not in references:
            raise KeyError(f"no reference set for video {vid!r}")
        total += sentence_score(kind, candidates[vid], references[vid], idf)
    return total / len(candidates)


def gt_weights(
    references: list[list[str]],
    kind: str,
    idf: IdfTable | None = None,
) -> list[float]:
    """Leave-one-out quality weight of each reference caption.

    Each reference is scored against the remaining ones of the same video, so
    a poorly written annotation gets a low weight. A single reference has
    nothing to compare to and gets weight 1.0. Weights are constants: no
    gradient ever flows through them.
    """
    if not references:
        raise ValueError("reference list is empty")
    if len(references) == 1:
        return [1.0]
    weights = []
    for j, ref in enumerate(references):
        others = references[:j] + references[j + 1 :]
        weights.append(sentence_score(kind, ref, others, idf))
    return weights


def display_value(kind: str, value: float) -> float:
    """Scale a raw score for table display: x100, with CIDEr first mapped
    to [0, 1] (raw/10) so all columns share one scale."""
    if kind == "C":
        value = value / 10.0
    return value * 100.0


def format_metric_row(scores: dict[str, float]) -> str:
    """Tab-separated B@4/M/R/C row, x100, one decimal."""
    return "\t".join(f"{display_value(k, scores[k]):.1f}" for k in METRIC_KINDS)


def _require_refs(references: list[list[str]]) -> None:
    if not references:
        raise ValueError("at least one reference is required")
