"""Evaluation metric suite: center-distance precision (Pr@k) with and
without Hungarian matching, caption metrics (BLEU, ROUGE-L, CIDEr-D with
log rescaling), trajectory errors (ADE/FDE), and n-gram diversity.

Text metrics share one normalization pass: lowercase, punctuation split
into standalone tokens, whitespace tokenization. All scores here are raw
ratios in [0, 1] except the Pr family, which is reported in percent.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "BoxAnswer",
    "Trajectory",
    "MetricReport",
    "tokenize",
    "normalize_category",
    "pr_at_k",
    "hungarian",
    "pr_star_at_k",
    "BleuResult",
    "bleu",
    "rouge_l",
    "CiderResult",
    "cider",
    "rescale_cider",
    "ade_fde",
    "ngram_diversity",
]

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word / standalone-punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize_category(label: str) -> str:
    return " ".join(label.lower().split())


@dataclass(frozen=True)
class BoxAnswer:
    """A localization answer: metric box center plus normalized category."""

    center: tuple[float, float, float]
    category: str

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        if not all(math.isfinite(v) for v in c):
            raise ValueError("box center must be finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "category", normalize_category(self.category))


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled waypoints; horizon defaults to n_points * step."""

    points: tuple[tuple[float, ...], ...]
    step: float = 0.5
    horizon: float | None = None

    def __post_init__(self):
        pts = tuple(tuple(float(v) for v in p) for p in self.points)
        if not pts:
            raise ValueError("trajectory needs at least one point")
        if self.step <= 0:
            raise ValueError("step must be positive")
        object.__setattr__(self, "points", pts)
        if self.horizon is None:
            object.__setattr__(self, "horizon", len(pts) * self.step)


@dataclass(frozen=True)
class MetricReport:
    """Named scores for one evaluation run; Pr rates are percents."""

    scores: dict[str, float]
    n_samples: int
    config: dict = field(default_factory=dict)


def _center_distance(a: BoxAnswer, b: BoxAnswer) -> float:
    return math.dist(a.center, b.center)


def _hit(pred: BoxAnswer, gt: BoxAnswer, k: float) -> bool:
    # strict inequality on the distance; category must match exactly
    return _center_distance(pred, gt) < k and pred.category == gt.category


def pr_at_k(preds: Sequence[BoxAnswer], gts: Sequence[BoxAnswer], k: float) -> float:
    """Percent of aligned pairs with center distance strictly under ``k``
    meters and equal category."""
    if len(preds) != len(gts):
        raise ValueError(f"length mismatch: {len(preds)} preds vs {len(gts)} gts")
    if not gts:
        raise ValueError("empty evaluation set")
    hits = sum(1 for p, g in zip(preds, gts) if _hit(p, g, k))
    return 100.0 * hits / len(gts)


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment over a finite cost matrix.

    Rectangular inputs are padded to square with a sentinel one unit above
    the largest absolute real cost; padded matches are dropped from the
    returned assignment, so exactly min(rows, cols) real pairs come back.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("cost matrix must be non-empty and 2-D")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite")
    n_rows, n_cols = c.shape
    side = max(n_rows, n_cols)
    sentinel = float(np.abs(c).max()) + 1.0
    padded = np.full((side, side), sentinel)
    padded[:n_rows, :n_cols] = c
    rows, cols = linear_sum_assignment(padded)
    pairs = [
        (int(r), int(col))
        for r, col in zip(rows, cols)
        if r < n_rows and col < n_cols
    ]
    pairs.sort()
    total = float(sum(c[r, col] for r, col in pairs))
    return pairs, total


def pr_star_at_k(preds: Sequence[BoxAnswer], gts: Sequence[BoxAnswer], k: float) -> float:
    """Pr@k after Hungarian matching of unordered prediction/GT sets.

    Unmatched ground truths count as misses; the denominator is |gts|.
    """
    if not gts:
        return 0.0
    if not preds:
        return 0.0
    cost = [[_center_distance(p, g) for g in gts] for p in preds]
    pairs, _ = hungarian(cost)
    hits = sum(1 for pi, gi in pairs if _hit(preds[pi], gts[gi], k))
    return 100.0 * hits / len(gts)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuResult:
    per_n: tuple[float, float, float, float]
    aggregate: float


def bleu(candidate: str, references: Sequence[str], max_n: int = 4) -> BleuResult:
    """Modified n-gram precision with clipping and brevity penalty.

    BLEU-n is the brevity-penalized geometric mean of precisions 1..n;
    the aggregate is the arithmetic mean of BLEU-1..max_n. Zero match
    counts are replaced by a 1e-9 epsilon, and orders longer than the
    candidate are dropped from the mean, so an exact short answer still
    scores 1 while a wrong one stays near 0.
    """
    cand = tokenize(candidate)
    if not cand:
        raise ValueError("candidate is empty after tokenization")
    refs = [tokenize(r) for r in references]
    if not refs or any(not r for r in refs):
        raise ValueError("references must be non-empty")

    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    brevity = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)

    precisions: list[float | None] = []
    for n in range(1, max_n + 1):
        possible = c_len - n + 1
        if possible <= 0:
            precisions.append(None)
            continue
        cand_counts = _ngram_counts(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for ng, cnt in _ngram_counts(r, n).items():
                if cnt > max_ref[ng]:
                    max_ref[ng] = cnt
        matches = sum(min(cnt, max_ref.get(ng, 0)) for ng, cnt in cand_counts.items())
        precisions.append((matches if matches else BLEU_EPSILON) / possible)

    per_n = []
    for n in range(1, max_n + 1):
        logs = [math.log(p) for p in precisions[:n] if p is not None]
        per_n.append(brevity * math.exp(sum(logs) / len(logs)))
    return BleuResult(per_n=tuple(per_n), aggregate=sum(per_n) / max_n)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: Sequence[str]) -> float:
    """LCS-based F-measure (beta=1.2, recall-leaning), max over references."""
    cand = tokenize(candidate)
    if not cand:
        raise ValueError("candidate is empty after tokenization")
    best = 0.0
    saw_ref = False
    for ref in references:
        r = tokenize(ref)
        if not r:
            continue
        saw_ref = True
        lcs = _lcs_length(cand, r)
        if lcs == 0:
            continue
        prec = lcs / len(cand)
        rec = lcs / len(r)
        beta2 = ROUGE_BETA**2
        best = max(best, (1 + beta2) * prec * rec / (rec + beta2 * prec))
    if not saw_ref:
        raise ValueError("references must be non-empty")
    return best


@dataclass(frozen=True)
class CiderResult:
    raw: float
    rescaled: float
    per_sample: tuple[float, ...]


def rescale_cider(raw: float) -> float:
    """log10(raw + 1): strictly monotone map of the raw CIDEr score."""
    if raw < 0:
        raise ValueError("CIDEr raw score cannot be negative")
    return math.log10(raw + 1.0)


def cider(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    n: int = 4,
    sigma: float = 6.0,
) -> CiderResult:
    """Corpus-level CIDEr-D: TF-IDF weighted n-gram cosine similarity with
    clipping and a Gaussian length penalty, averaged over n in 1..``n``,
    scaled by 10 per convention.

    Document frequency counts reference sets, sentence length is the
    unigram token count, and the reported ``rescaled`` value is
    log10(raw + 1) clamped to 1.0 so a perfect corpus maps to exactly 1.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must be aligned")
    if len(candidates) < 2:
        raise ValueError("CIDEr needs a corpus of at least 2 samples for IDF")

    cand_tokens = [tokenize(c) for c in candidates]
    ref_tokens = [[tokenize(r) for r in refs] for refs in references]
    for i, refs in enumerate(ref_tokens):
        if not refs:
            raise ValueError(f"sample {i} has no references")

    doc_freq: Counter = Counter()
    for refs in ref_tokens:
        seen = set()
        for r in refs:
            for order in range(1, n + 1):
                seen.update(_ngram_counts(r, order))
        doc_freq.update(seen)
    log_corpus = math.log(len(candidates))

    def tfidf(tokens: list[str]):
        vecs = []
        norms = []
        for order in range(1, n + 1):
            counts = _ngram_counts(tokens, order)
            vec = {
                ng: tf * (log_corpus - math.log(max(1.0, doc_freq[ng])))
                for ng, tf in counts.items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(w * w for w in vec.values())))
        return vecs, norms, len(tokens)

    scores = []
    for cand, refs in zip(cand_tokens, ref_tokens):
        c_vecs, c_norms, c_len = tfidf(cand)
        total = 0.0
        for r in refs:
            r_vecs, r_norms, r_len = tfidf(r)
            penalty = math.exp(-((c_len - r_len) ** 2) / (2.0 * sigma**2))
            sim = 0.0
            for order in range(n):
                if c_norms[order] == 0.0 or r_norms[order] == 0.0:
                    continue
                dot = sum(
                    min(w, r_vecs[order].get(ng, 0.0)) * r_vecs[order].get(ng, 0.0)
                    for ng, w in c_vecs[order].items()
                )
                sim += dot / (c_norms[order] * r_norms[order])
            total += (sim / n) * penalty
        scores.append(10.0 * total / len(refs))

    raw = float(np.mean(scores))
    return CiderResult(
        raw=raw,
        rescaled=min(1.0, rescale_cider(raw)),
        per_sample=tuple(scores),
    )


def ade_fde(pred: Trajectory, gt: Trajectory) -> tuple[float, float]:
    """Average and final pointwise Euclidean displacement in meters."""
    if len(pred.points) != len(gt.points):
        raise ValueError(
            f"trajectory length mismatch: {len(pred.points)} vs {len(gt.points)}"
        )
    dists = [math.dist(p, g) for p, g in zip(pred.points, gt.points)]
    return (sum(dists) / len(dists), dists[-1])


def ngram_diversity(corpus: Sequence[str], n: int = 1) -> float:
    """Distinct n-grams over total n-grams (with repetition) across the corpus."""
    if not corpus:
        raise ValueError("corpus is empty")
    distinct: set = set()
    total = 0
    for sentence in corpus:
        toks = tokenize(sentence)
        grams = [tuple(toks[i : i + n]) for i in range(len(toks) - n + 1)]
        distinct.update(grams)
        total += len(grams)
    if total == 0:
        raise ValueError(f"no sentence has at least {n} tokens")
    return len(distinct) / total
