"""Majority-vote ensembles over stored prediction matrices.

The subset counter reports, for every non-empty subset of models in a chosen
size family, how many test samples the subset's majority vote gets right.

Counting is exact. Samples on which all models agree contribute a constant,
and identical disagreement columns are merged with a multiplicity. For a
contested sample with true label ``L``, the vote of subset ``S`` is correct
iff, for every other class ``c`` that some model predicts there,

    votes_L(S) - votes_c(S) >= (0 if L < c else 1)

(the tie rule gives ties to the lowest class index). Each vote difference is a
sum over models, so it splits into a part from the low model bits and a part
from the high bits. Tables of the low part over all ``2**low`` low masks are
built incrementally, each entry from the mask with one model fewer, and every
high-bit prefix then costs one vectorized comparison per condition.
"""

from __future__ import annotations

import itertools
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .predictions import PredictionMatrix

TIE_BREAKS = ("lowest", "first-model")
DEFAULT_MAX_MODELS = 32
MEMORY_BUDGET = 1 << 30  # bytes for low-half tables


def _preds_array(preds) -> np.ndarray:
    preds = np.asarray(preds)
    if preds.ndim == 1:
        preds = preds[None, :]
    if preds.ndim != 2 or preds.shape[0] < 1:
        raise ValueError(f"predictions must be a (k, n) array with k >= 1, got shape {preds.shape}")
    return preds


def vote_counts(preds, class_count: int = 10) -> np.ndarray:
    """``(n, class_count)`` number of models voting for each class."""
    preds = _preds_array(preds)
    n = preds.shape[1]
    flat = (preds.astype(np.intp) + np.arange(n) * class_count).ravel()
    return np.bincount(flat, minlength=n * class_count).reshape(n, class_count)


def majority_vote(preds, tie_break: str = "lowest", class_count: Optional[int] = None) -> np.ndarray:
    """Per-sample plurality class of a ``(k, n)`` prediction array.

    ``tie_break="lowest"`` resolves ties to the lowest tied class index (order
    independent); ``"first-model"`` picks the tied class voted by the earliest
    model in row order.
    """
    preds = _preds_array(preds)
    if tie_break not in TIE_BREAKS:
        raise ValueError(f"tie_break must be one of {TIE_BREAKS}, got {tie_break!r}")
    m = int(class_count if class_count is not None else preds.max() + 1)
    counts = vote_counts(preds, m)
    if tie_break == "lowest":
        return counts.argmax(axis=1).astype(preds.dtype)
    top = counts.max(axis=1, keepdims=True)
    tied = counts == top
    cols = np.arange(preds.shape[1])
    out = np.full(preds.shape[1], -1, dtype=np.int64)
    for row in preds:
        pick = (out < 0) & tied[cols, row]
        out[pick] = row[pick]
    return out.astype(preds.dtype)


def ensemble_accuracy(preds, labels, tie_break: str = "lowest") -> float:
    labels = np.asarray(labels)
    voted = majority_vote(preds, tie_break, class_count=int(max(np.max(preds), labels.max(initial=0))) + 1)
    return float(np.mean(voted == labels))


# -- subset families ---------------------------------------------------------------


def parse_sizes(family: str, k: int) -> np.ndarray:
    """Boolean table ``allowed[size]`` for ``size in 0..k``.

    ``"all"``: every non-empty subset. ``"odd"``: odd sizes. ``"A-B"``: sizes
    ``A..B`` inclusive, either end may be omitted (``"2-"`` = at least two).
    """
    family = family.strip().lower()
    allowed = np.zeros(k + 1, dtype=bool)
    if family == "all":
        allowed[1:] = True
    elif family == "odd":
        allowed[1::2] = True
    else:
        m = re.fullmatch(r"(\d*)\s*[-:]\s*(\d*)", family) or re.fullmatch(r"(\d+)()", family)
        if not m:
            raise ConfigError(f"unknown subset family {family!r}; use all, odd or A-B")
        lo = int(m.group(1)) if m.group(1) else 1
        hi = int(m.group(2)) if m.group(2) else (k if "-" in family or ":" in family else lo)
        lo = max(lo, 1)
        if lo > hi:
            raise ConfigError(f"empty subset size range {family!r}")
        allowed[lo : min(hi, k) + 1] = True
    return allowed


def family_size(allowed: np.ndarray) -> int:
    k = len(allowed) - 1
    return sum(math.comb(k, s) for s in range(k + 1) if allowed[s])


# -- report --------------------------------------------------------------------------


def _bp(threshold_percent: float) -> int:
    return int(round(threshold_percent * 100))


@dataclass
class SubsetCountReport:
    """Exact distribution of majority-vote accuracy over a subset family.

    ``histogram[c]`` is the number of subsets that classify exactly ``c`` of
    the ``n`` samples correctly. Thresholds are percentages at 0.01%
    granularity.
    """

    k: int
    n: int
    family: str
    histogram: np.ndarray
    thresholds: list = field(default_factory=list)
    tie_break: str = "lowest"
    approximate: bool = False

    @property
    def total(self) -> int:
        return int(self.histogram.sum())

    def count_at_least(self, threshold_percent: float) -> int:
        """Subsets with accuracy >= threshold."""
        need = -(-_bp(threshold_percent) * self.n // 10000)  # ceil
        return int(self.histogram[need:].sum())

    def count_at_level(self, level_percent: float) -> int:
        """Subsets whose accuracy, truncated to 0.01%, equals ``level_percent``."""
        bp = _bp(level_percent)
        lo = -(-bp * self.n // 10000)
        hi = -(-(bp + 1) * self.n // 10000)
        return int(self.histogram[lo:hi].sum())

    @property
    def at_least(self) -> list:
        return [self.count_at_least(t) for t in self.thresholds]

    @property
    def at_level(self) -> list:
        return [self.count_at_level(t) for t in self.thresholds]

    def best_accuracy(self) -> float:
        nz = np.flatnonzero(self.histogram)
        return float(nz[-1] / self.n) if nz.size else float("nan")

    def to_text(self) -> str:
        kind = "sampled" if self.approximate else "exact"
        lines = [
            f"models: {self.k}  samples: {self.n}  family: {self.family}  tie-break: {self.tie_break}",
            f"subsets evaluated: {self.total:,} ({kind})",
            f"best subset accuracy: {100 * self.best_accuracy():.2f}%",
            f"{'threshold':>10} {'at level':>16} {'at least':>16}",
        ]
        for t, lvl, al in zip(self.thresholds, self.at_level, self.at_least):
            lines.append(f"{t:>9.2f}% {lvl:>16,} {al:>16,}")
        return "\n".join(lines)


# -- brute force -----------------------------------------------------------------------


def enumerate_subsets_naive(
    matrix: PredictionMatrix, sizes: str = "all", thresholds=(), tie_break: str = "lowest"
) -> SubsetCountReport:
    """Reference counter: majority vote of every subset, one at a time."""
    k, n = matrix.k, matrix.n
    allowed = parse_sizes(sizes, k)
    hist = np.zeros(n + 1, dtype=np.int64)
    for size in range(1, k + 1):
        if not allowed[size]:
            continue
        for combo in itertools.combinations(range(k), size):
            voted = majority_vote(matrix.preds[list(combo)], tie_break, matrix.class_count)
            hist[int(np.count_nonzero(voted == matrix.labels))] += 1
    return SubsetCountReport(k, n, sizes, hist, list(thresholds), tie_break)


# -- optimized ---------------------------------------------------------------------------


@dataclass
class _Condition:
    plus: int  # model bitmask voting for the true label
    minus: int  # model bitmask voting for the rival class
    need: int  # required margin


@dataclass
class _Pattern:
    weight: int
    conditions: list


def _patterns(matrix: PredictionMatrix):
    """Split samples into a constant part and merged contested columns."""
    preds, labels = matrix.preds, matrix.labels
    unanimous = (preds == preds[0]).all(axis=0)
    base = int(np.count_nonzero(unanimous & (preds[0] == labels)))
    contested = np.flatnonzero(~unanimous)
    if contested.size == 0:
        return base, []
    cols = np.vstack([labels[contested][None, :], preds[:, contested]])
    uniq, counts = np.unique(cols, axis=1, return_counts=True)
    k = matrix.k
    bits = [1 << j for j in range(k)]
    patterns = []
    for col, weight in zip(uniq.T, counts):
        label, votes = int(col[0]), col[1:]
        plus = sum(bits[j] for j in range(k) if votes[j] == label)
        if plus == 0:
            continue  # the true class never wins
        conds = []
        for c in sorted(set(int(v) for v in votes) - {label}):
            minus = sum(bits[j] for j in range(k) if votes[j] == c)
            conds.append(_Condition(plus, minus, 0 if label < c else 1))
        patterns.append(_Pattern(int(weight), conds))
    return base, patterns


def _delta_table(plus: int, minus: int, nbits: int) -> np.ndarray:
    """``table[mask] = popcount(mask & plus) - popcount(mask & minus)`` over nbits-bit masks."""
    table = np.zeros(1, dtype=np.int8)
    for j in range(nbits):
        step = ((plus >> j) & 1) - ((minus >> j) & 1)
        table = np.concatenate([table, table + np.int8(step)])
    return table


def _popcount_table(nbits: int) -> np.ndarray:
    table = np.zeros(1, dtype=np.uint8)
    for _ in range(nbits):
        table = np.concatenate([table, table + np.uint8(1)])
    return table


def enumerate_subsets(
    matrix: PredictionMatrix,
    sizes: str = "all",
    thresholds=(),
    tie_break: str = "lowest",
    max_models: int = DEFAULT_MAX_MODELS,
    threads: int = 1,
    low_bits: int = 18,
) -> SubsetCountReport:
    """Exact accuracy histogram over every subset in the ``sizes`` family."""
    k, n = matrix.k, matrix.n
    if k > max_models:
        raise ConfigError(
            f"{k} models exceed the exhaustive limit of {max_models}; "
            "use sampling mode (sample_subsets / --sample N) for an estimate"
        )
    if tie_break != "lowest":
        return enumerate_subsets_naive(matrix, sizes, thresholds, tie_break)
    allowed = parse_sizes(sizes, k)
    base, patterns = _patterns(matrix)
    conditions = [c for p in patterns for c in p.conditions]
    lb = min(k, low_bits)
    # shrink the low half until its tables fit; the work stays 2**k per condition
    while lb > 1 and (len(conditions) + 4) * (1 << lb) * 2 > MEMORY_BUDGET:
        lb -= 1
    hb = k - lb

    low_mask = (1 << lb) - 1
    low_tables = [
        [(_delta_table(c.plus & low_mask, c.minus & low_mask, lb), c.need, c.plus >> lb, c.minus >> lb) for c in p.conditions]
        for p in patterns
    ]
    weights = [p.weight for p in patterns]
    contested_total = sum(weights)
    acc_dtype = np.uint16 if contested_total < (1 << 16) else np.uint32
    pop_low = _popcount_table(lb)

    def run(highs):
        hist = np.zeros(n + 1, dtype=np.int64)
        acc = np.empty(1 << lb, dtype=acc_dtype)
        ok = np.empty(1 << lb, dtype=bool)
        tmp = np.empty(1 << lb, dtype=bool)
        for h in highs:
            hpop = bin(h).count("1")
            size_ok = allowed[np.minimum(pop_low.astype(np.intp) + hpop, k)]
            if h == 0:
                size_ok = size_ok.copy()
                size_ok[0] = False  # empty subset
            if not size_ok.any():
                continue
            acc.fill(0)
            for tables, w in zip(low_tables, weights):
                first = True
                for table, need, hplus, hminus in tables:
                    # high-bit contribution is a constant for this prefix
                    thr = need - (bin(h & hplus).count("1") - bin(h & hminus).count("1"))
                    if first:
                        np.greater_equal(table, thr, out=ok)
                        first = False
                    else:
                        np.greater_equal(table, thr, out=tmp)
                        ok &= tmp
                if w == 1:
                    np.add(acc, ok, out=acc, casting="unsafe")
                else:
                    acc += ok.astype(acc_dtype) * acc_dtype(w)
            hist[base : base + contested_total + 1] += np.bincount(acc[size_ok], minlength=contested_total + 1)
        return hist

    highs = list(range(1 << hb))
    threads = max(1, min(threads, len(highs)))
    if threads == 1:
        hist = run(highs)
    else:
        shards = [highs[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hist = sum(pool.map(run, shards))
    return SubsetCountReport(k, n, sizes, hist, list(thresholds), tie_break)


def sample_subsets(
    matrix: PredictionMatrix, samples: int, sizes: str = "all", thresholds=(), seed: int = 0, tie_break: str = "lowest"
) -> SubsetCountReport:
    """Monte Carlo fallback for large k: histogram over ``samples`` random subsets."""
    k, n = matrix.k, matrix.n
    allowed = parse_sizes(sizes, k)
    size_choices = np.flatnonzero(allowed)
    probs = np.array([math.comb(k, int(s)) for s in size_choices], dtype=np.float64)
    probs /= probs.sum()
    rng = np.random.default_rng(seed)
    hist = np.zeros(n + 1, dtype=np.int64)
    for _ in range(samples):
        size = int(rng.choice(size_choices, p=probs))
        models = rng.choice(k, size=size, replace=False)
        voted = majority_vote(matrix.preds[models], tie_break, matrix.class_count)
        hist[int(np.count_nonzero(voted == matrix.labels))] += 1
    return SubsetCountReport(k, n, sizes, hist, list(thresholds), tie_break, approximate=True)


# -- troublesome samples ------------------------------------------------------------------


@dataclass
class TroublesomeReport:
    correct_counts: np.ndarray  # (n,) number of models right on each sample
    k: int

    @property
    def all_wrong(self) -> np.ndarray:
        return np.flatnonzero(self.correct_counts == 0)

    @property
    def majority_wrong(self) -> np.ndarray:
        """Samples misclassified by more models than classified them correctly."""
        return np.flatnonzero(2 * self.correct_counts < self.k)

    @property
    def disagreed(self) -> np.ndarray:
        """Samples some models get right and others wrong."""
        return np.flatnonzero((self.correct_counts > 0) & (self.correct_counts < self.k))

    @property
    def agreement(self) -> int:
        """Samples on which every model is right or every model is wrong."""
        return int(len(self.correct_counts) - len(self.disagreed))

    def to_text(self, labels=None) -> str:
        lines = [
            f"models: {self.k}  samples: {len(self.correct_counts)}",
            f"total agreement: {self.agreement}",
            f"misclassified by all models ({len(self.all_wrong)}): {' '.join(map(str, self.all_wrong))}",
            f"misclassified by a majority ({len(self.majority_wrong)}): {' '.join(map(str, self.majority_wrong))}",
            f"disagreed upon ({len(self.disagreed)}):",
        ]
        for i in self.disagreed:
            label = f" label {labels[i]}" if labels is not None else ""
            lines.append(f"  index {i}{label}: {self.correct_counts[i]} of {self.k} correct")
        return "\n".join(lines)


def troublesome_digits(matrix: PredictionMatrix) -> TroublesomeReport:
    correct = (matrix.preds == matrix.labels).sum(axis=0)
    return TroublesomeReport(correct.astype(np.int64), matrix.k)
