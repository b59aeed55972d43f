"""Episode metrics, aggregation, and nonparametric significance tests.

The rank tests take exact enumeration paths at small sample sizes and
tie-corrected normal approximations (with continuity correction) otherwise.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .simenv import EpisodeTrace

EXACT_LIMIT = 12  # largest sample size routed to exact enumeration


class EmptyTrace(Exception):
    """Metrics need at least one resolved step and food."""


class AllZeroDiffs(Exception):
    """Signed-rank test is undefined when every difference is zero."""


@dataclass(frozen=True)
class EpisodeMetrics:
    w_task: float
    r_task_avg: float
    delta_wl: float
    m_wt: float
    f_q: float
    f_fail_food: float
    f_auto_food: float
    t_conv: tuple[int, ...]

    @property
    def t_conv_mean(self) -> float:
        return float(np.mean(self.t_conv))


def compute_metrics(trace: EpisodeTrace, w_task: float) -> EpisodeMetrics:
    """Fold one episode trace into the evaluation metrics.

    r_task_avg averages the per-step expected task reward; delta_wl is the
    terminal minus initial workload; m_wt trades the two off with weight
    w_task. The f_* fractions are per-food: queried at least once, failed at
    the attempt cap, or converged fully autonomously.
    """
    if not trace.steps or not trace.foods:
        raise EmptyTrace("trace has no resolved steps")
    r_task_avg = float(np.mean([s.expected_reward for s in trace.steps]))
    delta_wl = trace.final_workload - trace.initial_workload
    n_foods = len(trace.foods)
    return EpisodeMetrics(
        w_task=w_task,
        r_task_avg=r_task_avg,
        delta_wl=delta_wl,
        m_wt=w_task * r_task_avg - (1 - w_task) * delta_wl,
        f_q=sum(f.queried for f in trace.foods) / n_foods,
        f_fail_food=sum(f.failed for f in trace.foods) / n_foods,
        f_auto_food=sum(f.converged and not f.queried for f in trace.foods) / n_foods,
        t_conv=tuple(f.attempts for f in trace.foods),
    )


@dataclass(frozen=True)
class AggregateStats:
    mean: float
    std: float  # unbiased (ddof=1); 0 for a single run
    sem: float
    n: int


def aggregate(values: Iterable[float]) -> AggregateStats:
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        raise ValueError("aggregate needs at least one value")
    std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
    return AggregateStats(
        mean=float(np.mean(vals)), std=std, sem=std / math.sqrt(vals.size), n=int(vals.size)
    )


def format_mean_std(stats: AggregateStats, digits: int = 3) -> str:
    return f"{stats.mean:.{digits}f} ± {stats.std:.{digits}f}"


class TestResult(NamedTuple):
    statistic: float
    pvalue: float


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2))


def _normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2))


def _rankdata(values: np.ndarray) -> np.ndarray:
    """Midranks (average ranks for ties), 1-based."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _tie_term(values: np.ndarray) -> float:
    return float(sum(t**3 - t for t in Counter(values.tolist()).values()))


def _rank_sum_counts(n1: int, n: int) -> dict[int, int]:
    """Distribution of the size-n1 subset rank sum over ranks 1..n.

    table[k][s] counts subsets of size k with rank sum s among the ranks
    processed so far.
    """
    table = [{0: 1}] + [dict() for _ in range(n1)]
    for rank in range(1, n + 1):
        for k in range(min(rank, n1), 0, -1):
            for s, c in table[k - 1].items():
                table[k][s + rank] = table[k].get(s + rank, 0) + c
    return table[n1]


def mann_whitney_u(
    x: Sequence[float],
    y: Sequence[float],
    alternative: str = "two_sided",
    method: str = "auto",
) -> TestResult:
    """Rank-sum test of two independent samples.

    Returns U for the first sample (count of (x > y) pairs, with half
    credit for ties). ``method`` "auto" uses exact enumeration when
    n1 + n2 <= 12 and the pooled sample is tieless, else the tie-corrected
    normal approximation with continuity correction.
    """
    if alternative not in ("less", "greater", "two_sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ValueError("both samples must be nonempty")
    n1, n2 = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = _rankdata(pooled)
    r1 = float(np.sum(ranks[:n1]))
    u = r1 - n1 * (n1 + 1) / 2
    has_ties = len(set(pooled.tolist())) < n1 + n2

    if method == "auto":
        method = "exact" if (n1 + n2 <= EXACT_LIMIT and not has_ties) else "approx"
    if method == "exact":
        if has_ties:
            raise ValueError("exact path requires tieless samples")
        counts = _rank_sum_counts(n1, n1 + n2)
        total = math.comb(n1 + n2, n1)
        offset = n1 * (n1 + 1) / 2
        le = sum(c for s, c in counts.items() if s - offset <= u + 1e-12) / total
        ge = sum(c for s, c in counts.items() if s - offset >= u - 1e-12) / total
        if alternative == "less":
            p = le
        elif alternative == "greater":
            p = ge
        else:
            p = min(1.0, 2 * min(le, ge))
        return TestResult(float(u), float(p))

    mu = n1 * n2 / 2
    n = n1 + n2
    var = n1 * n2 / 12 * ((n + 1) - _tie_term(pooled) / (n * (n - 1)))
    if var <= 0:
        return TestResult(float(u), 1.0)
    sigma = math.sqrt(var)
    if alternative == "less":
        p = _normal_cdf((u - mu + 0.5) / sigma)
    elif alternative == "greater":
        p = _normal_sf((u - mu - 0.5) / sigma)
    else:
        shift = abs(u - mu) - 0.5
        p = min(1.0, 2 * _normal_sf(shift / sigma))
    return TestResult(float(u), float(p))


def wilcoxon_signed_rank(
    diffs: Sequence[float],
    alternative: str = "two_sided",
    method: str = "auto",
) -> TestResult:
    """Signed-rank test of paired differences (zeros dropped before ranking).

    Returns W+, the positive-rank sum. ``method`` "auto" enumerates all sign
    patterns when at most 12 nonzero diffs remain, else applies the
    tie-corrected normal approximation with continuity correction.
    """
    if alternative not in ("less", "greater", "two_sided"):
        raise ValueError(f"unknown alternative {alternative!r}")
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    if d.size == 0:
        raise AllZeroDiffs("all paired differences are zero")
    n = d.size
    ranks = _rankdata(np.abs(d))
    w_plus = float(np.sum(ranks[d > 0]))

    if method == "auto":
        method = "exact" if n <= EXACT_LIMIT else "approx"
    if method == "exact":
        # Conditional permutation distribution: flip each sign independently.
        patterns = np.arange(2**n)[:, None] >> np.arange(n) & 1
        sums = patterns @ ranks
        le = float(np.mean(sums <= w_plus + 1e-12))
        ge = float(np.mean(sums >= w_plus - 1e-12))
        if alternative == "less":
            p = le
        elif alternative == "greater":
            p = ge
        else:
            p = min(1.0, 2 * min(le, ge))
        return TestResult(w_plus, float(p))

    mu = n * (n + 1) / 4
    var = n * (n + 1) * (2 * n + 1) / 24 - _tie_term(np.abs(d)) / 48
    if var <= 0:
        return TestResult(w_plus, 1.0)
    sigma = math.sqrt(var)
    if alternative == "less":
        p = _normal_cdf((w_plus - mu + 0.5) / sigma)
    elif alternative == "greater":
        p = _normal_sf((w_plus - mu - 0.5) / sigma)
    else:
        shift = abs(w_plus - mu) - 0.5
        p = min(1.0, 2 * _normal_sf(shift / sigma))
    return TestResult(w_plus, float(p))
