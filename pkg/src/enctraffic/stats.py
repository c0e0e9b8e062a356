"""Statistics linking encounters to traffic-profile similarity.

Pairwise cosine samples are built per (building, day) context: Z is the
set of encountered pairs, Z' every other unordered pair of that context's
users. The tests here quantify the Z vs Z' gap and its breakdowns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .devclass import DeviceType, PairCategory
from .encounter import (
    DEFAULT_T1_S,
    DEFAULT_T2_S,
    DailyPairRecord,
    DurationCategory,
    categorize_duration,
)
from .ingest import is_weekend_day
from .profiles import ContextKey, TrafficProfileMatrix, cosine_similarity

SIGNIFICANCE_LEVEL = 0.05
EXACT_MWU_MAX_N = 20


@dataclass(frozen=True)
class SimilaritySample:
    """One unordered user pair within one context."""

    building_id: str
    day_index: int
    user1_mac: str
    user2_mac: str
    cosine: float
    encountered: bool
    is_weekend: bool
    pair_category: PairCategory | None = None
    duration_category: DurationCategory | None = None
    total_duration_s: int | None = None


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n1: int
    n2: int
    method: str


def build_similarity_samples(
    contexts: Mapping[ContextKey, TrafficProfileMatrix],
    daily_records: Sequence[DailyPairRecord],
    labels: Mapping[str, DeviceType] | None = None,
    t1_s: float = DEFAULT_T1_S,
    t2_s: float = DEFAULT_T2_S,
) -> list[SimilaritySample]:
    """Cosine samples for every unordered pair in every qualifying context.

    When device labels are supplied, users that are Unknown (or missing from
    the map) are left out of the pairwise population entirely. Encountered
    pairs whose members fall outside the context user list (e.g. a session
    that crossed midnight) are skipped.
    """
    daily_by_context: dict[ContextKey, dict[tuple[str, str], DailyPairRecord]] = {}
    for rec in daily_records:
        key = (rec.building_id, rec.day_index)
        daily_by_context.setdefault(key, {})[(rec.user1_mac, rec.user2_mac)] = rec

    samples: list[SimilaritySample] = []
    for key in sorted(contexts):
        matrix = contexts[key]
        weekend = is_weekend_day(key[1])
        users = matrix.users
        if labels is not None:
            users = [
                u for u in users
                if labels.get(u, DeviceType.UNKNOWN) is not DeviceType.UNKNOWN
            ]
        rows = {u: matrix.row_of(u) for u in users}
        encounters = daily_by_context.get(key, {})
        for u1, u2 in combinations(users, 2):
            rec = encounters.get((u1, u2))
            category = None
            if labels is not None:
                from .devclass import pair_category as _pair_category

                category = _pair_category(labels[u1], labels[u2])
            if rec is not None:
                samples.append(
                    SimilaritySample(
                        building_id=key[0],
                        day_index=key[1],
                        user1_mac=u1,
                        user2_mac=u2,
                        cosine=cosine_similarity(rows[u1], rows[u2]),
                        encountered=True,
                        is_weekend=weekend,
                        pair_category=category,
                        duration_category=categorize_duration(
                            rec.total_duration_s, t1_s, t2_s
                        ),
                        total_duration_s=rec.total_duration_s,
                    )
                )
            else:
                samples.append(
                    SimilaritySample(
                        building_id=key[0],
                        day_index=key[1],
                        user1_mac=u1,
                        user2_mac=u2,
                        cosine=cosine_similarity(rows[u1], rows[u2]),
                        encountered=False,
                        is_weekend=weekend,
                        pair_category=category,
                    )
                )
    return samples


def mean_similarity_gap(
    context_samples: Sequence[SimilaritySample],
) -> tuple[float, float]:
    """(mean cosine over Z, mean cosine over Z') for one context's samples."""
    enc = [s.cosine for s in context_samples if s.encountered]
    nonenc = [s.cosine for s in context_samples if not s.encountered]
    if not enc or not nonenc:
        raise ValueError("context lacks encountered or non-encountered pairs")
    return (sum(enc) / len(enc), sum(nonenc) / len(nonenc))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties sharing the average of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i:j + 1]] = avg
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _exact_u_distribution(ranks: np.ndarray, n1: int) -> tuple[np.ndarray, np.ndarray]:
    """Counts of rank sums over all size-n1 subsets, via subset-sum counting.

    Average ranks are multiples of 1/2, so doubling makes them integers and
    the distribution of 2*R is a table indexed by integer sum.
    """
    scaled = np.rint(ranks * 2).astype(np.int64)
    total = int(scaled.sum())
    # dp[j][s] = number of ways to pick j items with doubled-rank sum s
    dp = np.zeros((n1 + 1, total + 1), dtype=float)
    dp[0][0] = 1.0
    for value in scaled:
        for j in range(min(n1, 1_000_000), 0, -1):
            dp[j, value:] += dp[j - 1, : total + 1 - value]
    sums = np.nonzero(dp[n1] > 0)[0]
    return sums, dp[n1][sums]


def mann_whitney_u(
    a: Sequence[float],
    b: Sequence[float],
    exact: bool | None = None,
) -> TestResult:
    """Two-sided Mann-Whitney U test.

    Small samples (n1+n2 <= 20, or ``exact=True``) use the exact permutation
    distribution of U over all label assignments, which handles ties by
    construction. Larger samples use the normal approximation with average
    ranks, tie-corrected variance and a continuity correction.
    """
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    n1, n2 = x.size, y.size
    if n1 < 1 or n2 < 1:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([x, y])
    ranks = _average_ranks(pooled)
    r1 = float(ranks[:n1].sum())
    u1 = n1 * n2 + n1 * (n1 + 1) / 2.0 - r1
    u2 = n1 * n2 - u1

    if np.all(pooled == pooled[0]):
        return TestResult(u1, 1.0, n1, n2, "mwu-degenerate")

    if exact is None:
        exact = (n1 + n2) <= EXACT_MWU_MAX_N
    if exact:
        sums, counts = _exact_u_distribution(ranks, n1)
        # doubled rank sum -> U of the chosen subset
        u_values = n1 * n2 + n1 * (n1 + 1) / 2.0 - sums / 2.0
        total = counts.sum()
        u_lo = min(u1, u2)
        u_hi = n1 * n2 - u_lo
        p = (counts[u_values <= u_lo].sum() + counts[u_values >= u_hi].sum()) / total
        return TestResult(u1, min(1.0, float(p)), n1, n2, "mwu-exact")

    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    correction = 1.0 - tie_term / (n**3 - n)
    sd = math.sqrt(correction * n1 * n2 * (n + 1) / 12.0)
    if sd == 0.0:
        return TestResult(u1, 1.0, n1, n2, "mwu-degenerate")
    mu = n1 * n2 / 2.0
    if u1 > mu:
        z = (u1 - mu - 0.5) / sd
    elif u1 < mu:
        z = (u1 - mu + 0.5) / sd
    else:
        z = 0.0
    p = min(1.0, 2.0 * _normal_sf(abs(z)))
    return TestResult(u1, p, n1, n2, "mwu-normal")


def correlation(
    x: Sequence[float],
    y: Sequence[float],
    method: str = "pearson",
) -> float:
    """Pearson or Spearman coefficient; NaN when either series is constant."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.size != ya.size:
        raise ValueError(f"length mismatch: {xa.size} vs {ya.size}")
    if xa.size < 3:
        raise ValueError(f"need at least 3 points, got {xa.size}")
    if method == "spearman":
        xa = _average_ranks(xa)
        ya = _average_ranks(ya)
    elif method != "pearson":
        raise ValueError(f"unknown method {method!r}")
    xd = xa - xa.mean()
    yd = ya - ya.mean()
    sx = float(np.sqrt(np.sum(xd * xd)))
    sy = float(np.sqrt(np.sum(yd * yd)))
    if sx == 0.0 or sy == 0.0:
        return math.nan
    return float(np.sum(xd * yd) / (sx * sy))


@dataclass(frozen=True)
class LogisticFit:
    intercept: float
    slope: float
    slope_p_value: float
    iterations: int
    converged: bool
    separated: bool


def logistic_fit(
    similarity: Sequence[float],
    encountered: Sequence[bool],
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticFit:
    """Single-feature logistic regression by iteratively reweighted least squares."""
    x = np.asarray(similarity, dtype=float)
    y = np.asarray(encountered, dtype=float)
    if x.size != y.size:
        raise ValueError("length mismatch")
    if x.size < 10:
        raise ValueError(f"need at least 10 samples, got {x.size}")
    if y.min() == y.max():
        raise ValueError("both classes must be present")

    design = np.column_stack([np.ones_like(x), x])
    beta = np.zeros(2)
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = design @ beta
        prob = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
        weight = np.clip(prob * (1.0 - prob), 1e-12, None)
        # working response for the Newton step
        z = eta + (y - prob) / weight
        wx = design * weight[:, None]
        hessian = design.T @ wx
        try:
            beta_new = np.linalg.solve(hessian, wx.T @ z)
        except np.linalg.LinAlgError:
            break
        delta = float(np.max(np.abs(beta_new - beta)))
        beta = beta_new
        if delta < tol:
            converged = True
            break

    eta = design @ beta
    prob = 1.0 / (1.0 + np.exp(-np.clip(eta, -500, 500)))
    weight = np.clip(prob * (1.0 - prob), 1e-12, None)
    hessian = design.T @ (design * weight[:, None])
    separated = not converged or bool(
        np.all((prob > 0.5) == (y > 0.5)) and np.all(np.abs(eta) > 10)
    )
    try:
        cov = np.linalg.inv(hessian)
        se = math.sqrt(max(cov[1, 1], 0.0))
    except np.linalg.LinAlgError:
        se = math.inf
    if se == 0.0 or not math.isfinite(se):
        p = 1.0
    else:
        z_stat = beta[1] / se
        p = min(1.0, 2.0 * _normal_sf(abs(z_stat)))
    return LogisticFit(
        intercept=float(beta[0]),
        slope=float(beta[1]),
        slope_p_value=p,
        iterations=iterations,
        converged=converged,
        separated=separated,
    )


@dataclass
class GroupStats:
    """Distribution summary for one breakdown cell."""

    keys: dict[str, object]
    encountered: bool
    n: int
    mean: float
    median: float
    values: list[float]
    mwu_vs_nonencountered: TestResult | None = None
    duration_similarity_rho: float | None = None


def _group_key_of(sample: SimilaritySample, keys: Sequence[str]) -> tuple | None:
    parts = []
    for key in keys:
        value = getattr(sample, key)
        if value is None:
            return None
        parts.append(value.value if hasattr(value, "value") else value)
    return tuple(parts)


def group_breakdown(
    samples: Sequence[SimilaritySample],
    keys: Sequence[str],
    min_group_size: int = 20,
) -> list[GroupStats]:
    """Similarity distributions per encountered subgroup, plus baselines.

    Encountered samples are grouped by ``keys`` (any of pair_category,
    is_weekend, duration_category); each group is tested against the pooled
    non-encountered samples. Non-encountered samples are also grouped by
    whichever keys apply to them, for CDF comparison. Groups smaller than
    ``min_group_size`` are suppressed.
    """
    allowed = {"pair_category", "is_weekend", "duration_category"}
    if not set(keys) <= allowed:
        raise ValueError(f"keys must be a subset of {sorted(allowed)}")
    nonenc_pool = [s.cosine for s in samples if not s.encountered]
    nonenc_keys = [k for k in keys if k != "duration_category"]

    grouped_enc: dict[tuple, list[SimilaritySample]] = {}
    grouped_non: dict[tuple, list[SimilaritySample]] = {}
    for sample in samples:
        if sample.encountered:
            key = _group_key_of(sample, keys)
            if key is not None:
                grouped_enc.setdefault(key, []).append(sample)
        else:
            key = _group_key_of(sample, nonenc_keys)
            if key is not None:
                grouped_non.setdefault(key, []).append(sample)

    out: list[GroupStats] = []
    for key in sorted(grouped_enc, key=repr):
        members = grouped_enc[key]
        if len(members) < min_group_size:
            continue
        values = sorted(s.cosine for s in members)
        durations = [float(s.total_duration_s) for s in members]
        sims = [s.cosine for s in members]
        rho = correlation(durations, sims) if len(members) >= 3 else math.nan
        mwu = (
            mann_whitney_u(sims, nonenc_pool)
            if nonenc_pool
            else None
        )
        out.append(
            GroupStats(
                keys=dict(zip(keys, key)),
                encountered=True,
                n=len(members),
                mean=float(np.mean(values)),
                median=float(np.median(values)),
                values=values,
                mwu_vs_nonencountered=mwu,
                duration_similarity_rho=rho,
            )
        )
    for key in sorted(grouped_non, key=repr):
        members = grouped_non[key]
        if len(members) < min_group_size:
            continue
        values = sorted(s.cosine for s in members)
        out.append(
            GroupStats(
                keys=dict(zip(nonenc_keys, key)),
                encountered=False,
                n=len(members),
                mean=float(np.mean(values)),
                median=float(np.median(values)),
                values=values,
            )
        )
    return out


def daily_correlation_series(
    samples: Sequence[SimilaritySample],
    building_id: str,
    min_pairs: int = 20,
) -> list[tuple[int, float]]:
    """Per-day Pearson rho of (duration, similarity) over encountered pairs.

    Days with fewer than ``min_pairs`` encountered pairs are omitted (gaps);
    zero-variance days appear with a NaN coefficient.
    """
    by_day: dict[int, list[SimilaritySample]] = {}
    for s in samples:
        if s.building_id == building_id and s.encountered:
            by_day.setdefault(s.day_index, []).append(s)
    series: list[tuple[int, float]] = []
    for day in sorted(by_day):
        members = by_day[day]
        if len(members) < min_pairs:
            continue
        durations = [float(s.total_duration_s) for s in members]
        sims = [s.cosine for s in members]
        series.append((day, correlation(durations, sims)))
    return series


@dataclass(frozen=True)
class ContextGap:
    building_id: str
    day_index: int
    enc_mean: float
    nonenc_mean: float
    mwu: TestResult
    n_encountered: int
    n_nonencountered: int


@dataclass
class GapSummary:
    contexts: list[ContextGap]
    skipped: list[tuple[str, int, str]]
    positive_fraction: float
    significant_fraction: float


def context_gap_summary(samples: Sequence[SimilaritySample]) -> GapSummary:
    """Per-context enc/nonenc means and MWU, with overall share estimates."""
    by_context: dict[ContextKey, list[SimilaritySample]] = {}
    for s in samples:
        by_context.setdefault((s.building_id, s.day_index), []).append(s)
    contexts: list[ContextGap] = []
    skipped: list[tuple[str, int, str]] = []
    for key in sorted(by_context):
        группа = by_context[key]
        enc = [s.cosine for s in группа if s.encountered]
        nonenc = [s.cosine for s in группа if not s.encountered]
        if not enc or not nonenc:
            skipped.append((key[0], key[1], "empty-Z-or-Zprime"))
            continue
        mwu = mann_whitney_u(enc, nonenc)
        contexts.append(
            ContextGap(
                building_id=key[0],
                day_index=key[1],
                enc_mean=float(np.mean(enc)),
                nonenc_mean=float(np.mean(nonenc)),
                mwu=mwu,
                n_encountered=len(enc),
                n_nonencountered=len(nonenc),
            )
        )
    if contexts:
        positive = sum(1 for c in contexts if c.enc_mean > c.nonenc_mean)
        significant = sum(
            1 for c in contexts if c.mwu.p_value < SIGNIFICANCE_LEVEL
        )
        pos_frac = positive / len(contexts)
        sig_frac = significant / len(contexts)
    else:
        pos_frac = sig_frac = math.nan
    return GapSummary(
        contexts=contexts,
        skipped=skipped,
        positive_fraction=pos_frac,
        significant_fraction=sig_frac,
    )


def cdf_points(values: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF sample points: (value, cumulative probability)."""
    ordered = sorted(values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]
