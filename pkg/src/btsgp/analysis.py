"""Aggregation of finished runs: MMAE, speedups, rank-sum tests and report files."""

from __future__ import annotations

import csv
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ConfigResult",
    "ComparisonRow",
    "ComparisonTable",
    "mmae",
    "top_k_configs",
    "speedup",
    "wilcoxon_rank_sum",
    "holm_adjust",
    "build_comparison_table",
    "config_result_from_records",
    "write_report",
    "safe_name",
]


def _median(xs: Sequence[float]) -> float:
    s = sorted(xs)
    if not s:
        raise ValueError("median of an empty sequence")
    n = len(s)
    mid = n // 2
    return s[mid] if n % 2 else (s[mid - 1] + s[mid]) / 2.0


@dataclass(frozen=True)
class ConfigResult:
    """Per-run outcomes of one selection configuration on one dataset."""

    config_id: str
    per_run_final_test_mae: tuple[float, ...]
    per_run_total_seconds: tuple[float, ...]
    per_generation_median_curve: tuple[float, ...] = ()
    per_run_final_train_mae: tuple[float, ...] = ()
    per_generation_median_diversity: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("per_run_final_test_mae", "per_run_total_seconds",
                     "per_generation_median_curve", "per_run_final_train_mae",
                     "per_generation_median_diversity"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if not self.per_run_final_test_mae or not self.per_run_total_seconds:
            raise ValueError(f"{self.config_id}: no runs")
        values = (self.per_run_final_test_mae + self.per_run_total_seconds
                  + self.per_generation_median_curve + self.per_run_final_train_mae)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"{self.config_id}: non-finite values")
        if min(self.per_run_total_seconds) <= 0:
            raise ValueError(f"{self.config_id}: run times must be positive")

    @property
    def n_runs(self) -> int:
        return len(self.per_run_final_test_mae)

    @property
    def test_mmae(self) -> float:
        return mmae(self.per_run_final_test_mae)

    @property
    def train_mmae(self) -> float:
        return mmae(self.per_run_final_train_mae or self.per_run_final_test_mae)


def mmae(results: Sequence[float]) -> float:
    """Median of per-run MAEs; even counts average the two central values."""
    return _median(list(results))


def top_k_configs(results: Iterable[ConfigResult], k: int = 5) -> list[str]:
    """The ``k`` configs with the lowest training MMAE; ties go to the smaller id."""
    ranked = sorted(results, key=lambda r: (r.train_mmae, r.config_id))
    if len(ranked) < k:
        raise ValueError(f"need at least {k} configurations, got {len(ranked)}")
    return [r.config_id for r in ranked[:k]]


def speedup(baseline: ConfigResult, other: ConfigResult) -> float:
    return _median(baseline.per_run_total_seconds) / _median(other.per_run_total_seconds)


def _midranks(values: Sequence[float]) -> tuple[np.ndarray, list[int]]:
    """Average ranks (1-based) and the sizes of tied groups."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    ties = []
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def wilcoxon_rank_sum(a: Sequence[float], b: Sequence[float], method: str = "auto") -> float:
    """Two-sided rank-sum p-value for samples ``a`` and ``b``.

    With ``method="auto"``, small tie-free problems (``len(a) + len(b) <= 12``)
    are solved exactly by enumerating every assignment of ranks to ``a``;
    anything else uses a normal approximation with tie and continuity
    corrections. ``"exact"`` and ``"normal"`` force one route.
    """
    m, n = len(a), len(b)
    if m < 3 or n < 3:
        raise ValueError("each sample needs at least 3 values")
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    ranks, ties = _midranks(list(a) + list(b))
    if len(ties) == 1:
        return 1.0
    w = float(ranks[:m].sum())
    N = m + n
    if method == "exact" and max(ties) > 1:
        raise ValueError("exact enumeration needs tie-free samples")
    if method == "exact" or (method == "auto" and N <= 12 and max(ties) == 1):
        counts: dict[int, int] = {}
        for combo in itertools.combinations(range(1, N + 1), m):
            s = sum(combo)
            counts[s] = counts.get(s, 0) + 1
        total = math.comb(N, m)
        w_int = int(round(w))
        lo = sum(c for s, c in counts.items() if s <= w_int) / total
        hi = sum(c for s, c in counts.items() if s >= w_int) / total
        return min(1.0, 2.0 * min(lo, hi))
    u = w - m * (m + 1) / 2.0
    mu = m * n / 2.0
    tie_term = sum(t ** 3 - t for t in ties) / (N * (N - 1))
    var = m * n / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def holm_adjust(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, in the input order."""
    p = [float(x) for x in p_values]
    if any(not 0.0 <= x <= 1.0 for x in p):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    adjusted = [0.0] * m
    running = 0.0
    for rank, i in enumerate(sorted(range(m), key=lambda i: p[i])):
        running = max(running, min(1.0, (m - rank) * p[i]))
        adjusted[i] = running
    return adjusted


@dataclass(frozen=True)
class ComparisonRow:
    config_id: str
    mmae: float
    speedup: float
    mark: str  # "none", "plus" or "minus"
    p_value: float | None = None
    p_adjusted: float | None = None


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    alpha: float
    rows: list[ComparisonRow] = field(default_factory=list)

    def row(self, config_id: str) -> ComparisonRow:
        for r in self.rows:
            if r.config_id == config_id:
                return r
        raise KeyError(config_id)


def build_comparison_table(baseline: ConfigResult, others: Sequence[ConfigResult],
                           alpha: float = 0.05) -> ComparisonTable:
    """Baseline row first, then ``others`` in the given order.

    Each other config is tested against the baseline on final test MAE,
    p-values are Holm-adjusted across the family, and a significant
    difference is marked ``minus`` (lower MMAE than the baseline) or
    ``plus`` (higher). Rows with fewer than 3 runs get no p-value.
    """
    others = [o for o in others if o.config_id != baseline.config_id]
    # configs with fewer than 3 runs (on either side) are not tested
    testable = [i for i, o in enumerate(others) if min(o.n_runs, baseline.n_runs) >= 3]
    raw: list[float | None] = [None] * len(others)
    adj: list[float | None] = [None] * len(others)
    for i in testable:
        raw[i] = wilcoxon_rank_sum(others[i].per_run_final_test_mae, baseline.per_run_final_test_mae)
    for i, pa in zip(testable, holm_adjust([raw[i] for i in testable])):
        adj[i] = pa
    base_mmae = baseline.test_mmae
    rows = [ComparisonRow(baseline.config_id, base_mmae, 1.0, "none")]
    for o, p, pa in zip(others, raw, adj):
        mark = "none"
        if pa is None:
            pass
        elif pa < alpha and o.test_mmae < base_mmae:
            mark = "minus"
        elif pa < alpha and o.test_mmae > base_mmae:
            mark = "plus"
        rows.append(ComparisonRow(o.config_id, o.test_mmae, speedup(baseline, o), mark, p, pa))
    return ComparisonTable(baseline.config_id, alpha, rows)


def config_result_from_records(config_id: str, records: Sequence) -> ConfigResult:
    """Collapse :class:`~btsgp.engine.RunRecord` objects of one config.

    Curves are per-generation medians over runs, truncated to the shortest run.
    """
    if not records:
        raise ValueError(f"{config_id}: no records")
    n_gen = min(len(r.per_generation) for r in records)
    curve = [mmae([r.per_generation[g].best_test_mae for r in records]) for g in range(n_gen)]
    div = [mmae([r.per_generation[g].diversity for r in records]) for g in range(n_gen)]
    return ConfigResult(
        config_id=config_id,
        per_run_final_test_mae=[r.final_test_mae for r in records],
        per_run_total_seconds=[r.total_seconds for r in records],
        per_generation_median_curve=curve,
        per_run_final_train_mae=[r.final_train_mae for r in records],
        per_generation_median_diversity=div,
    )


def safe_name(config_id: str) -> str:
    """File-system friendly form of a config id (``BTS/8/16`` -> ``BTS_8_16``)."""
    return re.sub(r"[^A-Za-z0-9.+-]", "_", config_id)


def write_report(out_dir, results: Sequence[ConfigResult], baseline_id: str,
                 alpha: float = 0.05, top_k: int | None = 5) -> ComparisonTable:
    """Write comparison, curve, box-plot and JSON outputs under ``out_dir``.

    When more than ``top_k`` non-baseline configs are present only the
    ``top_k`` best on training MMAE enter the comparison table; curves and
    box-plot data cover every config.
    """
    by_id = {r.config_id: r for r in results}
    if baseline_id not in by_id:
        raise KeyError(f"baseline {baseline_id!r} not among results {sorted(by_id)}")
    baseline = by_id[baseline_id]
    others = [r for r in results if r.config_id != baseline_id]
    if top_k is not None and len(others) > top_k:
        keep = top_k_configs(others, top_k)
        others = [by_id[c] for c in keep]
    table = build_comparison_table(baseline, others, alpha)

    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "mmae", "speedup", "mark"])
        for row in table.rows:
            w.writerow([row.config_id, repr(row.mmae), repr(row.speedup), row.mark])
    for r in results:
        with open(out / "curves" / f"{safe_name(r.config_id)}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gen", "median_test_mae", "median_diversity"])
            div = r.per_generation_median_diversity
            for g, v in enumerate(r.per_generation_median_curve):
                w.writerow([g, repr(v), repr(div[g]) if g < len(div) else ""])
    with open(out / "boxplot_data.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["config_id", "run_index", "final_test_mae", "total_seconds"])
        for r in results:
            for i, (mae, secs) in enumerate(zip(r.per_run_final_test_mae, r.per_run_total_seconds)):
                w.writerow([r.config_id, i, repr(mae), repr(secs)])
    doc = {
        "baseline": baseline_id,
        "alpha": alpha,
        "comparison": [row.__dict__ for row in table.rows],
        "configs": {
            r.config_id: {
                "test_mmae": r.test_mmae,
                "train_mmae": r.train_mmae,
                "speedup": speedup(baseline, r),
                "per_run_final_test_mae": list(r.per_run_final_test_mae),
                "per_run_final_train_mae": list(r.per_run_final_train_mae),
                "per_run_total_seconds": list(r.per_run_total_seconds),
                "median_curve": list(r.per_generation_median_curve),
                "median_diversity": list(r.per_generation_median_diversity),
            }
            for r in results
        },
    }
    with open(out / "report.json", "w") as fh:
        json.dump(doc, fh, indent=1)
    return table
