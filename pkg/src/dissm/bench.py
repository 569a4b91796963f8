"""Operation counts and timings for the scan and attention blocks, plus whole-model reports."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import PAPER_TABLE, DiS, ModelConfig, match_table_row, param_count, table_config
from .nn import placeholder_parameters
from .ssm import (SCOPE_SCAN, SCOPE_SSM_FORMULA, AttentionParams, SsmDirectionParams,
                  attention_reference, flops_attention, flops_ssm, selective_scan)

KERNELS = ("ssm", "attention")
CSV_HEADER = ("kernel", "J", "D", "N", "counted_macs", "formula_macs", "wall_ns")
DEFAULT_J = (64, 128, 256, 512)
MIN_REPEATS = 5

# scopes that together make up the full cost of a forward pass
WHOLE_SCOPES = ("matmul", "conv", SCOPE_SCAN)


@dataclass(frozen=True)
class BenchRecord:
    kernel: str
    J: int
    D: int
    N: int
    counted_macs: int
    formula_macs: int
    wall_ns: int
    repeats: int

    def __post_init__(self) -> None:
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.counted_macs < 0 or self.repeats < MIN_REPEATS:
            raise ValueError("need counted_macs >= 0 and at least 5 repeats")

    def row(self) -> list:
        return [self.kernel, self.J, self.D, self.N, self.counted_macs, self.formula_macs, self.wall_ns]


def validate_j_list(J_list: Sequence[int]) -> list[int]:
    js = [int(j) for j in J_list]
    if len(js) < 4:
        raise ValueError("a scaling sweep needs at least 4 sequence lengths")
    if any(j <= 0 for j in js) or any(b <= a for a, b in zip(js, js[1:])):
        raise ValueError(f"sequence lengths must be positive and strictly increasing, got {js}")
    return js


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def measure_ssm(J: int, D: int, N: int, rng: np.random.Generator, repeats: int = MIN_REPEATS) -> BenchRecord:
    """One selective scan over ``[1, J, 2D]``; counts only the recurrence (formula scope)."""
    din = 2 * D
    params = SsmDirectionParams(din, N, rng, dt_rank=max(1, -(-D // 16)))
    x = T.tensor(rng.standard_normal((1, J, din)), dtype=T.default_dtype())
    with T.no_grad():
        with T.count_macs() as counter:
            selective_scan(x, params)
        wall = _median_ns(lambda: selective_scan(x, params), repeats)
    return BenchRecord("ssm", J, D, N, counter.total(SCOPE_SSM_FORMULA), flops_ssm(J, D, N), wall, repeats)


def measure_attention(J: int, D: int, N: int, rng: np.random.Generator,
                      repeats: int = MIN_REPEATS) -> BenchRecord:
    params = AttentionParams(D, rng)
    x = T.tensor(rng.standard_normal((1, J, D)), dtype=T.default_dtype())
    with T.no_grad():
        with T.count_macs() as counter:
            attention_reference(x, params)
        wall = _median_ns(lambda: attention_reference(x, params), repeats)
    return BenchRecord("attention", J, D, N, counter.total("matmul"), flops_attention(J, D), wall, repeats)


def run_scaling_sweep(J_list: Sequence[int] = DEFAULT_J, D: int = 384, N: int = 16,
                      repeats: int = MIN_REPEATS, seed: int = 0) -> list[BenchRecord]:
    """Both kernels at every sequence length, in a fixed order."""
    js = validate_j_list(J_list)
    if repeats < MIN_REPEATS:
        raise ValueError("at least 5 repeats are required")
    rng = np.random.default_rng(seed)
    out = [measure_ssm(j, D, N, rng, repeats) for j in js]
    out += [measure_attention(j, D, N, rng, repeats) for j in js]
    return out


# ---------------------------------------------------------------------------
# fits


@dataclass(frozen=True)
class ScalingFit:
    slope: float            # zero-intercept line count = slope * J
    r2_line: float
    quad: tuple[float, float, float]  # c2, c1, c0 of a degree-2 least-squares fit

    def quad_share(self, j_max: float) -> float:
        """Fraction of the fitted count at ``j_max`` contributed by the J^2 term."""
        c2, c1, c0 = self.quad
        total = c2 * j_max ** 2 + c1 * j_max + c0
        return abs(c2) * j_max ** 2 / abs(total)


def fit_counts(J: Sequence[int], counts: Sequence[int]) -> ScalingFit:
    j = np.asarray(J, dtype=np.float64)
    y = np.asarray(counts, dtype=np.float64)
    slope = float(j @ y / (j @ j))
    resid = y - slope * j
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    c2, c1, c0 = np.polyfit(j, y, 2)
    return ScalingFit(slope, r2, (float(c2), float(c1), float(c0)))


def fits_by_kernel(records: Sequence[BenchRecord]) -> dict[str, ScalingFit]:
    out = {}
    for k in KERNELS:
        rs = [r for r in records if r.kernel == k]
        if rs:
            out[k] = fit_counts([r.J for r in rs], [r.counted_macs for r in rs])
    return out


def records_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def write_records(path: str | Path, records: Sequence[BenchRecord]) -> None:
    Path(path).write_text(records_csv(records), encoding="utf-8")


def report_table(records: Sequence[BenchRecord]) -> str:
    lines = [f"{'kernel':<10}{'J':>6}{'counted MACs':>16}{'formula MACs':>16}{'median ms':>12}"]
    for r in records:
        lines.append(f"{r.kernel:<10}{r.J:>6}{r.counted_macs:>16,}{r.formula_macs:>16,}{r.wall_ns / 1e6:>12.3f}")
    for k, fit in fits_by_kernel(records).items():
        c2 = fit.quad[0]
        lines.append(f"{k}: line R^2={fit.r2_line:.6f}, J^2 coefficient={c2:.4g}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# whole-model reports


@dataclass(frozen=True)
class GflopsReport:
    name: str
    params: int
    whole_macs: int        # every projection, convolution and scan step of one forward pass
    formula_macs: int      # scan recurrences only, dense-A convention
    paper_params_m: float | None
    paper_gflops: float | None

    def __post_init__(self) -> None:
        if self.whole_macs <= 0:
            raise ValueError("measured count must be positive")

    @property
    def gflops(self) -> float:
        """Multiply-accumulates in units of 1e9, the usual profiler convention."""
        return self.whole_macs / 1e9

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    def deviation(self) -> tuple[float | None, float | None]:
        dp = self.params_m / self.paper_params_m - 1.0 if self.paper_params_m else None
        dg = self.gflops / self.paper_gflops - 1.0 if self.paper_gflops else None
        return dp, dg


def model_gflops(config: ModelConfig, name: str | None = None) -> GflopsReport:
    """Instrumented forward pass for one unconditional image at the config's geometry.

    Parameters are zero-stride placeholders, so even the largest table entry
    traces in constant memory; counts depend only on shapes.
    """
    config.validate()
    name = name or match_table_row(config) or "custom"
    with placeholder_parameters():
        model = DiS(config, rng=0)
    x = np.zeros((1, config.H, config.W, config.C), dtype=T.default_dtype())
    with T.no_grad(), T.count_macs() as counter:
        model(x, 0, None)
    row = PAPER_TABLE[name][1] if name in PAPER_TABLE else None
    return GflopsReport(name, param_count(config), counter.total(*WHOLE_SCOPES),
                        counter.total(SCOPE_SSM_FORMULA),
                        row.params_m if row else None, row.gflops if row else None)


def table_reports(names: Sequence[str] = tuple(PAPER_TABLE)) -> list[GflopsReport]:
    return [model_gflops(table_config(n), n) for n in names]


def gflops_table(reports: Sequence[GflopsReport]) -> str:
    lines = [f"{'model':<8}{'params M':>10}{'paper M':>9}{'dev':>8}"
             f"{'GMACs':>9}{'paper G':>9}{'dev':>8}{'scan-formula G':>16}"]
    for r in reports:
        dp, dg = r.deviation()
        fmt = lambda v: f"{v:+.1%}" if v is not None else "-"
        lines.append(f"{r.name:<8}{r.params_m:>10.1f}{r.paper_params_m or float('nan'):>9.1f}{fmt(dp):>8}"
                     f"{r.gflops:>9.2f}{r.paper_gflops or float('nan'):>9.2f}{fmt(dg):>8}"
                     f"{r.formula_macs / 1e9:>16.3f}")
    return "\n".join(lines)


def write_gflops(path: str | Path, reports: Sequence[GflopsReport]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "params", "paper_params_m", "whole_macs", "gflops", "paper_gflops", "formula_macs"])
        for r in reports:
            w.writerow([r.name, r.params, r.paper_params_m, r.whole_macs, f"{r.gflops:.6f}",
                        r.paper_gflops, r.formula_macs])
