"""Analytical FLOPs and latency model for staged sampling pipelines.

Counting conventions, per step and per layer, with n tokens and width d:
  attention scores and weighted sum  sum over windows of 4 * n_blk^2 * d
  q/k/v/o projections                4 * n * d^2
  feed-forward (d -> 4d -> d)        2 * n * d * 4d * 2 = 16 * n * d^2
Softmax and normalisation are left out. All counts are exact integers so
ratios between pipelines are exact fractions.
"""

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import CalibrationError, ConfigError, InvalidArgumentError

logger = logging.getLogger(__name__)

FFN_MULT = 4

# published reference numbers, reported next to ours and never asserted equal
PUBLISHED_PFLOPS = {"baseline": 658.5, "steps_30": 197.5, "steps_50": 329.2, "two_stage": 34.3}
PUBLISHED_TIMES_S = {"baseline": 3497.0, "steps_30": 1049.0, "steps_50": 1748.0, "two_stage": 278.0}
PUBLISHED_SPEEDUP = 12.58
PUBLISHED_STEP_DIVISION = ((5, 201.0), (10, 252.0), (20, 369.0), (30, 481.0), (40, 610.0))
PUBLISHED_REFINE_STEPS = ((8, 244.5), (9, 247.0), (10, 249.0), (11, 251.8), (12, 254.2))


@dataclass(frozen=True)
class StageSpec:
    name: str
    tokens: int
    dim: int
    heads: int
    depth: int
    steps: int
    window_tokens: Optional[Tuple[int, ...]] = None
    overhead_s: float = 0.0

    def __post_init__(self):
        for key in ("tokens", "dim", "heads", "depth", "steps"):
            if getattr(self, key) < 1:
                raise ConfigError(f"stage {self.name}: {key} must be >= 1")
        if self.window_tokens is not None and sum(self.window_tokens) != self.tokens:
            raise ConfigError(f"stage {self.name}: window token counts do not add up to {self.tokens}")

    @property
    def blocks(self) -> Tuple[int, ...]:
        return self.window_tokens if self.window_tokens is not None else (self.tokens,)

    @property
    def mode(self) -> str:
        return "global" if self.window_tokens is None else f"windowed x{len(self.window_tokens)}"

    def with_steps(self, steps: int, name: Optional[str] = None) -> "StageSpec":
        return replace(self, steps=steps, name=name or self.name)

    @classmethod
    def from_latent(cls, name: str, frames: int, height: int, width: int, patch: int, dim: int, heads: int,
                    depth: int, steps: int, window: int = 0, overhead_s: float = 0.0) -> "StageSpec":
        if height % patch or width % patch:
            raise ConfigError(f"stage {name}: {height}x{width} is not divisible by patch {patch}")
        per_frame = (height // patch) * (width // patch)
        windows = None
        if window:
            windows = tuple(min(window, frames - s) * per_frame for s in range(0, frames, window))
        return cls(name, frames * per_frame, dim, heads, depth, steps, windows, overhead_s)

    @classmethod
    def from_section(cls, section) -> "StageSpec":
        return cls.from_latent(
            section.name, section.frames, section.height, section.width, section.patch,
            section.dim, section.heads, section.depth, section.steps, section.window, section.overhead_s,
        )


def pair_flops(s: StageSpec) -> int:
    return sum(4 * n * n * s.dim for n in s.blocks)


def projection_flops(s: StageSpec) -> int:
    return 4 * s.tokens * s.dim * s.dim


def ffn_flops(s: StageSpec) -> int:
    return 2 * s.tokens * s.dim * (FFN_MULT * s.dim) * 2


def step_flops(s: StageSpec) -> int:
    return (pair_flops(s) + projection_flops(s) + ffn_flops(s)) * s.depth


def stage_flops(s: StageSpec) -> int:
    return step_flops(s) * s.steps


def predicted_seconds(s: StageSpec, rate: float, overhead_s: Optional[float] = None) -> float:
    per_step = s.overhead_s if overhead_s is None else overhead_s
    return rate * stage_flops(s) + per_step * s.steps


@dataclass(frozen=True)
class PipelineSpec:
    stages: Tuple[StageSpec, ...]
    baseline: StageSpec

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("a pipeline needs at least one stage")


@dataclass(frozen=True)
class ReportRow:
    stage: str
    flops: int
    share: Fraction
    ratio: Fraction
    predicted_s: float


@dataclass
class PipelineReport:
    rows: List[ReportRow]
    total_flops: int
    baseline_flops: int
    predicted_s: float
    baseline_s: float
    variants: List[ReportRow] = field(default_factory=list)

    @property
    def ratio(self) -> Fraction:
        return Fraction(self.total_flops, self.baseline_flops)

    @property
    def reduction(self) -> Fraction:
        return Fraction(self.baseline_flops, self.total_flops)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage", "flops", "share", "ratio", "predicted_s"])
        for row in self.rows + self.variants:
            writer.writerow([row.stage, row.flops, f"{float(row.share):.6f}", f"{float(row.ratio):.6f}",
                             f"{row.predicted_s:.6f}"])
        return buf.getvalue()


def pipeline_report(p: PipelineSpec, rate: float = 0.0, step_fractions: Sequence[float] = ()) -> PipelineReport:
    base_flops = stage_flops(p.baseline)
    flops = [stage_flops(s) for s in p.stages]
    total = sum(flops)
    rows = [
        ReportRow(s.name, f, Fraction(f, total), Fraction(f, base_flops), predicted_seconds(s, rate))
        for s, f in zip(p.stages, flops)
    ]
    predicted = sum(r.predicted_s for r in rows)
    base_s = predicted_seconds(p.baseline, rate)
    rows.append(ReportRow("total", total, Fraction(1), Fraction(total, base_flops), predicted))
    rows.append(ReportRow(p.baseline.name, base_flops, Fraction(1), Fraction(1), base_s))
    variants = []
    for frac in step_fractions:
        steps = max(1, round(frac * p.baseline.steps))
        variant = p.baseline.with_steps(steps, f"{p.baseline.name}@{int(round(frac * 100))}%steps")
        f = stage_flops(variant)
        variants.append(ReportRow(variant.name, f, Fraction(1), Fraction(f, base_flops),
                                  predicted_seconds(variant, rate)))
    logger.info(f"pipeline: {total:.4e} FLOPs vs baseline {base_flops:.4e} ({float(Fraction(base_flops, total)):.2f}x)")
    return PipelineReport(rows, total, base_flops, predicted, base_s, variants)


# ---------------- step division ---------------- #

@dataclass(frozen=True)
class DivisionCosts:
    n_total: int
    c_hi: float
    c_lo: float
    c_refine: float = 0.0
    c_0: float = 0.0

    @classmethod
    def from_specs(cls, hi: StageSpec, lo: StageSpec, refiner: Optional[StageSpec], rate: float,
                   n_total: int, c_0: float = 0.0) -> "DivisionCosts":
        """Per-step costs of each stage from the analytical model; the refiner is charged once."""
        c_hi = rate * step_flops(hi) + hi.overhead_s
        c_lo = rate * step_flops(lo) + lo.overhead_s
        c_refine = predicted_seconds(refiner, rate) if refiner is not None else 0.0
        return cls(n_total, c_hi, c_lo, c_refine, c_0)


def step_division_curve(k_values: Sequence[int], costs: DivisionCosts) -> List[Tuple[int, float]]:
    curve = []
    for k in k_values:
        if not (0 < k <= costs.n_total):
            raise InvalidArgumentError(f"turning step {k} outside (0, {costs.n_total}]")
        curve.append((k, k * costs.c_hi + (costs.n_total - k) * costs.c_lo + costs.c_refine + costs.c_0))
    return curve


def refiner_step_curve(step_values: Sequence[int], refiner: StageSpec, rate: float,
                       fixed_s: float = 0.0) -> List[Tuple[int, float]]:
    return [(s, predicted_seconds(refiner.with_steps(s), rate) + fixed_s) for s in step_values]


# ---------------- least squares ---------------- #

@dataclass(frozen=True)
class AffineFit:
    slope: float
    intercept: float
    r2: float
    slope_stderr: float

    def __call__(self, x):
        return self.slope * x + self.intercept


def fit_affine(points: Sequence[Tuple[float, float]]) -> AffineFit:
    x = np.array([p[0] for p in points], dtype=np.float64)
    y = np.array([p[1] for p in points], dtype=np.float64)
    if len(points) < 2 or np.ptp(x) == 0:
        raise CalibrationError("an affine fit needs at least two distinct x values")
    A = np.stack([x, np.ones_like(x)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * x + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    dof = len(points) - 2
    stderr = float(np.sqrt(ss_res / dof / ((x - x.mean()) ** 2).sum())) if dof > 0 else 0.0
    return AffineFit(float(slope), float(intercept), r2, stderr)


@dataclass(frozen=True)
class Calibration:
    rate: float
    overhead_s: float
    residuals: Tuple[float, ...]

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.residuals)))) if self.residuals else 0.0


def calibrate(measured: Sequence[Tuple[StageSpec, float]]) -> Calibration:
    """Least squares for time = rate * flops + overhead * steps."""
    if len(measured) < 2:
        raise CalibrationError(f"calibration needs at least two measurements, got {len(measured)}")
    A = np.array([[float(stage_flops(s)), float(s.steps)] for s, _ in measured], dtype=np.float64)
    y = np.array([t for _, t in measured], dtype=np.float64)
    scale = np.abs(A).max(axis=0)
    scale[scale == 0] = 1.0
    As = A / scale
    if np.linalg.matrix_rank(As) < 2:
        raise CalibrationError("measurements do not separate FLOPs from per-step overhead")
    coef, *_ = np.linalg.lstsq(As, y, rcond=None)
    rate, overhead = coef / scale
    residuals = tuple(float(r) for r in y - A @ np.array([rate, overhead]))
    logger.info(f"calibrated rate={rate:.3e} s/FLOP overhead={overhead:.3e} s/step")
    return Calibration(float(rate), float(overhead), residuals)
