import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional


def _flag(name, default):
    return os.environ.get(name, default).strip().lower() in ("1", "true", "yes", "on")


class Config(object):
    # process config
    LOG_LEVEL = os.environ.get("SURF_LOG_LEVEL", "INFO")
    WORKERS   = int(os.environ.get("SURF_WORKERS", "2"))
    PROGRESS  = _flag("SURF_PROGRESS", "False")
    TIMEZONE  = os.environ.get("SURF_TIMEZONE", "UTC")

    # defaults shared by commands
    PREVIEW_SHIFT = 5.0
    DEFAULT_K = 10
    DEFAULT_N_TOTAL = 40
    DEFAULT_REFINE_STEPS = 10


class Txt(object):
    # part of text configuration

    DESCRIPTION = """Two-stage video latent generation at desk scale: a noise-reshifting
multi-resolution preview sampler, a shift-window attention refiner and an
analytical cost model."""

    SYNTH_TXT = "synthesize a dataset of procedural pixel videos (LGR1) plus index.csv"
    TRAIN_TXT = "train the base velocity model or the refiner; writes checkpoint, loss CSV, manifest"
    PREVIEW_TXT = "generate low-resolution preview latents with noise reshifting"
    REFINE_TXT = "refine a preview to the target resolution and dump PPM frames"
    PROFILE_TXT = "FLOPs and time report for a staged pipeline, step-division and refiner-step curves"
    INSPECT_TXT = "print extent and statistics of an LGR1 file"

    CONFIG_HELP = "structured YAML run config"
    SET_HELP = "override a config key, e.g. --set schedule.phase1_iters=50 (repeatable)"
    MANIFEST_HELP = "replay the config snapshot recorded in a run manifest"

    INSPECT_REPORT = """{path}
  size    : {size}
  extent  : {extent}
  count   : {count}
  min     : {minimum!r}
  max     : {maximum!r}
  mean    : {mean!r}
  std     : {std!r}
  nan     : {nan_count}"""

    PROFILE_FOOTER = """-- step division: affine fit over published (k, time): slope={slope:.3f} s/step, R2={r2:.5f}
-- refine steps: affine fit over published (steps, time): slope={rslope:.3f} s/step, R2={rr2:.5f}
-- two-stage FLOPs reduction (this model): {ours:.2f}x
-- published reduction 658.5/34.3 = {published:.2f}x (different base architecture; not bit-reproducible)
-- times are DiT forward time only; codec decode excluded"""


# ---------------- run config schemas ---------------- #

@dataclass
class SynthConfig:
    out_dir: str = "runs/data"
    count: int = 32
    seed: int = 1234
    kinds: List[str] = field(default_factory=lambda: ["bouncing_rect", "moving_gaussian"])
    channels: int = 1
    frames: int = 9
    height: int = 16
    width: int = 16
    max_speed: float = 1.5
    seed_overrides: Dict[str, int] = field(default_factory=dict)


@dataclass
class ModelSection:
    patch: int = 1
    dim: int = 12
    heads: int = 2
    depth: int = 2
    window: int = 2
    cond_dim: int = 8
    freq_dim: int = 16
    rope_base: float = 10000.0
    shift_window: bool = True
    init_std: float = 0.02


@dataclass
class DegradationSection:
    blur_radius: int = 1
    blur_strength: float = 1.0
    factor: int = 2
    noise_scale: float = 0.02


@dataclass
class OptimSection:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 4


@dataclass
class ScheduleSection:
    phase1_frames: int = 5
    phase1_iters: int = 100
    phase2_frames: int = 9
    phase2_iters: int = 100


@dataclass
class TrainRunConfig:
    target: str = "refiner"
    dataset: str = "runs/data"
    out_dir: str = "runs/refiner"
    seed: int = 7
    cond_seed: int = 99
    stop_after: Optional[int] = None
    resume: bool = False
    model: ModelSection = field(default_factory=ModelSection)
    degradation: DegradationSection = field(default_factory=DegradationSection)
    optim: OptimSection = field(default_factory=OptimSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)


@dataclass
class PreviewRunConfig:
    checkpoint: str = "runs/base"
    out_dir: str = "runs/preview"
    seed: int = 2024
    count: int = 1
    n_total: int = Config.DEFAULT_N_TOTAL
    k: int = Config.DEFAULT_K
    hi: List[int] = field(default_factory=lambda: [8, 8])
    lo: List[int] = field(default_factory=lambda: [4, 4])
    frames: int = 5
    batch: int = 1
    shift: float = Config.PREVIEW_SHIFT


@dataclass
class BenchmarkSection:
    dataset: Optional[str] = None
    count: int = 20
    seed: int = 31337


@dataclass
class RefineRunConfig:
    checkpoint: str = "runs/refiner"
    preview: str = "runs/preview/preview_000.lgr"
    out_dir: str = "runs/refine"
    n_steps: int = Config.DEFAULT_REFINE_STEPS
    scale: int = 2
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)


@dataclass
class StageSection:
    name: str = "stage"
    frames: int = 21
    height: int = 60
    width: int = 104
    patch: int = 2
    dim: int = 5120
    heads: int = 40
    depth: int = 40
    steps: int = 50
    window: int = 0
    overhead_s: float = 0.0


@dataclass
class MeasureSection:
    enabled: bool = False
    sizes: List[int] = field(default_factory=lambda: [4, 8, 12])
    frames: int = 5
    steps: int = 3
    repeats: int = 2


@dataclass
class ProfileConfig:
    out_dir: str = "runs/profile"
    baseline: StageSection = field(default_factory=StageSection)
    stages: List[StageSection] = field(default_factory=list)
    step_fractions: List[float] = field(default_factory=lambda: [0.3, 0.5])
    k_values: List[int] = field(default_factory=lambda: [5, 10, 20, 30, 40])
    n_total: int = Config.DEFAULT_N_TOTAL
    seconds_per_flop: float = 1.0e-15
    fixed_s: float = 0.0
    measure: MeasureSection = field(default_factory=MeasureSection)


SCHEMAS = {
    "synth": SynthConfig,
    "train": TrainRunConfig,
    "preview": PreviewRunConfig,
    "refine": RefineRunConfig,
    "profile": ProfileConfig,
}
