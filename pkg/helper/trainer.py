"""AdamW training loops for the refiner and the base velocity model.

Every iteration draws its batch, crop offsets, degradations and path
positions from ``Rng(seed).derive(iteration)``, so resuming at iteration i
with the saved optimizer state replays exactly what a straight run does.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .codec import ToyCodec
from .denoiser import DegradationConfig, Denoiser, degrade_pair, refine, refiner_loss
from .errors import ConfigError
from .flow import Conditioning
from .latent import LatentGrid, Rng, mse, resize_spatial, sample_gaussian
from .utils import Stopwatch, progress

logger = logging.getLogger(__name__)

T_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    batch_size: int = 4
    phase1_frames: int = 5
    phase1_iters: int = 100
    phase2_frames: int = 9
    phase2_iters: int = 100

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.phase1_frames < 1 or self.phase2_frames < self.phase1_frames:
            raise ConfigError(
                f"phase-2 frames ({self.phase2_frames}) must be >= phase-1 frames ({self.phase1_frames}) >= 1"
            )
        if self.phase1_iters < 0 or self.phase2_iters < 0:
            raise ConfigError("iteration counts must be >= 0")

    @property
    def total_iters(self) -> int:
        return self.phase1_iters + self.phase2_iters

    def frames_at(self, iteration: int) -> int:
        return self.phase1_frames if iteration < self.phase1_iters else self.phase2_frames

    @classmethod
    def from_sections(cls, optim, schedule) -> "TrainConfig":
        return cls(
            lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2,
            weight_decay=optim.weight_decay, batch_size=optim.batch_size,
            phase1_frames=schedule.phase1_frames, phase1_iters=schedule.phase1_iters,
            phase2_frames=schedule.phase2_frames, phase2_iters=schedule.phase2_iters,
        )


@dataclass(frozen=True)
class LossRow:
    iteration: int
    loss: float
    frames: int
    wall_ms: int


@dataclass
class TrainResult:
    params: Denoiser
    optimizer: torch.optim.Optimizer
    rows: List[LossRow] = field(default_factory=list)
    iteration: int = 0

    def window_mean(self, first: bool, n: int = 20) -> float:
        losses = [r.loss for r in self.rows]
        part = losses[:n] if first else losses[-n:]
        return float(np.mean(part))


def make_optimizer(params: Denoiser, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
        eps=1e-8, weight_decay=cfg.weight_decay,
    )


def sample_clips(dataset: Sequence[LatentGrid], frames: int, batch: int, rng: Rng) -> LatentGrid:
    """Stack ``batch`` random crops of ``frames`` consecutive frames along the batch axis."""
    picks = []
    for _ in range(batch):
        clip = dataset[int(rng.integers(0, len(dataset)))].values
        total = clip.shape[2]
        if total < frames:
            raise ConfigError(f"clip has {total} frames, training phase needs {frames}")
        start = int(rng.integers(0, total - frames + 1))
        picks.append(clip[:1, :, start:start + frames])
    return LatentGrid(torch.cat(picks, dim=0))


def _path_times(rng: Rng, batch: int) -> np.ndarray:
    return np.clip(rng.uniform(0.0, 1.0, size=batch), T_EPS, 1.0 - T_EPS)


def refiner_batch(codec: ToyCodec, deg_cfg: DegradationConfig):
    """Path endpoints (z_lr at t=1, z_hr at t=0) and per-clip positions."""
    def make(pixels: LatentGrid, rng: Rng):
        z_lr, z_hr = degrade_pair(pixels, codec, deg_cfg, rng)
        return z_lr, z_hr, torch.from_numpy(_path_times(rng, pixels.extent.b))
    return make


def base_batch(codec: ToyCodec):
    """Noise at sigma=1, clean latents at sigma=0."""
    def make(pixels: LatentGrid, rng: Rng):
        z0 = codec.encode(pixels)
        eps = sample_gaussian(z0.extent, rng)
        return eps, z0, torch.from_numpy(_path_times(rng, pixels.extent.b))
    return make


def _fit(params: Denoiser, dataset: Sequence[LatentGrid], cfg: TrainConfig, make_batch: Callable,
         cond: Conditioning, seed: int, label: str, resume: Optional[TrainResult] = None,
         stop_after: Optional[int] = None) -> TrainResult:
    if not dataset:
        raise ConfigError("training dataset is empty")
    result = resume or TrainResult(params, make_optimizer(params, cfg))
    end = cfg.total_iters if stop_after is None else min(cfg.total_iters, stop_after)
    base = Rng(seed)
    params.train()
    for it in progress(range(result.iteration, end), desc=f"train {label}", total=max(end - result.iteration, 0)):
        timer = Stopwatch()
        rng = base.derive(it)
        frames = cfg.frames_at(it)
        if it == cfg.phase1_iters and it > 0:
            logger.info(f"{label}: switching to {frames}-frame clips at iteration {it}")
        pixels = sample_clips(dataset, frames, cfg.batch_size, rng)
        z_noisy, z_clean, t = make_batch(pixels, rng)
        loss, grads = refiner_loss(params, z_noisy, z_clean, t, cond)
        for name, p in params.named_parameters():
            p.grad = grads[name]
        result.optimizer.step()
        row = LossRow(it, loss, frames, timer.ms)
        result.rows.append(row)
        if it % 20 == 0:
            logger.info(f"{label} iter {it} frames={frames} loss={row.loss:.6f}")
        result.iteration = it + 1
    params.eval()
    return result


def train_refiner(dataset: Sequence[LatentGrid], codec: ToyCodec, deg_cfg: DegradationConfig,
                  train_cfg: TrainConfig, params: Denoiser, cond: Conditioning, seed: int,
                  resume: Optional[TrainResult] = None, stop_after: Optional[int] = None) -> TrainResult:
    return _fit(params, dataset, train_cfg, refiner_batch(codec, deg_cfg), cond, seed, "refiner", resume, stop_after)


def train_base(dataset: Sequence[LatentGrid], codec: ToyCodec, train_cfg: TrainConfig, params: Denoiser,
               cond: Conditioning, seed: int, resume: Optional[TrainResult] = None,
               stop_after: Optional[int] = None) -> TrainResult:
    return _fit(params, dataset, train_cfg, base_batch(codec), cond, seed, "base", resume, stop_after)


# ---------------- held-out benchmark ---------------- #

@dataclass(frozen=True)
class BenchmarkRow:
    index: int
    mse_refined: float
    mse_upsampled: float
    mse_preview_refined: float
    mse_preview_upsampled: float

    @property
    def win(self) -> bool:
        return self.mse_refined < self.mse_upsampled

    @property
    def preview_win(self) -> bool:
        return self.mse_preview_refined < self.mse_preview_upsampled


@dataclass
class BenchmarkResult:
    rows: List[BenchmarkRow]

    @property
    def wins(self) -> int:
        return sum(r.win for r in self.rows)

    @property
    def win_rate(self) -> float:
        return self.wins / len(self.rows) if self.rows else 0.0

    @property
    def preview_win_rate(self) -> float:
        return sum(r.preview_win for r in self.rows) / len(self.rows) if self.rows else 0.0


def refiner_benchmark(params, clips: Sequence[LatentGrid], codec: ToyCodec, deg_cfg: DegradationConfig,
                      n_steps: int, cond: Conditioning, seed: int, preview_factor: int = 2) -> BenchmarkResult:
    """Refined vs. bilinear upsampling, scored by MSE to the clean latent.

    Two inputs per clip: the degraded latent at full size, and a preview made by
    shrinking it ``preview_factor`` times, as the preview stage hands over.
    """
    if preview_factor < 1:
        raise ConfigError(f"preview factor must be >= 1, got {preview_factor}")
    base = Rng(seed)
    rows = []
    for i, clip in enumerate(clips):
        z_lr, z_hr = degrade_pair(clip, codec, deg_cfg, base.derive(i))
        e = z_hr.extent
        refined = refine(params, z_lr, (e.h, e.w), n_steps, cond)
        preview = resize_spatial(z_lr, max(1, e.h // preview_factor), max(1, e.w // preview_factor))
        from_preview = refine(params, preview, (e.h, e.w), n_steps, cond)
        upsampled = resize_spatial(preview, e.h, e.w)
        rows.append(BenchmarkRow(i, mse(refined, z_hr), mse(z_lr, z_hr),
                                 mse(from_preview, z_hr), mse(upsampled, z_hr)))
    result = BenchmarkResult(rows)
    logger.info(f"refiner benchmark: {result.wins}/{len(rows)} clips improved over upsampling, "
                f"preview win rate {result.preview_win_rate:.2f}")
    return result
