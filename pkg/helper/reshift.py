"""Preview stage: denoise at the model's native resolution up to a turning
step k, estimate the clean latent, shrink it spatially, re-inject noise at the
same level and finish the schedule at the preview resolution."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

from .errors import ConfigError, InvalidArgumentError
from .flow import (
    Conditioning,
    CountingModel,
    VelocityModel,
    build_schedule,
    estimate_clean,
    evaluate_checked,
    integrate,
)
from .latent import Extent5, LatentGrid, Rng, axpy, resize_spatial, sample_gaussian
from .utils import Stopwatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreviewConfig:
    n_total: int = 40
    k: int = 10
    hi: Tuple[int, int] = (32, 32)
    lo: Tuple[int, int] = (16, 16)
    shift: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.k < self.n_total):
            raise ConfigError(f"turning step k={self.k} must lie strictly inside (0, {self.n_total})")
        if min(self.lo) < 1 or self.lo[0] > self.hi[0] or self.lo[1] > self.hi[1]:
            raise ConfigError(f"preview resolution {self.lo} must be positive and no larger than {self.hi}")


@dataclass
class PreviewResult:
    latent: LatentGrid
    nfe_hi: int
    nfe_lo: int
    sigma_k: float
    calls: CountingModel
    wall_s: float

    def token_steps(self, patch: int, hw: Tuple[int, int]) -> int:
        return self.calls.token_steps(patch, *hw)


def reshift_noise(clean_lo: LatentGrid, sigma_k: float, rng) -> LatentGrid:
    """z = clean_lo + sigma_k * eps with eps drawn from ``rng`` at clean_lo's extent."""
    if not (0.0 < sigma_k <= 1.0):
        raise InvalidArgumentError(f"reshift needs sigma_k in (0, 1], got {sigma_k}")
    eps = sample_gaussian(clean_lo.extent, rng)
    return axpy(sigma_k, eps, clean_lo)


def generate_preview(model: VelocityModel, cond: Conditioning, cfg: PreviewConfig,
                     extent_template: Extent5, rng: Optional[Rng] = None) -> PreviewResult:
    timer = Stopwatch()
    rng = Rng(cfg.seed) if rng is None else rng
    counted = CountingModel(model)
    sched = build_schedule(cfg.n_total, cfg.shift)
    sigma_k = sched.sigmas[cfg.k]

    z = sample_gaussian(extent_template.with_hw(*cfg.hi), rng)
    z = integrate(counted, z, sched, cond, stop=cfg.k, desc="preview hi-res")

    u = evaluate_checked(counted, z, sigma_k, cond)
    nfe_hi = counted.nfe
    clean = estimate_clean(z, u, sigma_k)
    clean_lo = resize_spatial(clean, *cfg.lo)
    z = reshift_noise(clean_lo, sigma_k, rng)
    logger.debug(f"reshift at k={cfg.k} sigma={sigma_k!r}: {cfg.hi} -> {cfg.lo}")

    z = integrate(counted, z, sched, cond, start=cfg.k, desc="preview lo-res")

    result = PreviewResult(
        latent=z,
        nfe_hi=nfe_hi,
        nfe_lo=counted.nfe - nfe_hi,
        sigma_k=sigma_k,
        calls=counted,
        wall_s=timer.seconds,
    )
    logger.info(f"preview seed={cfg.seed} nfe={counted.nfe} split=({result.nfe_hi}, {result.nfe_lo}) in {result.wall_s:.3f}s")
    return result

