"""Sigma schedules and the Euler flow-matching sampler.

Convention shared by every module: z_sigma = (1 - sigma) * z0 + sigma * eps and
the model predicts u = dz/dsigma = eps - z0, so the clean estimate is
z0_hat = z - sigma * u.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Protocol, Tuple

import numpy as np
import torch

from .errors import InvalidArgumentError, ModelContractError, ShapeError
from .latent import Extent5, LatentGrid, Rng, axpy
from .utils import progress

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SigmaSchedule:
    sigmas: Tuple[float, ...]
    shift: float = 1.0

    def __post_init__(self):
        s = self.sigmas
        if len(s) < 2 or s[0] != 1.0 or s[-1] != 0.0:
            raise InvalidArgumentError("a schedule runs from exactly 1 to exactly 0")
        if any(b >= a for a, b in zip(s, s[1:])):
            raise InvalidArgumentError("sigmas must be strictly decreasing")

    @property
    def n(self) -> int:
        return len(self.sigmas) - 1

    def intervals(self, start: int = 0, stop: int = None):
        stop = self.n if stop is None else stop
        return [(self.sigmas[i], self.sigmas[i + 1]) for i in range(start, stop)]


def build_schedule(n: int, shift: float = 1.0) -> SigmaSchedule:
    """sigma_i = s*u / (1 + (s-1)*u) with u = 1 - i/n; endpoints pinned to 1 and 0."""
    if n < 1:
        raise InvalidArgumentError(f"schedule needs at least one step, got n={n}")
    if shift < 1:
        raise InvalidArgumentError(f"shift must be >= 1, got {shift}")
    u = 1.0 - np.arange(n + 1, dtype=np.float64) / n
    sigmas = shift * u / (1.0 + (shift - 1.0) * u)
    sigmas[0], sigmas[-1] = 1.0, 0.0
    return SigmaSchedule(tuple(float(s) for s in sigmas), float(shift))


@dataclass(frozen=True, eq=False)
class Conditioning:
    """Fixed stand-in for a prompt embedding."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.dim() != 1 or not bool(torch.isfinite(self.values).all()):
            raise InvalidArgumentError("conditioning must be a finite vector")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def fixed(cls, dim: int, seed: int) -> "Conditioning":
        return cls(torch.from_numpy(Rng(seed).standard_normal((dim,))))

    @classmethod
    def zeros(cls, dim: int) -> "Conditioning":
        return cls(torch.zeros(dim, dtype=torch.float64))


class VelocityModel(Protocol):
    def evaluate(self, z: LatentGrid, sigma: float, cond: Conditioning) -> LatentGrid:
        ...


@dataclass
class CountingModel:
    """Wraps a velocity model and records each evaluation as (extent, sigma)."""

    model: VelocityModel
    calls: List[Tuple[Extent5, float]] = field(default_factory=list)

    def evaluate(self, z, sigma, cond):
        self.calls.append((z.extent, float(sigma)))
        return self.model.evaluate(z, sigma, cond)

    @property
    def nfe(self) -> int:
        return len(self.calls)

    def nfe_at(self, h: int, w: int) -> int:
        return sum(1 for e, _ in self.calls if (e.h, e.w) == (h, w))

    def token_steps(self, patch: int, h: int = None, w: int = None) -> int:
        total = 0
        for e, _ in self.calls:
            if h is not None and (e.h, e.w) != (h, w):
                continue
            total += e.b * e.f * (e.h // patch) * (e.w // patch)
        return total


def evaluate_checked(model: VelocityModel, z: LatentGrid, sigma: float, cond: Conditioning) -> LatentGrid:
    u = model.evaluate(z, sigma, cond)
    if not isinstance(u, LatentGrid) or u.values.shape != z.values.shape:
        got = u.extent if isinstance(u, LatentGrid) else type(u).__name__
        raise ModelContractError(f"model returned {got} for input {z.extent}")
    return u


def euler_step(z: LatentGrid, u: LatentGrid, sigma_cur: float, sigma_next: float) -> LatentGrid:
    if not (0.0 <= sigma_next < sigma_cur <= 1.0):
        raise InvalidArgumentError(f"euler step needs 0 <= next < cur <= 1, got {sigma_cur} -> {sigma_next}")
    if z.values.shape != u.values.shape:
        raise ShapeError(f"euler step: extent mismatch {z.extent} vs {u.extent}")
    return axpy(sigma_next - sigma_cur, u, z)


def estimate_clean(z: LatentGrid, u: LatentGrid, sigma: float) -> LatentGrid:
    if not (0.0 <= sigma <= 1.0):
        raise InvalidArgumentError(f"sigma must lie in [0, 1], got {sigma}")
    return axpy(-sigma, u, z)


def integrate(model, z, sched: SigmaSchedule, cond, start: int = 0, stop: int = None, desc: str = "sampling"):
    steps = sched.intervals(start, stop)
    for sigma_cur, sigma_next in progress(steps, desc=desc, total=len(steps)):
        u = evaluate_checked(model, z, sigma_cur, cond)
        logger.debug(f"step sigma {sigma_cur:.6f} -> {sigma_next:.6f} at {z.extent}")
        z = euler_step(z, u, sigma_cur, sigma_next)
    return z


def sample_ode(model: VelocityModel, z1: LatentGrid, sched: SigmaSchedule, cond: Conditioning) -> LatentGrid:
    return integrate(model, z1, sched, cond)
