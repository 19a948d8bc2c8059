"""Procedural pixel videos used as the training corpus.

Every clip is one shape moving at constant velocity with elastic reflections
off the frame borders. Pixel (i, j) covers the unit square [j, j+1) x [i, i+1),
so the intensity centroid of a fully visible rectangle is exactly its centre.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .latent import Extent5, LatentGrid

logger = logging.getLogger(__name__)

KINDS = ("bouncing_rect", "moving_gaussian")


@dataclass(frozen=True)
class SynthParams:
    x0: float
    y0: float
    vx: float
    vy: float
    size: float
    intensity: float = 1.0

    def still(self) -> "SynthParams":
        return replace(self, vx=0.0, vy=0.0)


def _margin(kind: str, size: float) -> float:
    # rectangles keep their whole extent inside; gaussians keep 2.5 sigma
    return size if kind == "bouncing_rect" else 2.5 * size


def random_params(kind: str, extent: Extent5, rng, max_speed: float = 1.5) -> SynthParams:
    if kind not in KINDS:
        raise ConfigError(f"unknown synth kind {kind!r}; expected one of {', '.join(KINDS)}")
    short = min(extent.h, extent.w)
    if kind == "bouncing_rect":
        size = float(rng.uniform(0.12, 0.25) * short)
    else:
        size = float(rng.uniform(0.08, 0.14) * short)
    m = _margin(kind, size)
    x0 = float(rng.uniform(m, max(m, extent.w - m)))
    y0 = float(rng.uniform(m, max(m, extent.h - m)))
    vx = float(rng.uniform(-max_speed, max_speed))
    vy = float(rng.uniform(-max_speed, max_speed))
    intensity = float(rng.uniform(0.6, 1.0))
    return SynthParams(x0, y0, vx, vy, size, intensity)


def reflect(p: float, lo: float, hi: float) -> float:
    """Fold an unbounded coordinate into [lo, hi] as a triangle wave."""
    span = hi - lo
    if span <= 0:
        return lo
    q = (p - lo) % (2 * span)
    return lo + (q if q <= span else 2 * span - q)


def centre_at(kind: str, params: SynthParams, frame: int, h: int, w: int):
    m = _margin(kind, params.size)
    cx = reflect(params.x0 + params.vx * frame, m, w - m)
    cy = reflect(params.y0 + params.vy * frame, m, h - m)
    return cx, cy


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, hi) - np.maximum(edges, lo), 0.0, 1.0)


def _draw(kind: str, params: SynthParams, cx: float, cy: float, h: int, w: int) -> np.ndarray:
    if kind == "bouncing_rect":
        a = params.size
        img = np.outer(_coverage(cy - a, cy + a, h), _coverage(cx - a, cx + a, w))
    else:
        ys = np.arange(h, dtype=np.float64) + 0.5
        xs = np.arange(w, dtype=np.float64) + 0.5
        r2 = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2
        img = np.exp(-r2 / (2 * params.size ** 2))
    return params.intensity * img


def synth_video(kind: str, extent: Extent5, rng, params: Optional[SynthParams] = None,
                max_speed: float = 1.5) -> LatentGrid:
    """Render a clip of ``extent`` in pixel space with values in [0, 1].

    Parameters are drawn from ``rng`` once per batch item unless ``params`` is given.
    """
    video = np.zeros(extent.as_tuple(), dtype=np.float64)
    for b in range(extent.b):
        p = params if params is not None else random_params(kind, extent, rng, max_speed)
        for f in range(extent.f):
            cx, cy = centre_at(kind, p, f, extent.h, extent.w)
            video[b, :, f] = _draw(kind, p, cx, cy, extent.h, extent.w)[None]
    logger.debug(f"synth {kind} {extent}")
    return LatentGrid.from_numpy(np.clip(video, 0.0, 1.0))


def centroid(frame: np.ndarray):
    """Intensity centroid (x, y) of a 2-D frame in continuous pixel coordinates."""
    total = frame.sum()
    ys = np.arange(frame.shape[0]) + 0.5
    xs = np.arange(frame.shape[1]) + 0.5
    return float((frame.sum(axis=0) * xs).sum() / total), float((frame.sum(axis=1) * ys).sum() / total)
