"""Dense 5-axis latent grids and the LGR1 tensor file format.

Every latent, velocity and noise field in the pipeline is a ``LatentGrid``:
a contiguous float64 tensor laid out ``(batch, channel, frame, height, width)``.
Grids are treated as immutable values; every operation returns a new grid.
"""

import logging
import math
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange

from .errors import ContractError, FormatError, InvalidArgumentError, ShapeError, StorageError
from .utils import atomic_write

logger = logging.getLogger(__name__)

LGR_MAGIC = b"LGRID\x00\x00\x01"
LGR_HEADER = struct.Struct("<8s5Q")
# fixed so logged stats and `inspect` sum in the same order
CHUNK_ELEMS = 1 << 16


@dataclass(frozen=True)
class Extent5:
    b: int
    c: int
    f: int
    h: int
    w: int

    def __post_init__(self):
        for name, value in zip("bcfhw", self.as_tuple()):
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidArgumentError(f"axis {name} must be a positive integer, got {value!r}")

    def as_tuple(self):
        return (self.b, self.c, self.f, self.h, self.w)

    @property
    def numel(self) -> int:
        return self.b * self.c * self.f * self.h * self.w

    def with_hw(self, h: int, w: int) -> "Extent5":
        return Extent5(self.b, self.c, self.f, h, w)

    def with_frames(self, f: int) -> "Extent5":
        return Extent5(self.b, self.c, f, self.h, self.w)

    def __str__(self):
        return "x".join(str(v) for v in self.as_tuple())

    @classmethod
    def parse(cls, text: str) -> "Extent5":
        parts = [int(p) for p in text.lower().split("x")]
        if len(parts) != 5:
            raise InvalidArgumentError(f"extent needs five axes, got {text!r}")
        return cls(*parts)


class LatentGrid:
    __slots__ = ("values",)

    def __init__(self, values: torch.Tensor):
        if not isinstance(values, torch.Tensor) or values.dim() != 5:
            raise ShapeError("a LatentGrid needs a 5-axis tensor (b, c, f, h, w)")
        values = values.detach().to(torch.float64).contiguous()
        if not bool(torch.isfinite(values).all()):
            raise ContractError("latent grid holds non-finite values")
        self.values = values

    @property
    def extent(self) -> Extent5:
        return Extent5(*(int(s) for s in self.values.shape))

    @classmethod
    def zeros(cls, extent: Extent5) -> "LatentGrid":
        return cls(torch.zeros(extent.as_tuple(), dtype=torch.float64))

    @classmethod
    def full(cls, extent: Extent5, value: float) -> "LatentGrid":
        return cls(torch.full(extent.as_tuple(), float(value), dtype=torch.float64))

    @classmethod
    def from_numpy(cls, array: np.ndarray) -> "LatentGrid":
        return cls(torch.from_numpy(np.ascontiguousarray(array, dtype=np.float64)))

    def numpy(self) -> np.ndarray:
        return self.values.numpy()

    def flat(self) -> torch.Tensor:
        return self.values.reshape(-1)

    def equals(self, other: "LatentGrid") -> bool:
        return self.values.shape == other.values.shape and bool(torch.equal(self.values, other.values))

    def __repr__(self):
        return f"LatentGrid({self.extent})"


class Rng:
    """Counter-based generator (Philox). ``(seed, call sequence)`` fixes every draw."""

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise InvalidArgumentError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def random(self, size=None):
        return self._gen.random(size, dtype=np.float64)

    def standard_normal(self, shape: Sequence[int]) -> np.ndarray:
        """Box-Muller over ``random()``.

        Consecutive uniform pairs (u1, u2) yield r*cos(2 pi u2), r*sin(2 pi u2)
        with r = sqrt(-2 ln(1 - u1)), filled in C order; an odd count drops the
        last sine. Only Philox and numpy's 53-bit double conversion feed it, not
        numpy's ziggurat normal sampler.
        """
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = self.random(((n + 1) // 2, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.reshape(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def derive(self, *keys: int) -> "Rng":
        state = np.random.SeedSequence([self.seed, *[int(k) for k in keys]]).generate_state(1, np.uint64)
        return Rng(int(state[0]))

    def spawn_seeds(self, n: int) -> list:
        children = np.random.SeedSequence(self.seed).spawn(n)
        return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def _check_same(a: LatentGrid, b: LatentGrid, op: str):
    if a.values.shape != b.values.shape:
        raise ShapeError(f"{op}: extent mismatch {a.extent} vs {b.extent}")


def resize_spatial(z: LatentGrid, h_out: int, w_out: int) -> LatentGrid:
    """Bilinear (align-corners, edge-clamped) resize of every frame and channel."""
    if h_out < 1 or w_out < 1:
        raise InvalidArgumentError(f"resize target must be positive, got {h_out}x{w_out}")
    e = z.extent
    if (h_out, w_out) == (e.h, e.w):
        return LatentGrid(z.values.clone())
    frames = rearrange(z.values, "b c f h w -> (b f) c h w")
    out = F.interpolate(frames, size=(h_out, w_out), mode="bilinear", align_corners=True)
    return LatentGrid(rearrange(out, "(b f) c h w -> b c f h w", b=e.b))


def sample_gaussian(extent: Extent5, rng) -> LatentGrid:
    """i.i.d. N(0, 1) via ``rng.standard_normal`` (Box-Muller for ``Rng``)."""
    return LatentGrid.from_numpy(rng.standard_normal(extent.as_tuple()))


def axpy(alpha: float, x: LatentGrid, y: LatentGrid) -> LatentGrid:
    _check_same(x, y, "axpy")
    return LatentGrid(torch.add(y.values, x.values, alpha=float(alpha)))


def mse(a: LatentGrid, b: LatentGrid) -> float:
    _check_same(a, b, "mse")
    return float(torch.mean((a.values - b.values) ** 2))


# ---------------- streaming statistics ---------------- #

@dataclass(frozen=True)
class GridStats:
    count: int
    minimum: float
    maximum: float
    mean: float
    std: float
    nan_count: int


def stream_stats(chunks: Iterable[np.ndarray]) -> GridStats:
    """One pass over float64 chunks using sums shifted by the first finite value."""
    count = nan_count = 0
    shift = None
    s1 = s2 = 0.0
    lo, hi = math.inf, -math.inf
    for chunk in chunks:
        nan_mask = np.isnan(chunk)
        nan_count += int(nan_mask.sum())
        good = chunk[~nan_mask]
        if good.size == 0:
            continue
        if shift is None:
            shift = float(good[0])
        d = good - shift
        s1 += float(d.sum())
        s2 += float((d * d).sum())
        count += int(good.size)
        lo = min(lo, float(good.min()))
        hi = max(hi, float(good.max()))
    if count == 0:
        return GridStats(0, math.nan, math.nan, math.nan, math.nan, nan_count)
    mean = shift + s1 / count
    var = max(s2 / count - (s1 / count) ** 2, 0.0)
    return GridStats(count, lo, hi, mean, math.sqrt(var), nan_count)


def grid_stats(z: LatentGrid) -> GridStats:
    flat = z.numpy().reshape(-1)
    return stream_stats(flat[i:i + CHUNK_ELEMS] for i in range(0, flat.size, CHUNK_ELEMS))


def describe(z: LatentGrid, label: str = "grid") -> GridStats:
    stats = grid_stats(z)
    logger.info(f"{label}: extent={z.extent} mean={stats.mean!r} std={stats.std!r} min={stats.minimum!r} max={stats.maximum!r}")
    return stats


# ---------------- LGR1 files ---------------- #

def encode_lgr(z: LatentGrid) -> bytes:
    header = LGR_HEADER.pack(LGR_MAGIC, *z.extent.as_tuple())
    return header + z.numpy().astype("<f8", copy=False).tobytes(order="C")


def _read_header(handle, offset: int = 0):
    raw = handle.read(LGR_HEADER.size)
    if len(raw) < len(LGR_MAGIC) or raw[:len(LGR_MAGIC)] != LGR_MAGIC:
        raise FormatError("bad LGR1 magic", offset=offset)
    if len(raw) < LGR_HEADER.size:
        raise FormatError(
            f"truncated header: expected {LGR_HEADER.size} bytes, got {len(raw)}",
            offset=offset + len(raw), expected=LGR_HEADER.size, actual=len(raw),
        )
    _, *axes = LGR_HEADER.unpack(raw)
    try:
        return Extent5(*axes)
    except InvalidArgumentError as e:
        raise FormatError(f"invalid extent in header: {e}", offset=offset + len(LGR_MAGIC)) from e


def decode_lgr(handle, offset: int = 0) -> LatentGrid:
    extent = _read_header(handle, offset)
    expected = extent.numel * 8
    payload = handle.read(expected)
    if len(payload) != expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            offset=offset + LGR_HEADER.size + len(payload), expected=expected, actual=len(payload),
        )
    array = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(extent.as_tuple())
    return LatentGrid.from_numpy(array)


def read_lgr(path) -> LatentGrid:
    try:
        with open(path, "rb") as handle:
            return decode_lgr(handle)
    except FileNotFoundError as e:
        raise StorageError(f"no such LGR1 file: {path}") from e


def write_lgr(path, z: LatentGrid):
    atomic_write(path, encode_lgr(z))


def iter_lgr_chunks(path) -> Iterator[np.ndarray]:
    """Yield the payload of an LGR1 file in CHUNK_ELEMS pieces; validates lengths as it goes."""
    with open(path, "rb") as handle:
        extent = _read_header(handle)
        remaining = extent.numel
        consumed = 0
        while remaining:
            want = min(remaining, CHUNK_ELEMS)
            raw = handle.read(want * 8)
            if len(raw) != want * 8:
                actual = consumed * 8 + len(raw)
                raise FormatError(
                    f"truncated payload: expected {extent.numel * 8} bytes, got {actual}",
                    offset=LGR_HEADER.size + actual, expected=extent.numel * 8, actual=actual,
                )
            consumed += want
            remaining -= want
            yield np.frombuffer(raw, dtype="<f8").astype(np.float64)


def file_stats(path):
    try:
        with open(path, "rb") as handle:
            extent = _read_header(handle)
    except FileNotFoundError as e:
        raise StorageError(f"no such LGR1 file: {path}") from e
    return extent, stream_stats(iter_lgr_chunks(path)), os.path.getsize(path)
