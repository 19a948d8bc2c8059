"""Temporal shift-window 3D self-attention with window-local 3D RoPE.

Token fields are tensors laid out ``(batch, frames, height, width, dim)``.
Windows always span the full height and width; only the frame axis is cut.
Odd blocks roll the frame axis by half a window before partitioning and mask
the one window that straddles the wrap seam. A window length of 0 gives one
window over every frame, i.e. plain global attention.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, InvalidArgumentError

logger = logging.getLogger(__name__)

MASK_NEG = -1e9

TokenField = torch.Tensor


@dataclass(frozen=True)
class WindowSpec:
    """``w_t == 0`` selects global attention: one unshifted window of all frames."""

    w_t: int

    def __post_init__(self):
        if self.w_t != 0 and (self.w_t < 2 or self.w_t % 2):
            raise ConfigError(f"temporal window must be 0 (global) or even and >= 2, got {self.w_t}")

    @property
    def is_global(self) -> bool:
        return self.w_t == 0

    @property
    def s_t(self) -> int:
        return self.w_t // 2

    def lengths(self, T: int) -> List[int]:
        if self.is_global:
            return [T]
        return [min(self.w_t, T - start) for start in range(0, T, self.w_t)]


@dataclass(frozen=True)
class RoPEConfig:
    split: Tuple[int, int, int]
    base: float = 10000.0

    def __post_init__(self):
        if len(self.split) != 3 or any(p < 0 or p % 2 for p in self.split):
            raise ConfigError(f"rotary split must be three even sizes, got {self.split}")

    @property
    def dim(self) -> int:
        return sum(self.split)

    @classmethod
    def for_dim(cls, d: int, base: float = 10000.0) -> "RoPEConfig":
        if d % 6:
            raise ConfigError(f"embedding dim {d} does not split into three even rotary parts")
        return cls((d // 3, d // 3, d // 3), base)


@dataclass(frozen=True, eq=False)
class AttnMask:
    """Frame-level allow matrix of one window; token pairs inherit their frames' entry."""

    allowed: torch.Tensor

    @property
    def all_allowed(self) -> bool:
        return bool(self.allowed.all())

    def additive(self, hw: int) -> torch.Tensor:
        tokens = self.allowed.repeat_interleave(hw, dim=0).repeat_interleave(hw, dim=1)
        return torch.zeros(tokens.shape, dtype=torch.float64).masked_fill(~tokens, MASK_NEG)


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    qkv_weight: torch.Tensor
    qkv_bias: torch.Tensor
    out_weight: torch.Tensor
    out_bias: torch.Tensor
    heads: int


@dataclass
class AttentionStats:
    windows: int = 0
    token_pairs: int = 0

    def record(self, tokens: int):
        self.windows += 1
        self.token_pairs += tokens * tokens


def attention_pair_count(T: int, H: int, W: int, spec: WindowSpec) -> int:
    return sum((n * H * W) ** 2 for n in spec.lengths(T))


# ---------------- partition / shift / mask ---------------- #

def partition_temporal(x: TokenField, spec: WindowSpec):
    """Cut the frame axis into ceil(T / w_t) windows; the tail window is kept short."""
    T = x.shape[1]
    if spec.is_global:
        return [x], [(0, T)]
    windows = list(torch.split(x, spec.w_t, dim=1))
    index = [(start, min(start + spec.w_t, T)) for start in range(0, T, spec.w_t)]
    return windows, index


def unpartition(windows: Sequence[torch.Tensor], index) -> TokenField:
    for win, (start, stop) in zip(windows, index):
        if win.shape[1] != stop - start:
            raise InvalidArgumentError(f"window of {win.shape[1]} frames does not fit slot {start}:{stop}")
    return torch.cat(list(windows), dim=1)


def cyclic_shift(x: TokenField, s_t: int, inverse: bool = False) -> TokenField:
    """Frame i moves to (i - s_t) mod T; ``inverse`` undoes it, moving i to (i + s_t) mod T."""
    T = x.shape[1]
    if s_t < 0 or (s_t >= T and s_t != 0):
        raise InvalidArgumentError(f"shift {s_t} must lie in [0, {T})")
    return torch.roll(x, shifts=s_t if inverse else -s_t, dims=1)


def build_boundary_mask(T: int, spec: WindowSpec) -> List[AttnMask]:
    """Masks for the windows of a sequence rolled forward by s_t.

    Rolled position p holds original frame (p + s_t) mod T; frames that wrapped
    around (original index < s_t) may not attend to the others in their window.
    """
    if spec.is_global or T < spec.w_t:
        return [AttnMask(torch.ones(T, T, dtype=torch.bool))]
    s = spec.s_t
    masks = []
    for start in range(0, T, spec.w_t):
        stop = min(start + spec.w_t, T)
        original = (torch.arange(start, stop) + s) % T
        wrapped = original < s
        masks.append(AttnMask(wrapped[:, None] == wrapped[None, :]))
    return masks


# ---------------- rotary embedding ---------------- #

def _axis_angles(pos: torch.Tensor, dim: int, base: float) -> torch.Tensor:
    freqs = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    return pos.to(torch.float64)[:, None] * freqs[None, :]


def rope_rotate(x: TokenField, t_pos, h_pos, w_pos, cfg: RoPEConfig) -> TokenField:
    """Rotate consecutive pairs of the (d_t | d_h | d_w) parts by pos * base^(-2j/d_axis)."""
    if x.shape[-1] != cfg.dim:
        raise ConfigError(f"rotary split {cfg.split} does not cover embedding dim {x.shape[-1]}")
    T, H, W = len(t_pos), len(h_pos), len(w_pos)
    d_t, d_h, d_w = cfg.split
    angles = torch.cat([
        _axis_angles(t_pos, d_t, cfg.base)[:, None, None, :].expand(T, H, W, d_t // 2),
        _axis_angles(h_pos, d_h, cfg.base)[None, :, None, :].expand(T, H, W, d_h // 2),
        _axis_angles(w_pos, d_w, cfg.base)[None, None, :, :].expand(T, H, W, d_w // 2),
    ], dim=-1)
    cos, sin = angles.cos(), angles.sin()
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1).flatten(-2)


def apply_rope3d(x: TokenField, cfg: RoPEConfig, window_local_origin=(0, 0, 0)) -> TokenField:
    T, H, W = x.shape[1:4]
    t0, h0, w0 = window_local_origin
    return rope_rotate(
        x,
        torch.arange(T) + t0,
        torch.arange(H) + h0,
        torch.arange(W) + w0,
        cfg,
    )


# ---------------- attention ---------------- #

def global_attention(x: TokenField, rope: RoPEConfig, weights: AttentionWeights,
                     mask: Optional[torch.Tensor] = None) -> TokenField:
    """Full multi-head attention over every token of ``x`` (one window)."""
    _, t, h, w, d = x.shape
    heads = weights.heads
    q, k, v = F.linear(x, weights.qkv_weight, weights.qkv_bias).chunk(3, dim=-1)
    q, k = apply_rope3d(q, rope), apply_rope3d(k, rope)
    q, k, v = (rearrange(a, "b t h w (n e) -> b n (t h w) e", n=heads) for a in (q, k, v))
    scores = q @ k.transpose(-2, -1) * (d // heads) ** -0.5
    if mask is not None:
        scores = scores + mask
    out = scores.softmax(dim=-1) @ v
    out = rearrange(out, "b n (t h w) e -> b t h w (n e)", t=t, h=h, w=w)
    return F.linear(out, weights.out_weight, weights.out_bias)


def window_attention(x: TokenField, spec: WindowSpec, shifted: bool, rope: RoPEConfig,
                     weights: AttentionWeights, stats: Optional[AttentionStats] = None) -> TokenField:
    _, T, H, W, d = x.shape
    if d % weights.heads:
        raise ConfigError(f"dim {d} is not divisible by {weights.heads} heads")
    if (d // weights.heads) % 2:
        raise ConfigError(f"head dim {d // weights.heads} must be even for rotary pairs")
    shift = spec.s_t if shifted and not spec.is_global and T >= spec.w_t else 0
    masks = None
    if shift:
        x = cyclic_shift(x, shift)
        masks = build_boundary_mask(T, spec)
    windows, index = partition_temporal(x, spec)
    logger.debug(f"window attention T={T} shift={shift} windows={len(windows)} pairs={attention_pair_count(T, H, W, spec)}")
    outputs = []
    for i, win in enumerate(windows):
        mask = None
        if masks is not None and not masks[i].all_allowed:
            mask = masks[i].additive(H * W)
        outputs.append(global_attention(win, rope, weights, mask))
        if stats is not None:
            stats.record(win.shape[1] * H * W)
    y = unpartition(outputs, index)
    return cyclic_shift(y, shift, inverse=True) if shift else y


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, spec: WindowSpec, rope: RoPEConfig, shifted: bool):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.spec = spec
        self.rope = rope
        self.shifted = shifted
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def weights(self) -> AttentionWeights:
        return AttentionWeights(self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias, self.heads)

    def forward(self, x, stats=None):
        return window_attention(x, self.spec, self.shifted, self.rope, self.weights(), stats)


class SwinBlock(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, spec: WindowSpec, rope: RoPEConfig, shifted: bool, mlp_ratio: int = 4):
        super().__init__()
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = WindowAttention(dim, heads, spec, rope, shifted)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x, stats=None):
        x = x + self.attn(self.norm1(x), stats)
        return x + self.mlp(self.norm2(x))


def swin_block_pair(x: TokenField, blocks: Sequence[SwinBlock], stats: Optional[AttentionStats] = None) -> TokenField:
    """Block 2L attends within plain windows, block 2L+1 within shifted ones."""
    first, second = blocks
    if first.shifted:
        raise ConfigError("the first block of a pair must use unshifted windows")
    return second(first(x, stats), stats)


def connectivity_pairs(T: int, spec: WindowSpec) -> int:
    """Block pairs needed before frame 0 can influence frame T-1."""
    if spec.is_global:
        return 1
    return max(1, math.ceil(T / spec.w_t))
