"""Toy velocity transformer used both as the preview base model and as the refiner.

Tokens are p x p latent patches; every block pair runs plain then shifted
temporal-window attention (or global attention when the window is 0), so the
same weights accept any frame count and any spatial size divisible by the patch.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .codec import ToyCodec
from .errors import ConfigError, InvalidArgumentError, ModelContractError, ShapeError
from .flow import Conditioning, build_schedule, integrate
from .latent import LatentGrid, Rng, axpy, resize_spatial, sample_gaussian
from .swin import AttentionStats, RoPEConfig, SwinBlock, WindowSpec, swin_block_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
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

    def __post_init__(self):
        if self.depth < 2 or self.depth % 2:
            raise ConfigError(f"depth must be a positive even number (whole block pairs), got {self.depth}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim % 6:
            raise ConfigError(f"dim {self.dim} must be a multiple of 6 for the rotary split")
        if (self.dim // self.heads) % 2:
            raise ConfigError(f"head dim {self.dim // self.heads} must be even")
        if self.patch < 1 or self.in_channels < 1 or self.cond_dim < 1:
            raise ConfigError("patch, in_channels and cond_dim must be positive")
        if self.freq_dim < 2 or self.freq_dim % 2:
            raise ConfigError(f"freq_dim must be even, got {self.freq_dim}")
        if self.init_std < 0:
            raise ConfigError("init_std must be >= 0")

    @property
    def token_dim(self) -> int:
        return self.in_channels * self.patch * self.patch

    @classmethod
    def from_section(cls, section, in_channels: int) -> "DenoiserConfig":
        return cls(
            in_channels=in_channels,
            patch=section.patch,
            dim=section.dim,
            heads=section.heads,
            depth=section.depth,
            window=section.window,
            cond_dim=section.cond_dim,
            freq_dim=section.freq_dim,
            rope_base=section.rope_base,
            shift_window=section.shift_window,
            init_std=section.init_std,
        )


def sigma_embedding(sigma, freq_dim: int) -> torch.Tensor:
    """Sinusoidal features of 1000 * sigma; a scalar gives (freq_dim,), a (b,) tensor (b, freq_dim)."""
    sigma = torch.as_tensor(sigma, dtype=torch.float64)
    half = freq_dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = 1000.0 * sigma[..., None] * freqs
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class Denoiser(nn.Module):
    """Patch embed, sigma/conditioning bias, swin block pairs, linear head.

    Conditioning is not a separate token: ``cond_proj(cond)`` is added to the
    sigma embedding and the sum is broadcast onto every patch token.
    """

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        spec = WindowSpec(cfg.window)
        rope = RoPEConfig.for_dim(cfg.dim, cfg.rope_base)
        self.embed = nn.Linear(cfg.token_dim, cfg.dim)
        self.sigma_mlp = nn.Sequential(
            nn.Linear(cfg.freq_dim, cfg.dim),
            nn.SiLU(),
            nn.Linear(cfg.dim, cfg.dim),
        )
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.dim, bias=False)
        self.blocks = nn.ModuleList(
            SwinBlock(cfg.dim, cfg.heads, spec, rope, shifted=cfg.shift_window and i % 2 == 1)
            for i in range(cfg.depth)
        )
        self.norm_out = nn.LayerNorm(cfg.dim, eps=1e-6)
        self.head = nn.Linear(cfg.dim, cfg.token_dim)
        self.double()
        self.reset_parameters(Rng(seed))

    def reset_parameters(self, rng: Rng):
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name.endswith("bias"):
                    param.zero_()
                elif "norm" in name:
                    param.fill_(1.0)
                else:
                    noise = rng.standard_normal(tuple(param.shape)) * self.cfg.init_std
                    param.copy_(torch.from_numpy(noise))

    def check_input(self, z: LatentGrid, sigma, cond: Conditioning):
        e = z.extent
        p = self.cfg.patch
        if e.h % p or e.w % p:
            raise ConfigError(f"spatial size {e.h}x{e.w} is not divisible by patch {p}")
        if e.c != self.cfg.in_channels:
            raise ShapeError(f"model expects {self.cfg.in_channels} channels, got {e.c}")
        if cond.dim != self.cfg.cond_dim:
            raise ShapeError(f"model expects conditioning of dim {self.cfg.cond_dim}, got {cond.dim}")
        s = torch.as_tensor(sigma, dtype=torch.float64)
        if bool(((s < 0) | (s > 1)).any()):
            raise InvalidArgumentError(f"sigma must lie in [0, 1], got {sigma}")

    def forward(self, z: torch.Tensor, sigma, cond: torch.Tensor,
                stats: Optional[AttentionStats] = None) -> torch.Tensor:
        p = self.cfg.patch
        tokens = rearrange(z, "b c f (h p1) (w p2) -> b f h w (c p1 p2)", p1=p, p2=p)
        x = self.embed(tokens)
        emb = self.sigma_mlp(sigma_embedding(sigma, self.cfg.freq_dim)) + self.cond_proj(cond)
        if emb.dim() == 2:
            emb = emb[:, None, None, None, :]
        x = x + emb
        for i in range(0, len(self.blocks), 2):
            x = swin_block_pair(x, (self.blocks[i], self.blocks[i + 1]), stats)
        out = self.head(self.norm_out(x))
        return rearrange(out, "b f h w (c p1 p2) -> b c f (h p1) (w p2)", p1=p, p2=p)

    def evaluate(self, z: LatentGrid, sigma: float, cond: Conditioning) -> LatentGrid:
        self.check_input(z, sigma, cond)
        with torch.no_grad():
            return LatentGrid(self(z.values, float(sigma), cond.values))


def forward_velocity(params: Denoiser, z: LatentGrid, sigma: float, cond: Conditioning) -> LatentGrid:
    return params.evaluate(z, sigma, cond)


def _sigma_arg(sigma):
    s = torch.as_tensor(sigma, dtype=torch.float64)
    return s if s.dim() else float(s)


def backward(params: Denoiser, z: LatentGrid, sigma, cond: Conditioning,
             upstream_grad: LatentGrid) -> Dict[str, torch.Tensor]:
    """Gradients of sum(upstream_grad * forward(z)) w.r.t. every named parameter.

    ``sigma`` is a scalar or one value per batch entry.
    """
    params.check_input(z, sigma, cond)
    if upstream_grad.values.shape != z.values.shape:
        raise ShapeError(f"upstream gradient {upstream_grad.extent} does not match output {z.extent}")
    names, tensors = zip(*params.named_parameters())
    with torch.enable_grad():
        out = params(z.values, _sigma_arg(sigma), cond.values)
        grads = torch.autograd.grad(out, tensors, grad_outputs=upstream_grad.values, allow_unused=True)
    return {
        name: torch.zeros_like(t) if g is None else g.detach()
        for name, t, g in zip(names, tensors, grads)
    }


# ---------------- degradation ---------------- #

@dataclass(frozen=True)
class DegradationConfig:
    blur_radius: int = 1
    blur_strength: float = 1.0
    factor: int = 2
    noise_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.blur_radius < 0 or self.blur_strength < 0 or self.noise_scale < 0:
            raise ConfigError("degradation scales must be >= 0")
        if self.factor < 1:
            raise ConfigError(f"down-up factor must be >= 1, got {self.factor}")

    @classmethod
    def from_section(cls, section, seed: int = 0) -> "DegradationConfig":
        return cls(section.blur_radius, section.blur_strength, section.factor, section.noise_scale, seed)


def gaussian_kernel(radius: int, strength: float) -> torch.Tensor:
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-x ** 2 / (2 * strength ** 2))
    return k / k.sum()


def gaussian_blur(pixels: LatentGrid, radius: int, strength: float) -> LatentGrid:
    """Separable Gaussian blur of every frame, edges replicated."""
    if radius == 0 or strength == 0:
        return LatentGrid(pixels.values.clone())
    e = pixels.extent
    k = gaussian_kernel(radius, strength)
    x = rearrange(pixels.values, "b c f h w -> (b c f) 1 h w")
    x = F.pad(x, (radius, radius, radius, radius), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    return LatentGrid(rearrange(x, "(b c f) 1 h w -> b c f h w", b=e.b, c=e.c))


def degrade_pair(hr_pixels: LatentGrid, codec: ToyCodec, cfg: DegradationConfig,
                 rng=None) -> Tuple[LatentGrid, LatentGrid]:
    """(z_lr, z_hr): blur, down-up resample and encode, then add latent noise."""
    e = hr_pixels.extent
    for step in (cfg.factor, codec.factor):
        if e.h % step or e.w % step:
            raise ConfigError(f"pixel size {e.h}x{e.w} is not divisible by {step}")
    z_hr = codec.encode(hr_pixels)
    x = gaussian_blur(hr_pixels, cfg.blur_radius, cfg.blur_strength)
    if cfg.factor > 1:
        x = resize_spatial(x, e.h // cfg.factor, e.w // cfg.factor)
        x = resize_spatial(x, e.h, e.w)
    z_lr = codec.encode(x)
    if cfg.noise_scale > 0:
        rng = Rng(cfg.seed) if rng is None else rng
        z_lr = axpy(cfg.noise_scale, sample_gaussian(z_lr.extent, rng), z_lr)
    return z_lr, z_hr


# ---------------- refiner flow mapping ---------------- #

def flow_mapping(z_lr: LatentGrid, z_hr: LatentGrid, t) -> Tuple[LatentGrid, LatentGrid]:
    """Point on the straight path z_hr -> z_lr at t and its constant velocity z_lr - z_hr.

    ``t`` is a scalar or one position per batch entry.
    """
    if z_lr.values.shape != z_hr.values.shape:
        raise ShapeError(f"refiner pair extents differ: {z_lr.extent} vs {z_hr.extent}")
    tt = torch.as_tensor(t, dtype=torch.float64)
    if tt.dim() > 1 or (tt.dim() == 1 and tt.numel() != z_hr.extent.b):
        raise ShapeError(f"need one path position per batch entry ({z_hr.extent.b}), got shape {tuple(tt.shape)}")
    if not bool(((tt > 0.0) & (tt < 1.0)).all()):
        raise InvalidArgumentError(f"t must lie strictly inside (0, 1), got {t}")
    if tt.dim():
        tt = tt.view(-1, 1, 1, 1, 1)
    z_t = LatentGrid((1.0 - tt) * z_hr.values + tt * z_lr.values)
    return z_t, LatentGrid(z_lr.values - z_hr.values)


def refiner_loss(params: Denoiser, z_lr: LatentGrid, z_hr: LatentGrid, t, cond: Conditioning):
    """MSE between the predicted and the target velocity, with parameter gradients.

    With ``z_lr`` pure noise and ``z_hr`` clean latents this is the base model's
    noise-to-data objective, ``t`` playing sigma.
    """
    if not isinstance(params, Denoiser):
        raise ModelContractError(f"parameter gradients need a Denoiser, got {type(params).__name__}")
    z_t, target = flow_mapping(z_lr, z_hr, t)
    params.check_input(z_t, t, cond)
    with torch.no_grad():
        pred = params(z_t.values, _sigma_arg(t), cond.values)
    residual = pred - target.values
    upstream = LatentGrid(2.0 * residual / residual.numel())
    return float(torch.mean(residual ** 2)), backward(params, z_t, t, cond, upstream)


def refine(params, preview_lo: LatentGrid, target_hw: Tuple[int, int], n_steps: int,
           cond: Conditioning) -> LatentGrid:
    if n_steps < 1:
        raise InvalidArgumentError(f"refine needs at least one step, got {n_steps}")
    z = resize_spatial(preview_lo, *target_hw)
    return integrate(params, z, build_schedule(n_steps, 1.0), cond, desc="refine")
