import io
import logging

import numpy as np
from PIL import Image

from config import Txt
from helper.checkpoint import Checkpoint
from helper.codec import ToyCodec
from helper.commands import command, load_dataset
from helper.denoiser import DegradationConfig, refine
from helper.errors import ConfigError, StorageError
from helper.flow import Conditioning, CountingModel
from helper.latent import LatentGrid, describe, read_lgr, write_lgr
from helper.trainer import refiner_benchmark
from helper.utils import atomic_write

logger = logging.getLogger(__name__)

REFINED_NAME = "refined.lgr"
FRAMES_DIR = "frames"


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(frame: np.ndarray) -> bytes:
    """Binary P6 bytes of a (channels, h, w) frame; one channel is repeated to grey RGB."""
    rgb = frame if frame.shape[0] == 3 else np.repeat(frame[:1], 3, axis=0)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(quantize(rgb).transpose(1, 2, 0))).save(buf, format="PPM")
    return buf.getvalue()


def write_frames(ctx, pixels: LatentGrid):
    names = []
    values = pixels.numpy()
    for b in range(values.shape[0]):
        for f in range(values.shape[2]):
            name = f"{FRAMES_DIR}/frame_{b:02d}_{f:03d}.ppm"
            atomic_write(ctx.path(name), encode_ppm(values[b, :, f]))
            names.append(name)
    return names


def degradation_from_meta(meta) -> DegradationConfig:
    try:
        return DegradationConfig(
            blur_radius=int(meta["degradation.blur_radius"]),
            blur_strength=float(meta["degradation.blur_strength"]),
            factor=int(meta["degradation.factor"]),
            noise_scale=float(meta["degradation.noise_scale"]),
        )
    except KeyError as e:
        raise ConfigError(f"refiner checkpoint does not record {e.args[0]}") from e


@command("refine", Txt.REFINE_TXT)
def cmd_refine(ctx):
    cfg = ctx.cfg
    if cfg.scale < 1:
        raise ConfigError("scale must be >= 1")
    ckpt = Checkpoint(cfg.checkpoint)
    if not ckpt.exists():
        raise StorageError(f"no refiner checkpoint in {cfg.checkpoint}")
    model = ckpt.load_params()
    meta = ckpt.meta()
    cond = Conditioning.fixed(model.cfg.cond_dim, int(meta.get("cond_seed", 0)))
    preview = read_lgr(cfg.preview)
    e = preview.extent
    target = (e.h * cfg.scale, e.w * cfg.scale)
    ctx.claim(REFINED_NAME)

    counted = CountingModel(model)
    refined = refine(counted, preview, target, cfg.n_steps, cond)
    write_lgr(ctx.path(REFINED_NAME), refined)
    describe(refined, REFINED_NAME)
    frames = write_frames(ctx, ToyCodec().decode(refined))

    extra = {
        "n_steps": cfg.n_steps,
        "nfe": counted.nfe,
        "extent.preview": str(e),
        "extent.refined": str(refined.extent),
        "frames.count": len(frames),
    }
    if cfg.benchmark.dataset:
        clips = load_dataset(cfg.benchmark.dataset)[:cfg.benchmark.count]
        bench = refiner_benchmark(model, clips, ToyCodec(), degradation_from_meta(meta),
                                  cfg.n_steps, cond, cfg.benchmark.seed)
        extra["benchmark.items"] = len(bench.rows)
        extra["benchmark.wins"] = bench.wins
        extra["benchmark.win_rate"] = bench.win_rate
        extra["benchmark.preview_win_rate"] = bench.preview_win_rate
    ctx.finish(extra)
