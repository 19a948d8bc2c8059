import asyncio
import logging
from dataclasses import dataclass

from config import Config, Txt
from helper.checkpoint import Checkpoint
from helper.commands import command, option
from helper.errors import ConfigError, StorageError
from helper.flow import Conditioning
from helper.latent import Extent5, Rng, describe, write_lgr
from helper.reshift import PreviewConfig, PreviewResult, generate_preview
from helper.utils import numbered_name

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreviewJob:
    index: int
    seed: int
    filename: str


def preview_seeds(seed: int, count: int):
    if count < 1:
        raise ConfigError("count must be >= 1")
    return [seed] if count == 1 else Rng(seed).spawn_seeds(count)


async def fan_out(jobs, run_one, workers: int):
    """Drain ``jobs`` with ``workers`` tasks, each running ``run_one`` in a worker thread."""
    queue = asyncio.Queue()
    for job in jobs:
        queue.put_nowait(job)
    results = {}

    async def worker():
        while True:
            try:
                job = queue.get_nowait()
            except asyncio.QueueEmpty:
                return
            try:
                results[job.index] = await asyncio.to_thread(run_one, job)
            finally:
                queue.task_done()

    await asyncio.gather(*(worker() for _ in range(max(1, workers))))
    return [results[job.index] for job in jobs]


@command("preview", Txt.PREVIEW_TXT, options=[
    option("--count", type=int, config_key="count", help="number of previews from split seeds"),
])
def cmd_preview(ctx):
    cfg = ctx.cfg
    ckpt = Checkpoint(cfg.checkpoint)
    if not ckpt.exists():
        raise StorageError(f"no base checkpoint in {cfg.checkpoint}")
    model = ckpt.load_params()
    cond = Conditioning.fixed(model.cfg.cond_dim, int(ckpt.meta().get("cond_seed", 0)))
    template = Extent5(cfg.batch, model.cfg.in_channels, cfg.frames, *cfg.hi)

    jobs = [
        PreviewJob(i, seed, numbered_name("preview", i))
        for i, seed in enumerate(preview_seeds(cfg.seed, cfg.count))
    ]
    ctx.claim(*(job.filename for job in jobs))

    def run_one(job: PreviewJob) -> PreviewResult:
        pcfg = PreviewConfig(cfg.n_total, cfg.k, tuple(cfg.hi), tuple(cfg.lo), cfg.shift, job.seed)
        result = generate_preview(model, cond, pcfg, template)
        write_lgr(ctx.path(job.filename), result.latent)
        return result

    results = asyncio.run(fan_out(jobs, run_one, Config.WORKERS))

    extra = {}
    for job, result in zip(jobs, results):
        stats = describe(result.latent, job.filename)
        key = f"previews.{job.index:03d}"
        extra[f"{key}.file"] = job.filename
        extra[f"{key}.seed"] = job.seed
        extra[f"{key}.mean"] = stats.mean
        extra[f"{key}.std"] = stats.std
        extra[f"{key}.wall_s"] = round(result.wall_s, 3)
    first = results[0]
    extra["nfe.hi"] = first.nfe_hi
    extra["nfe.lo"] = first.nfe_lo
    extra["sigma_k"] = first.sigma_k
    extra["token_steps.hi"] = first.token_steps(model.cfg.patch, tuple(cfg.hi))
    extra["token_steps.lo"] = first.token_steps(model.cfg.patch, tuple(cfg.lo))
    ctx.finish(extra)
