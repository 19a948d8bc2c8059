import logging

from config import Txt
from helper.commands import INDEX_FIELDS, INDEX_NAME, command, option, write_csv
from helper.errors import ConfigError
from helper.latent import Extent5, Rng, write_lgr
from helper.synth import KINDS, synth_video
from helper.utils import numbered_name, progress

logger = logging.getLogger(__name__)


def clip_seeds(cfg):
    """Per-clip seeds split off the master seed; ``seed_overrides`` replaces single entries."""
    names = [numbered_name("clip", i, suffix="") for i in range(cfg.count)]
    unknown = set(cfg.seed_overrides) - set(names)
    if unknown:
        raise ConfigError(f"seed_overrides names unknown clips: {', '.join(sorted(unknown))}")
    derived = Rng(cfg.seed).spawn_seeds(cfg.count)
    return [(name, int(cfg.seed_overrides.get(name, seed))) for name, seed in zip(names, derived)]


@command("synth", Txt.SYNTH_TXT, options=[option("--count", type=int, config_key="count", help="number of clips")])
def cmd_synth(ctx):
    cfg = ctx.cfg
    if cfg.count < 1:
        raise ConfigError("count must be >= 1")
    for kind in cfg.kinds:
        if kind not in KINDS:
            raise ConfigError(f"unknown synth kind {kind!r}; expected one of {', '.join(KINDS)}")
    ctx.claim(INDEX_NAME)
    extent = Extent5(1, cfg.channels, cfg.frames, cfg.height, cfg.width)

    rows, extra = [], {}
    for i, (name, seed) in enumerate(progress(clip_seeds(cfg), desc="synth", total=cfg.count)):
        kind = cfg.kinds[i % len(cfg.kinds)]
        video = synth_video(kind, extent, Rng(seed), max_speed=cfg.max_speed)
        filename = f"{name}.lgr"
        write_lgr(ctx.path(filename), video)
        rows.append([filename, kind, extent.f, extent.h, extent.w])
        extra[f"clips.{name}.seed"] = seed
    write_csv(ctx.path(INDEX_NAME), INDEX_FIELDS, rows)
    logger.info(f"wrote {len(rows)} clips of {extent} to {cfg.out_dir}")
    extra["clips.count"] = len(rows)
    ctx.finish(extra)
