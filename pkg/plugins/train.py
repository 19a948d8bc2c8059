import logging

from config import Txt
from helper.checkpoint import Checkpoint
from helper.codec import ToyCodec
from helper.commands import command, load_dataset, option, read_csv, write_csv
from helper.denoiser import DegradationConfig, Denoiser, DenoiserConfig
from helper.errors import ConfigError, StorageError
from helper.flow import Conditioning
from helper.trainer import TrainConfig, train_base, train_refiner

logger = logging.getLogger(__name__)

TARGETS = ("base", "refiner")
LOSS_NAME = "loss.csv"
LOSS_FIELDS = ["iter", "loss", "frames", "wall_ms"]


@command("train", Txt.TRAIN_TXT, options=[
    option("--stop-after", type=int, config_key="stop_after", help="stop after this many iterations"),
])
def cmd_train(ctx):
    cfg = ctx.cfg
    if cfg.target not in TARGETS:
        raise ConfigError(f"train target must be one of {', '.join(TARGETS)}, got {cfg.target!r}")
    dataset = load_dataset(cfg.dataset)
    if not dataset:
        raise ConfigError(f"dataset {cfg.dataset} is empty")
    codec = ToyCodec()
    train_cfg = TrainConfig.from_sections(cfg.optim, cfg.schedule)
    deg_cfg = DegradationConfig.from_section(cfg.degradation, seed=cfg.seed)
    model_cfg = DenoiserConfig.from_section(cfg.model, in_channels=dataset[0].extent.c * codec.factor ** 2)
    cond = Conditioning.fixed(model_cfg.cond_dim, cfg.cond_seed)
    ckpt = Checkpoint(cfg.out_dir)

    previous = []
    if cfg.resume:
        if not ckpt.exists():
            raise StorageError(f"nothing to resume in {cfg.out_dir}")
        resume = ckpt.load_training(train_cfg)
        if resume.params.cfg != model_cfg:
            raise ConfigError("model section differs from the checkpoint being resumed")
        params = resume.params
        previous = [r for r in read_csv(ctx.path(LOSS_NAME)) if int(r["iter"]) < resume.iteration]
        logger.info(f"resuming {cfg.target} training at iteration {resume.iteration}")
    else:
        ctx.claim("params.idx", LOSS_NAME)
        params = Denoiser(model_cfg, seed=cfg.seed)
        resume = None

    if cfg.target == "refiner":
        result = train_refiner(dataset, codec, deg_cfg, train_cfg, params, cond, cfg.seed,
                               resume=resume, stop_after=cfg.stop_after)
    else:
        result = train_base(dataset, codec, train_cfg, params, cond, cfg.seed,
                            resume=resume, stop_after=cfg.stop_after)

    degradation = {f"degradation.{k}": v for k, v in cfg.degradation.items()}
    ckpt.save(result, model_cfg, target=cfg.target, cond_seed=cfg.cond_seed, **degradation)
    rows = [[r["iter"], r["loss"], r["frames"], r["wall_ms"]] for r in previous]
    rows += [[r.iteration, repr(r.loss), r.frames, r.wall_ms] for r in result.rows]
    write_csv(ctx.path(LOSS_NAME), LOSS_FIELDS, rows)

    extra = {"iterations": result.iteration, "target": cfg.target}
    if result.rows:
        extra["loss.first"] = result.rows[0].loss
        extra["loss.last"] = result.rows[-1].loss
    ctx.finish(extra)
