import logging
from dataclasses import replace

from config import Txt
from helper.commands import command, option, write_csv
from helper.costmodel import (
    PUBLISHED_PFLOPS,
    PUBLISHED_REFINE_STEPS,
    PUBLISHED_STEP_DIVISION,
    PUBLISHED_TIMES_S,
    DivisionCosts,
    PipelineSpec,
    StageSpec,
    calibrate,
    fit_affine,
    pipeline_report,
    predicted_seconds,
    refiner_step_curve,
    step_division_curve,
)
from helper.denoiser import Denoiser, DenoiserConfig
from helper.errors import ConfigError
from helper.flow import Conditioning
from helper.latent import Extent5, Rng, sample_gaussian
from helper.utils import Stopwatch, atomic_write_text

logger = logging.getLogger(__name__)

PROBE_CHANNELS = 4


def measure_probes(cfg):
    """Time toy forward passes at several square sizes; returns (StageSpec, seconds) pairs."""
    m = cfg.measure
    model_cfg = DenoiserConfig(in_channels=PROBE_CHANNELS)
    model = Denoiser(model_cfg)
    cond = Conditioning.zeros(model_cfg.cond_dim)
    measured = []
    for size in m.sizes:
        z = sample_gaussian(Extent5(1, PROBE_CHANNELS, m.frames, size, size), Rng(size))
        best = None
        for _ in range(m.repeats):
            timer = Stopwatch()
            for _ in range(m.steps):
                model.evaluate(z, 0.5, cond)
            best = timer.seconds if best is None else min(best, timer.seconds)
        spec = StageSpec.from_latent(
            f"probe_{size}", m.frames, size, size, model_cfg.patch, model_cfg.dim, model_cfg.heads,
            model_cfg.depth, m.steps, model_cfg.window,
        )
        measured.append((spec, best))
        logger.info(f"probe {size}x{size}: {best:.4f}s for {m.steps} steps")
    return measured


@command("profile", Txt.PROFILE_TXT, options=[
    option("--measure", action="store_true", config_key="measure.enabled", help="time toy probes and calibrate"),
])
def cmd_profile(ctx):
    cfg = ctx.cfg
    if len(cfg.stages) < 2:
        raise ConfigError("profile needs at least the hi-res and lo-res preview stages")
    baseline = StageSpec.from_section(cfg.baseline)
    stages = [StageSpec.from_section(s) for s in cfg.stages]
    rate, overhead = cfg.seconds_per_flop, None
    extra = {}

    if cfg.measure.enabled:
        measured = measure_probes(cfg)
        cal = calibrate(measured)
        rate, overhead = cal.rate, cal.overhead_s
        write_csv(ctx.path("calibration.csv"), ["probe", "measured_s", "predicted_s"], [
            [spec.name, f"{t:.6f}", f"{predicted_seconds(spec, cal.rate, cal.overhead_s):.6f}"]
            for spec, t in measured
        ])
        extra.update({"calibration.rate": cal.rate, "calibration.overhead_s": cal.overhead_s,
                      "calibration.rms_s": cal.rms})
    if overhead is not None:
        stages = [replace(s, overhead_s=overhead) for s in stages]
        baseline = replace(baseline, overhead_s=overhead)

    report = pipeline_report(PipelineSpec(tuple(stages), baseline), rate, cfg.step_fractions)
    atomic_write_text(ctx.path("report.csv"), report.to_csv())

    refiner = stages[2] if len(stages) > 2 else None
    costs = DivisionCosts.from_specs(stages[0], stages[1], refiner, rate, cfg.n_total, cfg.fixed_s)
    division = step_division_curve(cfg.k_values, costs)
    published = dict(PUBLISHED_STEP_DIVISION)
    write_csv(ctx.path("step_division.csv"), ["k", "predicted_s", "published_s"], [
        [k, f"{t:.6f}", published.get(k, "")] for k, t in division
    ])

    refine_curve = []
    if refiner is not None:
        refine_curve = refiner_step_curve([s for s, _ in PUBLISHED_REFINE_STEPS], refiner, rate, cfg.fixed_s)
        published = dict(PUBLISHED_REFINE_STEPS)
        write_csv(ctx.path("refine_steps.csv"), ["steps", "predicted_s", "published_s"], [
            [s, f"{t:.6f}", published[s]] for s, t in refine_curve
        ])

    div_fit = fit_affine(PUBLISHED_STEP_DIVISION)
    ref_fit = fit_affine(PUBLISHED_REFINE_STEPS)
    published_reduction = PUBLISHED_PFLOPS["baseline"] / PUBLISHED_PFLOPS["two_stage"]
    write_csv(ctx.path("published.csv"), ["quantity", "ours", "published"], [
        ["reduction", f"{float(report.reduction):.4f}", f"{published_reduction:.4f}"],
        ["baseline_pflops", f"{report.baseline_flops / 1e15:.4f}", PUBLISHED_PFLOPS["baseline"]],
        ["two_stage_pflops", f"{report.total_flops / 1e15:.4f}", PUBLISHED_PFLOPS["two_stage"]],
        ["steps_30_ratio", _variant_ratio(report, 0), f"{PUBLISHED_PFLOPS['steps_30'] / PUBLISHED_PFLOPS['baseline']:.4f}"],
        ["steps_50_ratio", _variant_ratio(report, 1), f"{PUBLISHED_PFLOPS['steps_50'] / PUBLISHED_PFLOPS['baseline']:.4f}"],
        ["steps_30_time_ratio", _variant_time_ratio(report, 0), f"{PUBLISHED_TIMES_S['steps_30'] / PUBLISHED_TIMES_S['baseline']:.4f}"],
        ["steps_50_time_ratio", _variant_time_ratio(report, 1), f"{PUBLISHED_TIMES_S['steps_50'] / PUBLISHED_TIMES_S['baseline']:.4f}"],
    ])

    footer = Txt.PROFILE_FOOTER.format(
        slope=div_fit.slope, r2=div_fit.r2, rslope=ref_fit.slope, rr2=ref_fit.r2,
        ours=float(report.reduction), published=published_reduction,
    )
    print(report.to_csv() + footer)
    logger.info(f"reduction {float(report.reduction):.2f}x, step-division fit R2={div_fit.r2:.5f}")

    extra.update({
        "flops.total": report.total_flops,
        "flops.baseline": report.baseline_flops,
        "reduction": float(report.reduction),
        "published.reduction": published_reduction,
        "fit.step_division.slope": div_fit.slope,
        "fit.step_division.r2": div_fit.r2,
        "fit.refine_steps.slope": ref_fit.slope,
        "fit.refine_steps.r2": ref_fit.r2,
        "division.points": len(division),
        "refine_steps.points": len(refine_curve),
    })
    ctx.finish(extra)


def _variant_ratio(report, i):
    return f"{float(report.variants[i].ratio):.4f}" if len(report.variants) > i else ""


def _variant_time_ratio(report, i):
    if len(report.variants) <= i or report.baseline_s <= 0:
        return ""
    return f"{report.variants[i].predicted_s / report.baseline_s:.4f}"
