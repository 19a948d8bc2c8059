from pathlib import Path

import pytest

from helper.checkpoint import Checkpoint
from helper.denoiser import Denoiser, DenoiserConfig
from helper.latent import Extent5, LatentGrid, Rng, describe, encode_lgr, read_lgr, sample_gaussian, write_lgr
from helper.trainer import TrainConfig, TrainResult, make_optimizer
from helper.utils import read_manifest
from surf import Surf

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def surf(*argv):
    return Surf().run([str(a) for a in argv])


def synth(out, *extra):
    return surf("synth", "--config", CONFIGS / "synth.yaml", "--set", f"out_dir={out}",
                "--set", "height=8", "--set", "width=8", "--count", 4, *extra)


def primary_files(folder):
    return {p.name: p.read_bytes() for p in sorted(Path(folder).iterdir()) if p.suffix in (".lgr", ".csv")}


def save_model(folder, cfg, seed=0, **meta):
    model = Denoiser(cfg, seed=seed)
    Checkpoint(folder).save(TrainResult(model, make_optimizer(model, TrainConfig())), cfg, cond_seed=99, **meta)
    return model


DEGRADATION_META = {
    "degradation.blur_radius": 1, "degradation.blur_strength": 1.0,
    "degradation.factor": 2, "degradation.noise_scale": 0.02,
}


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        assert surf("synth", "--set", f"out_dir={tmp_path}", "--set", "bogus=1") == 2

    def test_bad_value_type(self, tmp_path):
        assert surf("synth", "--set", f"out_dir={tmp_path}", "--set", "count=many") == 2

    def test_missing_config_file(self, tmp_path):
        assert surf("synth", "--config", tmp_path / "nope.yaml") == 3

    def test_missing_dataset(self, tmp_path):
        assert surf("train", "--set", f"dataset={tmp_path / 'none'}", "--set", f"out_dir={tmp_path / 'o'}") == 3

    def test_missing_checkpoint(self, tmp_path):
        assert surf("preview", "--set", f"checkpoint={tmp_path}", "--set", f"out_dir={tmp_path / 'p'}") == 3

    def test_contract_violation(self, tmp_path):
        cfg = DenoiserConfig(in_channels=4)
        save_model(tmp_path / "ckpt", cfg, **DEGRADATION_META)
        # a three-channel latent does not fit a four-channel refiner
        write_lgr(tmp_path / "odd.lgr", LatentGrid.zeros(Extent5(1, 3, 2, 4, 4)))
        code = surf("refine", "--set", f"checkpoint={tmp_path / 'ckpt'}", "--set", f"preview={tmp_path / 'odd.lgr'}",
                    "--set", f"out_dir={tmp_path / 'r'}")
        assert code == 4


class TestSynth:
    def test_index_rows(self, tmp_path):
        assert synth(tmp_path) == 0
        lines = (tmp_path / "index.csv").read_text().splitlines()
        assert lines[0] == "file,kind,frames,height,width"
        assert len(lines) == 5
        assert lines[1] == "clip_000.lgr,bouncing_rect,9,8,8"

    def test_twice_is_byte_identical(self, tmp_path):
        assert synth(tmp_path / "a") == 0
        assert synth(tmp_path / "b") == 0
        assert primary_files(tmp_path / "a") == primary_files(tmp_path / "b")

    def test_one_seed_override_changes_one_file(self, tmp_path):
        assert synth(tmp_path / "a") == 0
        assert synth(tmp_path / "b", "--set", "seed_overrides.clip_002=77") == 0
        a, b = primary_files(tmp_path / "a"), primary_files(tmp_path / "b")
        assert [name for name in a if a[name] != b[name]] == ["clip_002.lgr"]
        assert read_manifest(tmp_path / "b" / "manifest.txt")["clips.clip_002.seed"] == "77"

    def test_existing_output_needs_force(self, tmp_path):
        assert synth(tmp_path) == 0
        assert synth(tmp_path) == 3
        assert synth(tmp_path, "--force") == 0

    def test_manifest_records_run(self, tmp_path):
        assert synth(tmp_path) == 0
        entries = read_manifest(tmp_path / "manifest.txt")
        assert entries["command"] == "synth"
        assert entries["seed"] == "1234"
        assert entries["config.count"] == "4"
        assert entries["clips.count"] == "4"
        assert "versions.torch" in entries and "wall_s" in entries

    def test_manifest_replay(self, tmp_path):
        assert synth(tmp_path / "a") == 0
        code = surf("synth", "--manifest", tmp_path / "a" / "manifest.txt", "--set", f"out_dir={tmp_path / 'b'}")
        assert code == 0
        assert primary_files(tmp_path / "a") == primary_files(tmp_path / "b")

    def test_manifest_of_other_command(self, tmp_path):
        assert synth(tmp_path / "a") == 0
        assert surf("preview", "--manifest", tmp_path / "a" / "manifest.txt") == 2


class TestTrain:
    def run(self, data, out, *extra):
        return surf("train", "--config", CONFIGS / "train_refiner.yaml", "--set", f"dataset={data}",
                    "--set", f"out_dir={out}", "--set", "schedule.phase1_iters=2", "--set", "schedule.phase2_iters=2",
                    "--set", "optim.batch_size=1", *extra)

    def test_zero_lr_checkpoint_is_initialisation(self, tmp_path):
        assert synth(tmp_path / "data") == 0
        assert self.run(tmp_path / "data", tmp_path / "run", "--set", "optim.lr=0") == 0
        cfg = DenoiserConfig(in_channels=4, dim=12, heads=2, window=2)
        save_model(tmp_path / "init", cfg, seed=7)
        assert (tmp_path / "run" / "params.lgr").read_bytes() == (tmp_path / "init" / "params.lgr").read_bytes()
        lines = (tmp_path / "run" / "loss.csv").read_text().splitlines()
        assert lines[0] == "iter,loss,frames,wall_ms"
        assert [l.split(",")[2] for l in lines[1:]] == ["5", "5", "9", "9"]

    def test_resume_matches_straight_run(self, tmp_path):
        assert synth(tmp_path / "data") == 0
        assert self.run(tmp_path / "data", tmp_path / "straight") == 0
        assert self.run(tmp_path / "data", tmp_path / "split", "--stop-after", 3) == 0
        assert read_manifest(tmp_path / "split" / "manifest.txt")["iterations"] == "3"
        assert self.run(tmp_path / "data", tmp_path / "split", "--set", "resume=true") == 0
        assert (tmp_path / "split" / "params.lgr").read_bytes() == (tmp_path / "straight" / "params.lgr").read_bytes()
        assert (tmp_path / "split" / "optim.lgr").read_bytes() == (tmp_path / "straight" / "optim.lgr").read_bytes()
        assert len((tmp_path / "split" / "loss.csv").read_text().splitlines()) == 5

    def test_collision_without_force(self, tmp_path):
        assert synth(tmp_path / "data") == 0
        assert self.run(tmp_path / "data", tmp_path / "run") == 0
        assert self.run(tmp_path / "data", tmp_path / "run") == 3

    def test_unknown_target(self, tmp_path):
        assert synth(tmp_path / "data") == 0
        assert self.run(tmp_path / "data", tmp_path / "run", "--set", "target=vae") == 2


class TestPreview:
    def base(self, tmp_path):
        save_model(tmp_path / "base", DenoiserConfig(in_channels=4, dim=12, heads=2, window=2), seed=3)

    def run(self, tmp_path, out, *extra):
        return surf("preview", "--config", CONFIGS / "preview.yaml", "--set", f"checkpoint={tmp_path / 'base'}",
                    "--set", f"out_dir={out}", "--set", "n_total=8", "--set", "k=3", "--set", "frames=3", *extra)

    def test_nfe_split_in_manifest(self, tmp_path):
        self.base(tmp_path)
        assert self.run(tmp_path, tmp_path / "p") == 0
        entries = read_manifest(tmp_path / "p" / "manifest.txt")
        assert (entries["nfe.hi"], entries["nfe.lo"]) == ("4", "5")
        assert read_lgr(tmp_path / "p" / "preview_000.lgr").extent == Extent5(1, 4, 3, 4, 4)

    def test_same_seed_same_bytes(self, tmp_path):
        self.base(tmp_path)
        assert self.run(tmp_path, tmp_path / "a") == 0
        assert self.run(tmp_path, tmp_path / "b") == 0
        assert (tmp_path / "a" / "preview_000.lgr").read_bytes() == (tmp_path / "b" / "preview_000.lgr").read_bytes()

    def test_count_gives_distinct_seeds(self, tmp_path):
        self.base(tmp_path)
        assert self.run(tmp_path, tmp_path / "p", "--count", 3) == 0
        entries = read_manifest(tmp_path / "p" / "manifest.txt")
        seeds = {entries[f"previews.{i:03d}.seed"] for i in range(3)}
        assert len(seeds) == 3
        blobs = {(tmp_path / "p" / f"preview_{i:03d}.lgr").read_bytes() for i in range(3)}
        assert len(blobs) == 3

    def test_bad_turning_step(self, tmp_path):
        self.base(tmp_path)
        assert self.run(tmp_path, tmp_path / "p", "--set", "k=8") == 2


class TestRefine:
    def setup(self, tmp_path):
        save_model(tmp_path / "ref", DenoiserConfig(in_channels=4, dim=12, heads=2, window=2), seed=5,
                   **DEGRADATION_META)
        write_lgr(tmp_path / "preview.lgr", sample_gaussian(Extent5(1, 4, 3, 4, 4), Rng(1)))

    def run(self, tmp_path, out, *extra):
        return surf("refine", "--set", f"checkpoint={tmp_path / 'ref'}", "--set", f"preview={tmp_path / 'preview.lgr'}",
                    "--set", f"out_dir={out}", "--set", "n_steps=4", *extra)

    def test_outputs_and_manifest(self, tmp_path):
        self.setup(tmp_path)
        assert self.run(tmp_path, tmp_path / "r") == 0
        entries = read_manifest(tmp_path / "r" / "manifest.txt")
        assert entries["n_steps"] == entries["nfe"] == "4"
        assert read_lgr(tmp_path / "r" / "refined.lgr").extent == Extent5(1, 4, 3, 8, 8)
        frames = sorted((tmp_path / "r" / "frames").glob("*.ppm"))
        assert [f.name for f in frames] == ["frame_00_000.ppm", "frame_00_001.ppm", "frame_00_002.ppm"]
        blob = frames[0].read_bytes()
        assert blob.startswith(b"P6")
        assert len(blob) >= 16 * 16 * 3

    def test_benchmark_recorded(self, tmp_path):
        self.setup(tmp_path)
        assert synth(tmp_path / "held") == 0
        assert self.run(tmp_path, tmp_path / "r", "--set", f"benchmark.dataset={tmp_path / 'held'}",
                        "--set", "benchmark.count=3") == 0
        entries = read_manifest(tmp_path / "r" / "manifest.txt")
        assert entries["benchmark.items"] == "3"
        assert 0.0 <= float(entries["benchmark.win_rate"]) <= 1.0
        assert 0.0 <= float(entries["benchmark.preview_win_rate"]) <= 1.0

    def test_deterministic_frames(self, tmp_path):
        self.setup(tmp_path)
        assert self.run(tmp_path, tmp_path / "a") == 0
        assert self.run(tmp_path, tmp_path / "b") == 0
        for name in ("refined.lgr", "frames/frame_00_001.ppm"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestProfileAndInspect:
    def test_profile_report(self, tmp_path, capsys):
        assert surf("profile", "--config", CONFIGS / "profile.yaml", "--set", f"out_dir={tmp_path}") == 0
        rows = {l.split(",")[0]: l.split(",") for l in (tmp_path / "report.csv").read_text().splitlines()[1:]}
        assert float(rows["baseline@30%steps"][3]) == pytest.approx(0.3, abs=1e-3)
        assert float(rows["baseline@50%steps"][3]) == pytest.approx(0.5, abs=1e-3)
        times = [float(l.split(",")[1]) for l in (tmp_path / "step_division.csv").read_text().splitlines()[1:]]
        assert all(b > a for a, b in zip(times, times[1:]))
        out = capsys.readouterr().out
        assert "R2=0.99" in out
        entries = read_manifest(tmp_path / "manifest.txt")
        assert float(entries["reduction"]) >= 12
        assert float(entries["fit.step_division.r2"]) >= 0.99

    def test_profile_time_ratios_match_published(self, tmp_path):
        assert surf("profile", "--config", CONFIGS / "profile.yaml", "--set", f"out_dir={tmp_path}") == 0
        rows = {l.split(",")[0]: l.split(",") for l in (tmp_path / "published.csv").read_text().splitlines()[1:]}
        for key, expected in (("steps_30_time_ratio", 1049 / 3497), ("steps_50_time_ratio", 1748 / 3497)):
            ours, published = float(rows[key][1]), float(rows[key][2])
            assert published == pytest.approx(expected, abs=1e-4)
            assert ours == pytest.approx(published, abs=1e-3)

    def test_profile_needs_two_stages(self, tmp_path):
        assert surf("profile", "--set", f"out_dir={tmp_path}") == 2

    def test_inspect_matches_logged_stats(self, tmp_path, capsys):
        z = sample_gaussian(Extent5(1, 4, 3, 8, 8), Rng(42))
        logged = describe(z, "noise")
        write_lgr(tmp_path / "z.lgr", z)
        assert surf("inspect", tmp_path / "z.lgr") == 0
        out = capsys.readouterr().out
        assert f"mean    : {logged.mean!r}" in out
        assert f"std     : {logged.std!r}" in out
        assert "nan     : 0" in out

    def test_inspect_truncated(self, tmp_path):
        (tmp_path / "short.lgr").write_bytes(encode_lgr(LatentGrid.zeros(Extent5(1, 1, 1, 2, 2)))[:-3])
        assert surf("inspect", tmp_path / "short.lgr") == 3


@pytest.mark.slow
def test_pipeline_replays_byte_identically(tmp_path):
    def pipeline(root):
        tiny = ("--set", "schedule.phase1_iters=5", "--set", "schedule.phase2_iters=5")
        assert synth(root / "data") == 0
        assert surf("train", "--config", CONFIGS / "train_base.yaml", "--set", f"dataset={root / 'data'}",
                    "--set", f"out_dir={root / 'base'}", *tiny) == 0
        assert surf("train", "--config", CONFIGS / "train_refiner.yaml", "--set", f"dataset={root / 'data'}",
                    "--set", f"out_dir={root / 'refiner'}", *tiny) == 0
        assert surf("preview", "--config", CONFIGS / "preview.yaml", "--set", f"checkpoint={root / 'base'}",
                    "--set", f"out_dir={root / 'preview'}", "--set", "n_total=8", "--set", "k=2") == 0
        assert surf("refine", "--config", CONFIGS / "refine.yaml", "--set", f"checkpoint={root / 'refiner'}",
                    "--set", f"preview={root / 'preview' / 'preview_000.lgr'}", "--set", f"out_dir={root / 'refine'}",
                    "--set", "benchmark.dataset=null") == 0

    pipeline(tmp_path / "first")
    first = tmp_path / "first"
    second = tmp_path / "second"
    # replay every stage from its manifest, only redirecting paths
    assert surf("synth", "--manifest", first / "data" / "manifest.txt", "--set", f"out_dir={second / 'data'}") == 0
    for name in ("base", "refiner"):
        assert surf("train", "--manifest", first / name / "manifest.txt", "--set", f"dataset={second / 'data'}",
                    "--set", f"out_dir={second / name}") == 0
    assert surf("preview", "--manifest", first / "preview" / "manifest.txt", "--set", f"checkpoint={second / 'base'}",
                "--set", f"out_dir={second / 'preview'}") == 0
    assert surf("refine", "--manifest", first / "refine" / "manifest.txt", "--set", f"checkpoint={second / 'refiner'}",
                "--set", f"preview={second / 'preview' / 'preview_000.lgr'}", "--set", f"out_dir={second / 'refine'}") == 0

    for rel in ("data/clip_000.lgr", "data/index.csv", "base/params.lgr", "refiner/params.lgr",
                "preview/preview_000.lgr", "refine/refined.lgr", "refine/frames/frame_00_004.ppm"):
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
