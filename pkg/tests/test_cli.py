"""Command-line interface tests: encode/search/eval flows, determinism,
exit-code classes, and config round-trips."""

import json
from pathlib import Path

import numpy as np
import pytest

from fldkit.cli import main
from fldkit.datasets import write_pts
from fldkit.heatmaps import LandmarkSet


@pytest.fixture
def w68_manifest(tmp_path):
    rng = np.random.default_rng(140)
    lines = []
    for i in range(2):
        pts = rng.uniform(20, 200, (68, 2))
        pts_path = tmp_path / f"face{i}.pts"
        pts_path.write_text(write_pts(LandmarkSet(points=pts, scheme="W68")))
        lines.append(f"face{i}.png\tface{i}.pts\t10,10,220,220\ttrain")
    manifest = tmp_path / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def run(*argv):
    return main([str(a) for a in argv])


class TestEncode:
    def test_writes_81_heatmaps_per_record(self, tmp_path, w68_manifest):
        out = tmp_path / "enc"
        assert run("encode", w68_manifest, "w68", "--out", out) == 0
        for stem in ("face0", "face1"):
            npys = list(out.glob(f"{stem}_*.npy"))
            pngs = list(out.glob(f"{stem}_*.png"))
            assert len(npys) == 81 and len(pngs) == 81
        assert (out / "resolved_config.json").exists()

    def test_empty_manifest_warns_and_succeeds(self, tmp_path):
        manifest = tmp_path / "empty.tsv"
        manifest.write_text("")
        assert run("encode", manifest, "w68", "--out", tmp_path / "enc") == 0

    def test_reruns_are_byte_identical(self, tmp_path, w68_manifest):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run("encode", w68_manifest, "w68", "--out", out_a)
        run("encode", w68_manifest, "w68", "--out", out_b)
        for path_a in sorted(out_a.glob("*.npy")):
            path_b = out_b / path_a.name
            assert path_a.read_bytes() == path_b.read_bytes()

    def test_missing_manifest_is_io_error(self, tmp_path):
        assert run("encode", tmp_path / "nope.tsv", "w68", "--out", tmp_path / "x") == 3


class TestSearchCommand:
    def test_roundtrip_recovers_encoded_landmarks(self, tmp_path, w68_manifest):
        enc = tmp_path / "enc"
        run("encode", w68_manifest, "w68", "--out", enc)
        dec = tmp_path / "dec"
        assert run("search", enc, "w68", "--out", dec) == 0
        assert (dec / "deltas.tsv").exists()
        for stem in ("face0", "face1"):
            assert (dec / f"{stem}_argmax.pts").exists()
            assert (dec / f"{stem}_searched.pts").exists()

    def test_window_one_searched_equals_argmax(self, tmp_path, w68_manifest):
        enc = tmp_path / "enc"
        run("encode", w68_manifest, "w68", "--out", enc)
        dec = tmp_path / "dec"
        # window 1 degenerates the search to the fused argmax, which on
        # ground-truth maps equals the landmark argmax
        assert run("--set", "window=1", "search", enc, "w68", "--out", dec) == 0
        for stem in ("face0", "face1"):
            a = (dec / f"{stem}_argmax.pts").read_text()
            s = (dec / f"{stem}_searched.pts").read_text()
            assert a == s

    def test_missing_boundary_channel_is_contract_error(self, tmp_path, w68_manifest):
        enc = tmp_path / "enc"
        run("encode", w68_manifest, "w68", "--out", enc)
        for path in enc.glob("*_boundary_00.npy"):
            path.unlink()
        assert run("search", enc, "w68", "--out", tmp_path / "dec") == 4


class TestEvalCommand:
    def test_perfect_predictions_score_zero(self, tmp_path, w68_manifest):
        enc = tmp_path / "enc"
        run("encode", w68_manifest, "w68", "--out", enc)
        dec = tmp_path / "dec"
        run("search", enc, "w68", "--gt-manifest", w68_manifest, "--out", dec)
        rep = tmp_path / "rep"
        assert run("eval", dec, w68_manifest, "--normalization", "inter_ocular",
                   "--scheme", "w68", "--decoder", "searched", "--out", rep) == 0
        text = (rep / "report.txt").read_text()
        mean = float([l for l in text.splitlines() if l.startswith("mean_nme")][0].split()[1])
        # decode quantizes to heatmap pixels (~7 source px at this bbox),
        # so the roundtrip is small but not exactly zero
        assert mean < 0.15
        assert (rep / "ced.tsv").exists()

    def test_ground_truth_predictions_score_exactly_zero(self, tmp_path, w68_manifest):
        pred = tmp_path / "pred"
        pred.mkdir()
        for pts in Path(w68_manifest).parent.glob("face*.pts"):
            (pred / pts.name).write_text(pts.read_text())
        rep = tmp_path / "rep"
        assert run("eval", pred, w68_manifest, "--normalization", "inter_ocular",
                   "--scheme", "w68", "--out", rep) == 0
        text = (rep / "report.txt").read_text()
        assert "mean_nme: 0\n" in text
        assert "failure_rate: 0\n" in text

    def test_record_count_mismatch_rejected(self, tmp_path, w68_manifest):
        enc = tmp_path / "enc"
        run("encode", w68_manifest, "w68", "--out", enc)
        dec = tmp_path / "dec"
        run("search", enc, "w68", "--out", dec)
        (dec / "face0_searched.pts").unlink()
        assert run("eval", dec, w68_manifest, "--decoder", "searched",
                   "--scheme", "w68", "--out", tmp_path / "rep") == 4


class TestVerifyCommand:
    def test_small_suites_pass(self, capsys):
        code = run("--set", "verify.js.pairs=50", "--set", "verify.search.trials=30",
                   "verify", "js", "search")
        assert code == 0
        out = capsys.readouterr().out
        assert '"status": "PASS"' in out and "FAIL" not in out

    def test_fault_injection_fails_newton_schulz(self, capsys):
        code = run("--set", "verify.newton_schulz.iterations=1", "verify", "newton_schulz")
        assert code == 5
        assert '"status": "FAIL"' in capsys.readouterr().out


class TestTrainCommand:
    def test_tiny_run_writes_artifacts(self, tmp_path):
        out = tmp_path / "run"
        code = run("--set", "network.input_size=32", "--set", "network.base_channels=16",
                   "--set", "train.iterations=4", "--set", "train.samples=4",
                   "--set", "train.test_samples=2", "--set", "train.eval_every=2",
                   "train", "--out", out)
        assert code == 0
        assert (out / "checkpoint.bin").exists()
        assert (out / "train_log.tsv").exists()
        assert (out / "report.txt").exists()

    def test_zero_iterations_checkpoint_equals_init(self, tmp_path):
        out = tmp_path / "run"
        code = run("--set", "network.input_size=32", "--set", "network.base_channels=16",
                   "--set", "train.iterations=0", "--set", "train.samples=2",
                   "--set", "train.test_samples=2", "train", "--out", out)
        assert code == 0
        from fldkit.network import NetworkConfig, build
        from fldkit.training import load_checkpoint

        config = NetworkConfig(input_size=32, base_channels=16)
        loaded = load_checkpoint(out / "checkpoint.bin", config)
        fresh = build(config, 0)
        for name in fresh.params:
            np.testing.assert_array_equal(loaded.params[name].data, fresh.params[name].data)

    def test_resolved_config_roundtrip(self, tmp_path):
        out_a = tmp_path / "a"
        run("--set", "network.input_size=32", "--set", "network.base_channels=16",
            "--set", "train.iterations=2", "--set", "train.samples=2",
            "--set", "train.test_samples=2", "--seed", "3", "train", "--out", out_a)
        resolved = out_a / "resolved_config.json"
        out_b = tmp_path / "b"
        run("--config", resolved, "train", "--out", out_b)
        assert ((out_a / "train_log.tsv").read_bytes()
                == (out_b / "train_log.tsv").read_bytes())
        assert ((out_a / "checkpoint.bin").read_bytes()
                == (out_b / "checkpoint.bin").read_bytes())

    def test_resume_continues_bitwise(self, tmp_path):
        base = ["--set", "network.input_size=32", "--set", "network.base_channels=16",
                "--set", "train.samples=3", "--set", "train.test_samples=2", "--seed", "5"]
        full = tmp_path / "full"
        run(*base, "--set", "train.iterations=6", "train", "--out", full)
        half = tmp_path / "half"
        run(*base, "--set", "train.iterations=3", "train", "--out", half)
        resumed = tmp_path / "resumed"
        run(*base, "--set", "train.iterations=3", "train",
            "--resume", half / "checkpoint.bin", "--out", resumed)
        assert ((full / "checkpoint.bin").read_bytes()
                == (resumed / "checkpoint.bin").read_bytes())


class TestConfigHandling:
    def test_bad_config_file_is_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{nope")
        assert run("--config", bad, "verify", "js") == 2

    def test_bad_set_syntax_is_config_error(self):
        assert run("--set", "windowseven", "verify", "js") == 2
