import numpy as np
import pytest

from ggcnseg import checks, cli
from ggcnseg.checks import CheckResult
from ggcnseg.cli import main
from ggcnseg.files import read_manifest, read_mask_png, read_pgm, read_png_rgb
from ggcnseg.preprocess import patch_anchors
from ggcnseg.trainer import Model

SMALL_CFG = "dsfe_growth=4\ndsfe_layers_per_block=1\ndsfe_embed_dim=8\ntimesteps=2\nlr=0.05\n"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def scenes(tmp_path):
    out = tmp_path / "syn"
    assert run("synth", "--seed", 3, "--count", 2, "--size", 64, "--buildings", 3, "--shift", "3,-2",
               "--out", out) == 0
    return out


@pytest.fixture
def patches(tmp_path, scenes):
    out = tmp_path / "pre"
    assert run("preprocess", "--in", scenes / "manifest.tsv", "--out", out, "--patch", 32, "--overlap", 8) == 0
    return out


@pytest.fixture
def trained(tmp_path, patches):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(SMALL_CFG)
    out = tmp_path / "run"
    assert run("train", "--manifest", patches / "manifest.tsv", "--out", out, "--config", cfg,
               "--epochs", 2) == 0
    return out


class TestUsage:
    def test_unknown_flag(self, tmp_path):
        assert run("synth", "--out", tmp_path / "x", "--bogus", 1) == 1

    def test_missing_subcommand(self):
        assert main([]) == 1

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "preprocess" in capsys.readouterr().out

    def test_bad_shift_syntax(self, tmp_path):
        assert run("synth", "--out", tmp_path / "x", "--shift", "3") == 1

    def test_prints_resolved_config(self, tmp_path, capsys):
        run("synth", "--count", 0, "--out", tmp_path / "x")
        out = capsys.readouterr().out
        assert "[synth] resolved config" in out and "  count=0" in out and "  noise=0.05" in out


class TestSynth:
    def test_zero_scenes(self, tmp_path):
        assert run("synth", "--count", 0, "--out", tmp_path / "x") == 0
        assert (tmp_path / "x" / "manifest.tsv").read_text() == ""

    def test_outputs(self, scenes):
        pairs = read_manifest(scenes / "manifest.tsv")
        assert len(pairs) == 2
        assert pairs[0][1].endswith("scene_000_shifted.png")
        assert read_png_rgb(pairs[0][0]).shape == (64, 64, 3)
        assert len(read_manifest(scenes / "truth.tsv")) == 2
        assert (scenes / "shifts.tsv").read_text().splitlines()[1] == "scene_000\t3\t-2"

    def test_reproducible(self, tmp_path, scenes):
        again = tmp_path / "again"
        run("synth", "--seed", 3, "--count", 2, "--size", 64, "--buildings", 3, "--shift", "3,-2", "--out", again)
        for f in sorted(scenes.iterdir()):
            assert (again / f.name).read_bytes() == f.read_bytes()

    def test_refuses_overwrite(self, scenes):
        assert run("synth", "--count", 1, "--out", scenes) == 1
        assert run("synth", "--count", 1, "--out", scenes, "--force") == 0
        assert len(read_manifest(scenes / "manifest.tsv")) == 1

    def test_infeasible_scene(self, tmp_path):
        assert run("synth", "--size", 8, "--buildings", 20, "--out", tmp_path / "x") == 2


class TestPreprocess:
    def test_shift_report(self, patches):
        lines = (patches / "shift_report.tsv").read_text().splitlines()
        assert lines[0] == "scene\tdy\tdx\tpeak_score\tstatus"
        for line in lines[1:]:
            name, dy, dx, _, status = line.split("\t")
            assert (int(dy), int(dx), status) == (3, -2, "ok")

    def test_patch_count_and_labels(self, patches):
        pairs = read_manifest(patches / "manifest.tsv")
        assert len(pairs) == 2 * len(patch_anchors(64, 32, 8)) ** 2
        for img, lab in pairs:
            labels = read_pgm(lab)
            assert labels.shape == (32, 32) and labels.min() >= 0 and labels.max() <= 10
            assert read_png_rgb(img).shape == (32, 32, 3)

    def test_coregistered_labels_match_truth(self, tmp_path, scenes):
        out = tmp_path / "full"
        run("preprocess", "--in", scenes / "manifest.tsv", "--out", out, "--patch", 64, "--overlap", 0)
        truth = read_mask_png(read_manifest(scenes / "truth.tsv")[0][1])
        labels = read_pgm(read_manifest(out / "manifest.tsv")[0][1])
        np.testing.assert_array_equal(labels >= 5, truth == 1)

    def test_no_signal_scene_continues(self, tmp_path, capsys):
        syn = tmp_path / "empty"
        run("synth", "--count", 1, "--size", 32, "--buildings", 0, "--out", syn)
        out = tmp_path / "pre"
        assert run("preprocess", "--in", syn / "manifest.tsv", "--out", out, "--patch", 32) == 0
        row = (out / "shift_report.tsv").read_text().splitlines()[1].split("\t")
        assert row[1:3] == ["0", "0"] and row[4].startswith("no-signal")
        assert "no-signal" not in capsys.readouterr().out
        assert len(read_manifest(out / "manifest.tsv")) == 1

    def test_filled_correlation_flag(self, tmp_path, scenes):
        assert run("preprocess", "--in", scenes / "manifest.tsv", "--out", tmp_path / "f", "--patch", 64,
                   "--corr", "filled") == 0

    def test_missing_manifest(self, tmp_path):
        assert run("preprocess", "--in", tmp_path / "nope.tsv", "--out", tmp_path / "o") == 2

    def test_patch_larger_than_scene(self, tmp_path, scenes):
        assert run("preprocess", "--in", scenes / "manifest.tsv", "--out", tmp_path / "o", "--patch", 128) == 1


class TestTrainEvalInfer:
    def test_train_outputs(self, trained, capsys):
        lines = (trained / "loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr" and len(lines) == 3
        model = Model.load(trained / "checkpoint.gstn")
        assert model.cfg.dsfe.growth == 4 and model.cfg.timesteps == 2

    def test_flags_override_config_file(self, tmp_path, patches, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_CFG + "head=ggnn\n")
        assert run("train", "--manifest", patches / "manifest.tsv", "--out", tmp_path / "r", "--config", cfg,
                   "--epochs", 1, "--head", "gcn") == 0
        out = capsys.readouterr().out
        assert "  head=gcn" in out and "  lr=0.05" in out
        assert Model.load(tmp_path / "r" / "checkpoint.gstn").cfg.head == "gcn"

    def test_bad_config_key(self, tmp_path, patches):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("momentum=0.9\n")
        assert run("train", "--manifest", patches / "manifest.tsv", "--out", tmp_path / "r", "--config", cfg) == 1

    def test_eval_untrained_checkpoint(self, trained, patches, tmp_path, capsys):
        csv = tmp_path / "m.csv"
        assert run("eval", "--checkpoint", trained / "checkpoint.gstn", "--manifest", patches / "manifest.tsv",
                   "--csv", csv) == 0
        table = capsys.readouterr().out.splitlines()
        assert table[-2].split() == ["Method", "OA", "F1", "IoU"]
        oa, f1, iou = (float(v) for v in table[-1].split()[1:])
        assert 0 <= iou <= f1 <= 1 and 0 <= oa <= 1
        rows = csv.read_text().splitlines()
        assert len(rows) == 1 + len(read_manifest(patches / "manifest.tsv")) + 1
        assert run("eval", "--checkpoint", trained / "checkpoint.gstn", "--manifest", patches / "manifest.tsv",
                   "--csv", csv) == 1

    def test_eval_corrupt_checkpoint(self, tmp_path, patches):
        (tmp_path / "bad.gstn").write_bytes(b"nonsense")
        assert run("eval", "--checkpoint", tmp_path / "bad.gstn", "--manifest", patches / "manifest.tsv") == 2

    def test_infer_outputs(self, trained, scenes, tmp_path):
        out = tmp_path / "inf"
        assert run("infer", "--checkpoint", trained / "checkpoint.gstn", "--image", scenes / "scene_000.png",
                   "--out", out) == 0
        assert read_png_rgb(out / "overlay.png").shape == (64, 64, 3)
        labels = read_pgm(out / "labels.pgm")
        np.testing.assert_array_equal(read_mask_png(out / "mask.png"), (labels >= 5).astype(np.uint8))

    def test_infer_indivisible_image(self, trained, tmp_path):
        from ggcnseg.files import write_png_rgb
        write_png_rgb(tmp_path / "odd.png", np.zeros((30, 30, 3)))
        assert run("infer", "--checkpoint", trained / "checkpoint.gstn", "--image", tmp_path / "odd.png",
                   "--out", tmp_path / "o") == 1


class TestChecks:
    def test_gradcheck_module(self, capsys):
        assert run("gradcheck", "--module", "gnn", "--seed", 1) == 0
        out = capsys.readouterr().out
        assert "PASS  gnn.ggcn_forward_n3" in out and "4/4 passed" in out

    def test_gradcheck_unknown_module(self):
        assert run("gradcheck", "--module", "nope") == 1

    def test_oracles(self, capsys):
        assert run("oracle", "--which", "cheb") == 0
        assert run("oracle", "--which", "metrics") == 0
        assert "PASS  oracle.metrics" in capsys.readouterr().out

    def test_unknown_oracle(self):
        assert run("oracle", "--which", "nope") == 1

    def test_failed_check_exit_code(self, monkeypatch):
        monkeypatch.setattr(checks, "run_oracles", lambda which, seed: [CheckResult("x", 1.0, 0.0)])
        assert run("oracle") == 3
        monkeypatch.setattr(checks, "run_gradchecks", lambda module, seed: [CheckResult("y", 1.0, 1e-6)])
        assert run("gradcheck") == 3


def test_thirty_epoch_smoke(tmp_path, capsys):
    # default scene (seed 0, no shift); the 30-epoch budget is tight and does not hold on every scene
    syn, pre, run_dir = tmp_path / "s", tmp_path / "p", tmp_path / "r"
    run("synth", "--seed", 0, "--count", 1, "--size", 32, "--buildings", 3, "--out", syn)
    run("preprocess", "--in", syn / "manifest.tsv", "--out", pre, "--patch", 32)
    run("train", "--manifest", pre / "manifest.tsv", "--out", run_dir, "--epochs", 30, "--lr", 0.1,
        "--patience", 50)
    capsys.readouterr()
    run("eval", "--checkpoint", run_dir / "checkpoint.gstn", "--manifest", pre / "manifest.tsv")
    oa = float(capsys.readouterr().out.splitlines()[-1].split()[1])
    assert oa >= 0.95


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "ggcnseg", "oracle", "--which", "metrics"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "1/1 passed" in r.stdout
    assert cli.EXIT_CHECK == 3
