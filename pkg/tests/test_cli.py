import json

import numpy as np
import pytest

from aastereo import cli
from aastereo.autodiff import Square
from aastereo.checkpoint import load_checkpoint
from aastereo.data_io import read_image, read_pfm, write_image, write_pfm
from aastereo.gradcheck import REGISTRY

TRAIN = ["--synthetic", "--size", "24x48", "--count", "4", "--batch-size", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def result_fields(out):
    line = next(l for l in out.splitlines() if l.startswith("RESULT"))
    return dict(tok.split("=") for tok in line.split()[1:])


def manifest_from(err):
    line = next(l for l in err.splitlines() if l.startswith("manifest "))
    return json.loads(line[len("manifest "):])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", *TRAIN, "--steps", "4", "--out", str(out)]) == 0
    return out


# --- complexity -------------------------------------------------------------------

def test_complexity_defaults(capsys):
    code, out, err = run(capsys, "complexity")
    assert code == 0
    assert result_fields(out) == {"conv3d": "7077888", "adaptive": "54144", "ratio": "47/6144"}
    assert manifest_from(err)["command"] == "complexity"


def test_complexity_unit_sizes(capsys):
    _, out, _ = run(capsys, "complexity", "--k", 1, "--c", 1, "--d", 1)
    assert result_fields(out) == {"conv3d": "1", "adaptive": "7", "ratio": "7/1"}


def test_complexity_ratio_independent_of_spatial_size(capsys):
    _, out, _ = run(capsys, "complexity", "--h", 40, "--w", 80, "--layers", 3)
    fields = result_fields(out)
    assert fields["ratio"] == "47/6144"
    assert int(fields["conv3d"]) == 7077888 * 3200
    assert "total_conv3d[3] = " + str(7077888 * 3200 * 3) in out


def test_complexity_rejects_nonpositive(capsys):
    code, _, err = run(capsys, "complexity", "--k", 0)
    assert code == 2 and "k" in err


# --- gradcheck ---------------------------------------------------------------------

def test_gradcheck_single_op(capsys):
    code, out, _ = run(capsys, "gradcheck", "soft_argmin")
    assert code == 0
    assert "soft_argmin" in out and "1/1 passed" in out


def test_gradcheck_unknown_op_lists_names(capsys):
    code, _, err = run(capsys, "gradcheck", "nope")
    assert code == 2
    assert "conv2d" in err and "isa_block" in err


class _BrokenSquare(Square):
    name = "broken"

    def backward(self, saved, g):
        (gx,) = super().backward(saved, g)
        return (gx * 1.01,)


def test_gradcheck_detects_injected_fault(capsys, monkeypatch):
    monkeypatch.setitem(REGISTRY, "broken", lambda rng: (_BrokenSquare(), [rng.standard_normal(5)]))
    code, out, _ = run(capsys, "gradcheck", "broken")
    assert code == 1
    assert "FAIL" in out and "0/1 passed" in out


# --- solve-xscale ------------------------------------------------------------------

def test_solve_xscale_prints_projection(capsys):
    code, out, _ = run(capsys, "solve-xscale", "--lam", 1, 1, 2, 3)
    assert code == 0
    assert "0.625  0.25  0.125" in out
    assert out.strip().endswith("v_hat = 1.5 2.0 2.5")


def test_solve_xscale_zero_lambda_is_identity(capsys):
    _, out, _ = run(capsys, "solve-xscale", "--lam", 0, "-S", 2, 4, 7)
    assert "v_hat = 4.0 7.0" in out


def test_solve_xscale_argument_errors(capsys):
    assert run(capsys, "solve-xscale", "--lam", -1, 1, 2)[0] == 2
    assert run(capsys, "solve-xscale", "--lam", 1, "-S", 3, 1, 2)[0] == 2


# --- gen-data and train -------------------------------------------------------------

def test_gen_data_then_train_from_dir(capsys, tmp_path):
    data = tmp_path / "data"
    code, out, _ = run(capsys, "gen-data", "--out", data, "--count", 3, "--size", "24x48", "--seed", 5)
    assert code == 0 and "wrote 3 stereo pairs" in out
    assert json.loads((data / "manifest.json").read_text())["seed"] == 5
    code, _, _ = run(capsys, "train", "--data", data, "--steps", 2, "--batch-size", 1, "--out", tmp_path / "run")
    assert code == 0
    assert len((tmp_path / "run" / "train.log").read_text().splitlines()) == 2


def test_train_log_has_one_line_per_step(trained):
    lines = (trained / "train.log").read_text().splitlines()
    assert len(lines) == 4
    losses = [float(l.split("\t")[1]) for l in lines]
    assert all(np.isfinite(losses))
    assert (trained / "checkpoint.aas").exists()
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["train"]["epochs"] == 4


def test_train_loss_decreases(capsys, tmp_path):
    code, _, _ = run(capsys, "train", "--synthetic", "--size", "24x48", "--count", "1", "--batch-size", "1",
                     "--steps", 60, "--lr", "0.002", "--out", tmp_path)
    assert code == 0
    losses = [float(l.split("\t")[1]) for l in (tmp_path / "train.log").read_text().splitlines()]
    assert losses[-1] < losses[0]


def test_train_zero_lr_keeps_initial_weights(capsys, tmp_path):
    run(capsys, "train", *TRAIN, "--steps", 2, "--lr", 0, "--out", tmp_path / "a")
    run(capsys, "train", *TRAIN, "--steps", 1, "--lr", 0, "--epochs", 1, "--out", tmp_path / "b")
    a = load_checkpoint(tmp_path / "a" / "checkpoint.aas")
    from aastereo.model import StereoModel

    fresh = StereoModel(a.config)
    for p, q in zip(a.parameters(), fresh.parameters()):
        assert np.array_equal(p.data, q.data)


def test_train_missing_data_dir(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data", tmp_path / "absent", "--out", tmp_path / "o")
    assert code == 2 and "absent" in err


def test_train_requires_a_data_source(capsys, tmp_path):
    assert run(capsys, "train", "--out", tmp_path)[0] == 2


def test_config_bad_value_reports_line(capsys, tmp_path):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nlr = abc\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--synthetic", "--out", tmp_path / "o")
    assert code == 2
    assert "bad.ini:2:" in err and "lr" in err


def test_config_unknown_key_reports_line(capsys, tmp_path):
    cfg = tmp_path / "b3.ini"
    cfg.write_text("[model]\nchannels = 8\nfoo = 1\n")
    code, _, err = run(capsys, "train", "--config", cfg, "--synthetic", "--out", tmp_path / "o")
    assert code == 2
    assert "b3.ini:3:" in err and "foo" in err


def test_config_values_reach_training(capsys, tmp_path):
    cfg = tmp_path / "ok.ini"
    cfg.write_text("[model]\nchannels = 6\n[train]\nepochs = 2\nsteps_per_epoch = 1\n"
                   "[data]\nsize = 24x48\ncount = 2\n")
    code, _, _ = run(capsys, "train", "--config", cfg, "--synthetic", "--out", tmp_path / "o")
    assert code == 0
    assert load_checkpoint(tmp_path / "o" / "checkpoint.aas").config.channels == 6
    assert len((tmp_path / "o" / "train.log").read_text().splitlines()) == 2


# --- infer and eval ------------------------------------------------------------------

@pytest.fixture
def image_pair(tmp_path):
    rng = np.random.default_rng(0)
    left, right = tmp_path / "l.ppm", tmp_path / "r.ppm"
    write_image(rng.random((24, 48, 3)), left)
    write_image(rng.random((24, 48, 3)), right)
    return left, right


def test_infer_writes_pfm_equal_to_prediction(capsys, trained, image_pair, tmp_path):
    left, right = image_pair
    out = tmp_path / "d.pfm"
    code, _, _ = run(capsys, "infer", "--checkpoint", trained / "checkpoint.aas", "--left", left,
                     "--right", right, "--out", out, "--preview", tmp_path / "d.pgm")
    assert code == 0
    model = load_checkpoint(trained / "checkpoint.aas")
    expected = model.predict(read_image(left), read_image(right)).astype(np.float32)
    assert np.array_equal(read_pfm(out).values, expected.astype(np.float64))
    assert read_image(tmp_path / "d.pgm").shape == (24, 48, 1)
    assert (tmp_path / "d.pfm.manifest.json").exists()


def test_infer_is_deterministic(capsys, trained, image_pair, tmp_path):
    left, right = image_pair
    for name in ("a.pfm", "b.pfm"):
        run(capsys, "infer", "--checkpoint", trained / "checkpoint.aas", "--left", left, "--right", right,
            "--out", tmp_path / name)
    assert (tmp_path / "a.pfm").read_bytes() == (tmp_path / "b.pfm").read_bytes()


def test_infer_rejects_size_mismatch_and_bad_checkpoint(capsys, trained, image_pair, tmp_path):
    left, _ = image_pair
    small = tmp_path / "s.ppm"
    write_image(np.zeros((24, 30, 3)), small)
    ckpt = trained / "checkpoint.aas"
    assert run(capsys, "infer", "--checkpoint", ckpt, "--left", left, "--right", small, "--out", tmp_path / "x.pfm")[0] == 2
    junk = tmp_path / "junk.aas"
    junk.write_bytes(b"not a checkpoint")
    assert run(capsys, "infer", "--checkpoint", junk, "--left", left, "--right", left, "--out", tmp_path / "x.pfm")[0] == 2


def _metrics(out):
    line = next(l for l in out.splitlines() if l.startswith("METRICS"))
    return dict(tok.split("=") for tok in line.split()[1:])


def test_eval_perfect_prediction(capsys, tmp_path):
    gt = np.random.default_rng(0).uniform(0, 10, (6, 8))
    write_pfm(gt, tmp_path / "gt.pfm")
    code, out, _ = run(capsys, "eval", "--pred", tmp_path / "gt.pfm", "--gt", tmp_path / "gt.pfm")
    assert code == 0
    assert _metrics(out) == {"epe": "0.0", "bad1": "0.0", "d1": "0.0", "count": "48"}


def test_eval_half_off_by_two(capsys, tmp_path):
    gt = np.full((4, 4), 10.0)
    pred = gt.copy()
    pred[:2] += 2.0
    write_pfm(gt, tmp_path / "gt.pfm")
    write_pfm(pred, tmp_path / "pred.pfm")
    _, out, _ = run(capsys, "eval", "--pred", tmp_path / "pred.pfm", "--gt", tmp_path / "gt.pfm",
                    "--out", tmp_path / "m.txt")
    m = _metrics(out)
    assert float(m["epe"]) == 1.0 and float(m["bad1"]) == 50.0 and float(m["d1"]) == 0.0
    assert "METRICS" in (tmp_path / "m.txt").read_text()


def test_eval_mask_excludes_errors(capsys, tmp_path):
    gt = np.full((4, 4), 10.0)
    pred = gt.copy()
    pred[:2] += 5.0
    mask = np.zeros((4, 4))
    mask[2:] = 1.0
    write_pfm(gt, tmp_path / "gt.pfm")
    write_pfm(pred, tmp_path / "pred.pfm")
    write_image(mask, tmp_path / "mask.pgm")
    _, out, _ = run(capsys, "eval", "--pred", tmp_path / "pred.pfm", "--gt", tmp_path / "gt.pfm",
                    "--mask", tmp_path / "mask.pgm")
    assert _metrics(out)["epe"] == "0.0" and _metrics(out)["count"] == "8"


def test_eval_no_valid_pixels(capsys, tmp_path):
    write_pfm(np.full((3, 3), -1.0), tmp_path / "gt.pfm")
    write_pfm(np.zeros((3, 3)), tmp_path / "pred.pfm")
    code, _, err = run(capsys, "eval", "--pred", tmp_path / "pred.pfm", "--gt", tmp_path / "gt.pfm")
    assert code == 3 and err


def test_eval_missing_file(capsys, tmp_path):
    assert run(capsys, "eval", "--pred", tmp_path / "a.pfm", "--gt", tmp_path / "b.pfm")[0] == 2


# --- manifests and reruns ------------------------------------------------------------

def test_manifest_fields(trained):
    m = json.loads((trained / "manifest.json").read_text())
    assert set(m) >= {"command", "argv", "config", "seed", "timestamp", "inputs", "outputs", "version"}
    assert m["argv"][0] == "train"


def test_rerun_reproduces_checkpoint(capsys, trained, tmp_path):
    manifest = json.loads((trained / "manifest.json").read_text())
    argv = list(manifest["argv"])
    argv[argv.index("--out") + 1] = str(tmp_path)
    copy = tmp_path / "manifest_in.json"
    copy.write_text(json.dumps({**manifest, "argv": argv}))
    code, _, _ = run(capsys, "rerun", copy)
    assert code == 0
    assert (tmp_path / "checkpoint.aas").read_bytes() == (trained / "checkpoint.aas").read_bytes()
    assert (tmp_path / "train.log").read_text() == (trained / "train.log").read_text()


def test_thread_env_is_honoured(capsys, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "1")
    assert run(capsys, "complexity")[0] == 0
    monkeypatch.setenv(cli.THREADS_ENV, "zero")
    assert run(capsys, "complexity")[0] == 2


def test_usage_errors_exit_2(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "frobnicate")[0] == 2
