"""Acceptance criteria for the primary component, one PASS/FAIL line each."""

import time
from fractions import Fraction

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from aastereo.autodiff import Tape, Tensor
from aastereo.checkpoint import load_checkpoint, save_checkpoint
from aastereo.complexity import ComplexityQuery, complexity
from aastereo.cross_scale import path_laplacian, solve_cross_scale
from aastereo.data_io import generate_dataset, read_pfm, write_pfm
from aastereo.gradcheck import REGISTRY, run_gradchecks
from aastereo.head import masked_loss, soft_argmin
from aastereo.intra import AdaptiveAggregationParams, WindowAggregationParams, adaptive_aggregate, window_aggregate
from aastereo.model import StereoModel, ModelConfig
from aastereo.train import TrainerConfig, train, validate

REQUIRED_OPS = {"conv2d", "correlate", "bilinear_sample", "adaptive_aggregate", "isa_block", "csa",
                "bilinear_upsample", "soft_argmin", "smooth_l1", "masked_loss", "refine"}


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return emit


def test_complexity_ratio(verdict):
    t = time.perf_counter()
    r = complexity(ComplexityQuery(k=3, c=64, d=64))
    elapsed = time.perf_counter() - t
    ok = (r.adaptive, r.conv3d) == (54144, 7077888) and r.ratio <= Fraction(1, 130) and elapsed < 1.0
    verdict("complexity ratio", ok, f"{r.adaptive}/{r.conv3d} = {r.ratio} = 1/{float(1 / r.ratio):.2f}, "
            f"{elapsed * 1e3:.2f} ms")


def test_gradient_suite(verdict):
    t = time.perf_counter()
    reports = run_gradchecks()
    elapsed = time.perf_counter() - t
    checked = {r.op for r in reports}
    worst = max(reports, key=lambda r: r.max_rel_error)
    failed = [r.op for r in reports if not r.passed]
    ok = REQUIRED_OPS <= checked and not failed and elapsed < 60
    verdict("gradient suite", ok, f"{len(reports)} ops, worst {worst.op} {worst.max_rel_error:.2e}, "
            f"failed {failed or 'none'}, {elapsed:.1f} s")
    assert set(REGISTRY) == checked


def test_degenerate_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        groups = int(rng.choice([1, 2, 4]))
        d = groups * int(rng.integers(1, 4))
        kernel = int(rng.choice([1, 3, 5]))
        dilation = int(rng.integers(1, 3))
        shape = (int(rng.integers(1, 3)), d, int(rng.integers(3, 9)), int(rng.integers(3, 9)))
        vol = rng.standard_normal(shape) * rng.uniform(0.1, 10)
        # zero offsets, m = 0.5 and w_k = 2 / K^2: a compensated uniform window
        params = AdaptiveAggregationParams.create(d, kernel=kernel, dilation=dilation, groups=groups)
        got = adaptive_aggregate(vol, params).data
        box = WindowAggregationParams(kernel, "uniform", dilation=dilation)
        worst = max(worst, float(np.max(np.abs(got - window_aggregate(vol, box, border="zero")))))
    verdict("degenerate equivalence", worst <= 1e-12, f"50 volumes, max abs diff {worst:.2e}")


def test_cross_scale_solver(verdict):
    rng = np.random.default_rng(7)
    err_v = err_rows = 0.0
    identity = True
    for s in (2, 3, 4):
        for lam in (0.0, 0.1, 1.0, 10.0):
            v = rng.standard_normal(s) * 5
            v_hat, proj = solve_cross_scale(v, lam)
            dense = np.linalg.solve(np.eye(s) + lam * path_laplacian(s), v)
            err_v = max(err_v, float(np.max(np.abs(v_hat - dense))))
            err_rows = max(err_rows, float(np.max(np.abs(proj.sum(axis=1) - 1.0))))
            if lam == 0.0:
                identity &= np.array_equal(proj, np.eye(s)) and np.array_equal(v_hat, v)
    ok = err_v <= 1e-10 and err_rows <= 1e-12 and identity
    verdict("cross-scale solver", ok, f"max |v_hat - dense| {err_v:.1e}, max |row sum - 1| {err_rows:.1e}, "
            f"lambda=0 identity {identity}")


def test_soft_argmin_oracle(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 65))
        costs = rng.standard_normal(d) * rng.uniform(0.1, 20)
        got = float(soft_argmin(costs.reshape(1, d, 1, 1)).data.ravel()[0])
        e = [np.exp(c - costs.max()) for c in costs]
        expected = sum(i * w for i, w in enumerate(e)) / sum(e)
        worst = max(worst, abs(got - expected))
    uniform = all(float(soft_argmin(np.full((1, d, 1, 1), c)).data.ravel()[0]) == (d - 1) / 2
                  for d in (1, 2, 7, 24, 64, 193) for c in (0.0, -3.7, 12.5))
    verdict("soft-argmin oracle", worst <= 1e-12 and uniform,
            f"100 vectors max diff {worst:.1e}, uniform exactly (D-1)/2 {uniform}")


def _train_once():
    train_set = generate_dataset(64, 32, 64, 8, seed=1)
    val_set = generate_dataset(16, 32, 64, 8, seed=2)
    model = StereoModel(ModelConfig(max_disp=24))
    untrained = validate(model, val_set).epe
    result = train(model, train_set, TrainerConfig(epochs=10, steps_per_epoch=50, batch_size=4, seed=0))
    return model, untrained, validate(model, val_set).epe, result


@pytest.fixture(scope="module")
def trained_runs():
    with threadpool_limits(1):
        t = time.perf_counter()
        first = _train_once()
        elapsed = time.perf_counter() - t
        second = _train_once()
    return first, second, elapsed


@pytest.mark.slow
def test_desk_training(verdict, trained_runs):
    (model, untrained, final, result), (model2, _, final2, result2), elapsed = trained_runs
    steps = sum(1 for _ in result.log) * 50
    same = final == final2 and result.text() == result2.text() and all(
        np.array_equal(p.data, q.data) for p, q in zip(model.parameters(), model2.parameters()))
    ok = final < 0.5 * untrained and final < 1.0 and same and elapsed < 300 and steps == 500
    verdict("desk training", ok, f"val EPE {untrained:.3f} -> {final:.3f} px after {steps} steps, "
            f"deterministic {same}, {elapsed:.0f} s on one thread")


@pytest.mark.slow
def test_trained_model_self_match(trained_runs):
    model = trained_runs[0][0]
    for seed in range(3):
        img = np.random.default_rng(seed).random((32, 64, 3))
        assert float(np.mean(model.predict(img, img))) < 0.5


def _loss_and_grads(pred, gt, pseudo, mask):
    tensors = [Tensor(a, requires_grad=True) for a in (pred, gt, pseudo)]
    with Tape() as tape:
        loss = masked_loss(*tensors[:2], pseudo=tensors[2], mask=mask)
    return float(loss.data), tape.gradient(loss, tensors)


def test_loss_masking(verdict):
    rng = np.random.default_rng(5)
    ok = True
    for trial in range(20):
        shape = (2, int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        pred, gt, pseudo = (rng.uniform(0, 8, shape) for _ in range(3))
        ones = np.ones(shape, bool)
        a, ga = _loss_and_grads(pred, gt, pseudo, ones)
        b, gb = _loss_and_grads(pred, gt, pseudo + rng.standard_normal(shape) * 4, ones)
        ok &= a == b and all(np.array_equal(x, y) for x, y in zip(ga, gb)) and not gb[2].any()
        zeros = ~ones
        a, ga = _loss_and_grads(pred, gt, pseudo, zeros)
        b, gb = _loss_and_grads(pred, gt + rng.standard_normal(shape) * 4, pseudo, zeros)
        ok &= a == b and all(np.array_equal(x, y) for x, y in zip(ga, gb)) and not gb[1].any()
    verdict("loss masking", bool(ok), "20 trials per case, pseudo ignored when V=1, gt ignored when V=0, "
            "gradients exactly zero")


def test_codec_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(3)
    pfm_ok = True
    for i in range(10):
        disp = rng.uniform(-100, 300, (int(rng.integers(1, 40)), int(rng.integers(1, 40)))).astype(np.float32)
        write_pfm(disp, tmp_path / f"{i}.pfm")
        back = read_pfm(tmp_path / f"{i}.pfm").values
        pfm_ok &= back.shape == disp.shape and np.array_equal(back, disp.astype(np.float64))
    model = StereoModel(ModelConfig(channels=8, max_disp=24, seed=9))
    for p in model.parameters():
        p.data += rng.standard_normal(p.shape) * 0.05
    save_checkpoint(model, tmp_path / "m.aas")
    loaded = load_checkpoint(tmp_path / "m.aas")
    left, right = rng.random((32, 64, 3)), rng.random((32, 64, 3))
    ckpt_ok = model.predict(left, right).tobytes() == loaded.predict(left, right).tobytes()
    verdict("codec round-trips", bool(pfm_ok and ckpt_ok),
            f"PFM value-exact {bool(pfm_ok)}, checkpoint forward bitwise {ckpt_ok}")
