"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in the pytest terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy import integrate

import oracles
from conftest import make_grid
from test_regrid import oracle_resample
from updraft import cli, dataprep, loss, shash, verify
from updraft.grid_io import TerrainGrid
from updraft.model import ModelSpec, TrainConfig, UNet, linreg_baseline, median_r2, prepare_input, train
from updraft.regrid import LevelSpec, block_mean, nn_resample, to_agl
from updraft.shash import ShashParams

RESULTS = []


def record(capsys, n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- criterion 1 ----------------------------------------------------------


def _phi(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def _phi_inv(p):
    # bisection on the lower-tail or upper-tail probability, whichever is small
    upper = p > 0.5
    target = 1.0 - p if upper else p
    lo, hi = -40.0, 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _phi(mid) < target:
            lo = mid
        else:
            hi = mid
    z = 0.5 * (lo + hi)
    return -z if upper else z


def test_c01_normal_reduction(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for mu, sigma in [(0.0, 1.0), (5.0, 2.0), (-3.0, 0.5), (20.0, 7.0), (0.1, 0.01), (-50.0, 30.0)]:
        p = ShashParams(mu, sigma, 0.0, 1.0)
        z = np.linspace(-8.0, 8.0, 161)
        ys = mu + sigma * z
        pdf, cdf = shash.pdf(p, ys), shash.cdf(p, ys)
        probs = np.array([_phi(v) for v in z[z <= 0]] + [1.0 - _phi(-v) for v in z[z > 0]])
        q = shash.quantile(p, probs)
        for k, y in enumerate(ys):
            zk = (y - mu) / sigma
            worst = max(worst, abs(pdf[k] - math.exp(-0.5 * zk * zk) / (sigma * math.sqrt(2 * math.pi))))
            worst = max(worst, abs(cdf[k] - _phi(zk)))
            worst = max(worst, abs(q[k] - (mu + sigma * _phi_inv(probs[k]))))
    elapsed = time.perf_counter() - t0
    record(capsys, 1, worst <= 1e-12 and elapsed < 1.0,
           f"SHASH(gamma=0, tau=1) vs normal: max abs err {worst:.2e} (<=1e-12), {elapsed:.2f}s (<1s)")


# -- criterion 2 ----------------------------------------------------------


def test_c02_normalization(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for mu in (-5.0, 0.0, 20.0):
        for sigma in (0.5, 2.0):
            for gamma in (-1.0, 0.0, 1.0):
                for tau in (0.5, 1.0, 2.0):
                    p = ShashParams(mu, sigma, gamma, tau)
                    med = float(shash.median(p))
                    total = sum(
                        integrate.quad(lambda y: float(shash.pdf(p, y)), a, b, limit=400, epsabs=1e-13, epsrel=1e-12)[0]
                        for a, b in ((-np.inf, med), (med, np.inf))
                    )
                    worst = max(worst, abs(total - 1.0))
    elapsed = time.perf_counter() - t0
    record(capsys, 2, worst <= 1e-6 and elapsed < 10.0,
           f"pdf integrates to 1 on 54-point lattice: max |I-1| {worst:.2e} (<=1e-6), {elapsed:.2f}s (<10s)")


# -- criterion 3 ----------------------------------------------------------


def test_c03_stabilized_transform(capsys):
    stable = loss.transform(np.array([0.0, 700.0, 0.0, 700.0]))
    naive = loss.naive_exp_transform(700.0)
    ok_stable = bool(np.isfinite(stable.sigma)) and bool(np.isfinite(stable.tau))
    ok_naive = not np.isfinite(naive)
    record(capsys, 3, ok_stable and ok_naive,
           f"raw 700: stable sigma {float(stable.sigma):.4e} finite={ok_stable}; "
           f"naive exp(700) = {float(naive):.4e} overflows={ok_naive} "
           f"(float64 max {np.finfo(np.float64).max:.4e})")


# -- criterion 4 ----------------------------------------------------------


def test_c04_epsilon_floor(capsys):
    cfg = loss.LossConfig()
    p = ShashParams(0.0, 1.0, 0.0, 1.0)
    assert float(shash.pdf(p, 1e4)) == 0.0
    floor, _ = loss.nll(p, np.array(1e4), cfg)
    rng = np.random.default_rng(4)
    n = 10**6
    raw = np.stack([rng.normal(0, 50, n), rng.normal(0, 200, n), rng.normal(0, 3, n), rng.normal(0, 200, n)])
    y = rng.normal(0, 100, n)
    _, per_pixel = loss.nll(loss.transform(raw), y, cfg)
    finite = bool(np.all(np.isfinite(per_pixel)))
    ok = abs(floor - 16.1181) <= 1e-4 and floor == -math.log(1e-7) and finite
    record(capsys, 4, ok, f"p=0 pixel loss {floor:.6f} (16.1181 +/- 1e-4); finite on 1e6 random pixels: {finite}")


# -- criterion 5 ----------------------------------------------------------

def _network_fd_worst(spec, seed=0, h=1e-6):
    rng = np.random.default_rng(seed)
    net = UNet(spec, seed=seed)
    for name, p, _ in net.parameters():
        if name.endswith(".b"):
            p[...] = rng.normal(size=p.shape) * 0.3
    x = prepare_input(spec, rng.uniform(size=(2, spec.n_levels, 4, 4)))
    y = rng.normal(size=(2, 4, 4)) * 2
    cfg = loss.LossConfig(weight_policy=loss.WeightPolicy(1.0, 2.0))

    def total():
        raw = net.forward(x, train=True)
        return loss.nll_grad(raw.transpose(1, 0, 2, 3), y, cfg)

    net.zero_grad()
    _, g = total()
    net.backward(g.transpose(1, 0, 2, 3))
    worst = 0.0
    for _, p, grad in net.parameters():
        analytic = grad.copy()
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            a = total()[0]
            p[idx] = orig - h
            b = total()[0]
            p[idx] = orig
            fd = (a - b) / (2 * h)
            worst = max(worst, abs(fd - analytic[idx]) / max(abs(fd), abs(analytic[idx]), 1e-6))
    return worst


def test_c05_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    cfg = loss.LossConfig(weight_policy=loss.WeightPolicy(threshold=2.0, weight_above=3.0))
    pixel_worst = 0.0
    for _ in range(100):
        raw = np.array([rng.normal(0, 3), rng.normal(0, 15), rng.normal(0, 0.7), rng.normal(0, 10)])
        y = np.array(raw[0] + math.exp(raw[1] * loss.SLOPE) * rng.normal(0, 1.5))
        _, g = loss.nll_grad(raw, y, cfg)
        fd = np.array(oracles.nll_central_diff(raw, y, threshold=2.0, weight_above=3.0))
        scale = np.maximum(np.abs(g), np.abs(fd))
        rel = np.where(scale > 0, np.abs(g - fd) / np.where(scale > 0, scale, 1.0), 0.0)
        pixel_worst = max(pixel_worst, rel.max())
    spec = ModelSpec(input_mode="levels_2d", depth=1, base_filters=2, n_levels=2)
    net_worst = _network_fd_worst(spec)
    elapsed = time.perf_counter() - t0
    ok = pixel_worst < 1e-4 and net_worst < 1e-3 and elapsed < 120
    record(capsys, 5, ok, f"loss grad rel err {pixel_worst:.2e} (<1e-4); micro U-Net rel err {net_worst:.2e} (<1e-3); "
                          f"{elapsed:.1f}s (<120s)")


# -- criterion 6 ----------------------------------------------------------


def test_c06_calibration_loop(capsys):
    rng = np.random.default_rng(6)
    n = 10_000
    p = ShashParams(rng.normal(5, 5, n), rng.uniform(0.5, 4, n), rng.normal(0, 0.8, n), rng.uniform(0.6, 2, n))
    y = shash.sample(p, rng)
    pairs = verify.EvalPairs.from_params(y, p)
    freq, _ = verify.pit_histogram(verify.pit(pairs))
    d = verify.pitd(freq)
    iqrr = verify.iqr_rate(pairs)
    shifted = verify.EvalPairs.from_params(y + 2 * p.sigma, p)
    d_shift = verify.pitd(verify.pit_histogram(verify.pit(shifted))[0])
    ok = d < 0.01 and 0.47 <= iqrr <= 0.53 and d_shift > 0.1
    record(capsys, 6, ok, f"calibrated PITD {d:.4f} (<0.01), IQRr {iqrr:.4f} (in [0.47, 0.53]); "
                          f"shifted +2 sigma PITD {d_shift:.4f} (>0.1)")


# -- criterion 7 ----------------------------------------------------------


def test_c07_metric_oracles(capsys):
    def pairs_of(y, yhat):
        return verify.EvalPairs(np.asarray(y, float), np.asarray(yhat, float))

    hot = np.zeros(10)
    hot[0] = 1.0
    worked = [
        verify.rmse(pairs_of([0, 0, 3, 4], [0, 0, 0, 0])) == 2.5,
        verify.crmse(pairs_of([12, 3], [9, 0]), 5) == 3.0,
        abs(verify.iou(np.array([10, 10, 10, 10, 0, 0, 0, 0.0]), np.array([10, 10, 0, 0, 10, 10, 0, 0.0]), 5) - 1 / 3) <= 1e-12,
        abs(verify.pitd(hot) - 0.3) <= 1e-12,
    ]
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        y = rng.gamma(1.5, 4.0, size=(16, 16))
        params = ShashParams(y + rng.normal(0, 3, y.shape), rng.uniform(0.5, 4, y.shape),
                             rng.normal(0, 0.7, y.shape), rng.uniform(0.5, 2, y.shape))
        pairs = verify.EvalPairs.from_params(y, params)
        yf, mf = y.ravel().tolist(), pairs.pred.ravel().tolist()
        freq, _ = verify.pit_histogram(verify.pit(pairs))
        flat = params[np.ones(y.shape, bool)]
        diffs = [
            verify.rmse(pairs) - oracles.rmse(yf, mf),
            verify.crmse(pairs, 5.0) - oracles.crmse(yf, mf, 5.0),
            verify.iou(y, pairs.pred, 5.0) - oracles.iou(yf, mf, 5.0),
            verify.r_squared(y, pairs.pred) - oracles.r2(yf, mf),
            verify.pitd(freq) - oracles.pitd(oracles.pit_hist(verify.pit(pairs).tolist())),
            verify.iqr_rate(pairs) - oracles.iqr_rate(yf, flat),
            verify.area_fraction(y, 5.0) - oracles.area_fraction(yf, 5.0),
        ]
        worst = max(worst, max(abs(v) for v in diffs))
    ok = all(worked) and worst <= 1e-12
    record(capsys, 7, ok, f"worked values {sum(worked)}/4; 50 random 16x16 cases max |metric - oracle| {worst:.2e} (<=1e-12)")


# -- criterion 8 ----------------------------------------------------------


@pytest.mark.slow
def test_c08_learning_sanity(capsys):
    t0 = time.perf_counter()
    data, scaler, _ = dataprep.make_synthetic_dataset(0, {"train": 512, "val": 128, "test": 128}, patch=(32, 32))
    cfg = TrainConfig(learning_rate=3e-3, batch_size=16, max_epochs=200, patience=5, dtype="float32", seed=0)
    r2 = {}
    for mode in ("levels_2d", "composite_2d"):
        spec = ModelSpec(input_mode=mode, depth=2, base_filters=8, n_levels=12)
        state, _ = train(spec, data["train"], data["val"], cfg)
        r2[mode] = median_r2(spec, state, data["test"])
    xtr, ytr = data["train"].all()
    base = linreg_baseline(dataprep.invert_scaler(xtr.max(axis=1), scaler), ytr)
    xte, yte = data["test"].all()
    r2["linreg"] = verify.r_squared(yte, base.predict(dataprep.invert_scaler(xte.max(axis=1), scaler)))
    elapsed = time.perf_counter() - t0
    ok = r2["levels_2d"] - r2["linreg"] >= 0.1 and r2["composite_2d"] <= r2["levels_2d"] and elapsed < 1800
    record(capsys, 8, ok, f"test R^2 levels_2d {r2['levels_2d']:.3f}, composite_2d {r2['composite_2d']:.3f}, "
                          f"linreg {r2['linreg']:.3f} (margin >= 0.1, composite <= levels); {elapsed:.0f}s (<1800s)")


# -- criterion 9 ----------------------------------------------------------


@pytest.mark.slow
def test_c09_overfit_capacity(capsys):
    data, _, _ = dataprep.make_synthetic_dataset(0, {"train": 8, "val": 0, "test": 0}, patch=(32, 32))
    ds = data["train"]
    spec = ModelSpec(input_mode="levels_2d", depth=1, base_filters=8, n_levels=12)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=2000, patience=2000, max_steps=2000,
                      dtype="float32", seed=0)
    state, hist = train(spec, ds, ds, cfg)
    r2 = median_r2(spec, state, ds)
    steps = hist[-1]["steps"]
    ok = hist[-1]["train_loss"] < hist[0]["train_loss"] and r2 > 0.9 and steps <= 2000
    record(capsys, 9, ok, f"8-sample training R^2 {r2:.3f} (>0.9) after {steps} steps (<=2000); "
                          f"train loss {hist[0]['train_loss']:.3f} -> {hist[-1]['train_loss']:.3f}")


# -- criterion 10 ---------------------------------------------------------


def test_c10_regrid(capsys):
    rng = np.random.default_rng(10)
    exact = 0
    for _ in range(20):
        ny, nx = rng.integers(2, 12, size=2)
        src = make_grid(rng.normal(size=(2, ny, nx)))
        src = src.replace(y_coords=np.sort(rng.uniform(0, 30, ny)), x_coords=np.sort(rng.uniform(0, 30, nx)))
        y = np.sort(rng.uniform(-5, 35, rng.integers(1, 10)))
        x = np.sort(rng.uniform(-5, 35, rng.integers(1, 10)))
        exact += np.array_equal(nn_resample(src, (y, x)).values, oracle_resample(src, y, x))
    col = np.array([10.0, 20.0, 30.0])[:, None, None] * np.ones((3, 1, 1))
    msl = make_grid(col, datum="MSL").replace(z_coords=np.array([2.0, 2.5, 3.0]))
    terrain = TerrainGrid(np.full((1, 1), 1.5), msl.y_coords, msl.x_coords)
    agl = to_agl(msl, terrain, LevelSpec((0.5, 1.0, 1.5)))
    agl_ok = agl.values[:, 0, 0].tolist() == [10.0, 20.0, 30.0] and agl.height_datum == "AGL"
    bm = block_mean(make_grid(np.array([[[1.0, 3.0], [5.0, 7.0]]])), 2)
    bm_ok = bm.values.shape == (1, 1, 1) and float(bm.values[0, 0, 0]) == 4.0
    ok = exact == 20 and agl_ok and bm_ok
    record(capsys, 10, ok, f"nn_resample == linear scan on {exact}/20 configs; "
                           f"MSL [2,2.5,3] over 1.5 km terrain -> AGL levels [0.5,1,1.5] ok={agl_ok}; block_mean = "
                           f"{float(bm.values.ravel()[0])}")


# -- criterion 11 ---------------------------------------------------------


def _pipeline(root):
    steps = [
        ["synth", "--seed", "21", "--n-scenes", "24", "--ny", "32", "--nx", "32", "--out", root / "s"],
        ["prepare", "--seed", "21", "--scenes", root / "s", "--patch", "16", "--counts", "8,4,4", "--out", root / "d"],
        ["train", "--seed", "21", "--data", root / "d", "--depth", "1", "--filters", "4", "--epochs", "4",
         "--batch-size", "4", "--out", root / "m"],
        ["predict", "--model", root / "m" / "model.ckpt", "--input", root / "d" / "test.json", "--out", root / "p"],
        ["evaluate", "--pred", root / "p" / "predictions.json", "--out", root / "e"],
    ]
    for argv in steps:
        assert cli.run([str(a) for a in argv]) == 0


def _files(root, pattern):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.glob(pattern))}


def test_c11_pipeline_determinism(capsys, tmp_path):
    for run in ("a", "b"):
        _pipeline(tmp_path / run)
    a, b = tmp_path / "a", tmp_path / "b"
    checks = {
        "synthetic scenes": _files(a, "s/scenes/*.zgrid") == _files(b, "s/scenes/*.zgrid"),
        "patch archive": _files(a, "d/*/*.zgrid") == _files(b, "d/*/*.zgrid"),
        "training history": (a / "m/history.json").read_bytes() == (b / "m/history.json").read_bytes(),
        "checkpoint": (a / "m/model.ckpt").read_bytes() == (b / "m/model.ckpt").read_bytes(),
        "evaluation report": (a / "e/report.json").read_bytes() == (b / "e/report.json").read_bytes(),
    }
    nonempty = len(_files(a, "s/scenes/*.zgrid")) == 48 and len(_files(a, "d/*/*.zgrid")) == 32
    ok = all(checks.values()) and nonempty
    record(capsys, 11, ok, "byte-identical across two seeded runs: " + ", ".join(f"{k}={v}" for k, v in checks.items()))


# -- criterion 12 ---------------------------------------------------------


def test_c12_timing_harness(capsys, tmp_path):
    assert cli.run(["timeit", "--depth", "2", "--filters", "8", "--patch", "32", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "timing.json").read_text())
    t = np.array(rep["timings_ms"])
    ok = (rep["batch_size"] == 32 and t.size == 30 and np.all(t > 0)
          and math.isclose(rep["mean_ms"], t.mean()) and math.isclose(rep["std_ms"], t.std()))
    record(capsys, 12, ok, f"{t.size} batch timings at batch size {rep['batch_size']}: "
                           f"mean {rep['mean_ms']:.1f} ms, std {rep['std_ms']:.1f} ms")
