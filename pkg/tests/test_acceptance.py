"""One test per acceptance criterion; each records a PASS/FAIL line for the run summary."""

import json
import math
import os
import time

import numpy as np
import pytest

from cbs import autodiff as ad
from cbs.analysis import hf_ratio
from cbs.autodiff import Parameter, Tape, grad_check
from cbs.cli import main as cli_main
from cbs.data import load_cifar10_dir, load_mnist_dir
from cbs.models import build_mini_resnet, build_simple_cnn3, init_params
from cbs.nn_ops import (
    BatchNormState, batchnorm2d, conv2d, global_avg_pool, linear, maxpool2d, relu,
    softmax_cross_entropy,
)
from cbs.smoothing import SigmaSchedule, SmoothingConfig, build_kernel, depthwise_blur, sigma_at
from cbs.train import SGD, TrainConfig, ablation_run, mode_config

SEEDS = range(5)
CBS = SmoothingConfig("after_every_conv")


# ----------------------------------------------------------------------
# 1. gradient correctness
# ----------------------------------------------------------------------


def _op_cases(rng):
    """(name, tolerance, loss closure, parameters) for every differentiable op."""
    P = lambda shape, name: Parameter(rng.normal(size=shape), name)  # noqa: E731
    cases = []
    a, b = P((3, 4), "a"), P((3, 4), "b")
    c = rng.normal(size=(3, 4))
    cases.append(("add", 1e-4, lambda: ad.sum_all(ad.mul(ad.add(a, b), c)), [a, b]))
    cases.append(("sub", 1e-4, lambda: ad.sum_all(ad.mul(ad.sub(a, b), c)), [a, b]))
    cases.append(("mul", 1e-4, lambda: ad.sum_all(ad.mul(a, b)), [a, b]))
    cases.append(("scale+reshape", 1e-4, lambda: ad.sum_all(ad.mul(ad.reshape(ad.scale(a, 1.7), (4, 3)),
                                                                    c.reshape(4, 3))), [a]))
    x, w, bias = P((5, 4), "x"), P((4, 3), "w"), P((3,), "bias")
    y = rng.integers(0, 3, 5)
    cl = rng.normal(size=(5, 3))
    cases.append(("linear", 1e-4, lambda: ad.sum_all(ad.mul(linear(x, w, bias), cl)), [x, w, bias]))
    r = P((4, 6), "r")
    cr = rng.normal(size=(4, 6))
    cases.append(("relu", 1e-4, lambda: ad.sum_all(ad.mul(relu(r), cr)), [r]))
    z = P((5, 3), "z")
    cases.append(("softmax_cross_entropy", 1e-4, lambda: softmax_cross_entropy(z, y), [z]))
    xi, wc, bc = P((1, 1, 5, 5), "xi"), P((2, 1, 3, 3), "wc"), P((2,), "bc")
    cc = rng.normal(size=(1, 2, 5, 5))
    cases.append(("conv2d", 1e-3, lambda: ad.sum_all(ad.mul(conv2d(xi, wc, bc, 1, 1), cc)), [xi, wc, bc]))
    xs = P((1, 2, 7, 7), "xs")
    ws = P((3, 2, 3, 3), "ws")
    cs = rng.normal(size=(1, 3, 4, 4))
    cases.append(("conv2d stride 2", 1e-3, lambda: ad.sum_all(ad.mul(conv2d(xs, ws, None, 2, 1), cs)), [xs, ws]))
    mp = P((2, 2, 6, 6), "mp")
    cm = rng.normal(size=(2, 2, 3, 3))
    cases.append(("maxpool2d", 1e-4, lambda: ad.sum_all(ad.mul(maxpool2d(mp), cm)), [mp]))
    gp = P((2, 3, 4, 4), "gp")
    cg = rng.normal(size=(2, 3))
    cases.append(("global_avg_pool", 1e-4, lambda: ad.sum_all(ad.mul(global_avg_pool(gp), cg)), [gp]))
    bx, gm, bt = P((4, 3, 4, 4), "bx"), P((3,), "gamma"), P((3,), "beta")
    cb = rng.normal(size=(4, 3, 4, 4))
    cases.append(("batchnorm2d", 1e-2,
                  lambda: ad.sum_all(ad.mul(batchnorm2d(bx, gm, bt, BatchNormState.create(3)), cb)),
                  [bx, gm, bt]))
    bl = P((2, 2, 9, 9), "bl")
    cbl = rng.normal(size=(2, 2, 9, 9))
    k = build_kernel(1.0)
    cases.append(("gaussian blur", 1e-3, lambda: ad.sum_all(ad.mul(depthwise_blur(bl, k), cbl)), [bl]))
    return cases


def _model_cases(seed):
    rng = np.random.default_rng(seed)
    x8 = rng.normal(size=(2, 1, 8, 8))
    y = np.array([0, 2])
    for sigma in (0.0, 1.0):
        cfg = CBS if sigma else None
        s3 = build_simple_cnn3(1, 8, 3, cfg, (2, 3, 4))
        rn = build_mini_resnet(2, 2, 3, cfg, 1, 8)
        for name, m in (("SimpleCNN3", s3), ("MiniResNet", rn)):
            init_params(m, seed, zero_head=False)
            m.set_sigma(sigma)
            yield f"{name} sigma={sigma:g}", m, (x8, y)


def test_criterion_1_gradient_correctness(accept):
    t0 = time.perf_counter()
    failures, worst = [], {}
    for seed in SEEDS:
        for name, tol, fn, params in _op_cases(np.random.default_rng(seed)):
            rep = grad_check(fn, params=params, tol=tol)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
            if not rep.passed:
                failures.append(f"{name} seed {seed}: {rep}")
        for name, model, batch in _model_cases(seed):
            rep = grad_check(model, batch, tol=1e-2)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
            if not rep.passed:
                failures.append(f"{name} seed {seed}: {rep}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    detail = (f"{len(worst)} checks x 5 seeds, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
              if ok else "; ".join(failures) or f"too slow: {elapsed:.1f}s")
    accept(1, "gradient correctness", ok, detail)


# ----------------------------------------------------------------------
# 2. kernel properties
# ----------------------------------------------------------------------


def test_criterion_2_kernel_properties(accept):
    problems = []
    for sigma in (0.1, 0.5, 1.0, 2.0, 4.0):
        k = build_kernel(sigma)
        w = k.weights.astype(np.float64)
        h = k.half_width
        if abs(w.sum() - 1) >= 1e-6:
            problems.append(f"sigma {sigma}: sum {w.sum()}")
        sym = (np.array_equal(k.weights, k.weights[::-1]) and np.array_equal(k.weights, k.weights[:, ::-1])
               and np.array_equal(k.weights, k.weights.T))
        if not sym:
            problems.append(f"sigma {sigma}: not 4-fold symmetric")
        if w[h, h] != w.max() or (w == w.max()).sum() != 1:
            problems.append(f"sigma {sigma}: centre is not the unique max")
        off = np.arange(-h, h + 1)
        r2 = off[:, None] ** 2 + off[None, :] ** 2
        for d in np.unique(r2):
            ring_max = w[r2 == d].max()
            if (w[r2 > d] > ring_max + 1e-12).any():
                problems.append(f"sigma {sigma}: not radially monotone at r^2={d}")
                break
    # grid oracle: exp(-(x^2+y^2)/2) on the 5x5 integer grid, normalized
    grid = [math.exp(-(x * x + y * y) / 2) for x in range(-2, 3) for y in range(-2, 3)]
    oracle = 1.0 / sum(grid)
    center = float(build_kernel(1.0).weights[2, 2])
    if build_kernel(1.0).size != 5 or abs(center - oracle) >= 1e-5:
        problems.append(f"sigma 1 centre {center} vs oracle {oracle}")
    accept(2, "kernel properties", not problems,
           "; ".join(problems) or f"sigma=1 centre {center:.8f} (oracle {oracle:.8f})")


# ----------------------------------------------------------------------
# 3. identity limit
# ----------------------------------------------------------------------


def _one_step(model, x, y):
    opt = SGD(model.parameters(), 0.9, 5e-4)
    opt.zero_grad()
    with Tape() as tape:
        logits = model.forward(x)
        loss = softmax_cross_entropy(logits, y)
    tape.backward(loss)
    grads = [p.grad.copy() for p in model.parameters()]
    opt.step(0.05)
    return logits.value, grads, [p.value.copy() for p in model.parameters()]


def test_criterion_3_identity_limit(accept):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 10, 4)
    mismatches = []
    for builder in (build_simple_cnn3, build_mini_resnet):
        for mode in ("full_cbs", "image_and_features"):
            for sigma in (0.0, 0.05):
                base, cbs = builder(cfg=None), builder(cfg=mode_config(mode))
                for m in (base, cbs):
                    init_params(m, 7)
                    m.set_sigma(sigma)
                ra, rb = _one_step(base, x, y), _one_step(cbs, x, y)
                same = (ra[0].tobytes() == rb[0].tobytes()
                        and all(a.tobytes() == b.tobytes() for a, b in zip(ra[1], rb[1]))
                        and all(a.tobytes() == b.tobytes() for a, b in zip(ra[2], rb[2])))
                if not same:
                    mismatches.append(f"{builder.__name__} {mode} sigma={sigma}")
    accept(3, "identity limit", not mismatches,
           "; ".join(mismatches) or "forward, gradients and SGD step bitwise equal for sigma in {0, 0.05}")


# ----------------------------------------------------------------------
# 4. schedule exactness
# ----------------------------------------------------------------------


def test_criterion_4_schedule_exactness(accept):
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(10_000):
        sigma0 = float(rng.uniform(0.05, 8))
        factor = float(rng.uniform(0.05, 1.0))
        every = int(rng.integers(1, 50))
        t = int(rng.integers(0, 10_000))
        expected = np.float32(sigma0 * factor ** math.floor(t / every))
        if np.float32(sigma_at(SigmaSchedule(sigma0, factor, every), t)) != expected:
            bad += 1
    default = SigmaSchedule(1.0, 0.9, 5)
    seq = [np.float32(default.sigma_at(t)) for t in range(6)]
    default_ok = seq[:5] == [np.float32(1.0)] * 5 and seq[5] == np.float32(0.9)
    accept(4, "schedule exactness", bad == 0 and default_ok,
           f"{bad} mismatches in 10^4 tuples; sigma(epochs 0-5) = {' '.join(str(s) for s in seq)}")


# ----------------------------------------------------------------------
# 5. low-pass property
# ----------------------------------------------------------------------


def test_criterion_5_low_pass(accept):
    t0 = time.perf_counter()
    means = []
    for sigma in (0.0, 0.5, 1.0, 2.0):
        k = build_kernel(sigma)
        vals = [hf_ratio(depthwise_blur(np.random.default_rng(s).normal(size=(1, 1, 32, 32)), k), 0.25)
                for s in range(10)]
        means.append(float(np.mean(vals)))
    elapsed = time.perf_counter() - t0
    ok = all(a > b for a, b in zip(means, means[1:])) and elapsed < 60
    accept(5, "low-pass property", ok,
           "mean hf_ratio at sigma 0/0.5/1/2: " + ", ".join(f"{m:.4f}" for m in means) + f" ({elapsed:.1f}s)")


# ----------------------------------------------------------------------
# 6 & 7. desk-scale curriculum effect and ablation ordering
# ----------------------------------------------------------------------


def _desk_data():
    """CIFAR-10 (first 10k training images) or full MNIST, from env-provided directories."""
    cifar, mnist = os.environ.get("CBS_CIFAR10_DIR"), os.environ.get("CBS_MNIST_DIR")
    if cifar:
        return load_cifar10_dir(cifar, "train").subset(10_000), load_cifar10_dir(cifar, "test")
    if mnist:
        return load_mnist_dir(mnist, "train"), load_mnist_dir(mnist, "test")
    return None


_DESK = {}


def _desk_results():
    """Train baseline, full_cbs, image_only and constant_sigma for 5 seeds each (cached)."""
    if "rows" in _DESK:
        return _DESK["rows"]
    data = _desk_data()
    if data is None:
        _DESK["rows"] = None
        return None
    train, test = data
    c, size = train.images.shape[1], train.images.shape[2]
    schedule = SigmaSchedule(1.0, 0.9, 5)
    shared = TrainConfig(epochs=30, smoothing=mode_config("full_cbs", schedule))
    out = os.environ.get("CBS_ACCEPTANCE_OUT")
    rows = ablation_run(["baseline", "full_cbs", "image_only", "constant_sigma"], shared,
                        lambda sm: build_simple_cnn3(c, size, train.classes, sm), train, test,
                        seeds=list(SEEDS), out_dir=out)
    _DESK["rows"] = {r.mode: r for r in rows}
    return _DESK["rows"]


NO_DATA = ("no CIFAR-10/MNIST data in this environment (set CBS_CIFAR10_DIR or CBS_MNIST_DIR); "
           "protocol needs 20 runs x 30 epochs")


@pytest.mark.slow
def test_criterion_6_curriculum_effect(accept):
    rows = _desk_results()
    if rows is None:
        accept(6, "desk-scale curriculum effect", False, NO_DATA)
    base, cbs = rows["baseline"], rows["full_cbs"]
    diff = 100 * (cbs.mean - base.mean)
    accept(6, "desk-scale curriculum effect", diff >= -0.5,
           f"baseline {100 * base.mean:.2f}+/-{100 * base.std:.2f}, CBS {100 * cbs.mean:.2f}"
           f"+/-{100 * cbs.std:.2f}, CBS - baseline = {diff:+.2f} points")


@pytest.mark.slow
def test_criterion_7_ablation_ordering(accept):
    rows = _desk_results()
    if rows is None:
        accept(7, "ablation ordering", False, NO_DATA)
    full, img, const = rows["full_cbs"], rows["image_only"], rows["constant_sigma"]
    ok = img.mean <= full.mean and const.mean <= full.mean
    accept(7, "ablation ordering", ok,
           ", ".join(f"{r.mode} {100 * r.mean:.2f}+/-{100 * r.std:.2f}" for r in (img, const, full)))


# ----------------------------------------------------------------------
# 8. parameter parity
# ----------------------------------------------------------------------


def test_criterion_8_parameter_parity(accept):
    counts = {}
    modes = ["baseline", "full_cbs", "image_only", "image_and_features", "constant_sigma",
             "single:1", "single:2", "single:3"]
    for name, builder in (("SimpleCNN3", build_simple_cnn3), ("MiniResNet", build_mini_resnet)):
        counts[name] = {builder(cfg=mode_config(m)).n_params() for m in modes}
    ok = all(len(v) == 1 for v in counts.values())
    accept(8, "parameter parity", ok,
           ", ".join(f"{k} {sorted(v)}" for k, v in counts.items()) + f" across {len(modes)} modes")


# ----------------------------------------------------------------------
# 9. determinism and resume
# ----------------------------------------------------------------------


def test_criterion_9_determinism_and_resume(accept, tmp_path, capsys):
    common = ["train", "--data", "synthetic", "--n-train", "256", "--n-test", "128", "--classes", "4",
              "--widths", "8,16,16", "--epochs", "6", "--every", "2", "--no-timing"]
    problems = []
    assert cli_main(common + ["--out", str(tmp_path / "a")]) == 0
    assert cli_main(["train", "--manifest", str(tmp_path / "a" / "manifest.json"),
                     "--out", str(tmp_path / "b")]) == 0
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    if csv_a != (tmp_path / "b" / "metrics.csv").read_bytes():
        problems.append("manifest re-run CSV differs")
    assert cli_main(common + ["--out", str(tmp_path / "p"), "--stop-after", "3"]) == 0
    assert cli_main(common + ["--out", str(tmp_path / "r"),
                              "--resume", str(tmp_path / "p" / "checkpoint")]) == 0
    if csv_a != (tmp_path / "r" / "metrics.csv").read_bytes():
        problems.append("resumed CSV differs")
    ta = (tmp_path / "a" / "checkpoint" / "tensors.bin").read_bytes()
    if ta != (tmp_path / "r" / "checkpoint" / "tensors.bin").read_bytes():
        problems.append("resumed final parameters differ")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    if manifest["cli"]["seed"] != 0 or "config" not in manifest:
        problems.append("manifest incomplete")
    capsys.readouterr()
    accept(9, "determinism and resume", not problems,
           "; ".join(problems) or "manifest re-run and resume-at-epoch-3 reproduce CSV and weights byte-for-byte")
