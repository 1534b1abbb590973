"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdict lines are collected in ``conftest.VERDICTS`` and shown in the
terminal summary, so they appear in a plain ``pytest -v`` log as well.
"""
import math
import time

import numpy as np
import pytest

from clutterlab import nn
from clutterlab.agent import GreedyPolicy, TrainConfig, evaluate, observe, random_policy, train
from clutterlab.cli import build_suite, main, resolve_config, train_cfg
from clutterlab.metric import (GaussianFit, MetricParams, Region, compute_metric,
                               extract_main_region, fit_gaussian, flatness_metric,
                               interval_metric, max_point)
from clutterlab.scene import Scene, SceneObject, generate_scene

from conftest import VERDICTS
from envs import greedy_hit_rate, train_bandit
from gradcheck import TOL, crosses_kink, numeric_grad, rel_error, sample_coords
from oracles import grid_search_sse, random_map


def verdict(n: int, title: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail} ({seconds:.1f} s)"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_1_metric_correctness():
    t0 = time.perf_counter()
    literal = MetricParams(sigma_mode="literal")
    rng = np.random.default_rng(2024)
    lo, hi = math.inf, -math.inf
    for i in range(10_000):
        if i % 4 == 3:
            v = rng.uniform(0, 1, (15, 15)) ** rng.uniform(0.5, 6.0)
        else:
            v = random_map(rng)
        rep = compute_metric(v, literal)
        lo, hi = min(lo, rep.phi), max(hi, rep.phi)
    in_range = 0.0 <= lo and hi <= 1.0

    # 2x2 region, errors of +-0.2 against v_M = 1
    s = np.full((2, 2), 0.5)
    fit = GaussianFit(0.0, 0.0, 0.0, 1.0, 0.0, s + np.array([[0.2, -0.2], [0.2, -0.2]]), 0.0)
    sigma, phi_f = flatness_metric(s, Region(np.ones((2, 2), bool), 0, 0), fit, 1.0, "literal")
    hand = abs(sigma - 0.1) <= 1e-12 and abs(phi_f - math.exp(-0.1)) <= 1e-12

    region = Region(np.ones((12, 12), dtype=bool), 34, 34)
    half = interval_metric((40, 40), region, [(40, 46)])
    clamped = interval_metric((40, 40), region, [(40, 70)])
    interval = half == 0.5 and clamped == 1.0

    dt = time.perf_counter() - t0
    ok = in_range and hand and interval and dt < 60.0
    verdict(1, "metric correctness", ok,
            f"phi range over 10000 maps [{lo:.4f}, {hi:.4f}]; literal sigma {sigma:.15f}, "
            f"phi_f err {abs(phi_f - math.exp(-0.1)):.1e}; interval cases {half}, {clamped}", dt)


# ---------------------------------------------------------------- 2

def test_criterion_2_gaussian_fit_matches_grid_search():
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(50):
        size = int(rng.integers(6, 16))
        v = random_map(rng, size)
        p, _ = max_point(v)
        region = extract_main_region(v, p)
        fit = fit_gaussian(v, region)
        rows, cols = region.pixels()
        ref = grid_search_sse(rows, cols, v[rows, cols], 2.0 * max(region.m, region.n))
        worst = max(worst, fit.residual_sse / ref if ref > 1e-12 else
                    (1.0 if fit.residual_sse <= 1e-12 else math.inf))
    dt = time.perf_counter() - t0
    verdict(2, "Gaussian fit oracle", worst <= 1.05 and dt < 300.0,
            f"worst LM / grid SSE ratio over 50 regions {worst:.5f} (limit 1.05)", dt)


# ---------------------------------------------------------------- 3

def _op_errors(rng):
    errs = {}
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    R = rng.standard_normal((2, 3, 8, 8))
    gx, gw, gb = nn.conv2d_backward(R, x, w, 1)
    f = lambda: float(np.sum(nn.conv2d_forward(x, w, b, 1) * R))  # noqa: E731
    errs["conv input"] = rel_error(gx, numeric_grad(f, x))
    errs["conv kernel"] = rel_error(gw, numeric_grad(f, w))
    errs["conv bias"] = rel_error(gb, numeric_grad(f, b))
    y = rng.standard_normal((2, 3, 6, 8))
    out, idx = nn.maxpool2(y)
    Rp = rng.standard_normal(out.shape)
    errs["maxpool"] = rel_error(nn.maxpool2_backward(Rp, idx),
                                numeric_grad(lambda: float(np.sum(nn.maxpool2(y)[0] * Rp)), y))
    Ru = rng.standard_normal((2, 3, 12, 16))
    errs["upsample"] = rel_error(nn.upsample2_backward(Ru),
                                 numeric_grad(lambda: float(np.sum(nn.upsample2_nearest(y) * Ru)), y))
    Rr = rng.standard_normal(y.shape)
    errs["relu"] = rel_error(nn.relu_backward(Rr, y),
                             numeric_grad(lambda: float(np.sum(nn.relu(y) * Rr)), y))
    z = rng.standard_normal((2, 2, 6, 8))
    Rc = rng.standard_normal((2, 5, 6, 8))
    ga, gz = nn.concat_backward(Rc, 3)
    fc = lambda: float(np.sum(nn.concat_channels(y, z) * Rc))  # noqa: E731
    errs["concat"] = max(rel_error(ga, numeric_grad(fc, y)), rel_error(gz, numeric_grad(fc, z)))
    p = rng.standard_normal(7)
    t = rng.standard_normal(7) * 3
    _, g = nn.td_loss(p, t)
    errs["huber"] = rel_error(g, numeric_grad(lambda: float(np.sum(nn.td_loss(p, t)[0])), p))
    return errs


def _network_errors(rng):
    """Worst error over sampled coordinates of every head parameter and the input.

    On a full 32x32 patch each shared weight feeds thousands of ReLUs, so a
    perturbation of 1e-5 now and then flips one; such coordinates are redrawn
    and counted.
    """
    net = nn.QNetwork.init(3)
    for h in net.heads:
        for v in h.params.values():
            v += 0.05 * rng.standard_normal(v.shape)
    x = rng.uniform(0, 1, (1, 4, 32, 32))
    R = rng.standard_normal((1, 8, 32, 32))

    def loss():
        return float(np.sum(net.forward(x) * R))

    def signature():
        sig = []
        for head in net.heads:
            _, c = head.forward(x)
            sig += [c[2] > 0, c[4], c[6] > 0, c[8] > 0]  # a1, pool winners, a2, a3
        return sig

    def smooth(arr, k):
        picked, skipped = [], 0
        for c in sample_coords(arr.shape, 4 * k, rng):
            if len(picked) == k:
                break
            if crosses_kink(signature, arr, c):
                skipped += 1
            else:
                picked.append(c)
        return picked, skipped

    worst, kinks = 0.0, 0
    gx_total = np.zeros_like(x)
    for d, head in enumerate(net.heads):
        _, cache = head.forward(x)
        grads, gx = head.backward(cache, R[:, d:d + 1])
        gx_total += gx
        for name, g in grads.items():
            coords, skipped = smooth(head.params[name], 4)
            kinks += skipped
            num = numeric_grad(loss, head.params[name], coords)
            worst = max(worst, rel_error([g[c] for c in coords], [num[c] for c in coords]))
    coords, skipped = smooth(x, 24)
    kinks += skipped
    num = numeric_grad(loss, x, coords)
    worst = max(worst, rel_error([gx_total[c] for c in coords], [num[c] for c in coords]))
    return worst, kinks


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = _op_errors(rng)
    errs["8-head network"], kinks = _network_errors(rng)
    dt = time.perf_counter() - t0
    name, worst = max(errs.items(), key=lambda kv: kv[1])
    verdict(3, "gradient checks", worst < TOL and dt < 120.0,
            f"{len(errs)} checks, worst relative error {worst:.2e} ({name}); "
            f"{kinks} kink-straddling network coordinates redrawn", dt)


# ---------------------------------------------------------------- 4

def test_criterion_4_failure_cases_below_lift_threshold():
    t0 = time.perf_counter()
    cases = {"gathering": 2, "covering": 2, "tilting": 1}
    worst = {}
    for pattern, n in cases.items():
        worst[pattern] = max(observe(generate_scene(pattern, n, seed)).report.phi
                             for seed in range(10))
    flat = Scene((SceneObject(0, "box", (0.4, 0.3), (0.06, 0.06, 0.04)),))
    phi_flat = observe(flat).report.phi
    dt = time.perf_counter() - t0
    ok = all(v < 0.85 for v in worst.values()) and phi_flat >= 0.85 and dt < 60.0
    detail = ", ".join(f"{p} max {v:.3f}" for p, v in worst.items())
    verdict(4, "failure cases", ok, f"{detail} (need < 0.85); isolated box {phi_flat:.3f}", dt)


# ---------------------------------------------------------------- 5

def test_criterion_5_bandit():
    t0 = time.perf_counter()
    res = train_bandit(episodes=400, seed=0)
    rate = greedy_hit_rate(res.net, trials=200)
    dt = time.perf_counter() - t0
    verdict(5, "bandit sanity", rate >= 0.95 and dt < 600.0,
            f"greedy picks the rewarded direction in {rate:.1%} of 200 trials", dt)


# ---------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_6_learned_beats_random():
    t0 = time.perf_counter()
    cfg = resolve_config()
    suite = build_suite(cfg["suite"])
    train_scenes = build_suite(cfg["train_suite"])
    base = train_cfg(cfg)
    eval_cfg = base
    rand = evaluate(random_policy, suite, eval_cfg)
    learned = []
    for seed in range(3):
        tc = TrainConfig.from_dict({**cfg["train"], "seed": seed})
        net = train(tc, train_scenes).net
        learned.append(evaluate(GreedyPolicy(net, 0.0), suite, eval_cfg))
    succ = float(np.mean([s.test_success_rate for s in learned]))
    ops = float(np.mean([s.avg_operations for s in learned]))
    inc = float(np.mean([s.avg_phi_increment_per_push for s in learned]))
    dt = time.perf_counter() - t0
    checks = {"success +5 points": succ >= rand.test_success_rate + 0.05,
              "operations": ops <= rand.avg_operations,
              "phi increment": inc >= rand.avg_phi_increment_per_push,
              "episodes <= 2000": 3 * base.episodes <= 2000,
              "runtime <= 60 min": dt <= 3600.0}
    per_seed = "; ".join(f"seed {k}: {s.test_success_rate:.2f}/{s.avg_operations:.1f}/"
                         f"{s.avg_phi_increment_per_push:.4f}" for k, s in enumerate(learned))
    failed = [k for k, v in checks.items() if not v]
    verdict(6, "learned against random", not failed,
            f"random success/ops/increment {rand.test_success_rate:.2f}/{rand.avg_operations:.1f}/"
            f"{rand.avg_phi_increment_per_push:.4f}; learned mean {succ:.2f}/{ops:.1f}/{inc:.4f} "
            f"({per_seed}); failed: {failed or 'none'}", dt)


# ---------------------------------------------------------------- 7

def test_criterion_7_compare_is_byte_identical(tmp_path):
    t0 = time.perf_counter()
    ck = nn.save_checkpoint(nn.QNetwork.init(7), tmp_path / "q.bin")
    args = ["--checkpoint", str(ck), "--set", "suite.per_pattern=4"]
    codes = [main(["compare", "--out", str(tmp_path / name), *args]) for name in ("a", "b")]
    a = (tmp_path / "a" / "compare.csv").read_bytes()
    b = (tmp_path / "b" / "compare.csv").read_bytes()
    dt = time.perf_counter() - t0
    verdict(7, "determinism", codes == [0, 0] and a == b and dt < 300.0,
            f"two compare runs over 16 scenes, CSVs identical: {a == b}", dt)
