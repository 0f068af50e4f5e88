"""Acceptance criteria, each at its stated tolerance and time budget.

Every test records a ``[n] PASS|FAIL`` line that is printed in the pytest
terminal summary; running this file directly prints the same lines.
The two trend criteria (6, 7) train 70 models on the benchmark in
``configs/benchmark.json`` and take several minutes.
"""

import argparse
import json
import math
import time
from itertools import product
from pathlib import Path

import numpy as np
import pytest

from agreenet.cli import main as cli_main
from agreenet.cli import resolve, run_training
from agreenet.dataset import MISSING, AnnotationSet
from agreenet.losses import (
    LossConfig,
    ar_loss,
    focal_loss,
    gamma_effective_number,
    multi_annotator_loss,
    rmse_loss,
    wkl_loss,
)
from agreenet.metrics import agreement_ratio, cohens_kappa, linear_weighted_kappa
from agreenet.model import ModelConfig, TwoStreamModel, grad_check, regularize, regularize_literal, relative_error
from agreenet.synth import AnnotatorSpec, SynthSpec, generate

from conftest import ACCEPTANCE_LINES
from oracles import delta_bruteforce, kappa_bruteforce, pinball

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = json.loads((ROOT / "configs" / "benchmark.json").read_text())
SEEDS = BENCHMARK["repeat_seeds"]


def record(n, ok, detail, seconds):
    line = f"[{n}] {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def fd(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up.flat[i] += h
        down.flat[i] -= h
        out.flat[i] = (f(up) - f(down)) / (2 * h)
    return out


# --- 1 -----------------------------------------------------------------------------


def test_1_regularization_properties():
    t0 = time.perf_counter()
    p = np.linspace(0.01, 0.99, 50)
    y = np.linspace(0.01, 0.99, 50)
    lams = np.array([0.0, 1.0, 1.5, 2.0, 3.0, 3.5])
    P, Y, L = np.meshgrid(p, y, lams, indexing="ij")
    out = regularize(P, Y, L)
    checks = {
        "chance identity": np.allclose(regularize(P, 0.5, L), P, rtol=0, atol=1e-15),
        "lambda=0 identity": np.allclose(regularize(P, Y, 0.0), P, rtol=0, atol=1e-15),
        "symmetry": np.allclose(regularize(1 - P, 1 - Y, L), 1 - out, rtol=0, atol=1e-14),
        "monotone in y": bool(np.all(np.diff(out[:, :, 1:], axis=1) > 0)),
        "monotone in lambda": bool(
            np.all(np.diff(out[:, y > 0.5, :], axis=2) >= 0) and np.all(np.diff(out[:, y < 0.5, :], axis=2) <= 0)
        ),
        "range": bool(np.all((out > 0) & (out < 1))),
        "log-space vs literal": float(np.max(np.abs(out - regularize_literal(P, Y, L)))) <= 1e-12,
    }
    dt = time.perf_counter() - t0
    failed = [k for k, v in checks.items() if not v]
    ok = not failed and dt < 1.0
    record(1, ok, f"regularize on 50x50x6 grid; failed={failed or 'none'}", dt)
    assert ok


# --- 2 -----------------------------------------------------------------------------


def test_2_ar_loss_is_pinball():
    t0 = time.perf_counter()
    grid = np.linspace(0, 1, 100)
    worst = 0.0
    for alpha in grid:
        v, _ = ar_loss(grid, np.full_like(grid, alpha))
        ref = np.array([pinball(yv, alpha, alpha) for yv in grid])
        worst = max(worst, float(np.max(np.abs(v - ref))))
    hand = float(ar_loss(0.6, 0.8)[0])
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and abs(hand - 0.04) <= 1e-12 and dt < 1.0
    record(2, ok, f"AR vs pinball max err {worst:.1e}; ar_loss(0.6, 0.8) = {hand:.15f}", dt)
    assert ok


# --- 3 -----------------------------------------------------------------------------


def test_3_gradient_suite():
    t0 = time.perf_counter()
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in range(20):
        rng = np.random.default_rng(seed)
        b = 8
        p = rng.uniform(0.02, 0.98, b)
        g = rng.integers(0, 2, b)
        gamma = float(rng.uniform(0, 4))
        note("focal", relative_error(focal_loss(p, g, gamma)[1], fd(lambda z: focal_loss(z, g, gamma)[0].sum(), p)))

        alpha = rng.uniform(0, 1, b)
        y = np.clip(alpha + rng.choice([-1, 1], b) * rng.uniform(0.01, 0.5, b), 0.001, 0.999)
        note("ar", relative_error(ar_loss(y, alpha)[1], fd(lambda z: ar_loss(z, alpha)[0].sum(), y)))
        note("rmse", relative_error(rmse_loss(y, alpha)[1], fd(lambda z: rmse_loss(z, alpha)[0], y)))

        labels = rng.integers(0, 2, b)
        labels[:2] = [0, 1]
        note("wkl", relative_error(wkl_loss(p, labels)[1], fd(lambda z: wkl_loss(z, labels)[0], p)))

        multi = rng.integers(0, 2, (b, 3))
        multi[rng.random((b, 3)) < 0.25] = MISSING
        multi[:, 0] = np.arange(b) % 2
        gam = rng.uniform(0, 3, 3)
        note("multi-annotator focal",
             relative_error(multi_annotator_loss(p, multi, gam)[1],
                            fd(lambda z: multi_annotator_loss(z, multi, gam)[0], p)))

        x = rng.normal(size=(b, 3))
        for variant, agr in (("distributional", "ar"), ("distributional", "rmse"), ("linear", "ar"), ("linear", "rmse")):
            model = TwoStreamModel(ModelConfig(input_dim=3, hidden=(6,), n_bins=4, indicator_hidden=4,
                                               variant=variant), seed=seed)
            rep = grad_check(model, x, multi, LossConfig(agreement_loss=agr), tolerance=1e-4)
            note(f"model focal+{agr} ({variant})", rep.max_error)
        model = TwoStreamModel(ModelConfig(input_dim=3, hidden=(6,), n_bins=4, indicator_hidden=4), seed=seed)
        rep = grad_check(model, x, multi, LossConfig(classifier_loss="wkl"), tolerance=1e-3)
        note("model wkl+ar", rep.max_error)
    dt = time.perf_counter() - t0
    limits = {k: (1e-3 if "wkl" in k else 1e-4) for k in worst}
    failed = [k for k in worst if not worst[k] < limits[k]]
    ok = not failed and dt < 30
    summary = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record(3, ok, f"20 seeds; worst relative errors: {summary}; failed={failed or 'none'}", dt)
    assert ok


# --- 4 -----------------------------------------------------------------------------


def test_4_metrics_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_k = worst_d = 0.0
    done = 0
    while done < 200:
        j = int(rng.integers(2, 7))
        n = int(rng.integers(10, 201))
        labels = rng.integers(0, 2, (n, j))
        labels[rng.random((n, j)) < 0.2] = MISSING
        empty = (labels == MISSING).all(axis=1)
        labels[empty, 0] = rng.integers(0, 2, int(empty.sum()))
        pred = rng.integers(0, 2, n)
        cols = [labels[:, k].tolist() for k in range(j)]
        try:
            expected = delta_bruteforce(pred.tolist(), cols)
        except ZeroDivisionError:
            continue
        got = agreement_ratio(pred, AnnotationSet.from_arrays(np.zeros((n, 1)), labels)).delta
        worst_d = max(worst_d, abs(got - expected))
        for k in range(j):
            worst_k = max(worst_k, abs(cohens_kappa(pred, labels[:, k]) - kappa_bruteforce(pred.tolist(), cols[k])))
        done += 1
    worst_w = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 100))
        a, b = rng.integers(0, 2, n), rng.integers(0, 2, n)
        worst_w = max(worst_w, abs(linear_weighted_kappa(a, b) - cohens_kappa(a, b)))
    dt = time.perf_counter() - t0
    ok = worst_k <= 1e-12 and worst_d <= 1e-12 and worst_w <= 1e-12 and dt < 10
    record(4, ok, f"200 instances: kappa err {worst_k:.1e}, delta err {worst_d:.1e}, "
                  f"weighted-vs-Cohen err {worst_w:.1e}", dt)
    assert ok


# --- 5 -----------------------------------------------------------------------------


def test_5_synthetic_calibration():
    t0 = time.perf_counter()
    targets = (0.80, 0.75, 0.70)
    worst = 0.0
    for seed in range(5):
        res = generate(SynthSpec(n_samples=10_000, feature_dim=4, seed=seed,
                                 annotators=tuple(AnnotatorSpec(t) for t in targets)))
        lab = res.data.labels
        for j, t in enumerate(targets, start=1):
            worst = max(worst, abs(cohens_kappa(lab[:, 0], lab[:, j]) - t))
    dt = time.perf_counter() - t0
    ok = worst <= 0.02 and dt < 60
    record(5, ok, f"kappa targets {targets} x 5 seeds at n=10000: max |realized - target| = {worst:.4f}", dt)
    assert ok


# --- 6, 7: trend reproduction ---------------------------------------------------------

_RUNS = {}


def benchmark_delta(seed, paradigm, classifier_loss, variant="distributional", agreement_loss="ar"):
    key = (seed, paradigm, classifier_loss, variant, agreement_loss)
    if key not in _RUNS:
        raw = {
            "synth": BENCHMARK["synth"],
            "loss": {"classifier_loss": classifier_loss,
                     "agreement_loss": agreement_loss if paradigm == "learn2agree" else None},
            "model": {"variant": variant},
            "train": {"paradigm": paradigm},
            "seed": seed,
        }
        cfg = resolve(raw, argparse.Namespace())
        _RUNS[key] = run_training(cfg, seed)[2]["evaluation"]["delta"]
    return _RUNS[key]


@pytest.mark.slow
def test_6_learn2agree_beats_learn_from_all():
    t0 = time.perf_counter()
    wins, gaps = {}, {}
    for cl in ("focal_ce", "wkl"):
        l2a = np.array([benchmark_delta(s, "learn2agree", cl) for s in SEEDS])
        lfa = np.array([benchmark_delta(s, "learn_from_all", cl) for s in SEEDS])
        wins[cl] = int(np.sum(l2a >= lfa))
        gaps[cl] = float(np.mean(l2a - lfa))
    dt = time.perf_counter() - t0
    ok = all(w >= 8 for w in wins.values()) and dt < 15 * 60
    detail = "; ".join(f"{cl}: learn2agree >= learn_from_all in {wins[cl]}/10 seeds (mean gap {gaps[cl]:+.4f})"
                       for cl in wins)
    record(6, ok, detail + " [need >= 8/10 each]", dt)
    assert ok


@pytest.mark.slow
def test_7_agreement_loss_pairing():
    t0 = time.perf_counter()
    d_ar = np.array([benchmark_delta(s, "learn2agree", "focal_ce", "distributional", "ar") for s in SEEDS])
    d_rmse = np.array([benchmark_delta(s, "learn2agree", "focal_ce", "distributional", "rmse") for s in SEEDS])
    l_ar = np.array([benchmark_delta(s, "learn2agree", "focal_ce", "linear", "ar") for s in SEEDS])
    l_rmse = np.array([benchmark_delta(s, "learn2agree", "focal_ce", "linear", "rmse") for s in SEEDS])
    a = int(np.sum(d_ar >= d_rmse))
    b = int(np.sum(l_rmse >= l_ar))
    dt = time.perf_counter() - t0
    ok = a >= 7 and b >= 7 and dt < 30 * 60
    record(7, ok, f"(a) distributional AR >= RMSE in {a}/10 (mean gap {np.mean(d_ar - d_rmse):+.4f}); "
                  f"(b) linear RMSE >= AR in {b}/10 (mean gap {np.mean(l_rmse - l_ar):+.4f}) [need >= 7/10 each]", dt)
    assert ok


# --- 8 -----------------------------------------------------------------------------


def test_8_train_is_deterministic(tmp_path):
    t0 = time.perf_counter()
    cfg = {"synth": {**BENCHMARK["synth"], "n_samples": 600}, "train": {"epochs": 5}, "seed": 3}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    for d in ("a", "b"):
        assert cli_main(["train", "--config", str(path), "--out", str(tmp_path / d), "--quiet"]) == 0
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("history.csv", "report.json")}
    dt = time.perf_counter() - t0
    ok = all(same.values())
    record(8, ok, f"train twice with identical config and seed: byte-identical {same}", dt)
    assert ok


# --- 9 -----------------------------------------------------------------------------


def test_9_effective_number_gamma():
    t0 = time.perf_counter()
    balanced = all(gamma_effective_number(n // 2, n) == 1.0 for n in (2, 10, 100, 1000, 4000))
    g = gamma_effective_number(90, 100)
    sweep = [gamma_effective_number(k, 100) for k in range(50, 100)]
    monotone = all(b > a for a, b in zip(sweep, sweep[1:]))
    dt = time.perf_counter() - t0
    ok = balanced and abs(g - 6.23) / 6.23 <= 0.01 and monotone
    record(9, ok, f"balanced gamma == 1: {balanced}; gamma(100, 90) = {g:.4f}; monotone sweep: {monotone}", dt)
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
