"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import filecmp
import math
import time

import numpy as np
import pytest

from amproto.capacity import PROTECTED_FLOOR, prox_step
from amproto.cli import run
from amproto.collapse import collapse_demo
from amproto.data import SyntheticSpec
from amproto.explain import build_cache, explain, nearest_patch, occlusion_drop
from amproto.experiments import (collapse_config, collapse_spec, rank_spec, run_ablations,
                                 run_sweep, toy_config, train_test)
from amproto.gradcheck import TOLERANCE, run_gradcheck
from amproto.head import projection_energy, regularizers_for
from amproto.stiefel import random_stiefel
from amproto.trainer import evaluate, fit

pytestmark = pytest.mark.slow
SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="module")
def default_run():
    train, test = train_test(SyntheticSpec(seed=0))
    t0 = time.perf_counter()
    state, reports = fit(train, toy_config(0))
    return state, reports, train, test, time.perf_counter() - t0


def test_manifold_feasibility(default_run, verdict):
    state, reports, _, _, secs = default_run
    res = state.residual()
    ok = res <= 1e-8 and all(r.residual <= 1e-8 for r in reports) and secs <= 300
    verdict("manifold feasibility", ok,
            f"residual {res:.2e} after {len(reports)} epochs, C={state.num_classes} "
            f"K={state.bases.shape[2]}, {secs:.1f}s")


def test_gradient_oracle(verdict):
    t0 = time.perf_counter()
    worst, tables = run_gradcheck(seed=0, n_states=20)
    secs = time.perf_counter() - t0
    terms = sorted(tables[0])
    groups = sorted(tables[0][terms[0]])
    verdict("gradient oracle", worst <= TOLERANCE and secs <= 60,
            f"max rel error {worst:.2e} over {len(tables)} states, terms {terms}, "
            f"groups {groups}, {secs:.1f}s")


def _scalar_prox(s, g, lr, lam):
    v = s - lr * g - lr * lam
    return v if v > 0.0 else 0.0


def test_proximal_exactness(verdict):
    rng = np.random.default_rng(0)
    n = 10 ** 6
    sigma = rng.uniform(0, 2, n)
    sigma[rng.random(n) < 0.05] = 0.0
    grad = rng.standard_normal(n)
    lr = 10.0 ** rng.uniform(-4, 0, n)
    lam = np.where(rng.random(n) < 0.1, 0.0, 10.0 ** rng.uniform(-5, 1, n))
    # one case per call so every row has its own lr and lambda
    rows = np.stack([sigma, grad]).T.reshape(-1, 1, 2)
    mismatches = crossed = crossed_nonzero = 0
    for i in range(n):
        got = prox_step(rows[i, :, 0], rows[i, :, 1], lr[i], lam[i], protect=False)[0]
        want = _scalar_prox(sigma[i], grad[i], lr[i], lam[i])
        if got != want or math.copysign(1.0, got) != math.copysign(1.0, want):
            mismatches += 1
        if sigma[i] - lr[i] * grad[i] - lr[i] * lam[i] <= 0:
            crossed += 1
            crossed_nonzero += got.tobytes() != np.float64(0.0).tobytes()
    # the protected entry is the only exception to the threshold
    prot = prox_step(np.array([[0.5, 1.0, 0.2]]), np.full((1, 3), 10.0), 1.0, 1.0)
    ok = mismatches == 0 and crossed_nonzero == 0 and prot.tolist() == [[0, PROTECTED_FLOOR, 0]]
    verdict("proximal exactness", ok,
            f"{n} cases, {mismatches} mismatches, {crossed} thresholded "
            f"({crossed_nonzero} not bit-exact 0)")


def test_collapse_contrast(verdict):
    t0 = time.perf_counter()
    passed, lines = 0, []
    for seed in SEEDS:
        cfg = collapse_config(seed)
        f = collapse_demo(collapse_spec(seed), cfg).final
        ok = (f["baseline_max_srank"] <= 1.5 and f["baseline_min_cos"] >= 0.95
              and f["amp_residual"] <= 1e-8 and abs(f["amp_min_srank"] - cfg.K) <= 1e-8)
        passed += ok
        lines.append(f"seed {seed}: srank<={f['baseline_max_srank']:.3f} "
                     f"cos>={f['baseline_min_cos']:.3f} amp srank {f['amp_min_srank']:.6f}")
    secs = time.perf_counter() - t0
    verdict("collapse contrast", passed >= 4 and secs <= 600,
            f"{passed}/5 seeds, {secs:.0f}s; " + "; ".join(lines))


def test_rank_recovery(verdict):
    ranks = []
    for seed in SEEDS:
        train, _ = train_test(rank_spec(seed))
        state, _ = fit(train, toy_config(seed))
        ranks.append(float((state.capacities > 0).sum(axis=1).mean()))
    hits = sum(3 <= r <= 4 for r in ranks)
    sweep = run_sweep("lambda", [1e-5, 1e-3, 1e-1], rank_spec(0), toy_config(0))
    sweep_ranks = [r["mean_rank"] for r in sweep]
    monotone = all(a >= b for a, b in zip(sweep_ranks, sweep_ranks[1:]))
    verdict("rank recovery", hits >= 4 and monotone,
            f"mean ranks {[round(r, 2) for r in ranks]} ({hits}/5 in [3, 4]); "
            f"lambda sweep 1e-5,1e-3,1e-1 -> {sweep_ranks}")


def test_toy_classification_and_ablations(default_run, verdict):
    state, _, _, test, _ = default_run
    acc = evaluate(state, test)[0]
    rows = {r["variant"]: r for r in run_ablations(SyntheticSpec(seed=0), toy_config(0))}
    full = rows["full"]
    sem_up = rows["gamma1=0"]["sem"] > full["sem"]
    ov_up = rows["gamma2=0"]["overlap"] > full["overlap"]
    table = ", ".join(f"{k} acc {v['accuracy']:.3f} sem {v['sem']:.3f} ov {v['overlap']:.3f}"
                      for k, v in rows.items())
    verdict("toy classification and ablations", acc >= 0.95 and len(rows) == 5 and sem_up and ov_up,
            f"test accuracy {acc:.3f}; {table}")


def test_regularizer_bounds(verdict):
    rng = np.random.default_rng(0)
    worst_sem = worst_ov = 0.0
    violations = low_rank = low_rank_nonzero = 0
    for i in range(1000):
        D = int(rng.integers(2, 9))
        K = int(rng.integers(1, D + 1))
        H, W = rng.integers(1, 6, 2)
        F = rng.standard_normal((D, H, W)) * 10.0 ** rng.uniform(-2, 2)
        bases = random_stiefel(D, K, i)[None]
        caps = rng.uniform(0, 1, (1, K)) * (rng.random((1, K)) < 0.6)
        sem, ov = regularizers_for(F, bases, caps, 0)
        worst_sem = max(worst_sem, sem / math.log(H * W) if H * W > 1 else sem)
        worst_ov = max(worst_ov, ov)
        violations += not (0 <= sem <= math.log(H * W) + 1e-12 and 0 <= ov <= 1 + 1e-12)
        if (caps > 0).sum() < 2:
            low_rank += 1
            low_rank_nonzero += ov != 0.0
    ok = violations == 0 and low_rank > 0 and low_rank_nonzero == 0
    verdict("regularizer bounds", ok,
            f"1000 states, {violations} violations, max sem/ln(HW) {worst_sem:.3f}, "
            f"max overlap {worst_ov:.3f}, {low_rank} states with R<2 all overlap 0")


def test_gauge_invariance(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        D, K = 16, int(rng.integers(1, 11))
        U = random_stiefel(D, K, i)
        Q = np.linalg.qr(rng.standard_normal((K, K)))[0]
        F = rng.standard_normal((D, 5, 5))
        ones = np.ones(K)
        for f in F.reshape(D, -1).T:
            worst = max(worst, abs(projection_energy(f, U, ones) - projection_energy(f, U @ Q, ones)))
    verdict("gauge invariance", worst <= 1e-10, f"max energy change {worst:.2e} over 100 Q")


def test_explanation_faithfulness(default_run, verdict):
    state, _, train, test, _ = default_run
    cache = build_cache(state, train)
    worst_add = 0.0
    for x in test.raw:
        ex = explain(x, state, cache)
        worst_add = max(worst_add, abs(ex.total_evidence - ex.logits[ex.predicted_class]))

    rng = np.random.default_rng(0)
    feats = [(n, train.raw[n]) for n in range(len(train))]
    rescan_fail = 0
    for _ in range(100):
        c = int(rng.integers(state.num_classes))
        k = int(rng.choice(np.flatnonzero(state.capacities[c] > 0)))
        u = state.bases[c][:, k]
        best = None
        for n, raw in feats:
            if train.labels[n] != c:
                continue
            F = np.einsum("de,ehw->dhw", state.backbone.weight, raw) \
                + state.backbone.bias[:, None, None]
            for h in range(F.shape[1]):
                for w in range(F.shape[2]):
                    e = float(u @ F[:, h, w]) ** 2
                    if best is None or e > best[0]:
                        best = (e, n, h, w)
        ref = nearest_patch(k, c, state, cache)
        rescan_fail += (ref.sample, ref.h, ref.w) != best[1:] or abs(ref.energy - best[0]) > 1e-9 * best[0]

    H, W = test.grid
    occl_pass = 0
    for i in rng.choice(len(test), 100, replace=False):
        x = test.raw[i]
        ex = explain(x, state, cache)
        top = max(ex.parts, key=lambda p: p.contribution)
        r = int(rng.integers(H * W))
        occl_pass += (occlusion_drop(x, state, ex.predicted_class, *top.peak)
                      >= occlusion_drop(x, state, ex.predicted_class, r // W, r % W))
    ok = worst_add <= 1e-9 and rescan_fail == 0 and occl_pass >= 80
    verdict("explanation faithfulness", ok,
            f"additivity max error {worst_add:.2e} on {len(test)} samples; "
            f"rescan mismatches {rescan_fail}/100; occlusion sanity {occl_pass}/100")


def test_reproducibility(tmp_path, verdict, capsys):
    common = ["--preset", "toy", "--seed", "7", "--samples-per-class", "10", "-q"]
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert run(["train", "--out", str(o), "--epochs", "5"] + common) == 0
        assert run(["explain", "--out", str(o), "--checkpoint", str(o / "model.ampc"),
                    "--index", "3"] + common) == 0
    capsys.readouterr()
    names = sorted(p.name for p in outs[0].iterdir() if p.name != "run-config.toml")
    match, mismatch, errors = filecmp.cmpfiles(outs[0], outs[1], names, shallow=False)
    kinds = sorted({n.rsplit(".", 1)[1] for n in names})
    verdict("reproducibility", not mismatch and not errors and len(match) == len(names),
            f"{len(match)}/{len(names)} files byte-identical ({', '.join(kinds)})")
