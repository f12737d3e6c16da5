"""End-to-end acceptance criteria.

Each test prints one ``[PASS]`` or ``[FAIL]`` line with the measured numbers
before asserting, so ``pytest -v`` output doubles as the acceptance report.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from reactive_primitives import dmp, pipeline, pmnn, quat, rl, segmentation, testbed
from reactive_primitives.canonical import default_bank

pytestmark = pytest.mark.slow

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "default.json"


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}")


def _angle(Qa, Qb):
    return np.linalg.norm(quat.rotvec_between(Qa, Qb), axis=-1)


# ---------------------------------------------------------------------------
# one pipeline run shared by the criteria that need it
# ---------------------------------------------------------------------------


def _run_pipeline(out):
    cfg = pipeline.PipelineConfig.load(CONFIG, seed=0, out=str(out))
    timings = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name, phase in [
            ("make-corpus", pipeline.make_corpus),
            ("segment", pipeline.run_segment),
            ("learn-dmp", pipeline.run_learn_dmp),
            ("learn-fb", pipeline.run_learn_fb),
            ("rl", pipeline.run_rl),
            ("eval", pipeline.run_eval),
        ]:
            t0 = time.perf_counter()
            phase(cfg)
            timings[name] = time.perf_counter() - t0
    return cfg, timings


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    return _run_pipeline(tmp_path_factory.mktemp("run_a"))


def _eval_table(cfg):
    with open(cfg.reports / "eval.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {(int(r["primitive"]), float(r["roll_deg"])): r for r in rows}


# ---------------------------------------------------------------------------
# 1-4: primitives
# ---------------------------------------------------------------------------


def test_criterion_01_quaternion_algebra(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    d = rng.standard_normal((10000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    w = d * rng.uniform(1e-6, np.pi - 1e-3, size=(10000, 1))
    rt = float(np.max(np.abs(quat.quat_log(quat.quat_exp(w)) - w)))
    a, b, c = (quat.random_unit(rng, 10000) for _ in range(3))
    assoc = np.max(np.abs(quat.compose(quat.compose(a, b), c, check=False) - quat.compose(a, quat.compose(b, c), check=False)))
    inv = np.max(np.abs(quat.compose(a, quat.conjugate(a)) - quat.IDENTITY))
    ident = np.max(np.abs(quat.compose(quat.IDENTITY, a) - a))
    conj = np.max(np.abs(quat.conjugate(quat.compose(a, b), check=False) - quat.compose(quat.conjugate(b), quat.conjugate(a))))
    group = float(max(assoc, inv, ident, conj))
    elapsed = time.perf_counter() - t0
    ok = rt < 1e-9 and group < 1e-12 and elapsed < 1.0
    report(capsys, 1, ok, f"round trip {rt:.2e} (<1e-9), group {group:.2e} (<1e-12), {elapsed:.2f} s (<1 s)")
    assert ok


def test_criterion_02_goal_convergence(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    bank = default_bank()
    worst = 0.0
    for _ in range(100):
        Q0, QG = quat.random_unit(rng), quat.random_unit(rng)
        # forcing weights bounded to 50 per entry
        theta = rng.uniform(-50.0, 50.0, (bank.n, 3))
        tau = rng.uniform(0.5, 2.0)
        params = dmp.DmpParams(theta, tau, Q0, QG, bank)
        roll = dmp.simulate(params, tau / 300, 601)
        worst = max(worst, float(_angle(QG, roll.Q[-1])))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.01 and elapsed < 10.0
    report(capsys, 2, ok, f"max error at 2 tau {worst:.2e} rad (<0.01), {elapsed:.1f} s (<10 s)")
    assert ok


def _axis_nmse(ref, y):
    return np.mean((ref - y) ** 2, axis=0) / np.var(ref, axis=0)


def test_criterion_03_fit_round_trip(capsys):
    bank = default_bank()
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        start = quat.random_unit(r)
        goal = quat.compose(quat.quat_exp(0.3 * r.standard_normal(3)), start)
        gen = dmp.DmpParams(20.0 * r.standard_normal((bank.n, 3)), 1.0, start, goal, bank)
        demo = dmp.simulate(gen)
        again = dmp.simulate(dmp.fit_forcing_term([demo], bank))
        ref = quat.rotvec_between(demo.Q, goal)
        y = quat.rotvec_between(again.Q, goal)
        worst = max(worst, float(_axis_nmse(ref, y).max()))
    ok = worst < 0.05
    report(capsys, 3, ok, f"worst per-axis re-unroll NMSE {worst:.2e} over 10 generators (<0.05)")
    assert ok


def test_criterion_04_coupling_extraction(capsys):
    r = np.random.default_rng(4)
    bank = default_bank()
    start = quat.random_unit(r)
    goal = quat.compose(quat.quat_exp(0.3 * r.standard_normal(3)), start)
    nominal = dmp.DmpParams(20.0 * r.standard_normal((bank.n, 3)), 1.0, start, goal, bank)
    errs = []
    for factor in (1.0, 2.0):
        dt, n = dmp.horizon_steps(factor * nominal.tau)
        phase = np.linspace(0, 1, n)
        c_star = np.column_stack([30 * np.sin(2 * np.pi * phase), -15 * phase, 10 * np.cos(np.pi * phase)])
        driven = dmp.DmpParams(nominal.weights, factor * nominal.tau, start, goal, bank)
        demo = dmp.simulate(driven, dt, n, coupling=c_star)
        c = dmp.extract_target_coupling(demo, nominal)
        errs.append(float(np.max(np.abs(c - c_star)) / np.abs(c_star).max()))
    ok = max(errs) < 1e-6
    report(capsys, 4, ok, f"relative extraction error at tau {errs[0]:.1e}, at 2 tau {errs[1]:.1e} (<1e-6)")
    assert ok


# ---------------------------------------------------------------------------
# 5-6: segmentation
# ---------------------------------------------------------------------------


def _mapping_error(case, rep, eps=50):
    i0 = case.ref_span[0] - eps
    return rep.a - case.a, (rep.a * i0 + rep.delay) - (case.a * i0 + case.b)


def test_criterion_05_segmentation_recovery(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    good = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(100):
            a, b = rng.uniform(0.7, 1.5), rng.uniform(-30, 30)
            case = testbed.alignment_case(a, b, rng, noise=0.01)
            ea, eb = _mapping_error(case, segmentation.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50))
            good += abs(ea) <= 0.05 and abs(eb) <= 3
        dw, du = [], []
        for _ in range(50):
            a, b = rng.uniform(0.7, 1.5), rng.uniform(-30, 30)
            case = testbed.alignment_case(a, b, rng, noise=0.01, trailing_plateau=100)
            dw.append(abs(segmentation.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50).a - a))
            du.append(abs(segmentation.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50, weighted=False).a - a))
    elapsed = time.perf_counter() - t0
    ok = good >= 95 and np.mean(dw) < np.mean(du) and elapsed < 60
    report(
        capsys,
        5,
        ok,
        f"{good}/100 within a+-0.05, b+-3 (>=95); plateau mean |da| WLS {np.mean(dw):.4f} < LS {np.mean(du):.4f}; {elapsed:.0f} s (<60 s)",
    )
    assert ok


def test_criterion_06_downsampling(capsys):
    rng = np.random.default_rng(0)
    good, full_cells, fast_cells = 0, 0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(100):
            a, b = rng.uniform(0.7, 1.5), rng.uniform(-30, 30)
            case = testbed.alignment_case(a, b, rng, noise=0.01)
            full = segmentation.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50)
            fast = segmentation.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50, g=4)
            # first pass: both runs align the same window
            full_cells += full.cells_per_pass[0]
            fast_cells += fast.cells_per_pass[0]
            ea, eb = _mapping_error(case, fast)
            good += abs(ea) <= 0.05 and abs(eb) <= 4
    ratio = full_cells / fast_cells
    ok = ratio >= 15 and good >= 95
    report(capsys, 6, ok, f"DTW cell reduction {ratio:.1f}x (>=15); {good}/100 within a+-0.05, b+-4 (>=95)")
    assert ok


# ---------------------------------------------------------------------------
# 7-10: learning components
# ---------------------------------------------------------------------------


def test_criterion_07_pmnn_zero_at_rest(capsys):
    rng = np.random.default_rng(7)
    bank = default_bank()
    nonzero = 0
    for _ in range(1000):
        S = int(rng.integers(1, 40))
        hidden = tuple(int(h) for h in rng.integers(1, 30, size=rng.integers(1, 3)))
        p = pmnn.init_params(S, 1, hidden, bank, rng)
        p = pmnn.params_like(p, [10 * rng.standard_normal(x.shape) for x in pmnn.flat_arrays(p)])
        c = pmnn.pmnn_forward(p, 100 * rng.standard_normal(S), rng.uniform(-1, 2), 0.0)
        nonzero += int(np.any(c != 0.0))
    ok = nonzero == 0
    report(capsys, 7, ok, f"{nonzero}/1000 draws with nonzero output at u = 0 (exactly 0)")
    assert ok


def test_criterion_08_pmnn_gradient(capsys):
    from .test_pmnn import _fd_check, _random_data, _random_params

    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        hidden = [(3,), (4,), (2, 3)][seed % 3]
        params = _random_params(r, S=3, D=1 + seed % 2, hidden=hidden)
        data = _random_data(r, 8, S=3, D=1 + seed % 2, weights=seed % 4 == 0)
        worst = max(worst, _fd_check(params, data))
    ok = worst < 1e-4
    report(capsys, 8, ok, f"max relative gradient error {worst:.2e} over 20 networks (<1e-4)")
    assert ok


def test_criterion_09_pmnn_teacher_student_and_loodo(capsys, pipeline_run):
    from .test_pmnn import _random_params, _teacher_data

    r = np.random.default_rng(9)
    teacher = _random_params(r, S=6, hidden=(8,), bank=default_bank(), scale=0.5)
    data = _teacher_data(teacher, r, 8000, 6)
    res = pmnn.pmnn_train(data, pmnn.TrainConfig(hidden=(32,), epochs=40, dropout=0.0, learning_rate=3e-3, seed=1))

    cfg, _ = pipeline_run
    z = np.load(cfg.models / "cdemo_p2.npz")
    cdemo = pmnn.FeedbackDataset(z["ds"], z["phase"], z["target"], z["groups"])
    tcfg = pmnn.TrainConfig.from_dict({**cfg.pmnn, "seed": 0})
    folds = pmnn.leave_one_demo_out(cdemo, tcfg, demos=[0, 1, 2])
    cols = np.array([[f.train, f.val, f.test, f.generalization] for f in folds])
    ok = res.val_nmse < 0.1 and cols.shape == (3, 4) and np.all(np.isfinite(cols))
    means = ", ".join(f"{n} {v:.4f}" for n, v in zip(("train", "val", "test", "generalization"), cols.mean(axis=0)))
    report(capsys, 9, ok, f"teacher-student val NMSE {res.val_nmse:.4f} (<0.1); LOODO on 3 held-out demos: {means}")
    assert ok


def test_criterion_10_pi2_cma(capsys):
    rng = np.random.default_rng(10)
    X = rng.standard_normal((12, 5))
    uni = rl.pi2_cma_update(X, np.full((12, 8), 2.0), X.mean(axis=0))
    e_uni = float(np.max(np.abs(uni.theta - X.mean(axis=0))))
    costs = rng.uniform(1, 2, (12, 8))
    best = int(np.argmin(costs.sum(axis=1)))
    costs[best] *= 0.1
    cold = rl.pi2_cma_update(X, costs, X.mean(axis=0), lam=1e-8)
    # per step the lowest cost-to-go wins; this sample has the lowest at every step
    S = rl.cost_to_go(costs)
    assert np.all(np.argmin(S, axis=0) == best)
    e_cold = float(np.max(np.abs(cold.theta - X[best])))
    hand = rl.pi2_cma_update(np.array([[1.0], [3.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.5]), lam=0.5)
    e_hand = max(abs(hand.theta[0] - 2.0), abs(hand.Sigma[0, 0] - 1.25))
    ok = e_uni < 1e-12 and e_cold < 1e-12 and e_hand < 1e-12
    report(capsys, 10, ok, f"uniform {e_uni:.1e}, lambda->0 {e_cold:.1e}, 2x2 hand case {e_hand:.1e} (all <1e-12)")
    assert ok


# ---------------------------------------------------------------------------
# 11-13: pipeline
# ---------------------------------------------------------------------------


def test_criterion_11_rl_improvement(capsys, pipeline_run):
    cfg, timings = pipeline_run
    table = _eval_table(cfg)
    summary = json.loads((cfg.reports / "rl_summary.json").read_text())
    parts, ok = [], timings["rl"] < 300
    for p in cfg.fb_primitives:
        row = table[(p, 10.0)]
        before, after = float(row["fb-before-RL_mean"]), float(row["fb-after-RL_mean"])
        red = 1 - after / before
        budget = summary[f"primitive{p}"]["rollouts_per_iter"]
        ok &= red >= 0.5 and budget == [40, 40]
        parts.append(f"P{p} {before:.4f} -> {after:.4f} ({red:.0%} reduction, >=50%), rollouts/iter {budget}")
    report(capsys, 11, ok, "; ".join(parts) + f"; RL phase {timings['rl']:.0f} s (<300 s)")
    assert ok


def test_criterion_12_no_forgetting(capsys, pipeline_run):
    cfg, _ = pipeline_run
    table = _eval_table(cfg)
    parts, ok = [], True
    for p in cfg.fb_primitives:
        ratios = []
        for d in testbed.SEEN:
            row = table[(p, d)]
            ratios.append(float(row["fb-after-RL_mean"]) / float(row["fb-before-RL_mean"]))
        a = {d: float(table[(p, d)]["fb-after-RL_mean"]) for d in (7.5, 8.8, 10.0)}
        lo, hi = sorted((a[7.5], a[10.0]))
        interp = lo <= a[8.8] <= hi
        ok &= max(ratios) <= 1.10 and interp
        parts.append(
            f"P{p} seen after/before {', '.join(f'{x:.3f}' for x in ratios)} (<=1.10), "
            f"8.8 deg {a[8.8]:.4f} in [{lo:.4f}, {hi:.4f}]"
        )
    report(capsys, 12, ok, "; ".join(parts))
    assert ok


def test_criterion_13_determinism(capsys, pipeline_run, tmp_path_factory):
    cfg_a, timings_a = pipeline_run
    cfg_b, timings_b = _run_pipeline(tmp_path_factory.mktemp("run_b"))
    files = sorted(p.relative_to(cfg_a.reports) for p in cfg_a.reports.rglob("*") if p.is_file())
    differ = [str(f) for f in files if (cfg_a.reports / f).read_bytes() != (cfg_b.reports / f).read_bytes()]
    total = max(sum(timings_a.values()), sum(timings_b.values()))
    ok = not differ and total < 600 and len(files) > 0
    report(capsys, 13, ok, f"{len(files) - len(differ)}/{len(files)} report files identical; slowest full run {total:.0f} s (<600 s)")
    assert ok
