from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reactive_primitives import segmentation as sg
from reactive_primitives import testbed

RATE = 300.0


def _pulse_demo(*supports, n=800, peak=1.0):
    i = np.arange(n)
    v = np.zeros(n)
    for lo, hi in supports:
        x = np.clip((i - lo) / (hi - lo), 0.0, 1.0)
        v += peak * np.sin(np.pi * x) ** 2
    z = np.cumsum(v) / RATE
    return sg.Demo1D(z, v, RATE, "pulse")


def _mapping_error(case, rep, eps=50):
    """Errors in a and in the delay measured at the start of the reference window."""
    i0 = case.ref_span[0] - eps
    return rep.a - case.a, (rep.a * i0 + rep.delay) - (case.a * i0 + case.b)


# ---------------------------------------------------------------------------
# zero-velocity crossing
# ---------------------------------------------------------------------------


def test_zvc_bell_pulse():
    demo = _pulse_demo((100, 400))
    s, e = sg.zvc_segment(demo, h=0.05)
    dwell = int(sg.DWELL_SECONDS * RATE)
    assert abs(s - 100) <= dwell and abs(e - 400) <= dwell
    # the crossing itself is where sin^2 reaches h
    x = np.arcsin(np.sqrt(0.05)) / np.pi * 300
    assert abs(s - (100 + x)) <= 1 and abs(e - (400 - x)) <= 1


def test_zvc_no_motion():
    demo = sg.Demo1D(np.zeros(300), np.zeros(300), RATE, "still")
    with pytest.raises(sg.SegmentationError, match="still"):
        sg.zvc_segment(demo, h=0.1)


def test_zvc_first_of_two_pulses():
    s, e = sg.zvc_segment(_pulse_demo((100, 300), (450, 700)), h=0.05)
    assert 100 <= s < 150 and 250 < e <= 300


def test_zvc_search_start_and_spike():
    demo = _pulse_demo((100, 300), (450, 700))
    s, _ = sg.zvc_segment(demo, h=0.05, start=320)
    assert 450 <= s < 500
    v = np.zeros(600)
    v[50:53] = 1.0  # three-sample spike
    v[200:400] = 1.0
    s, e = sg.zvc_segment(sg.Demo1D(np.cumsum(v), v, RATE), h=0.5)
    assert (s, e) == (200, 400)


def test_zvc_rejects_bad_threshold():
    with pytest.raises(ValueError):
        sg.zvc_segment(_pulse_demo((100, 400)), h=0.0)


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------


def _bump(n=200, shift=0):
    i = np.arange(n) - shift
    return testbed.alignment_signal(i, 40, 100, 1.0, 0.2)


def test_dtw_identity():
    z = _bump()
    ref = sg.Demo1D(z, np.gradient(z), RATE)
    pairs = sg.dtw_correspondences(ref, ref).pairs
    np.testing.assert_array_equal(pairs, np.column_stack([np.arange(200)] * 2))


def test_dtw_detects_delay():
    z = _bump()
    g = _bump(shift=10)
    res = sg.dtw_correspondences(sg.Demo1D(z, np.gradient(z), RATE), sg.Demo1D(g, np.gradient(g), RATE), return_result=True)
    pairs = res.pairs.pairs
    active = (pairs[:, 0] > 50) & (pairs[:, 0] < 130)
    assert np.all(pairs[active, 1] - pairs[active, 0] == 10)


def test_dtw_amplitude_invariance():
    z = _bump()
    a = sg.Demo1D(z, np.gradient(z), RATE)
    b = sg.Demo1D(2.0 * z, np.gradient(2.0 * z), RATE)
    np.testing.assert_array_equal(sg.dtw_correspondences(a, b).pairs, sg.dtw_correspondences(a, a).pairs)


def test_dtw_matches_naive_recursion(rng):
    x, y = rng.standard_normal(9), rng.standard_normal(7)
    D = np.full((10, 8), np.inf)
    D[0, 0] = 0.0
    for i in range(1, 10):
        for j in range(1, 8):
            D[i, j] = (x[i - 1] - y[j - 1]) ** 2 + min(D[i - 1, j - 1], D[i - 1, j], D[i, j - 1])
    path, cost, cells = sg.dtw(x, y)
    assert cost == pytest.approx(D[9, 7], rel=1e-12)
    assert cells == 63
    assert sum((x[i] - y[j]) ** 2 for i, j in path) == pytest.approx(cost, rel=1e-12)


def test_dtw_constant_segment_rejected():
    flat = sg.Demo1D(np.ones(50), np.zeros(50), RATE)
    with pytest.raises(sg.SegmentationError):
        sg.dtw_correspondences(flat, flat)


@given(arrays(np.float64, st.integers(2, 25), elements=st.floats(-5, 5)), arrays(np.float64, st.integers(2, 25), elements=st.floats(-5, 5)))
def test_dtw_path_is_monotone_and_complete(x, y):
    path, _, cells = sg.dtw(x, y)
    assert tuple(path[0]) == (0, 0) and tuple(path[-1]) == (len(x) - 1, len(y) - 1)
    steps = np.diff(path, axis=0)
    assert np.all((steps >= 0) & (steps <= 1)) and np.all(steps.sum(axis=1) >= 1)
    assert cells == len(x) * len(y)
    pairs = sg.path_to_pairs(path, len(x), len(y))
    assert len(pairs) == min(len(x), len(y))


# ---------------------------------------------------------------------------
# least squares
# ---------------------------------------------------------------------------


def test_construct_ls_definition():
    A, b = sg.construct_ls(sg.CorrespondenceSet([(1, 3), (2, 5)]))
    np.testing.assert_array_equal(A, [[1, 1], [2, 1]])
    np.testing.assert_array_equal(b, [3, 5])
    with pytest.raises(sg.SegmentationError):
        sg.construct_ls(sg.CorrespondenceSet([(1, 3)]))


def test_identity_pairs_solve_to_identity():
    k = np.arange(30)
    A, b = sg.construct_ls(sg.CorrespondenceSet(np.column_stack([k, k])))
    x = sg.solve_wls(A, b, np.ones(30))
    assert (x.a, x.b) == pytest.approx((1.0, 0.0), abs=1e-12)


def test_weights_examples():
    pairs = sg.CorrespondenceSet([(0, 0), (1, 1), (2, 2)])
    v_ref = np.array([1.0, 0.0, 2.0])
    v_guess = np.array([1.0, 0.0, 1.0])
    ref = sg.Demo1D(np.zeros(3), v_ref, RATE)
    guess = sg.Demo1D(np.zeros(3), v_guess, RATE)
    w = sg.compute_ls_weights(pairs, ref, guess, sigma_v=1.0, v_near_zero=0.1)
    assert w[0] == 1.0
    assert w[1] == 0.0
    assert w[2] == pytest.approx(np.exp(-1.0), abs=1e-15)


def test_default_weight_parameters():
    v = np.array([0.05, 0.5, 1.0, 0.9])
    d = sg.Demo1D(np.zeros(4), v, RATE)
    pairs = sg.CorrespondenceSet(np.column_stack([np.arange(4)] * 2))
    w = sg.compute_ls_weights(pairs, d, d)
    # identical velocities weigh 1 unless below the near-zero cutoff
    np.testing.assert_array_equal(w, [0.0, 1.0, 1.0, 1.0])


def test_wls_exact_recovery():
    i = np.arange(100, 400)
    A, b = sg.construct_ls(sg.CorrespondenceSet(np.column_stack([i, i])))
    x = sg.solve_wls(A, 1.5 * A[:, 0] + 20.0, np.ones(len(i)))
    assert abs(x.a - 1.5) < 1e-9 and abs(x.b - 20.0) < 1e-9


def test_wls_ignores_zero_weight_rows(rng):
    i = np.arange(200, dtype=float)
    A = np.column_stack([i, np.ones(200)])
    b = 0.8 * i - 12.0
    w = np.ones(200)
    bad = rng.choice(200, 60, replace=False)
    b[bad] += rng.normal(0, 50, 60)
    w[bad] = 0.0
    x = sg.solve_wls(A, b, w)
    assert abs(x.a - 0.8) < 1e-9 and abs(x.b + 12.0) < 1e-7
    # a full diagonal matrix is accepted too
    y = sg.solve_wls(A, b, np.diag(w))
    assert (y.a, y.b) == pytest.approx((x.a, x.b), rel=1e-12)


def test_wls_rank_deficient_falls_back():
    i = np.arange(10, dtype=float)
    A = np.column_stack([i, np.ones(10)])
    w = np.zeros(10)
    w[3] = 1.0
    with pytest.warns(sg.AlignmentWarning):
        x = sg.solve_wls(A, 2 * i + 1, w)
    assert (x.a, x.b) == pytest.approx((2.0, 1.0))


@given(st.floats(0.5, 2.0), st.floats(-30, 30), st.floats(0.1, 10.0))
def test_wls_invariant_to_weight_scale(a, b, s):
    i = np.arange(50, dtype=float)
    A = np.column_stack([i, np.ones(50)])
    rhs = a * i + b + np.sin(i)
    w = 1.0 + np.cos(i) ** 2
    x1, x2 = sg.solve_wls(A, rhs, w), sg.solve_wls(A, rhs, s * w)
    assert x1.a == pytest.approx(x2.a, rel=1e-9) and x1.b == pytest.approx(x2.b, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# refinement
# ---------------------------------------------------------------------------


def test_refine_identity_and_delay():
    assert sg.refine_indices(120, (100, 400), 50, sg.AlignmentParams(1.0, 0.0)) == (120, 420)
    assert sg.refine_indices(120, (100, 400), 50, sg.AlignmentParams(1.0, 7.0)) == (127, 427)


def test_refine_time_scale():
    i_s, i_e = sg.refine_indices(200, (100, 400), 50, sg.AlignmentParams(2.0, 0.0))
    assert i_s == 250 and i_e == i_s + 600


def test_refine_clamps_and_rejects_degenerate():
    assert sg.refine_indices(10, (0, 300), 50, sg.AlignmentParams(1.0, -40.0), length=200) == (0, 199)
    with pytest.raises(sg.SegmentationError):
        sg.refine_indices(500, (0, 300), 50, sg.AlignmentParams(1.0, 0.0), length=200)


@given(st.integers(0, 500), st.integers(-40, 40), st.floats(0.6, 1.6))
def test_refine_shift_equivariant(s, shift, a):
    align = sg.AlignmentParams(a, 3.0)
    i_s, i_e = sg.refine_indices(s, (100, 350), 50, align)
    j_s, j_e = sg.refine_indices(s + shift, (100, 350), 50, align)
    assert (j_s - i_s, j_e - i_e) == (shift, shift)


# ---------------------------------------------------------------------------
# alignment of whole demos
# ---------------------------------------------------------------------------


def test_identical_demos_keep_reference_spans():
    rng = np.random.default_rng(0)
    case = testbed.alignment_case(1.0, 0.0, rng, noise=0.0)
    demos = [{"z": case.ref}, {"z": case.ref}]
    res = sg.segment_demos(demos, [case.ref_span], ["z"], 0.1, 50)
    assert res.segments[0] == [case.ref_span, case.ref_span]
    assert res.reports[0].a == pytest.approx(1.0, abs=1e-9)


def test_scaled_delayed_copy_recovered():
    rng = np.random.default_rng(11)
    case = testbed.alignment_case(1.3, 15.0, rng, noise=0.01)
    rep = sg.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50)
    ea, eb = _mapping_error(case, rep)
    assert abs(ea) <= 0.05 and abs(eb) <= 3


def test_downsampled_alignment():
    rng = np.random.default_rng(11)
    case = testbed.alignment_case(1.3, 15.0, rng, noise=0.01)
    full = sg.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50, g=1)
    fast = sg.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50, g=4)
    ea, eb = _mapping_error(case, fast)
    assert abs(ea) <= 0.05 and abs(eb) <= 4
    # both first passes align the same ZVC window
    assert full.cells_per_pass[0] / fast.cells_per_pass[0] >= 15


def test_first_segment_without_motion_fails_per_demo():
    rng = np.random.default_rng(2)
    case = testbed.alignment_case(1.0, 0.0, rng)
    still = sg.Demo1D(np.zeros(700), np.zeros(700), RATE, "still")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = sg.segment_demos([{"z": case.ref}, {"z": still}, {"z": case.guess}], [case.ref_span], ["z"], 0.1, 50)
    assert len(res.failures) == 1 and "still" in res.failures[0].error
    assert res.segments[0][1] is None and res.segments[0][2] is not None


def test_gap_primitive_between_neighbours():
    rec = testbed.make_demo_corpus(L=3, seed=4)
    demos = [{"z": r.axis("z"), "y": r.axis("y")} for r in rec]
    z_span = sg.zvc_segment(demos[0]["z"], 0.1)
    y_span = sg.zvc_segment(demos[0]["y"], 0.1, start=z_span[1] + 1)
    res = sg.segment_demos(demos, [z_span, (0, 0), y_span], ["z", None, "y"], 0.1, 50, gap_primitives=(1,))
    assert not res.failures
    def relative(p, l):
        lo, hi = rec[l].spans[p]
        s, e = res.segments[p][l]
        return (s - lo) / (hi - lo), (e - lo) / (hi - lo)

    for l in range(3):
        assert res.segments[1][l] == (res.segments[0][l][1], res.segments[2][l][0])
        # every demo is cut at the same point of its motion as the reference
        for p in (0, 2):
            np.testing.assert_allclose(relative(p, l), relative(p, 0), atol=0.02)


def test_weighting_beats_plain_ls_with_plateau():
    rng = np.random.default_rng(7)
    dw, du = [], []
    for _ in range(8):
        a, b = rng.uniform(0.7, 1.5), rng.uniform(-30, 30)
        case = testbed.alignment_case(a, b, rng, trailing_plateau=100)
        dw.append(abs(sg.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50).a - a))
        du.append(abs(sg.align_segment(case.ref, case.ref_span, case.guess, 0.1, 50, weighted=False).a - a))
    assert np.mean(dw) < np.mean(du)


def test_standardize_modes():
    z = np.r_[np.zeros(20), np.linspace(0, 3, 50), 3 * np.ones(20)]
    np.testing.assert_allclose(sg.standardize(z)[[0, -1]], [0.0, 1.0])
    zs = sg.standardize(z, "zscore")
    assert abs(zs.mean()) < 1e-12 and abs(zs.std() - 1) < 1e-12
    with pytest.raises(ValueError):
        sg.standardize(z, "minmax")
