from __future__ import annotations

import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import central_difference, hermite_eval_loop, hermite_point
from tracksync.errors import InvalidInputError
from tracksync.spline import (
    SplineScaffold,
    SplineTrajectory,
    apply_basis,
    apply_basis_transpose,
    default_n_control,
    eval_spline,
    fit_many,
    fit_spline,
    hermite_basis,
    is_clamped,
    spline_time_derivative,
    uniform_knots,
)
from tracksync.tracks import TrackSet, build_scaffold_graph


def random_spline(seed, nc=5, span=(0.0, 12.0)):
    r = np.random.default_rng(seed)
    return SplineTrajectory(r.normal(size=(nc, 3)), r.normal(size=(nc, 3)), uniform_knots(*span, nc))


def test_default_n_control():
    assert default_n_control(3) == 3
    assert default_n_control(10) == 4
    assert default_n_control(21) == 5
    assert default_n_control(120) == 24


def test_knots_reproduce_control_positions():
    s = random_spline(0)
    for k, t in enumerate(s.knot_times):
        assert np.array_equal(eval_spline(s, t), s.control_positions[k])


def test_midpoint_with_zero_tangents():
    s = SplineTrajectory([[0, 0, 0], [2, 4, 6]], np.zeros((2, 3)), [0.0, 1.0])
    assert np.array_equal(eval_spline(s, 0.5), [1.0, 2.0, 3.0])


def test_matches_textbook_hermite():
    s = random_spline(1)
    for t in np.linspace(-1, 13, 57):
        expect = hermite_eval_loop(s.control_positions, s.control_tangents, s.knot_times, t)
        assert np.allclose(eval_spline(s, t), expect, atol=1e-12)


def test_linear_motion_reproduced_exactly():
    v = np.array([0.3, -1.2, 2.0])
    t = np.arange(15.0)
    pos = np.array([1.0, 2.0, 3.0]) + t[:, None] * v
    s = fit_spline(pos)
    assert np.allclose(s.control_tangents, v, atol=1e-10)
    assert np.allclose(s.evaluate(np.linspace(0, 14, 80)), np.array([1.0, 2.0, 3.0]) + np.linspace(0, 14, 80)[:, None] * v,
                       atol=1e-10)
    assert s.residual_rms < 1e-10


@pytest.mark.parametrize("n_frames, n_control", [(6, 6), (7, 5), (8, 8), (9, 6)])
def test_linear_motion_exact_when_underdetermined(n_frames, n_control):
    v = np.array([0.7, 0.1, -0.4])
    s = fit_spline(np.arange(float(n_frames))[:, None] * v, n_control)
    dense = np.linspace(0, n_frames - 1, 41)
    assert np.allclose(s.control_tangents, v, atol=1e-9)
    assert np.allclose(s.evaluate(dense), dense[:, None] * v, atol=1e-9)


def test_constant_track():
    s = fit_spline(np.tile([4.0, -1.0, 0.5], (10, 1)))
    assert np.allclose(s.control_positions, [4.0, -1.0, 0.5], atol=1e-12)
    assert np.allclose(s.control_tangents, 0.0, atol=1e-12)


def test_interpolating_fit_when_controls_equal_frames(caplog):
    r = np.random.default_rng(2)
    pos = r.normal(size=(6, 3)).cumsum(axis=0)
    with caplog.at_level(logging.WARNING):
        s = fit_spline(pos, n_control=6)
    assert "rank-deficient" in caplog.text
    assert s.residual_rms <= 1e-9


def test_cubic_motion_fits_tightly():
    t = np.arange(20.0)
    pos = np.stack([0.01 * t**3, -0.2 * t**2, t], axis=1)
    s = fit_spline(pos, n_control=5)
    assert s.residual_rms < 1e-9


def test_fit_many_matches_single_fits():
    r = np.random.default_rng(3)
    pos = r.normal(size=(4, 17, 3)).cumsum(axis=1)
    p, m, knots, rms = fit_many(pos)
    for k in range(4):
        one = fit_spline(pos[k])
        assert np.allclose(p[k], one.control_positions, atol=1e-10)
        assert np.allclose(m[k], one.control_tangents, atol=1e-10)
        assert rms[k] == pytest.approx(one.residual_rms, abs=1e-12)
        assert np.array_equal(knots, one.knot_times)


@given(st.integers(0, 10_000), st.floats(0.05, 11.95))
def test_derivative_matches_finite_difference(seed, t):
    s = random_spline(seed)
    h = 1e-6
    fd = (eval_spline(s, t + h) - eval_spline(s, t - h)) / (2 * h)
    assert np.allclose(spline_time_derivative(s, t), fd, atol=1e-6)


def test_tangents_are_derivatives_at_knots():
    s = random_spline(4)
    for k, t in enumerate(s.knot_times):
        assert np.allclose(spline_time_derivative(s, t), s.control_tangents[k], atol=1e-12)


def test_c1_continuity_at_interior_knots():
    s = random_spline(5, nc=7)
    for t in s.knot_times[1:-1]:
        for f in (eval_spline, spline_time_derivative):
            left = f(s, t - 1e-10)
            right = f(s, t + 1e-10)
            assert np.allclose(left, right, atol=1e-7)


def test_clamping_outside_span():
    s = random_spline(6)
    assert np.array_equal(eval_spline(s, -3.0), s.control_positions[0])
    assert np.array_equal(eval_spline(s, 20.0), s.control_positions[-1])
    assert is_clamped(s, [-0.1, 0.0, 6.0, 12.0, 12.1]).tolist() == [True, False, False, False, True]
    _, _, clamped = hermite_basis(s.knot_times, [-1.0, 1.0])
    assert clamped.tolist() == [True, False]


def test_shift_identity():
    s = random_spline(7)
    for t in np.linspace(0, 12, 9):
        assert np.allclose(s.shifted(2.5).evaluate(t + 2.5), s.evaluate(t), atol=1e-12)


def test_basis_partition_of_unity():
    w_pos, _, _ = hermite_basis(uniform_knots(0, 9, 4), np.linspace(0, 9, 31))
    assert np.allclose(w_pos.sum(axis=1), 1.0, atol=1e-14)


def test_apply_basis_adjoint():
    r = np.random.default_rng(8)
    w = r.normal(size=(11, 5))
    c = r.normal(size=(3, 5, 3))
    g = r.normal(size=(3, 11, 3))
    assert np.sum(apply_basis(w, c) * g) == pytest.approx(np.sum(c * apply_basis_transpose(w, g)), rel=1e-12)
    for n in range(3):
        assert np.allclose(apply_basis(w, c)[n], w @ c[n])


def test_gradient_wrt_controls_is_basis():
    s = random_spline(9)
    t = 3.3
    x0 = s.control_positions.ravel()

    def f(x):
        return eval_spline(SplineTrajectory(x.reshape(-1, 3), s.control_tangents, s.knot_times), t)[1]

    w_pos, _, _ = hermite_basis(s.knot_times, [t])
    fd = central_difference(f, x0).reshape(-1, 3)[:, 1]
    assert np.allclose(fd, w_pos[0], atol=1e-8)


def test_hermite_oracle_sanity():
    # oracle itself against a known cubic: p(u) = u^3 on [0, 1]
    for u in np.linspace(0, 1, 5):
        assert hermite_point(0.0, 0.0, 1.0, 3.0, 1.0, u) == pytest.approx(u**3)


def test_spline_validation():
    with pytest.raises(InvalidInputError):
        SplineTrajectory(np.zeros((2, 3)), np.zeros((2, 3)), [1.0, 1.0])
    with pytest.raises(InvalidInputError):
        SplineTrajectory(np.zeros((3, 3)), np.zeros((2, 3)), [0.0, 1.0])
    with pytest.raises(InvalidInputError):
        fit_spline(np.zeros((5, 3)), n_control=6)
    with pytest.raises(InvalidInputError):
        uniform_knots(0, 1, 1)


def test_scaffold_hex_round_trip_bit_exact(tmp_path):
    r = np.random.default_rng(10)
    pos = r.normal(size=(5, 12, 3)).cumsum(axis=1) / 3
    ts = TrackSet.from_arrays("cam", 30.0, [3, 1, 4, 15, 9], pos, np.ones((5, 1)))
    p, m, knots, _ = fit_many(pos)
    sc = SplineScaffold("cam", tuple(int(i) for i in ts.ids), p, m, knots + 0.1, build_scaffold_graph(ts, 2))
    sc.save(tmp_path / "s.json")
    back = SplineScaffold.load(tmp_path / "s.json")
    assert back.node_ids == sc.node_ids and back.graph == sc.graph
    for a, b in ((back.control_positions, sc.control_positions), (back.control_tangents, sc.control_tangents),
                 (back.knot_times, sc.knot_times)):
        assert a.tobytes() == b.tobytes()
    assert np.array_equal(back.evaluate([0.5, 7.25]), sc.evaluate([0.5, 7.25]))
    assert set(back.trajectories) == {3, 1, 4, 15, 9}
