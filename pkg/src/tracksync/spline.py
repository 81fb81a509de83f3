"""Cubic Hermite trajectory splines on a uniform knot grid.

A spline with ``N_c`` knots stores a position and a tangent (scene units per
frame) at every knot. Evaluation is linear in those parameters, so fitting is
a linear least-squares problem and gradients with respect to the control
parameters are just the basis weights.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .jsonio import read_json, write_json
from .tracks import ScaffoldGraph, Track

log = logging.getLogger(__name__)


def default_n_control(n_frames: int) -> int:
    return min(n_frames, max(4, math.ceil(n_frames / 5)))


def uniform_knots(t_start: float, t_end: float, n_control: int) -> np.ndarray:
    if n_control < 2:
        raise InvalidInputError(f"need at least 2 control points, got {n_control}")
    if not t_end > t_start:
        raise InvalidInputError(f"empty knot span [{t_start}, {t_end}]")
    return np.linspace(float(t_start), float(t_end), n_control)


def hermite_basis(knot_times: np.ndarray, t, derivative: bool = False):
    """Dense basis matrices for evaluating at times ``t``.

    Returns ``(w_pos, w_tan, clamped)`` where ``w_pos`` and ``w_tan`` have
    shape (len(t), N_c) and a spline evaluates as ``w_pos @ P + w_tan @ M``.
    With ``derivative=True`` the matrices give the time derivative instead.
    Times outside the knot span are clamped and reported in ``clamped``.
    """
    knots = np.asarray(knot_times, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    nc = knots.size
    clamped = (t < knots[0]) | (t > knots[-1])
    tc = np.clip(t, knots[0], knots[-1])
    seg = np.clip(np.searchsorted(knots, tc, side="right") - 1, 0, nc - 2)
    h = knots[seg + 1] - knots[seg]
    u = (tc - knots[seg]) / h
    if derivative:
        b00 = (6 * u * u - 6 * u) / h
        b10 = 3 * u * u - 4 * u + 1
        b01 = (-6 * u * u + 6 * u) / h
        b11 = 3 * u * u - 2 * u
    else:
        u2 = u * u
        u3 = u2 * u
        b00 = 2 * u3 - 3 * u2 + 1
        b10 = (u3 - 2 * u2 + u) * h
        b01 = -2 * u3 + 3 * u2
        b11 = (u3 - u2) * h
    rows = np.arange(t.size)
    w_pos = np.zeros((t.size, nc))
    w_tan = np.zeros((t.size, nc))
    w_pos[rows, seg] = b00
    w_pos[rows, seg + 1] = b01
    w_tan[rows, seg] = b10
    w_tan[rows, seg + 1] = b11
    return w_pos, w_tan, clamped


@dataclass(frozen=True)
class SplineTrajectory:
    control_positions: np.ndarray  # (N_c, 3)
    control_tangents: np.ndarray  # (N_c, 3)
    knot_times: np.ndarray  # (N_c,)
    residual_rms: float | None = None

    def __post_init__(self):
        p = np.array(self.control_positions, dtype=np.float64)
        m = np.array(self.control_tangents, dtype=np.float64)
        k = np.array(self.knot_times, dtype=np.float64)
        if k.ndim != 1 or k.size < 2:
            raise InvalidInputError("need at least 2 knots")
        if np.any(np.diff(k) <= 0):
            raise InvalidInputError("knot times must be strictly increasing")
        if p.shape != (k.size, 3) or m.shape != (k.size, 3):
            raise InvalidInputError(f"control arrays must have shape ({k.size}, 3)")
        for a in (p, m, k):
            a.setflags(write=False)
        object.__setattr__(self, "control_positions", p)
        object.__setattr__(self, "control_tangents", m)
        object.__setattr__(self, "knot_times", k)

    @property
    def n_control(self) -> int:
        return self.knot_times.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knot_times[0]), float(self.knot_times[-1])

    def evaluate(self, t) -> np.ndarray:
        wp, wt, _ = hermite_basis(self.knot_times, t)
        return wp @ self.control_positions + wt @ self.control_tangents

    def derivative(self, t) -> np.ndarray:
        wp, wt, _ = hermite_basis(self.knot_times, t, derivative=True)
        return wp @ self.control_positions + wt @ self.control_tangents

    def shifted(self, dt: float) -> "SplineTrajectory":
        """Same curve with the knot grid moved by ``dt``."""
        return SplineTrajectory(self.control_positions, self.control_tangents, self.knot_times + dt, self.residual_rms)

    def to_dict(self) -> dict:
        return {"positions": self.control_positions.tolist(), "tangents": self.control_tangents.tolist()}


def eval_spline(s: SplineTrajectory, t: float) -> np.ndarray:
    """Position at time ``t`` (clamped to the knot span)."""
    return s.evaluate(t)[0]


def spline_time_derivative(s: SplineTrajectory, t: float) -> np.ndarray:
    return s.derivative(t)[0]


def is_clamped(s: SplineTrajectory, t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return (t < s.knot_times[0]) | (t > s.knot_times[-1])


def _fit_design(n_frames: int, n_control: int):
    if not 2 <= n_control <= n_frames:
        raise InvalidInputError(f"n_control must lie in [2, {n_frames}], got {n_control}")
    knots = uniform_knots(0.0, n_frames - 1.0, n_control)
    wp, wt, _ = hermite_basis(knots, np.arange(n_frames, dtype=np.float64))
    return knots, np.hstack([wp, wt])


def _bending_design(knots: np.ndarray) -> np.ndarray:
    """Rows ``B`` with ``|B @ [P; M]|^2`` equal to the integral of ``|x''(t)|^2``.

    The second derivative is linear on each segment, so two Gauss points per
    segment integrate its square exactly.
    """
    nc = knots.size
    h = np.diff(knots)
    rows = []
    for u in (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)):
        scale = np.sqrt(0.5 * h)
        b = np.zeros((nc - 1, 2 * nc))
        seg = np.arange(nc - 1)
        b[seg, seg] = (12 * u - 6) / h**2 * scale
        b[seg, seg + 1] = (6 - 12 * u) / h**2 * scale
        b[seg, nc + seg] = (6 * u - 4) / h * scale
        b[seg, nc + seg + 1] = (6 * u - 2) / h * scale
        rows.append(b)
    return np.vstack(rows)


def _solve_fit(design: np.ndarray, targets: np.ndarray, what: str, knots: np.ndarray) -> np.ndarray:
    """Least-squares control parameters.

    When the frames do not determine every parameter, the least-squares
    solutions form an affine family; the one with the least bending energy is
    returned, which keeps linear motion exactly linear between frames.
    """
    sol, _, rank, sv = np.linalg.lstsq(design, targets, rcond=None)
    if rank < design.shape[1]:
        log.warning("%s: rank-deficient spline fit (rank %d of %d); using the least-bending solution",
                    what, rank, design.shape[1])
        null = np.linalg.svd(design)[2][rank:].T
        bend = _bending_design(knots)
        z = np.linalg.lstsq(bend @ null, -(bend @ sol), rcond=None)[0]
        sol = sol + null @ z
    return sol


def fit_spline(track: Track | np.ndarray, n_control: int | None = None) -> SplineTrajectory:
    """Least-squares Hermite fit of positions and tangents to a sampled track."""
    pos = track.positions if isinstance(track, Track) else np.asarray(track, dtype=np.float64)
    n_frames = pos.shape[0]
    n_control = default_n_control(n_frames) if n_control is None else n_control
    knots, design = _fit_design(n_frames, n_control)
    sol = _solve_fit(design, pos, "track", knots)
    resid = design @ sol - pos
    rms = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return SplineTrajectory(sol[:n_control], sol[n_control:], knots, rms)


def fit_many(positions: np.ndarray, n_control: int | None = None):
    """Fit every track of a stacked (N, T, 3) array on one shared knot grid.

    Returns ``(P, M, knots, rms)`` with ``P``/``M`` of shape (N, N_c, 3).
    """
    positions = np.asarray(positions, dtype=np.float64)
    n, n_frames, _ = positions.shape
    n_control = default_n_control(n_frames) if n_control is None else n_control
    knots, design = _fit_design(n_frames, n_control)
    targets = positions.transpose(1, 0, 2).reshape(n_frames, n * 3)
    sol = _solve_fit(design, targets, "scaffold", knots)
    resid = (design @ sol - targets).reshape(n_frames, n, 3)
    rms = np.sqrt(np.mean(np.sum(resid**2, axis=2), axis=0))
    sol = sol.reshape(2 * n_control, n, 3).transpose(1, 0, 2)
    return sol[:, :n_control], sol[:, n_control:], knots, rms


def apply_basis(w: np.ndarray, control: np.ndarray) -> np.ndarray:
    """``w`` (S, N_c) applied to stacked controls (n, N_c, 3) -> (n, S, 3)."""
    n, nc, _ = control.shape
    flat = control.transpose(1, 0, 2).reshape(nc, n * 3)
    return (w @ flat).reshape(w.shape[0], n, 3).transpose(1, 0, 2)


def apply_basis_transpose(w: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`apply_basis`: (n, S, 3) -> (n, N_c, 3)."""
    n, s, _ = grad.shape
    flat = grad.transpose(1, 0, 2).reshape(s, n * 3)
    return (w.T @ flat).reshape(w.shape[1], n, 3).transpose(1, 0, 2)


@dataclass
class SplineScaffold:
    """Per-video set of node splines sharing one knot grid, plus their graph."""

    video_id: str
    node_ids: tuple[int, ...]
    control_positions: np.ndarray  # (n_nodes, N_c, 3)
    control_tangents: np.ndarray  # (n_nodes, N_c, 3)
    knot_times: np.ndarray
    graph: ScaffoldGraph

    def __post_init__(self):
        self.control_positions = np.asarray(self.control_positions, dtype=np.float64)
        self.control_tangents = np.asarray(self.control_tangents, dtype=np.float64)
        self.knot_times = np.asarray(self.knot_times, dtype=np.float64)
        n, nc = len(self.node_ids), self.knot_times.size
        if self.control_positions.shape != (n, nc, 3) or self.control_tangents.shape != (n, nc, 3):
            raise InvalidInputError(f"scaffold {self.video_id!r}: control arrays must be ({n}, {nc}, 3)")
        if set(self.graph.node_ids) - set(self.node_ids):
            raise InvalidInputError(f"scaffold {self.video_id!r}: graph node without a trajectory")

    @property
    def trajectories(self) -> dict[int, SplineTrajectory]:
        return {
            nid: SplineTrajectory(self.control_positions[k], self.control_tangents[k], self.knot_times)
            for k, nid in enumerate(self.node_ids)
        }

    def evaluate(self, t) -> np.ndarray:
        """Positions of every node at times ``t``: shape (n_nodes, len(t), 3)."""
        wp, wt, _ = hermite_basis(self.knot_times, t)
        return apply_basis(wp, self.control_positions) + apply_basis(wt, self.control_tangents)

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "knot_times": [float.hex(float(x)) for x in self.knot_times],
            "graph": self.graph.to_dict(),
            "nodes": [
                {
                    "id": int(nid),
                    "positions": [[float.hex(float(c)) for c in row] for row in self.control_positions[k]],
                    "tangents": [[float.hex(float(c)) for c in row] for row in self.control_tangents[k]],
                }
                for k, nid in enumerate(self.node_ids)
            ],
        }

    @classmethod
    def from_dict(cls, data) -> "SplineScaffold":
        def unhex(x):
            return float.fromhex(x) if isinstance(x, str) else float(x)

        nodes = data["nodes"]
        return cls(
            data["video_id"],
            tuple(int(n["id"]) for n in nodes),
            np.array([[[unhex(c) for c in row] for row in n["positions"]] for n in nodes]).reshape(len(nodes), -1, 3),
            np.array([[[unhex(c) for c in row] for row in n["tangents"]] for n in nodes]).reshape(len(nodes), -1, 3),
            np.array([unhex(x) for x in data["knot_times"]]),
            ScaffoldGraph.from_dict(data["graph"]),
        )

    def save(self, path) -> None:
        write_json(path, self.to_dict(), compact=True)

    @classmethod
    def load(cls, path) -> "SplineScaffold":
        return cls.from_dict(read_json(path))
