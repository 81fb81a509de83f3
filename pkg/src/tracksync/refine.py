"""Sub-frame refinement of per-video time offsets on spline scaffolds.

Every video's anchor tracks are Hermite splines evaluated at ``t + offset``;
the offsets and all control parameters are optimised jointly. The data term
compares matched anchors of the reference and each query video; three
regularisers (edge-length rigidity, velocity and acceleration smoothness)
and a fit term that keeps each spline close to its own observed track
complete the objective.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .config import RefineConfig, SplineConfig
from .errors import InvalidInputError, NumericalError
from .matching import MatchSet
from .spline import (
    SplineScaffold,
    apply_basis,
    default_n_control,
    fit_many,
    hermite_basis,
)
from .sync import SyncResult, ViewOffset
from .tracks import ScaffoldGraph, TrackSet, build_scaffold_graph, farthest_point_subsample

log = logging.getLogger(__name__)

COMPONENTS = ("align", "fit", "arap", "vel", "acc")


# --- per-scaffold regularisers ------------------------------------------


def _arap_on_positions(x: np.ndarray, src: np.ndarray, dst: np.ndarray, rest: np.ndarray, grad: bool = True):
    """Mean squared edge-length deviation; x is time-major (S, n, 3)."""
    if src.size == 0:
        return 0.0, np.zeros_like(x) if grad else None
    n_s, n, _ = x.shape
    xn = x.transpose(1, 0, 2).reshape(n, n_s * 3)  # node-major rows gather cheaply
    d = (xn[src] - xn[dst]).reshape(src.size, n_s, 3)
    length = np.sqrt(np.einsum("esk,esk->es", d, d))
    dev = length - rest[:, None]
    count = dev.size
    value = float(np.sum(dev * dev) / count)
    if not grad:
        return value, None
    with np.errstate(invalid="ignore", divide="ignore"):
        coef = np.where(length > 0, 2.0 * dev / (length * count), 0.0)
    g = (coef[..., None] * d).reshape(src.size, -1)
    incidence = np.zeros((n, src.size))
    cols = np.arange(src.size)
    incidence[src, cols] = 1.0
    incidence[dst, cols] = -1.0
    return value, (incidence @ g).reshape(n, n_s, 3).transpose(1, 0, 2)


def _diff_adjoint(g: np.ndarray) -> np.ndarray:
    # adjoint of np.diff along axis 0
    out = np.zeros((g.shape[0] + 1,) + g.shape[1:])
    out[:-1] -= g
    out[1:] += g
    return out


def _vel_acc_on_positions(x: np.ndarray):
    """Second- and third-difference energies of time-major samples (S, ...)."""
    s = x.shape[0]
    width = x[0].size // 3
    v = np.diff(x, axis=0)
    a = np.diff(v, axis=0)
    la = float(np.sum(a * a) / ((s - 2) * width))
    grad_vel = _diff_adjoint(_diff_adjoint((2.0 / ((s - 2) * width)) * a))
    if s >= 4:
        j = np.diff(a, axis=0)
        lj = float(np.sum(j * j) / ((s - 3) * width))
        grad_acc = _diff_adjoint(_diff_adjoint(_diff_adjoint((2.0 / ((s - 3) * width)) * j)))
    else:
        lj, grad_acc = 0.0, np.zeros_like(x)
    return la, lj, grad_vel, grad_acc


@dataclass
class ScaffoldGradient:
    """Gradient with respect to one scaffold's parameters and a shift of its time argument."""

    positions: np.ndarray
    tangents: np.ndarray
    time_shift: float


def _flat(control: np.ndarray) -> np.ndarray:
    # (n, N_c, 3) -> (N_c, n*3)
    n, nc, _ = control.shape
    return control.transpose(1, 0, 2).reshape(nc, n * 3)


def _unflat(flat: np.ndarray, n: int) -> np.ndarray:
    # (N_c, n*3) -> (n, N_c, 3)
    return flat.reshape(flat.shape[0], n, 3).transpose(1, 0, 2)


@dataclass
class _Sampled:
    """One scaffold evaluated on a time grid in time-major layout (S, n, 3).

    The bases are kept so gradients can be pulled back without recomputing.
    """

    wp: np.ndarray
    wt: np.ndarray
    x: np.ndarray
    xdot: np.ndarray  # zero where the time was clamped to the knot span


def _sample(scaffold: SplineScaffold, times: np.ndarray) -> _Sampled:
    wp, wt, clamped = hermite_basis(scaffold.knot_times, times)
    dwp, dwt, _ = hermite_basis(scaffold.knot_times, times, derivative=True)
    pf, mf = _flat(scaffold.control_positions), _flat(scaffold.control_tangents)
    n = len(scaffold.node_ids)
    x = (wp @ pf + wt @ mf).reshape(-1, n, 3)
    xdot = (dwp @ pf + dwt @ mf).reshape(-1, n, 3)
    if np.any(clamped):
        xdot[clamped] = 0.0
    return _Sampled(wp, wt, x, xdot)


def _pullback_sampled(e: _Sampled, grad_x: np.ndarray) -> ScaffoldGradient:
    n = grad_x.shape[1]
    gf = grad_x.reshape(grad_x.shape[0], -1)
    return ScaffoldGradient(
        _unflat(e.wp.T @ gf, n),
        _unflat(e.wt.T @ gf, n),
        float(np.sum(grad_x * e.xdot)),
    )


def _pullback(scaffold: SplineScaffold, times: np.ndarray, grad_x: np.ndarray) -> ScaffoldGradient:
    """Pull a gradient on (n, S, 3) samples back onto the scaffold parameters."""
    return _pullback_sampled(_sample(scaffold, times), np.ascontiguousarray(grad_x.transpose(1, 0, 2)))


def _graph_arrays(scaffold: SplineScaffold):
    """Edge endpoints as indices into the scaffold's node order, and rest lengths."""
    src, dst = scaffold.graph.edge_index()
    rest = np.asarray(scaffold.graph.rest_lengths, dtype=np.float64)
    if src.size == 0:
        return src, dst, rest
    order = {nid: k for k, nid in enumerate(scaffold.node_ids)}
    remap = np.array([order[n] for n in scaffold.graph.node_ids], dtype=np.int64)
    return remap[src], remap[dst], rest


def _check_times(sample_times, minimum: int) -> np.ndarray:
    t = np.asarray(sample_times, dtype=np.float64)
    if t.ndim != 1 or t.size < minimum:
        raise InvalidInputError(f"need at least {minimum} sample times, got {t.size}")
    return t


def arap_loss(scaffold: SplineScaffold, sample_times) -> tuple[float, ScaffoldGradient]:
    """Mean over edges and times of (current length - rest length)^2."""
    t = _check_times(sample_times, 1)
    e = _sample(scaffold, t)
    value, gx = _arap_on_positions(e.x, *_graph_arrays(scaffold))
    return value, _pullback_sampled(e, gx)


def vel_acc_losses(scaffold: SplineScaffold, sample_times):
    """Finite-difference smoothness energies on the sample grid.

    Returns ``(L_vel, L_acc, grad_vel, grad_acc)`` where ``L_vel`` is the mean
    squared second difference and ``L_acc`` the mean squared third difference.
    """
    t = _check_times(sample_times, 3)
    e = _sample(scaffold, t)
    lv, la, gv, ga = _vel_acc_on_positions(e.x)
    return lv, la, _pullback_sampled(e, gv), _pullback_sampled(e, ga)


# --- problem ------------------------------------------------------------


@dataclass
class RefineProblem:
    reference: str
    video_ids: list[str]  # reference first
    scaffolds: dict[str, SplineScaffold]
    pairs: dict[str, tuple[np.ndarray, np.ndarray]]  # query -> (ref node idx, query node idx)
    offsets: dict[str, float]
    coarse: dict[str, int]
    sample_times: np.ndarray
    weights: RefineConfig = field(default_factory=RefineConfig)
    observations: dict[str, np.ndarray] = field(default_factory=dict)  # vid -> (n, T, 3)
    matches: dict[tuple[str, str], MatchSet] = field(default_factory=dict)

    def __post_init__(self):
        if self.offsets.get(self.reference, 0.0) != 0.0:
            raise InvalidInputError("reference offset must be 0")
        self.offsets[self.reference] = 0.0
        if self.video_ids[0] != self.reference:
            raise InvalidInputError("video_ids must start with the reference")

    @property
    def queries(self) -> list[str]:
        return self.video_ids[1:]

    def copy(self) -> "RefineProblem":
        scaff = {
            v: SplineScaffold(s.video_id, s.node_ids, s.control_positions.copy(), s.control_tangents.copy(),
                              s.knot_times, s.graph)
            for v, s in self.scaffolds.items()
        }
        return RefineProblem(self.reference, list(self.video_ids), scaff, self.pairs, dict(self.offsets),
                             dict(self.coarse), self.sample_times, self.weights, self.observations, self.matches)

    # flat parameter vector: query offsets, then per video P and M
    def get_vector(self) -> np.ndarray:
        parts = [np.array([self.offsets[v] for v in self.queries], dtype=np.float64)]
        for v in self.video_ids:
            s = self.scaffolds[v]
            parts += [s.control_positions.ravel(), s.control_tangents.ravel()]
        return np.concatenate(parts)

    def set_vector(self, vec: np.ndarray) -> None:
        k = len(self.queries)
        for i, v in enumerate(self.queries):
            self.offsets[v] = float(vec[i])
        for v in self.video_ids:
            s = self.scaffolds[v]
            n = s.control_positions.size
            s.control_positions = vec[k:k + n].reshape(s.control_positions.shape).copy()
            k += n
            s.control_tangents = vec[k:k + n].reshape(s.control_tangents.shape).copy()
            k += n

    def n_offset_params(self) -> int:
        return len(self.queries)


@dataclass
class Gradient:
    offsets: dict[str, float]
    positions: dict[str, np.ndarray]
    tangents: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, p: RefineProblem) -> "Gradient":
        return cls(
            {v: 0.0 for v in p.queries},
            {v: np.zeros_like(p.scaffolds[v].control_positions) for v in p.video_ids},
            {v: np.zeros_like(p.scaffolds[v].control_tangents) for v in p.video_ids},
        )

    def add(self, other: "Gradient", scale: float = 1.0) -> None:
        for v in self.offsets:
            self.offsets[v] += scale * other.offsets[v]
        for v in self.positions:
            self.positions[v] += scale * other.positions[v]
            self.tangents[v] += scale * other.tangents[v]

    def add_scaffold(self, v: str, g: ScaffoldGradient, scale: float, with_shift: bool) -> None:
        self.positions[v] += scale * g.positions
        self.tangents[v] += scale * g.tangents
        if with_shift and v in self.offsets:
            self.offsets[v] += scale * g.time_shift

    def vector(self, p: RefineProblem) -> np.ndarray:
        parts = [np.array([self.offsets[v] for v in p.queries], dtype=np.float64)]
        for v in p.video_ids:
            parts += [self.positions[v].ravel(), self.tangents[v].ravel()]
        return np.concatenate(parts)


def _local_times(p: RefineProblem, v: str) -> np.ndarray:
    return p.sample_times + p.offsets[v]


def _in_span(s: SplineScaffold, t: np.ndarray) -> np.ndarray:
    return (t >= s.knot_times[0]) & (t <= s.knot_times[-1])


def _alignment(p: RefineProblem, sampled: Mapping[str, _Sampled], grad_x: dict | None, scale: float) -> float:
    ref = p.scaffolds[p.reference]
    t_ref = p.sample_times
    terms = []
    total_count = 0
    for v in p.queries:
        ir, iq = p.pairs[v]
        mask = _in_span(ref, t_ref) & _in_span(p.scaffolds[v], _local_times(p, v))
        if not np.any(mask):
            raise InvalidInputError(f"no overlap left between {p.reference!r} and {v!r} after shifting")
        cols = slice(None) if mask.all() else np.flatnonzero(mask)
        diff = sampled[p.reference].x[cols][:, ir] - sampled[v].x[cols][:, iq]
        terms.append((v, ir, iq, cols, diff))
        total_count += diff[..., 0].size
    value = 0.0
    for v, ir, iq, cols, diff in terms:
        value += float(np.sum(diff * diff))
        if grad_x is not None:
            g = (2.0 * scale / total_count) * diff
            # node indices within a pair are distinct, so plain fancy-index updates are safe
            if isinstance(cols, slice):
                grad_x[p.reference][:, ir] += g
                grad_x[v][:, iq] -= g
            else:
                grad_x[p.reference][np.ix_(cols, ir)] += g
                grad_x[v][np.ix_(cols, iq)] -= g
    return value / total_count


def alignment_loss(p: RefineProblem) -> tuple[float, Gradient]:
    """Mean squared distance between matched reference and query anchors.

    Samples whose shifted time leaves either knot span are masked out.
    """
    sampled = {v: _sample(p.scaffolds[v], _local_times(p, v)) for v in p.video_ids}
    grad_x = {v: np.zeros_like(e.x) for v, e in sampled.items()}
    value = _alignment(p, sampled, grad_x, 1.0)
    grad = Gradient.zeros(p)
    for v, e in sampled.items():
        grad.add_scaffold(v, _pullback_sampled(e, grad_x[v]), 1.0, with_shift=True)
    return value, grad


def _fit_basis(p: RefineProblem, v: str):
    # fit times are the fixed integer frames, so basis and targets are cached
    cache = p.__dict__.setdefault("_fit_cache", {})
    s = p.scaffolds[v]
    obs = p.observations[v]
    key = (v, obs.shape, s.knot_times.tobytes())
    if key not in cache:
        wp, wt, _ = hermite_basis(s.knot_times, np.arange(obs.shape[1], dtype=np.float64))
        cache[key] = (wp, wt, _flat(obs))
    return cache[key]


def fit_loss(p: RefineProblem, v: str) -> tuple[float, ScaffoldGradient]:
    s = p.scaffolds[v]
    wp, wt, target = _fit_basis(p, v)
    diff = wp @ _flat(s.control_positions) + wt @ _flat(s.control_tangents) - target
    count = diff.size // 3
    value = float(np.sum(diff * diff) / count)
    g = (2.0 / count) * diff
    n = len(s.node_ids)
    return value, ScaffoldGradient(_unflat(wp.T @ g, n), _unflat(wt.T @ g, n), 0.0)


def regularizer_times(p: RefineProblem, v: str) -> np.ndarray:
    """Fixed grid for a video's regularisers: the sample grid at its coarse offset.

    Rigidity and smoothness describe geometry, not timing, so they are kept
    off the offset-shifted grid; otherwise they would pull on the offsets.
    """
    return p.sample_times + p.coarse.get(v, 0)


def _reg_sampled(p: RefineProblem, v: str) -> _Sampled:
    cache = p.__dict__.setdefault("_reg_cache", {})
    s = p.scaffolds[v]
    t = regularizer_times(p, v)
    key = (v, s.knot_times.tobytes(), t.tobytes())
    if key not in cache:
        wp, wt, _ = hermite_basis(s.knot_times, t)
        cache[key] = (wp, wt)
    wp, wt = cache[key]
    n = len(s.node_ids)
    x = (wp @ _flat(s.control_positions) + wt @ _flat(s.control_tangents)).reshape(-1, n, 3)
    return _Sampled(wp, wt, x, np.zeros_like(x))


def total_loss(p: RefineProblem, with_grad: bool = True):
    """Weighted objective, its components, and (optionally) the full gradient.

    The alignment term samples each scaffold on its offset-shifted grid; the
    regularisers use the fixed grid from :func:`regularizer_times`. Sample
    gradients of each grid are summed before a single pullback.
    """
    w = p.weights
    comps = dict.fromkeys(COMPONENTS, 0.0)
    sampled = {v: _sample(p.scaffolds[v], _local_times(p, v)) for v in p.video_ids}
    grad_x = {v: np.zeros_like(e.x) for v, e in sampled.items()} if with_grad else None
    comps["align"] = _alignment(p, sampled, grad_x, w.lambda_align)
    n_videos = len(p.video_ids)
    fit_grads, reg_grads = {}, {}
    for v in p.video_ids:
        s = p.scaffolds[v]
        if w.lambda_fit > 0 and v in p.observations:
            val, g = fit_loss(p, v)
            comps["fit"] += val / n_videos
            fit_grads[v] = g
        use_arap = w.lambda_arap > 0 and bool(s.graph.edges)
        use_smooth = (w.lambda_vel > 0 or w.lambda_acc > 0) and p.sample_times.size >= 3
        if not (use_arap or use_smooth):
            continue
        e = _reg_sampled(p, v)
        gx = np.zeros_like(e.x) if with_grad else None
        if use_arap:
            val, g = _arap_on_positions(e.x, *_graph_arrays(s), grad=with_grad)
            comps["arap"] += val / n_videos
            if with_grad:
                gx += (w.lambda_arap / n_videos) * g
        if use_smooth:
            lv, la, gv, ga = _vel_acc_on_positions(e.x)
            comps["vel"] += lv / n_videos
            comps["acc"] += la / n_videos
            if with_grad:
                gx += (w.lambda_vel / n_videos) * gv + (w.lambda_acc / n_videos) * ga
        if with_grad:
            reg_grads[v] = _pullback_sampled(e, gx)
    total = (
        w.lambda_align * comps["align"]
        + w.lambda_fit * comps["fit"]
        + w.lambda_arap * comps["arap"]
        + w.lambda_vel * comps["vel"]
        + w.lambda_acc * comps["acc"]
    )
    grad = None
    if with_grad:
        grad = Gradient.zeros(p)
        for v, e in sampled.items():
            grad.add_scaffold(v, _pullback_sampled(e, grad_x[v]), 1.0, with_shift=True)
            if v in fit_grads:
                grad.add_scaffold(v, fit_grads[v], w.lambda_fit / n_videos, with_shift=False)
            if v in reg_grads:
                grad.add_scaffold(v, reg_grads[v], 1.0, with_shift=False)
    return total, comps, grad


def loss_at(p: RefineProblem, vec: np.ndarray) -> float:
    q = p.copy()
    q.set_vector(vec)
    return total_loss(q, with_grad=False)[0]


# --- construction -------------------------------------------------------


def overlap_window(n_frames: Mapping[str, int], coarse: Mapping[str, int], reference: str, margin: float):
    lo = 0.0
    hi = float(n_frames[reference] - 1)
    limiting = None
    for v, c in coarse.items():
        if v == reference:
            continue
        v_lo, v_hi = -c + margin, n_frames[v] - 1 - c - margin
        if v_lo > lo:
            lo = v_lo
        if v_hi < hi:
            hi = v_hi
        if hi - lo < 1.0 and limiting is None:
            limiting = v
    return lo, hi, limiting


def build_refine_problem(
    sets: Mapping[str, TrackSet],
    matches: Mapping[tuple[str, str], MatchSet],
    sync: SyncResult,
    spline_config: SplineConfig | None = None,
    config: RefineConfig | None = None,
    views: list[str] | None = None,
) -> RefineProblem:
    """Fit scaffolds to matched anchor tracks and set up the joint problem."""
    spline_config = spline_config or SplineConfig()
    config = config or RefineConfig()
    reference = sync.reference
    views = views if views is not None else [v for v in sorted(sets) if v != reference]
    ref_ts = sets[reference]
    pair_ms = {}
    for v in views:
        ms = matches.get((reference, v))
        if ms is None:
            rev = matches.get((v, reference))
            if rev is None:
                raise InvalidInputError(f"missing match set for pair ({reference!r}, {v!r})")
            ms = rev.swapped()
        if len(ms) == 0:
            raise InvalidInputError(f"empty match set for pair ({reference!r}, {v!r})")
        pair_ms[v] = ms

    # anchors: reference tracks matched in every pair when possible
    common = set(ref_ts.ids.tolist())
    for ms in pair_ms.values():
        common &= set(ms.ids_a)
    if len(common) < 2:
        common = set()
        for ms in pair_ms.values():
            common |= set(ms.ids_a)
    cand = np.array(sorted(common), dtype=np.int64)
    sel = farthest_point_subsample(ref_ts.positions[ref_ts.indices_of(cand)], config.max_nodes, cand)
    ref_nodes = tuple(sorted(int(i) for i in cand[sel]))

    node_ids = {reference: ref_nodes}
    pairs = {}
    for v, ms in pair_ms.items():
        partner = {a: b for a, b, _ in ms.pairs}
        used = [(k, partner[a]) for k, a in enumerate(ref_nodes) if a in partner]
        if not used:
            raise InvalidInputError(f"no anchor of {reference!r} is matched in {v!r}")
        ids_v = tuple(sorted(b for _, b in used))
        pos_v = {b: k for k, b in enumerate(ids_v)}
        node_ids[v] = ids_v
        pairs[v] = (np.array([k for k, _ in used]), np.array([pos_v[b] for _, b in used]))

    scaffolds, observations = {}, {}
    for v in [reference] + views:
        ts = sets[v]
        sub = ts.subset(node_ids[v])
        n_control = spline_config.n_control or default_n_control(ts.n_frames)
        P, M, knots, _ = fit_many(sub.positions, n_control)
        n = sub.n_tracks
        if n >= 2:
            graph = build_scaffold_graph(sub, min(config.graph_k, n - 1))
        else:
            graph = ScaffoldGraph(tuple(node_ids[v]), (), ())
        scaffolds[v] = SplineScaffold(v, node_ids[v], P, M, knots, graph)
        observations[v] = np.array(sub.positions)

    coarse = {v: int(sync.offsets[v].coarse) for v in views}
    n_frames = {v: sets[v].n_frames for v in [reference] + views}
    lo, hi, limiting = overlap_window(n_frames, coarse, reference, config.max_shift)
    if hi - lo < 1.0:
        raise InvalidInputError(
            f"common overlap too short for refinement (limited by pair ({reference!r}, {limiting!r}))"
        )
    step = 1.0 / config.samples_per_frame
    n_samples = int(np.floor((hi - lo) / step + 1e-9)) + 1
    sample_times = lo + step * np.arange(n_samples)
    offsets = {reference: 0.0}
    offsets.update({v: float(sync.offsets[v].refined if sync.offsets[v].refined is not None else coarse[v])
                    for v in views})
    coarse[reference] = 0
    return RefineProblem(
        reference, [reference] + views, scaffolds, pairs, offsets, coarse, sample_times, config,
        observations, {(reference, v): ms for v, ms in pair_ms.items()},
    )


# --- optimiser ----------------------------------------------------------


@dataclass
class RefineTrace:
    iterations: list[dict] = field(default_factory=list)
    status: str = "running"
    flags: dict[str, list[str]] = field(default_factory=dict)

    def record(self, it: int, total: float, comps: dict, offsets: dict) -> None:
        row = {"iteration": it, "total": total}
        row.update({k: comps[k] for k in COMPONENTS})
        row["offsets"] = dict(offsets)
        self.iterations.append(row)

    def to_dict(self) -> dict:
        return {"status": self.status, "flags": self.flags, "iterations": self.iterations}

    def to_csv(self) -> str:
        if not self.iterations:
            return "iteration,total," + ",".join(COMPONENTS) + "\n"
        vids = sorted(self.iterations[0]["offsets"])
        lines = ["iteration,total," + ",".join(COMPONENTS) + "," + ",".join(f"offset_{v}" for v in vids)]
        for row in self.iterations:
            vals = [str(row["iteration"]), repr(row["total"])] + [repr(row[k]) for k in COMPONENTS]
            vals += [repr(row["offsets"][v]) for v in vids]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


def offset_curvature(p: RefineProblem) -> dict[str, float]:
    """Mean squared anchor speed along the window, per query video.

    This is the Gauss-Newton curvature of the alignment term with respect to
    that video's offset; zero means the offset cannot be identified.
    """
    out = {}
    for v in p.queries:
        s = p.scaffolds[v]
        _, iq = p.pairs[v]
        t = _local_times(p, v)
        dwp, dwt, _ = hermite_basis(s.knot_times, t, derivative=True)
        xdot = apply_basis(dwp, s.control_positions[iq]) + apply_basis(dwt, s.control_tangents[iq])
        out[v] = float(np.mean(np.sum(xdot * xdot, axis=-1)))
    return out


def refine_offsets(
    p: RefineProblem, config: RefineConfig | None = None, sync: SyncResult | None = None
) -> tuple[SyncResult, RefineTrace]:
    """Jointly optimise offsets and spline parameters with Adam and step halving.

    Returns an updated :class:`SyncResult` (refined offsets filled in) and the
    optimisation trace. ``p`` is modified in place.
    """
    config = config or p.weights
    trace = RefineTrace()
    n_off = p.n_offset_params()
    vec = p.get_vector()
    lr = np.full(vec.size, config.lr_control)
    lr[:n_off] = config.lr_offset
    active = np.ones(vec.size, dtype=bool)
    flags: dict[str, list[str]] = {v: [] for v in p.queries}

    curv = offset_curvature(p)
    for i, v in enumerate(p.queries):
        if curv[v] < config.unidentifiable_tol:
            flags[v].append("unidentifiable_offset")
            active[i] = False
            log.warning("offset of %r is unidentifiable (no motion along the overlap)", v)

    lo = np.array([p.coarse[v] - config.max_shift for v in p.queries])
    hi = np.array([p.coarse[v] + config.max_shift for v in p.queries])

    total, comps, grad = total_loss(p)
    if not (np.isfinite(total) and np.all(np.isfinite(grad.vector(p)))):
        raise NumericalError(f"refinement objective is not finite at the start ({total!r}); check input scale")
    trace.record(0, total, comps, p.offsets)
    m1 = np.zeros_like(vec)
    m2 = np.zeros_like(vec)
    beta1, beta2, eps = 0.9, 0.999, 1e-12
    scale = 1.0
    stall = 0
    status = "max_iter"
    for it in range(1, config.max_iter + 1):
        g = grad.vector(p)
        g[~active] = 0.0
        if np.linalg.norm(g) < config.grad_tol:
            status = "grad_tol"
            break
        m1 = beta1 * m1 + (1 - beta1) * g
        m2 = beta2 * m2 + (1 - beta2) * g * g
        step = lr * (m1 / (1 - beta1**it)) / (np.sqrt(m2 / (1 - beta2**it)) + eps)
        step[~active] = 0.0
        accepted = False
        for _ in range(40):
            cand = vec - scale * step
            clipped = np.clip(cand[:n_off], lo, hi)
            hit = clipped != cand[:n_off]
            cand[:n_off] = clipped
            p.set_vector(cand)
            c_total, c_comps, c_grad = total_loss(p)
            if c_total <= total:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            p.set_vector(vec)
            status = "no_descent"
            break
        for i in np.flatnonzero(hit):
            v = p.queries[i]
            active[i] = False
            if "divergence_guard" not in flags[v]:
                flags[v].append("divergence_guard")
                log.warning("offset of %r hit the +/-%.2f frame guard; frozen", v, config.max_shift)
        improvement = total - c_total
        vec = cand
        total, comps, grad = c_total, c_comps, c_grad
        trace.record(it, total, comps, p.offsets)
        scale = min(1.0, scale * 2.0)
        stall = stall + 1 if improvement < config.improvement_tol else 0
        if stall >= config.patience:
            status = "improvement_tol"
            break
    trace.status = status
    trace.flags = {v: f for v, f in flags.items() if f}

    base = sync or SyncResult(p.reference, {p.reference: ViewOffset(0)} | {v: ViewOffset(p.coarse[v]) for v in p.queries})
    offsets = {}
    for vid, old in base.offsets.items():
        new = ViewOffset(old.coarse, old.refined, list(old.flags))
        if vid == p.reference:
            new.refined = 0.0
        elif vid in p.offsets:
            vf = flags.get(vid, [])
            new.refined = None if "unidentifiable_offset" in vf else float(p.offsets[vid])
            new.flags = sorted(set(new.flags) | set(vf))
        offsets[vid] = new
    diagnostics = dict(base.diagnostics)
    diagnostics["refine"] = {
        "status": status,
        "iterations": len(trace.iterations) - 1,
        "final_loss": total,
        "components": comps,
        "offset_curvature": curv,
        "n_samples": int(p.sample_times.size),
        "window": [float(p.sample_times[0]), float(p.sample_times[-1])],
    }
    return SyncResult(base.reference, offsets, diagnostics), trace
