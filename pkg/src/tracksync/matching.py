"""Cross-video track correspondence with fused Gromov-Wasserstein transport.

The solver is a conditional-gradient (Frank-Wolfe) loop: at each outer step
the quadratic objective is linearised, the linear problem is solved with
entropic Sinkhorn, and an exact line search along the segment to that plan
keeps every iterate inside the coupling polytope and the objective monotone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .config import SolverConfig
from .errors import InvalidInputError, NumericalError, SchemaError
from .jsonio import read_json, write_json
from .tracks import TrackSet, farthest_point_subsample, pairwise_track_distances

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostMatrices:
    feature_cost: np.ndarray  # (N_a, N_b)
    struct_a: np.ndarray  # (N_a, N_a)
    struct_b: np.ndarray  # (N_b, N_b)

    def __post_init__(self):
        m, ca, cb = (np.asarray(x, dtype=np.float64) for x in (self.feature_cost, self.struct_a, self.struct_b))
        if m.ndim != 2 or ca.shape != (m.shape[0], m.shape[0]) or cb.shape != (m.shape[1], m.shape[1]):
            raise InvalidInputError(f"inconsistent cost shapes: M {m.shape}, C_a {ca.shape}, C_b {cb.shape}")
        for name, x in (("feature_cost", m), ("struct_a", ca), ("struct_b", cb)):
            if not np.all(np.isfinite(x)):
                raise InvalidInputError(f"{name} contains NaN or inf")
        object.__setattr__(self, "feature_cost", m)
        object.__setattr__(self, "struct_a", ca)
        object.__setattr__(self, "struct_b", cb)

    @property
    def shape(self) -> tuple[int, int]:
        return self.feature_cost.shape

    def normalized(self) -> "CostMatrices":
        """Each matrix divided by its own largest entry (all-zero matrices kept)."""

        def scale(x, name):
            top = float(np.max(x)) if x.size else 0.0
            if top <= 0.0:
                if name != "feature_cost" or x.size > 1:
                    log.warning("%s is identically zero; that term carries no information", name)
                return x.copy()
            return x / top

        return CostMatrices(
            scale(self.feature_cost, "feature_cost"),
            scale(self.struct_a, "struct_a"),
            scale(self.struct_b, "struct_b"),
        )


@dataclass
class TransportPlan:
    gamma: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    objective_value: float
    converged: bool = True
    n_iter: int = 0
    history: list[float] = field(default_factory=list)
    inner_converged: bool = True

    def marginal_violation(self) -> float:
        """Largest L1 deviation of row or column sums from the prescribed marginals."""
        r = np.abs(self.gamma.sum(axis=1) - self.row_marginal).sum()
        c = np.abs(self.gamma.sum(axis=0) - self.col_marginal).sum()
        return float(max(r, c))


@dataclass(frozen=True)
class MatchSet:
    source_video: str
    target_video: str
    pairs: tuple[tuple[int, int, float], ...]
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pairs = tuple((int(a), int(b), float(s)) for a, b, s in self.pairs)
        a_ids = [p[0] for p in pairs]
        b_ids = [p[1] for p in pairs]
        if len(set(a_ids)) != len(a_ids) or len(set(b_ids)) != len(b_ids):
            raise InvalidInputError("match set is not one-to-one")
        if any(not s > 0 for _, _, s in pairs):
            raise InvalidInputError("match scores must be strictly positive")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def ids_a(self) -> list[int]:
        return [p[0] for p in self.pairs]

    @property
    def ids_b(self) -> list[int]:
        return [p[1] for p in self.pairs]

    def swapped(self) -> "MatchSet":
        return MatchSet(self.target_video, self.source_video, tuple((b, a, s) for a, b, s in self.pairs), self.metadata)

    def to_dict(self) -> dict:
        return {
            "source_video": self.source_video,
            "target_video": self.target_video,
            "metadata": self.metadata,
            "matches": [{"a": a, "b": b, "score": s} for a, b, s in self.pairs],
        }

    @classmethod
    def from_dict(cls, data, source: str | None = None) -> "MatchSet":
        def fail(msg, loc=None):
            raise SchemaError(msg, location=loc, source=source)

        if not isinstance(data, dict):
            fail("top level must be an object")
        for key in ("source_video", "target_video", "matches"):
            if key not in data:
                fail("missing required key", key)
        if not isinstance(data["matches"], list):
            fail("must be an array", "matches")
        pairs = []
        for k, m in enumerate(data["matches"]):
            loc = f"matches[{k}]"
            if not isinstance(m, dict) or not {"a", "b", "score"} <= set(m):
                fail("must be an object with a, b, score", loc)
            if not all(isinstance(m[x], int) and not isinstance(m[x], bool) for x in ("a", "b")):
                fail("ids must be integers", loc)
            if not isinstance(m["score"], (int, float)) or not m["score"] > 0:
                fail("score must be a positive number", f"{loc}.score")
            pairs.append((m["a"], m["b"], float(m["score"])))
        try:
            return cls(str(data["source_video"]), str(data["target_video"]), tuple(pairs), data.get("metadata", {}))
        except InvalidInputError as exc:
            fail(str(exc), "matches")

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "MatchSet":
        return cls.from_dict(read_json(path), str(path))


# --- cost construction -----------------------------------------------


def feature_cost_matrix(a: TrackSet, b: TrackSet) -> np.ndarray:
    """Cosine distance ``1 - <f_i, f_j>`` between unit-normalised descriptors."""
    fa = np.asarray(a.features if isinstance(a, TrackSet) else a, dtype=np.float64)
    fb = np.asarray(b.features if isinstance(b, TrackSet) else b, dtype=np.float64)
    if fa.shape[1] != fb.shape[1]:
        raise InvalidInputError(f"feature dimension mismatch: {fa.shape[1]} vs {fb.shape[1]}")
    na = np.linalg.norm(fa, axis=1, keepdims=True)
    nb = np.linalg.norm(fb, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidInputError("zero-norm feature vector cannot be normalised")
    cost = 1.0 - (fa / na) @ (fb / nb).T
    return np.clip(cost, 0.0, 2.0)


def intra_distance_matrix(ts: TrackSet) -> np.ndarray:
    """Pairwise max-over-time track distances within one video."""
    return pairwise_track_distances(ts.positions)


def build_costs(a: TrackSet, b: TrackSet, normalize: bool = True) -> CostMatrices:
    costs = CostMatrices(feature_cost_matrix(a, b), intra_distance_matrix(a), intra_distance_matrix(b))
    return costs.normalized() if normalize else costs


# --- objective ---------------------------------------------------------


def _gw_tensor(ca: np.ndarray, cb: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    # sum_kl (Ca_ik - Cb_jl)^2 gamma_kl without the N^4 tensor; uses the
    # actual marginals of gamma so it is exact off the polytope as well
    r = gamma.sum(axis=1)
    c = gamma.sum(axis=0)
    return (ca**2 @ r)[:, None] + (cb**2 @ c)[None, :] - 2.0 * (ca @ gamma @ cb.T)


def fgw_objective(costs: CostMatrices, gamma: np.ndarray, alpha: float) -> float:
    """Quadratic structure distortion plus ``alpha / 2`` times the feature cost."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != costs.shape:
        raise InvalidInputError(f"plan shape {gamma.shape} does not match costs {costs.shape}")
    quad = float(np.sum(_gw_tensor(costs.struct_a, costs.struct_b, gamma) * gamma))
    lin = float(np.sum(costs.feature_cost * gamma))
    return quad + 0.5 * alpha * lin


def gw_distortion(ca: np.ndarray, cb: np.ndarray, assignment) -> float:
    """Sum of squared distance mismatches under a one-to-one assignment."""
    rows = np.array([i for i, _ in assignment], dtype=np.int64)
    cols = np.array([j for _, j in assignment], dtype=np.int64)
    sub_a = ca[np.ix_(rows, rows)]
    sub_b = cb[np.ix_(cols, cols)]
    return float(np.sum((sub_a - sub_b) ** 2))


# --- linear OT ---------------------------------------------------------


def _round_to_marginals(plan: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Altschuler-Weed-Rigollet rounding: shrink rows/cols that overshoot, then
    # spread the remaining deficit as a rank-one correction. Output marginals
    # match p and q up to floating-point rounding.
    x = np.minimum(p / np.maximum(plan.sum(axis=1), 1e-300), 1.0)
    plan = plan * x[:, None]
    y = np.minimum(q / np.maximum(plan.sum(axis=0), 1e-300), 1.0)
    plan = plan * y[None, :]
    # deficits are non-negative up to rounding; clamp so the correction is too
    err_r = np.maximum(p - plan.sum(axis=1), 0.0)
    err_c = np.maximum(q - plan.sum(axis=0), 0.0)
    total = err_r.sum()
    if total > 0:
        plan = plan + np.outer(err_r, err_c) / total
    return plan


def _sinkhorn_log(cost, p, q, eps, max_iter, tol):
    f = np.zeros_like(p)
    g = np.zeros_like(q)
    logp, logq = np.log(p), np.log(q)
    converged = False
    for it in range(max_iter):
        f = eps * (logp - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (logq - logsumexp((f[:, None] - cost) / eps, axis=0))
        if it % 10 == 9 or it == max_iter - 1:
            plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
            if np.abs(plan.sum(axis=1) - p).sum() <= tol:
                converged = True
                break
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return plan, converged


def sinkhorn_inner(
    linear_cost: np.ndarray,
    row_marginal: np.ndarray,
    col_marginal: np.ndarray,
    epsilon: float,
    max_iter: int = 200,
    tol: float = 1e-9,
) -> tuple[np.ndarray, bool]:
    """Entropic OT plan for a linear cost.

    Runs kernel-scaling iterations and falls back to log-domain updates if the
    kernel or the scalings under/overflow. The returned plan is projected onto
    the exact marginals; the flag says whether Sinkhorn itself reached ``tol``
    (L1 marginal error) before ``max_iter``.
    """
    cost = np.asarray(linear_cost, dtype=np.float64)
    p = np.asarray(row_marginal, dtype=np.float64)
    q = np.asarray(col_marginal, dtype=np.float64)
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    if cost.shape != (p.size, q.size):
        raise InvalidInputError(f"cost shape {cost.shape} does not match marginals ({p.size}, {q.size})")
    if np.any(p <= 0) or np.any(q <= 0):
        raise InvalidInputError("marginals must be strictly positive")
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("linear cost contains NaN or inf")
    if cost.size == 1:
        return np.array([[p[0]]]), True
    cost = cost - cost.min()
    kernel = np.exp(-cost / epsilon)
    plan = None
    converged = False
    with np.errstate(all="ignore"):
        if np.all(kernel.max(axis=1) > 1e-200) and np.all(kernel.max(axis=0) > 1e-200):
            u = np.ones_like(p)
            v = np.ones_like(q)
            ok = True
            for it in range(max_iter):
                v = q / (kernel.T @ u)
                u = p / (kernel @ v)
                if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                    ok = False
                    break
                if it % 10 == 9 or it == max_iter - 1:
                    # columns are exact after the v update; check rows
                    cand = u[:, None] * kernel * v[None, :]
                    if np.abs(cand.sum(axis=1) - p).sum() <= tol:
                        converged = True
                        break
            if ok:
                plan = u[:, None] * kernel * v[None, :]
                if not np.all(np.isfinite(plan)):
                    plan = None
    if plan is None:
        plan, converged = _sinkhorn_log(cost, p, q, epsilon, max_iter, tol)
        if not np.all(np.isfinite(plan)):
            raise NumericalError(f"Sinkhorn produced a non-finite plan at epsilon {epsilon:g}")
    plan = _round_to_marginals(plan, p, q)
    return plan, converged


# --- FGW ----------------------------------------------------------------


def _profile_init(costs: CostMatrices, p, q, eps, max_iter):
    # isometry-invariant start: compare each point's sorted distance profile
    # (a lower bound on the GW cost of sending i to j)
    qs = np.linspace(0.0, 1.0, 32)
    pa = np.quantile(costs.struct_a, qs, axis=1).T
    pb = np.quantile(costs.struct_b, qs, axis=1).T
    lb = ((pa[:, None, :] - pb[None, :, :]) ** 2).mean(axis=2)
    if lb.max() > 0:
        lb = lb / lb.max()
    plan, _ = sinkhorn_inner(lb, p, q, eps, max_iter)
    return plan


def fgw_solve(
    costs: CostMatrices,
    alpha: float = 0.5,
    config: SolverConfig | None = None,
    row_marginal: np.ndarray | None = None,
    col_marginal: np.ndarray | None = None,
) -> TransportPlan:
    """Minimise the fused Gromov-Wasserstein objective over couplings.

    ``costs`` is used as given; call :meth:`CostMatrices.normalized` first to
    get the scale conventions the defaults are tuned for.
    """
    config = config or SolverConfig()
    if alpha < 0:
        raise InvalidInputError("alpha must be non-negative")
    na, nb = costs.shape
    p = np.full(na, 1.0 / na) if row_marginal is None else np.asarray(row_marginal, dtype=np.float64)
    q = np.full(nb, 1.0 / nb) if col_marginal is None else np.asarray(col_marginal, dtype=np.float64)
    ca, cb, m = costs.struct_a, costs.struct_b, costs.feature_cost
    if na == 1 or nb == 1:
        gamma = np.outer(p, q)
        obj = fgw_objective(costs, gamma, alpha)
        return TransportPlan(gamma, p, q, obj, True, 0, [obj])

    if config.init == "profile":
        gamma = _profile_init(costs, p, q, config.epsilon, config.inner_iter)
    else:
        gamma = np.outer(p, q)
    obj = fgw_objective(costs, gamma, alpha)
    history = [obj]
    converged = False
    inner_ok = True
    n_iter = 0
    lin = 0.5 * alpha * m
    eps = config.epsilon
    eps_floor = config.epsilon * config.epsilon_floor_ratio
    for n_iter in range(1, config.outer_iter + 1):
        grad = 2.0 * _gw_tensor(ca, cb, gamma) + lin
        direction, ok = sinkhorn_inner(grad, p, q, eps, config.inner_iter)
        inner_ok = inner_ok and ok
        delta = direction - gamma
        # f(gamma + tau*delta) = f + tau*b + tau^2*a, exactly
        a = float(np.sum(_gw_tensor(ca, cb, delta) * delta))
        b = float(np.sum(grad * delta))
        if a > 0:
            tau = min(max(-b / (2.0 * a), 0.0), 1.0)
        else:
            tau = 1.0 if a + b < 0 else 0.0
        gain = 0.0
        if tau > 0.0:
            # convex combination keeps entries non-negative, unlike gamma + tau * delta
            cand = direction if tau == 1.0 else (1.0 - tau) * gamma + tau * direction
            cand_obj = fgw_objective(costs, cand, alpha)
            if cand_obj <= obj:
                gain = obj - cand_obj
                gamma, obj = cand, cand_obj
                history.append(obj)
        if gain <= config.tol * max(1.0, abs(obj)):
            # the entropic direction has stopped helping; sharpen it before
            # declaring a stationary point
            if eps > eps_floor:
                eps = max(eps * 0.25, eps_floor)
                continue
            converged = True
            break
    if not converged:
        log.info("FGW stopped at the outer iteration cap (%d)", config.outer_iter)
    return TransportPlan(gamma, p, q, obj, converged, n_iter, history, inner_ok)


# --- discrete extraction ---------------------------------------------


def max_weight_assignment(weights: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-weight one-to-one assignment (rectangular allowed), sorted by row."""
    w = np.asarray(weights, dtype=np.float64)
    rows, cols = linear_sum_assignment(w, maximize=True)
    return sorted(zip(rows.tolist(), cols.tolist()))


def hungarian_extract(
    plan: TransportPlan | np.ndarray,
    ids_a=None,
    ids_b=None,
    min_score: float | None = 0.0,
    max_matches: int | None = None,
    source_video: str = "a",
    target_video: str = "b",
) -> MatchSet:
    """Discrete matches from a soft plan.

    Solves the max-weight assignment on the plan entries, drops pairs whose
    plan mass is below ``min_score`` (or not strictly positive) and keeps at
    most ``max_matches`` of the highest-scoring pairs. Equal scores are
    ordered by (row, column).
    """
    gamma = plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    na, nb = gamma.shape
    ids_a = list(range(na)) if ids_a is None else [int(i) for i in ids_a]
    ids_b = list(range(nb)) if ids_b is None else [int(j) for j in ids_b]
    if min_score is None:
        min_score = 0.5 / max(na, nb)
    chosen = []
    for i, j in max_weight_assignment(gamma):
        s = float(gamma[i, j])
        if s > 0 and s >= min_score:
            chosen.append((i, j, s))
    chosen.sort(key=lambda x: (-x[2], x[0], x[1]))
    if max_matches is not None:
        chosen = chosen[:max_matches]
    pairs = tuple((ids_a[i], ids_b[j], s) for i, j, s in chosen)
    return MatchSet(source_video, target_video, pairs)


def match_track_sets(a: TrackSet, b: TrackSet, config: SolverConfig | None = None) -> tuple[MatchSet, TransportPlan]:
    """Full matching step: costs, FGW plan, Hungarian extraction."""
    config = config or SolverConfig()
    if a.feature_dim != b.feature_dim:
        raise InvalidInputError(
            f"feature dimension mismatch between {a.video_id!r} ({a.feature_dim}) and {b.video_id!r} ({b.feature_dim})"
        )
    subsampled = {}
    for name, ts in (("a", a), ("b", b)):
        if ts.n_tracks > config.n_max:
            keep = np.sort(farthest_point_subsample(ts.positions, config.n_max, ts.ids))
            subsampled[name] = ts.n_tracks
            ts = ts.subset(ts.ids[keep].tolist())
        if name == "a":
            a = ts
        else:
            b = ts
    costs = build_costs(a, b)
    degenerate = [v for v, c in ((a.video_id, costs.struct_a), (b.video_id, costs.struct_b)) if c.size > 1 and c.max() == 0]
    plan = fgw_solve(costs, config.alpha, config)
    matches = hungarian_extract(
        plan, a.ids, b.ids, config.min_score, config.max_matches, a.video_id, b.video_id
    )
    meta = {
        "alpha": config.alpha,
        "solver": config.model_dump(),
        "objective": plan.objective_value,
        "objective_history": plan.history,
        "outer_iterations": plan.n_iter,
        "converged": plan.converged,
        "inner_converged": plan.inner_converged,
        "marginal_violation": plan.marginal_violation(),
        "n_tracks": [a.n_tracks, b.n_tracks],
        "subsampled_from": subsampled,
        "degenerate_structure": degenerate,
    }
    return MatchSet(matches.source_video, matches.target_video, matches.pairs, meta), plan
