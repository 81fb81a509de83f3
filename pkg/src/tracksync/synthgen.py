"""Synthetic multi-view rigid scenes with known offsets and correspondences.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence(seed)``; each view draws from its own spawned child stream, so
output depends only on the seed and the config, never on evaluation order.

Offset convention matches :mod:`tracksync.sync`: view ``v`` with offset ``d``
shows at its frame ``f`` the world state at time ``f - d``, i.e. reference
frame ``t`` corresponds to view frame ``t + d``. View 0 is the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial.transform import Rotation

from .config import SceneConfig
from .errors import InvalidInputError, SchemaError
from .jsonio import read_json, write_json
from .sync import SyncResult, pair_key
from .tracks import TrackSet

MAX_MOTION_ATTEMPTS = 100
EXCITATION_RATIO = 5.0


def view_name(k: int) -> str:
    return f"view{k}"


@dataclass
class ClusterMotion:
    """Continuous rigid motion of one cluster: x(t) = R(t) @ local + c(t)."""

    center: CubicSpline
    rotvec: CubicSpline
    local: np.ndarray  # (n_points, 3)

    def positions(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        rot = Rotation.from_rotvec(self.rotvec(t))
        c = self.center(t)
        out = np.empty((self.local.shape[0], t.size, 3))
        for k in range(t.size):
            out[:, k] = rot[k].apply(self.local) + c[k]
        return out

    def path_length(self, t0: float, t1: float, n: int = 400) -> float:
        c = self.center(np.linspace(t0, t1, n))
        return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum())


@dataclass
class GroundTruth:
    reference: str
    true_offsets: dict[str, float]
    true_matches: dict[str, list[tuple[int, int]]]  # pair key -> (ref id, view id)
    point_of_id: dict[str, list[int]]  # view -> scene point index for each track id
    motions: list[ClusterMotion]
    config: SceneConfig

    def canonical_positions(self, world_times) -> np.ndarray:
        """All scene points at the given world times: (n_points, len(t), 3)."""
        return np.concatenate([m.positions(world_times) for m in self.motions], axis=0)

    def matches_for(self, ref: str, view: str) -> dict[int, int]:
        return {a: b for a, b in self.true_matches[pair_key(ref, view)]}

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "offset_convention": "reference frame t corresponds to view frame t + offset",
            "offsets": dict(sorted(self.true_offsets.items())),
            "matches": {k: [list(p) for p in v] for k, v in sorted(self.true_matches.items())},
            "config": self.config.model_dump(mode="json"),
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())


@dataclass
class LoadedGroundTruth:
    """Ground truth as read back from ``ground_truth.json`` (no motion model)."""

    reference: str
    true_offsets: dict[str, float]
    true_matches: dict[str, list[tuple[int, int]]]
    config: dict

    def matches_for(self, ref: str, view: str) -> dict[int, int]:
        return {a: b for a, b in self.true_matches[pair_key(ref, view)]}

    @classmethod
    def load(cls, path) -> "LoadedGroundTruth":
        data = read_json(path)
        if not isinstance(data, dict) or "offsets" not in data or "reference" not in data:
            raise SchemaError("expected an object with 'reference' and 'offsets'", source=str(path))
        try:
            offsets = {str(k): float(v) for k, v in data["offsets"].items()}
            matches = {k: [(int(a), int(b)) for a, b in v] for k, v in data.get("matches", {}).items()}
        except (TypeError, ValueError, AttributeError):
            raise SchemaError("malformed offsets or matches", source=str(path)) from None
        return cls(str(data["reference"]), offsets, matches, data.get("config", {}))


def _cluster_motion(rng: np.random.Generator, cfg: SceneConfig, center0: np.ndarray, t0: float, t1: float):
    n_way = max(4, int(math.ceil((t1 - t0) / cfg.motion_smoothness)) + 1)
    knots = np.linspace(t0, t1, n_way)
    local = rng.normal(size=(cfg.points_per_cluster, 3))
    local *= (cfg.cluster_radius * rng.uniform(0.2, 1.0, size=(cfg.points_per_cluster, 1))
              / np.linalg.norm(local, axis=1, keepdims=True))
    for _ in range(MAX_MOTION_ATTEMPTS):
        way = center0 + cfg.motion_scale * rng.normal(size=(n_way, 3))
        rot = 0.8 * rng.normal(size=(n_way, 3))
        motion = ClusterMotion(CubicSpline(knots, way), CubicSpline(knots, rot), local)
        if motion.path_length(t0, t1) >= EXCITATION_RATIO * cfg.cluster_radius:
            return motion
    raise InvalidInputError(
        "motion_scale too small: could not reach the excitation threshold "
        f"(path length >= {EXCITATION_RATIO} x cluster_radius)"
    )


def generate_scene(config: SceneConfig | dict | None = None) -> tuple[list[TrackSet], GroundTruth]:
    """Sample a scene, render every view's tracks, and return them with ground truth."""
    if config is None:
        config = SceneConfig()
    elif isinstance(config, dict):
        config = SceneConfig.model_validate(config)
    cfg = config
    root = np.random.SeedSequence(cfg.seed)
    scene_seq, *view_seqs = root.spawn(cfg.n_views + 1)
    rng = np.random.Generator(np.random.PCG64(scene_seq))

    offsets = [0.0]
    lo, hi = cfg.offset_range
    for k in range(1, cfg.n_views):
        d = float(cfg.offsets[k]) if cfg.offsets is not None else float(rng.uniform(lo, hi))
        offsets.append(d if cfg.fractional_offsets else float(round(d)))
    # world time needed: f - d for f in [0, T-1]
    t0 = -max(offsets) - 2.0
    t1 = cfg.frames - 1 - min(offsets) + 2.0

    spread = 1.5 * cfg.cluster_radius * max(1.0, cfg.n_clusters ** (1 / 3))
    motions = []
    for _ in range(cfg.n_clusters):
        motions.append(_cluster_motion(rng, cfg, rng.uniform(-spread, spread, size=3) * 2.0, t0, t1))
    n_points = cfg.n_clusters * cfg.points_per_cluster
    base_features = rng.normal(size=(n_points, cfg.feature_dim))
    base_features /= np.linalg.norm(base_features, axis=1, keepdims=True)

    sets, point_of_id = [], {}
    frames = np.arange(cfg.frames, dtype=np.float64)
    for k, seq in enumerate(view_seqs):
        vrng = np.random.Generator(np.random.PCG64(seq))
        vid = view_name(k)
        world = frames - offsets[k]
        pos = np.concatenate([m.positions(world) for m in motions], axis=0)
        feats = base_features + cfg.feature_noise_sigma * vrng.normal(size=base_features.shape)
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        perm = vrng.permutation(n_points)
        pos = pos[perm]
        if cfg.position_noise_sigma > 0:
            pos = pos + cfg.position_noise_sigma * vrng.normal(size=pos.shape)
        sets.append(TrackSet.from_arrays(vid, cfg.fps, np.arange(n_points), pos, feats[perm]))
        point_of_id[vid] = perm.tolist()

    ref = view_name(0)
    true_matches = {}
    for k in range(1, cfg.n_views):
        vid = view_name(k)
        id_in_view = np.argsort(point_of_id[vid])
        true_matches[pair_key(ref, vid)] = [
            (i, int(id_in_view[pt])) for i, pt in enumerate(point_of_id[ref])
        ]
    gt = GroundTruth(ref, {view_name(k): offsets[k] for k in range(cfg.n_views)}, true_matches, point_of_id,
                     motions, cfg)
    return sets, gt


def scene_diameter(sets) -> float:
    """Largest distance between any two points of the first view at any frame."""
    pos = sets[0].positions
    best = 0.0
    for t in range(pos.shape[1]):
        p = pos[:, t]
        lo, hi = p.min(axis=0), p.max(axis=0)
        best = max(best, float(np.linalg.norm(hi - lo)))
    return best


def score_sync(result: SyncResult, gt, matches: dict | None = None) -> dict:
    """Absolute offset errors per view (reference excluded) and match quality.

    Refined metrics are ``None`` when the result carries no refined offsets.
    """
    ids = set(result.offsets)
    truth = set(gt.true_offsets)
    if ids != truth:
        raise InvalidInputError(f"view ids differ: result {sorted(ids)} vs ground truth {sorted(truth)}")
    if result.reference != gt.reference:
        raise InvalidInputError(f"reference differs: {result.reference!r} vs {gt.reference!r}")
    ref_true = gt.true_offsets[gt.reference]
    per_view = {}
    coarse_err, refined_err = [], []
    all_refined = True
    for vid in sorted(ids):
        if vid == result.reference:
            continue
        true = gt.true_offsets[vid] - ref_true
        o = result.offsets[vid]
        ce = abs(o.coarse - true)
        re = None if o.refined is None else abs(o.refined - true)
        coarse_err.append(ce)
        if re is None:
            all_refined = False
        else:
            refined_err.append(re)
        per_view[vid] = {"true": true, "coarse": o.coarse, "refined": o.refined,
                         "coarse_error": ce, "refined_error": re}
    out = {
        "per_view": per_view,
        "mean_coarse_error": float(np.mean(coarse_err)) if coarse_err else 0.0,
        "mean_refined_error": (float(np.mean(refined_err)) if refined_err else 0.0) if all_refined else None,
    }
    if matches:
        mq = {}
        for (a, b), ms in sorted(matches.items()):
            key = pair_key(a, b)
            if key not in gt.true_matches:
                continue
            true_map = gt.matches_for(a, b)
            correct = sum(1 for x, y, _ in ms.pairs if true_map.get(x) == y)
            mq[key] = {
                "n_matches": len(ms),
                "correct": correct,
                "precision": correct / len(ms) if len(ms) else None,
                "recall": correct / len(true_map) if true_map else None,
            }
        out["matches"] = mq
    return out
