"""Core 4D track types, the max-over-time track metric, and the kNN scaffold graph."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, OutOfRangeError, SchemaError
from .jsonio import read_json, write_json

log = logging.getLogger(__name__)

#: Rest lengths below this are clamped (ARAP normalisation divides by them).
REST_LENGTH_FLOOR = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Track:
    """One 3D trajectory sampled at integer frames plus a time-invariant descriptor."""

    id: int
    positions: np.ndarray  # (T, 3)
    feature: np.ndarray  # (d_f,)

    def __post_init__(self):
        pos = _frozen(self.positions)
        feat = _frozen(self.feature)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise InvalidInputError(f"track {self.id}: positions must have shape (T, 3), got {pos.shape}")
        if feat.ndim != 1 or feat.size == 0:
            raise InvalidInputError(f"track {self.id}: feature must be a non-empty vector")
        if not np.all(np.isfinite(pos)):
            raise InvalidInputError(f"track {self.id}: non-finite position")
        if not np.all(np.isfinite(feat)):
            raise InvalidInputError(f"track {self.id}: non-finite feature")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "feature", feat)
        object.__setattr__(self, "id", int(self.id))

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]


class TrackSet:
    """All tracks of one video, stored as stacked arrays.

    ``positions`` has shape (N, T, 3), ``features`` (N, d_f) and ``ids`` (N,).
    Instances are immutable; the arrays are flagged read-only.
    """

    def __init__(self, video_id: str, fps: float, tracks: Sequence[Track]):
        if len(tracks) == 0:
            raise InvalidInputError(f"video {video_id!r}: a track set needs at least one track")
        n_frames = tracks[0].n_frames
        dim = tracks[0].feature.size
        if n_frames < 2:
            raise InvalidInputError(f"video {video_id!r}: need at least 2 frames, got {n_frames}")
        seen = set()
        for tr in tracks:
            if tr.n_frames != n_frames:
                raise InvalidInputError(
                    f"video {video_id!r}: track {tr.id} has {tr.n_frames} frames, expected {n_frames}"
                )
            if tr.feature.size != dim:
                raise InvalidInputError(
                    f"video {video_id!r}: track {tr.id} feature dim {tr.feature.size}, expected {dim}"
                )
            if tr.id in seen:
                raise InvalidInputError(f"video {video_id!r}: duplicate track id {tr.id}")
            seen.add(tr.id)
        if not (math.isfinite(fps) and fps > 0):
            raise InvalidInputError(f"video {video_id!r}: fps must be positive, got {fps}")
        self.video_id = str(video_id)
        self.fps = float(fps)
        self._tracks = tuple(tracks)
        self.positions = _frozen(np.stack([t.positions for t in tracks]))
        self.features = _frozen(np.stack([t.feature for t in tracks]))
        ids = np.array([t.id for t in tracks], dtype=np.int64)
        ids.setflags(write=False)
        self.ids = ids
        self._index = {int(i): k for k, i in enumerate(ids)}

    @classmethod
    def from_arrays(cls, video_id: str, fps: float, ids, positions, features) -> "TrackSet":
        positions = np.asarray(positions, dtype=np.float64)
        features = np.asarray(features, dtype=np.float64)
        tracks = [Track(int(i), p, f) for i, p, f in zip(ids, positions, features)]
        return cls(video_id, fps, tracks)

    @property
    def tracks(self) -> tuple[Track, ...]:
        return self._tracks

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_frames, dtype=np.float64)

    @property
    def n_tracks(self) -> int:
        return len(self._tracks)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def index_of(self, track_id: int) -> int:
        try:
            return self._index[int(track_id)]
        except KeyError:
            raise InvalidInputError(f"video {self.video_id!r}: unknown track id {track_id}") from None

    def indices_of(self, track_ids: Iterable[int]) -> np.ndarray:
        return np.array([self.index_of(i) for i in track_ids], dtype=np.int64)

    def track(self, track_id: int) -> Track:
        return self._tracks[self.index_of(track_id)]

    def subset(self, track_ids: Iterable[int]) -> "TrackSet":
        return TrackSet(self.video_id, self.fps, [self.track(i) for i in track_ids])

    def __len__(self) -> int:
        return self.n_tracks

    def __repr__(self) -> str:
        return (
            f"TrackSet(video_id={self.video_id!r}, n_tracks={self.n_tracks}, "
            f"n_frames={self.n_frames}, feature_dim={self.feature_dim})"
        )

    # --- serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "fps": self.fps,
            "frame_count": self.n_frames,
            "feature_dim": self.feature_dim,
            "tracks": [
                {"id": t.id, "positions": t.positions.tolist(), "feature": t.feature.tolist()}
                for t in self._tracks
            ],
        }

    @classmethod
    def from_dict(cls, data, source: str | None = None) -> "TrackSet":
        return _parse_trackset(data, source)

    def save(self, path) -> None:
        write_json(path, self.to_dict(), compact=True)

    @classmethod
    def load(cls, path) -> "TrackSet":
        return _parse_trackset(read_json(path), str(path))


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _parse_trackset(data, source: str | None) -> TrackSet:
    def fail(msg, loc=None):
        raise SchemaError(msg, location=loc, source=source)

    if not isinstance(data, dict):
        fail("top level must be an object")
    for key in ("video_id", "fps", "frame_count", "feature_dim", "tracks"):
        if key not in data:
            fail("missing required key", key)
    if not isinstance(data["video_id"], str) or not data["video_id"]:
        fail("must be a non-empty string", "video_id")
    if not _is_number(data["fps"]) or data["fps"] <= 0:
        fail("must be a positive number", "fps")
    n_frames = data["frame_count"]
    if not isinstance(n_frames, int) or isinstance(n_frames, bool) or n_frames < 2:
        fail("must be an integer >= 2", "frame_count")
    dim = data["feature_dim"]
    if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
        fail("must be an integer >= 1", "feature_dim")
    raw = data["tracks"]
    if not isinstance(raw, list) or not raw:
        fail("must be a non-empty array", "tracks")
    tracks = []
    seen = set()
    for k, item in enumerate(raw):
        loc = f"tracks[{k}]"
        if not isinstance(item, dict):
            fail("must be an object", loc)
        for key in ("id", "positions", "feature"):
            if key not in item:
                fail("missing required key", f"{loc}.{key}")
        tid = item["id"]
        if not isinstance(tid, int) or isinstance(tid, bool):
            fail("must be an integer", f"{loc}.id")
        if tid in seen:
            fail(f"duplicate track id {tid}", f"{loc}.id")
        seen.add(tid)
        pos = item["positions"]
        if not isinstance(pos, list) or len(pos) != n_frames:
            fail(f"must be an array of {n_frames} points", f"{loc}.positions")
        for t, p in enumerate(pos):
            if not isinstance(p, list) or len(p) != 3 or not all(_is_number(c) for c in p):
                fail("must be [x, y, z] with finite numbers", f"{loc}.positions[{t}]")
        feat = item["feature"]
        if not isinstance(feat, list) or len(feat) != dim or not all(_is_number(c) for c in feat):
            fail(f"must be an array of {dim} finite numbers", f"{loc}.feature")
        tracks.append(Track(tid, np.array(pos, dtype=np.float64), np.array(feat, dtype=np.float64)))
    return TrackSet(data["video_id"], float(data["fps"]), tracks)


# --- metric ------------------------------------------------------------


def track_distance(a: Track, b: Track) -> float:
    """Maximum over frames of the Euclidean distance between two tracks."""
    pa = np.asarray(a.positions if isinstance(a, Track) else a, dtype=np.float64)
    pb = np.asarray(b.positions if isinstance(b, Track) else b, dtype=np.float64)
    if pa.shape != pb.shape:
        raise InvalidInputError(f"track length mismatch: {pa.shape} vs {pb.shape}")
    return float(np.sqrt(((pa - pb) ** 2).sum(axis=-1)).max())


def pairwise_track_distances(positions: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """Matrix of :func:`track_distance` values for stacked (N, T, 3) tracks.

    With ``other`` given, returns the (N, M) cross-distance matrix instead.
    """
    pa = np.asarray(positions, dtype=np.float64)
    pb = pa if other is None else np.asarray(other, dtype=np.float64)
    if pa.shape[1:] != pb.shape[1:]:
        raise InvalidInputError(f"track length mismatch: {pa.shape} vs {pb.shape}")
    out = np.zeros((pa.shape[0], pb.shape[0]))
    for t in range(pa.shape[1]):
        diff = pa[:, None, t, :] - pb[None, :, t, :]
        np.maximum(out, np.sqrt((diff**2).sum(axis=-1)), out=out)
    if other is None:
        # exact symmetry and zero diagonal regardless of rounding
        out = np.maximum(out, out.T)
        np.fill_diagonal(out, 0.0)
    return out


def resample_track(a: Track, query_times) -> np.ndarray:
    """Piecewise-linear position lookup at fractional frame times.

    Integer query times return the stored sample bit-exactly.
    """
    pos = a.positions if isinstance(a, Track) else np.asarray(a, dtype=np.float64)
    q = np.atleast_1d(np.asarray(query_times, dtype=np.float64))
    last = pos.shape[0] - 1
    if np.any(~np.isfinite(q)) or np.any(q < 0) or np.any(q > last):
        bad = q[~((q >= 0) & (q <= last))]
        raise OutOfRangeError(f"query times {bad.tolist()[:5]} outside [0, {last}]")
    i0 = np.minimum(np.floor(q).astype(np.int64), last)
    frac = q - i0
    i1 = np.minimum(i0 + 1, last)
    out = pos[i0] + frac[:, None] * (pos[i1] - pos[i0])
    exact = frac == 0.0
    out[exact] = pos[i0[exact]]
    return out


# --- scaffold graph ----------------------------------------------------


@dataclass(frozen=True)
class ScaffoldGraph:
    """Undirected kNN graph over track ids with per-edge rest lengths."""

    node_ids: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]  # (id_i, id_j) with id_i < id_j
    rest_lengths: tuple[float, ...]

    def __post_init__(self):
        nodes = set(self.node_ids)
        if len(self.edges) != len(self.rest_lengths):
            raise InvalidInputError("edges and rest_lengths differ in length")
        for (i, j), r in zip(self.edges, self.rest_lengths):
            if i == j:
                raise InvalidInputError(f"self edge on node {i}")
            if i not in nodes or j not in nodes:
                raise InvalidInputError(f"edge ({i}, {j}) references an unknown node")
            if not r > 0:
                raise InvalidInputError(f"edge ({i}, {j}) has non-positive rest length {r}")

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Edge endpoints as positions into ``node_ids``."""
        pos = {n: k for k, n in enumerate(self.node_ids)}
        src = np.array([pos[i] for i, _ in self.edges], dtype=np.int64)
        dst = np.array([pos[j] for _, j in self.edges], dtype=np.int64)
        return src, dst

    def to_dict(self) -> dict:
        return {
            "node_ids": list(self.node_ids),
            "edges": [list(e) for e in self.edges],
            "rest_lengths": list(self.rest_lengths),
        }

    @classmethod
    def from_dict(cls, data) -> "ScaffoldGraph":
        return cls(
            tuple(int(i) for i in data["node_ids"]),
            tuple((int(i), int(j)) for i, j in data["edges"]),
            tuple(float(r) for r in data["rest_lengths"]),
        )


def build_scaffold_graph(ts: TrackSet, k: int) -> ScaffoldGraph:
    """Connect every track to its ``k`` nearest neighbours under the track metric.

    Distance ties are broken by track id, so the edge set does not depend on
    the order tracks are stored in.
    """
    n = ts.n_tracks
    if not isinstance(k, (int, np.integer)) or k < 1 or k >= n:
        raise InvalidInputError(f"k must satisfy 1 <= k < {n}, got {k}")
    dist = pairwise_track_distances(ts.positions)
    ids = ts.ids
    edges: dict[tuple[int, int], float] = {}
    for a in range(n):
        others = np.array([b for b in range(n) if b != a])
        order = np.lexsort((ids[others], dist[a, others]))
        for b in others[order[:k]]:
            key = (int(min(ids[a], ids[b])), int(max(ids[a], ids[b])))
            edges[key] = float(dist[a, b])
    keys = sorted(edges)
    rest = []
    for key in keys:
        r = edges[key]
        if r < REST_LENGTH_FLOOR:
            log.warning("edge %s has rest length %.3g; clamped to %g", key, r, REST_LENGTH_FLOOR)
            r = REST_LENGTH_FLOOR
        rest.append(r)
    return ScaffoldGraph(tuple(sorted(int(i) for i in ids)), tuple(keys), tuple(rest))


def farthest_point_subsample(positions: np.ndarray, n_keep: int, ids: np.ndarray | None = None) -> np.ndarray:
    """Greedy farthest-point selection under the track metric.

    Starts from the lowest id (or index 0) and returns the selected indices
    in selection order.
    """
    n = positions.shape[0]
    if n_keep >= n:
        return np.arange(n)
    if n_keep < 1:
        raise InvalidInputError(f"n_keep must be >= 1, got {n_keep}")
    start = 0 if ids is None else int(np.argmin(ids))
    chosen = [start]
    mind = np.full(n, np.inf)
    for _ in range(n_keep - 1):
        last = positions[chosen[-1]]
        d = np.sqrt(((positions - last[None]) ** 2).sum(axis=-1)).max(axis=1)
        np.minimum(mind, d, out=mind)
        mind[chosen] = -1.0
        chosen.append(int(np.argmax(mind)))
    return np.array(chosen, dtype=np.int64)
