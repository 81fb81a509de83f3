"""Frame-level synchronisation by dynamic time warping over matched tracks.

Sign convention: a view's offset ``d`` means reference frame ``t`` shows the
same instant as that view's frame ``t + d`` (query minus reference).
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .config import SyncConfig
from .errors import InvalidInputError, SchemaError
from .jsonio import read_json, write_json
from .matching import MatchSet
from .tracks import TrackSet

log = logging.getLogger(__name__)

# a refined offset may move at most this far from its coarse value
MAX_REFINE_SHIFT = 1.5


@dataclass(frozen=True)
class GeoCostMatrix:
    cost: np.ndarray  # (T_a, T_b)
    n_matches: int

    def __post_init__(self):
        c = np.asarray(self.cost, dtype=np.float64)
        if c.ndim != 2 or c.size == 0:
            raise InvalidInputError("cost matrix must be a non-empty 2D array")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise InvalidInputError("cost matrix entries must be finite and non-negative")
        if self.n_matches < 1:
            raise InvalidInputError("cost matrix needs at least one match")
        object.__setattr__(self, "cost", c)


@dataclass(frozen=True)
class DtwPath:
    steps: tuple[tuple[int, int], ...]
    total_cost: float

    def __post_init__(self):
        steps = tuple((int(i), int(j)) for i, j in self.steps)
        if not steps or steps[0] != (0, 0):
            raise InvalidInputError("a warping path starts at (0, 0)")
        for (i0, j0), (i1, j1) in zip(steps, steps[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise InvalidInputError(f"illegal warping step ({i0}, {j0}) -> ({i1}, {j1})")
        object.__setattr__(self, "steps", steps)


@dataclass
class ViewOffset:
    coarse: int
    refined: float | None = None
    flags: list[str] = field(default_factory=list)


@dataclass
class SyncResult:
    reference: str
    offsets: dict[str, ViewOffset]
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        ref = self.offsets.get(self.reference)
        if ref is None:
            raise InvalidInputError(f"reference video {self.reference!r} has no offset entry")
        if ref.coarse != 0 or (ref.refined is not None and ref.refined != 0.0):
            raise InvalidInputError("reference video offset must be exactly 0")
        for vid, o in self.offsets.items():
            if o.refined is not None and abs(o.refined - o.coarse) > MAX_REFINE_SHIFT + 1e-9:
                raise InvalidInputError(
                    f"{vid}: refined offset {o.refined} is more than {MAX_REFINE_SHIFT} frames from coarse {o.coarse}"
                )

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "offsets": {
                vid: {"coarse": o.coarse, "refined": o.refined} for vid, o in sorted(self.offsets.items())
            },
            "flags": {vid: list(o.flags) for vid, o in sorted(self.offsets.items()) if o.flags},
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, data, source: str | None = None) -> "SyncResult":
        def fail(msg, loc=None):
            raise SchemaError(msg, location=loc, source=source)

        if not isinstance(data, dict):
            fail("top level must be an object")
        for key in ("reference", "offsets"):
            if key not in data:
                fail("missing required key", key)
        if not isinstance(data["offsets"], dict):
            fail("must be an object", "offsets")
        flags = data.get("flags", {}) or {}
        offsets = {}
        for vid, entry in data["offsets"].items():
            loc = f"offsets.{vid}"
            if not isinstance(entry, dict) or "coarse" not in entry:
                fail("must be an object with 'coarse'", loc)
            coarse = entry["coarse"]
            if not isinstance(coarse, int) or isinstance(coarse, bool):
                fail("must be an integer", f"{loc}.coarse")
            refined = entry.get("refined")
            if refined is not None and (isinstance(refined, bool) or not isinstance(refined, (int, float))):
                fail("must be a number or null", f"{loc}.refined")
            offsets[vid] = ViewOffset(coarse, None if refined is None else float(refined), list(flags.get(vid, [])))
        try:
            return cls(str(data["reference"]), offsets, data.get("diagnostics", {}) or {})
        except InvalidInputError as exc:
            fail(str(exc), "offsets")

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "SyncResult":
        return cls.from_dict(read_json(path), str(path))


def geo_cost_matrix(matches: MatchSet, a: TrackSet, b: TrackSet) -> GeoCostMatrix:
    """Mean L1 distance between matched tracks for every frame pair (i in a, j in b)."""
    if len(matches) == 0:
        raise InvalidInputError(
            f"no matches between {a.video_id!r} and {b.video_id!r}; re-match or relax min_score"
        )
    ia = a.indices_of(matches.ids_a)
    ib = b.indices_of(matches.ids_b)
    pa = np.ascontiguousarray(a.positions[ia].transpose(1, 0, 2))  # (T_a, N', 3)
    pb = np.ascontiguousarray(b.positions[ib].transpose(1, 0, 2))  # (T_b, N', 3)
    n = len(matches)
    cost = np.empty((pa.shape[0], pb.shape[0]))
    for i in range(pa.shape[0]):
        cost[i] = np.abs(pa[i][None] - pb).sum(axis=(1, 2)) / n
    return GeoCostMatrix(cost, n)


def dtw_align(d: GeoCostMatrix | np.ndarray, band: int | None = None) -> DtwPath:
    """Minimum accumulated-cost monotone path from (0, 0) to (T_a-1, T_b-1).

    Steps are (1, 0), (0, 1) and (1, 1). On backtracking ties the diagonal
    predecessor wins, then the one reached by a (1, 0) step. ``band``
    restricts cells to ``|i * (T_b-1)/(T_a-1) - j| <= band``.
    """
    c = d.cost if isinstance(d, GeoCostMatrix) else np.asarray(d, dtype=np.float64)
    ta, tb = c.shape
    acc = np.full((ta, tb), np.inf)
    allowed = np.ones((ta, tb), dtype=bool)
    if band is not None:
        ii, jj = np.mgrid[0:ta, 0:tb]
        slope = (tb - 1) / (ta - 1) if ta > 1 else 0.0
        allowed = np.abs(ii * slope - jj) <= band
        allowed[0, 0] = allowed[-1, -1] = True
    acc[0, 0] = c[0, 0]
    for j in range(1, tb):
        if allowed[0, j]:
            acc[0, j] = acc[0, j - 1] + c[0, j]
    for i in range(1, ta):
        row, prev = acc[i], acc[i - 1]
        ci = c[i]
        if allowed[i, 0]:
            row[0] = prev[0] + ci[0]
        for j in range(1, tb):
            if allowed[i, j]:
                best = min(prev[j - 1], prev[j], row[j - 1])
                row[j] = best + ci[j]
    if not np.isfinite(acc[-1, -1]):
        raise InvalidInputError(f"band {band} admits no path through a {ta}x{tb} matrix")
    steps = [(ta - 1, tb - 1)]
    i, j = ta - 1, tb - 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            cands = ((acc[i - 1, j - 1], 0), (acc[i - 1, j], 1), (acc[i, j - 1], 2))
            _, k = min(cands)
            if k == 0:
                i, j = i - 1, j - 1
            elif k == 1:
                i -= 1
            else:
                j -= 1
        steps.append((i, j))
    steps.reverse()
    return DtwPath(tuple(steps), float(acc[-1, -1]))


def offset_histogram(path: DtwPath) -> Counter:
    return Counter(j - i for i, j in path.steps)


def offset_from_path(path: DtwPath) -> int:
    """Most frequent ``j - i`` along the path.

    Ties go to the smallest magnitude, then to the negative value.
    """
    hist = offset_histogram(path)
    return min(hist, key=lambda k: (-hist[k], abs(k), k))


def implied_overlap(n_ref: int, n_query: int, offset: int) -> int:
    """Frames shared by the two clips if reference frame t matches query frame t + offset."""
    lo = max(0, -offset)
    hi = min(n_ref - 1, n_query - 1 - offset)
    return max(0, hi - lo + 1)


def sync_pair(ref: TrackSet, query: TrackSet, matches: MatchSet, config: SyncConfig | None = None) -> dict:
    config = config or SyncConfig()
    if matches.source_video != ref.video_id or matches.target_video != query.video_id:
        if matches.source_video == query.video_id and matches.target_video == ref.video_id:
            matches = matches.swapped()
        else:
            raise InvalidInputError(
                f"match set is for ({matches.source_video!r}, {matches.target_video!r}), "
                f"not ({ref.video_id!r}, {query.video_id!r})"
            )
    geo = geo_cost_matrix(matches, ref, query)
    path = dtw_align(geo, config.band)
    offset = offset_from_path(path)
    hist = offset_histogram(path)
    overlap = implied_overlap(ref.n_frames, query.n_frames, offset)
    flags = []
    if overlap < config.min_overlap:
        flags.append("unreliable_overlap")
        log.warning(
            "pair (%s, %s): implied overlap %d < %d frames; offset unreliable",
            ref.video_id, query.video_id, overlap, config.min_overlap,
        )
    return {
        "offset": offset,
        "path_cost": path.total_cost,
        "path_length": len(path.steps),
        "n_matches": geo.n_matches,
        "overlap": overlap,
        "histogram": {int(k): int(v) for k, v in sorted(hist.items())},
        "flags": flags,
    }


def pair_key(ref: str, query: str) -> str:
    return f"{ref}__{query}"


def sync_all(
    sets: Sequence[TrackSet],
    matches: Mapping[tuple[str, str], MatchSet],
    reference: str,
    config: SyncConfig | None = None,
    executor=None,
) -> SyncResult:
    """Coarse offsets for every view against ``reference``.

    ``matches`` is keyed by ``(reference, view)``; a match set stored under
    the reversed key is accepted and flipped. ``executor`` (anything with a
    ``map``) runs the per-pair work in parallel; output order is fixed.
    """
    by_id = {ts.video_id: ts for ts in sets}
    if reference not in by_id:
        raise InvalidInputError(f"reference video {reference!r} not among inputs {sorted(by_id)}")
    ref = by_id[reference]
    queries = [ts for ts in sets if ts.video_id != reference]
    jobs = []
    for q in queries:
        ms = matches.get((reference, q.video_id))
        if ms is None:
            rev = matches.get((q.video_id, reference))
            if rev is None:
                raise InvalidInputError(f"missing match set for pair ({reference!r}, {q.video_id!r})")
            ms = rev.swapped()
        jobs.append((q, ms))

    def run(job):
        q, ms = job
        return sync_pair(ref, q, ms, config)

    results = list(executor.map(run, jobs)) if executor is not None else [run(j) for j in jobs]
    offsets = {reference: ViewOffset(0)}
    pairs = {}
    for (q, _), res in zip(jobs, results):
        offsets[q.video_id] = ViewOffset(int(res["offset"]), None, list(res["flags"]))
        pairs[pair_key(reference, q.video_id)] = res
    return SyncResult(reference, offsets, {"pairs": pairs})
