"""Cross-video track matching and temporal synchronisation.

Pipeline: fused Gromov-Wasserstein matching of track sets, coarse frame
offsets by dynamic time warping, and sub-frame refinement on Hermite spline
scaffolds. A synthetic scene generator provides ground truth for testing.
"""

from .config import PipelineConfig, RefineConfig, SceneConfig, SolverConfig, SplineConfig, SyncConfig
from .errors import InvalidInputError, NumericalError, OutOfRangeError, SchemaError, TrackSyncError
from .matching import MatchSet, fgw_solve, hungarian_extract, match_track_sets, sinkhorn_inner
from .refine import build_refine_problem, refine_offsets
from .spline import SplineScaffold, SplineTrajectory, eval_spline, fit_spline
from .sync import SyncResult, dtw_align, geo_cost_matrix, offset_from_path, sync_all
from .synthgen import generate_scene, score_sync
from .tracks import ScaffoldGraph, Track, TrackSet, build_scaffold_graph

__version__ = "0.1.0"

__all__ = [
    "InvalidInputError", "MatchSet", "NumericalError", "OutOfRangeError", "PipelineConfig", "RefineConfig",
    "ScaffoldGraph", "SceneConfig", "SchemaError", "SolverConfig", "SplineConfig", "SplineScaffold",
    "SplineTrajectory", "SyncConfig", "SyncResult", "Track", "TrackSet", "TrackSyncError",
    "build_refine_problem", "build_scaffold_graph", "dtw_align", "eval_spline", "fgw_solve", "fit_spline",
    "generate_scene", "geo_cost_matrix", "hungarian_extract", "match_track_sets", "offset_from_path",
    "refine_offsets", "score_sync", "sinkhorn_inner", "sync_all",
]
