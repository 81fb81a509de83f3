"""Validated configuration models.

Every model forbids unknown keys so a typo in a config file fails loudly with
the field name instead of being silently ignored.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import SchemaError
from .jsonio import read_json


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SolverConfig(_Model):
    """Fused Gromov-Wasserstein matching knobs."""

    alpha: float = Field(0.5, ge=0.0)
    epsilon: float = Field(5e-3, gt=0.0)
    # epsilon is shrunk (x0.25 per stall) down to epsilon * this ratio
    epsilon_floor_ratio: float = Field(1e-2, gt=0.0, le=1.0)
    outer_iter: int = Field(50, ge=1)
    inner_iter: int = Field(200, ge=1)
    n_max: int = Field(512, ge=1)
    # absolute threshold on plan entries; None means half the mass of a
    # perfect one-to-one match, 0.5 / max(N_a, N_b)
    min_score: Optional[float] = Field(None, ge=0.0)
    max_matches: Optional[int] = Field(None, ge=1)
    init: Literal["product", "profile"] = "product"
    tol: float = Field(1e-9, ge=0.0)


class SyncConfig(_Model):
    band: Optional[int] = Field(None, ge=0)
    min_overlap: int = Field(10, ge=1)


class SplineConfig(_Model):
    # None -> max(4, ceil(T / 5))
    n_control: Optional[int] = Field(None, ge=2)


class RefineConfig(_Model):
    lambda_align: float = Field(1.0, ge=0.0)
    lambda_fit: float = Field(1.0, ge=0.0)
    lambda_arap: float = Field(0.1, ge=0.0)
    lambda_vel: float = Field(0.01, ge=0.0)
    lambda_acc: float = Field(0.01, ge=0.0)
    samples_per_frame: int = Field(4, ge=1)
    max_nodes: int = Field(64, ge=2)
    graph_k: int = Field(4, ge=1)
    lr_offset: float = Field(1e-2, gt=0.0)
    lr_control: float = Field(1e-3, gt=0.0)
    max_iter: int = Field(2000, ge=1)
    grad_tol: float = Field(1e-8, ge=0.0)
    improvement_tol: float = Field(1e-10, ge=0.0)
    patience: int = Field(20, ge=1)
    # divergence guard; cannot exceed the 1.5-frame bound a SyncResult accepts
    max_shift: float = Field(1.5, gt=0.0, le=1.5)
    unidentifiable_tol: float = Field(1e-12, ge=0.0)


class SceneConfig(_Model):
    """Synthetic multi-view scene description (defaults: desk-scale preset)."""

    n_clusters: int = Field(3, ge=1)
    points_per_cluster: int = Field(64, ge=1)
    n_views: int = Field(5, ge=1)
    frames: int = Field(120, ge=8)
    fps: float = Field(30.0, gt=0.0)
    offset_range: tuple[float, float] = (-30.0, 30.0)
    # explicit per-view offsets (view 0 first, must be 0); overrides offset_range
    offsets: Optional[list[float]] = None
    fractional_offsets: bool = True
    position_noise_sigma: float = Field(0.0, ge=0.0)
    feature_dim: int = Field(32, ge=1)
    feature_noise_sigma: float = Field(0.1, ge=0.0)
    motion_smoothness: float = Field(20.0, gt=0.0)
    cluster_radius: float = Field(0.5, gt=0.0)
    motion_scale: float = Field(1.0, ge=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_range(self):
        lo, hi = self.offset_range
        if lo > hi:
            raise ValueError(f"offset_range: min {lo} exceeds max {hi}")
        if self.offsets is not None:
            if len(self.offsets) != self.n_views:
                raise ValueError(f"offsets: expected {self.n_views} values, got {len(self.offsets)}")
            if self.offsets[0] != 0:
                raise ValueError("offsets: the reference view (first entry) must have offset 0")
        return self


class StageToggles(_Model):
    gen: bool = True
    match: bool = True
    sync: bool = True
    refine: bool = True
    eval: bool = True


class PipelineConfig(_Model):
    seed: Optional[int] = None
    scene: SceneConfig = SceneConfig()
    # when given, these track-set files are used instead of generating
    tracks: Optional[list[str]] = None
    ground_truth: Optional[str] = None
    reference: Optional[str] = None
    stages: StageToggles = StageToggles()
    matching: SolverConfig = SolverConfig()
    sync: SyncConfig = SyncConfig()
    spline: SplineConfig = SplineConfig()
    refine: RefineConfig = RefineConfig()
    report_format: Literal["json", "csv"] = "json"
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check_paths(self):
        if self.tracks is not None:
            for p in self.tracks:
                if not Path(p).exists():
                    raise ValueError(f"tracks: file {p!r} does not exist")
        return self


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def load_model(cls, source, overrides: dict | None = None):
    """Build a config model from a JSON path, a dict, or ``None`` (defaults).

    Validation problems are raised as :class:`SchemaError` naming the field.
    """
    if source is None:
        data = {}
    elif isinstance(source, dict):
        data = dict(source)
    else:
        data = read_json(source)
        if not isinstance(data, dict):
            raise SchemaError("config must be a JSON object", source=str(source))
    if overrides:
        data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        raise SchemaError(format_validation_error(exc), source=None if isinstance(source, dict) else str(source)) from None
