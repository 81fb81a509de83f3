from __future__ import annotations

import numpy as np
import pytest
from pydantic import ValidationError

from tracksync.config import SceneConfig
from tracksync.errors import InvalidInputError
from tracksync.matching import MatchSet
from tracksync.sync import SyncResult, ViewOffset
from tracksync.synthgen import LoadedGroundTruth, generate_scene, scene_diameter, score_sync

SMALL = dict(n_clusters=2, points_per_cluster=8, frames=30)


def test_deterministic(tmp_path):
    cfg = SceneConfig(n_views=3, position_noise_sigma=0.01, **SMALL)
    (a, ga), (b, gb) = generate_scene(cfg), generate_scene(cfg)
    for x, y in zip(a, b):
        x.save(tmp_path / "x.json")
        y.save(tmp_path / "y.json")
        assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()
    ga.save(tmp_path / "g1.json")
    gb.save(tmp_path / "g2.json")
    assert (tmp_path / "g1.json").read_bytes() == (tmp_path / "g2.json").read_bytes()
    other, _ = generate_scene(cfg.model_copy(update={"seed": 1}))
    assert not np.array_equal(other[0].positions, a[0].positions)


def test_explicit_offsets_used_verbatim():
    _, gt = generate_scene(SceneConfig(n_views=3, offsets=[0.0, 2.5, -4.0], **SMALL))
    assert gt.true_offsets == {"view0": 0.0, "view1": 2.5, "view2": -4.0}


def test_rigidity_within_clusters():
    sets, gt = generate_scene(SceneConfig(n_views=1, **SMALL))
    pts = gt.canonical_positions(np.linspace(-3, 30, 67))
    for c in range(2):
        block = pts[c * 8:(c + 1) * 8]
        d = np.linalg.norm(block[:, None] - block[None], axis=-1)  # (8, 8, S)
        assert np.max(np.abs(d - d[..., :1])) <= 1e-9


def test_offset_construction():
    sets, gt = generate_scene(SceneConfig(n_views=3, offsets=[0, 3.3, -7.6], **SMALL))
    for ts in sets:
        d = gt.true_offsets[ts.video_id]
        world = gt.canonical_positions(np.arange(30.0) - d)
        pts = gt.point_of_id[ts.video_id]
        assert np.allclose(ts.positions, world[pts], atol=1e-12)


def test_integer_offset_frame_correspondence():
    sets, gt = generate_scene(SceneConfig(n_views=2, offsets=[0, 4], feature_noise_sigma=0.0, **SMALL))
    a, b = sets
    k = 4
    match = gt.matches_for("view0", "view1")
    ia = a.indices_of(list(match))
    ib = b.indices_of(list(match.values()))
    # reference frame t is view frame t + k
    assert np.allclose(a.positions[ia, :30 - k], b.positions[ib, k:], atol=1e-12)


def test_zero_offset_views_equal_up_to_permutation():
    sets, gt = generate_scene(SceneConfig(n_views=2, offset_range=(0, 0), feature_noise_sigma=0.0, **SMALL))
    a, b = sets
    match = gt.matches_for("view0", "view1")
    assert sorted(match.values()) == list(range(16))
    for ia, ib in match.items():
        assert np.array_equal(a.track(ia).positions, b.track(ib).positions)
        assert np.array_equal(a.track(ia).feature, b.track(ib).feature)


def test_track_order_permuted_per_view():
    sets, gt = generate_scene(SceneConfig(n_views=3, **SMALL))
    assert gt.point_of_id["view0"] != gt.point_of_id["view1"]
    assert sorted(gt.point_of_id["view1"]) == list(range(16))


def test_features_unit_norm():
    sets, _ = generate_scene(SceneConfig(n_views=2, **SMALL))
    assert np.allclose(np.linalg.norm(sets[1].features, axis=1), 1.0)


def test_offsets_drawn_in_range():
    _, gt = generate_scene(SceneConfig(n_views=6, offset_range=(-3, 5), fractional_offsets=False, **SMALL))
    vals = list(gt.true_offsets.values())
    assert vals[0] == 0 and all(-3 <= v <= 5 and v == int(v) for v in vals)


def test_excitation_guard():
    with pytest.raises(InvalidInputError, match="excitation"):
        generate_scene(SceneConfig(motion_scale=0.0, **SMALL))


@pytest.mark.parametrize(
    "update, field",
    [({"n_views": 0}, "n_views"), ({"frames": 4}, "frames"), ({"offset_range": (3, 1)}, "offset_range"),
     ({"offsets": [0, 1]}, "offsets"), ({"offsets": [1, 0, 0, 0, 0]}, "offsets"),
     ({"position_noise_sigma": -1}, "position_noise_sigma")],
)
def test_config_errors_name_the_field(update, field):
    with pytest.raises(ValidationError, match=field):
        SceneConfig(**update)


def test_scene_diameter():
    sets, _ = generate_scene(SceneConfig(n_views=1, **SMALL))
    d = scene_diameter(sets)
    pos = sets[0].positions
    brute = max(np.linalg.norm(pos[:, t].max(axis=0) - pos[:, t].min(axis=0)) for t in range(30))
    assert d == brute > 0


# --- score_sync --------------------------------------------------------------


def gt_stub(offsets, matches=None):
    return LoadedGroundTruth("view0", offsets, matches or {}, {})


def test_score_example():
    res = SyncResult("view0", {"view0": ViewOffset(0, 0.0), "view1": ViewOffset(7, 7.2)})
    out = score_sync(res, gt_stub({"view0": 0.0, "view1": 7.0}))
    assert out["mean_refined_error"] == pytest.approx(0.2)
    assert out["mean_coarse_error"] == 0.0


def test_score_perfect():
    res = SyncResult("view0", {"view0": ViewOffset(0, 0.0), "view1": ViewOffset(-3, -3.0), "view2": ViewOffset(5, 5.0)})
    out = score_sync(res, gt_stub({"view0": 0.0, "view1": -3.0, "view2": 5.0}))
    assert out["mean_coarse_error"] == out["mean_refined_error"] == 0.0


def test_score_coarse_only_is_absent():
    res = SyncResult("view0", {"view0": ViewOffset(0), "view1": ViewOffset(7)})
    out = score_sync(res, gt_stub({"view0": 0.0, "view1": 7.4}))
    assert out["mean_refined_error"] is None
    assert out["per_view"]["view1"]["refined_error"] is None
    assert out["mean_coarse_error"] == pytest.approx(0.4)


def test_score_id_mismatch():
    res = SyncResult("view0", {"view0": ViewOffset(0), "view9": ViewOffset(7)})
    with pytest.raises(InvalidInputError, match="view ids differ"):
        score_sync(res, gt_stub({"view0": 0.0, "view1": 7.0}))


def test_score_match_precision_recall():
    gt = gt_stub({"view0": 0.0, "view1": 0.0}, {"view0__view1": [(0, 2), (1, 0), (2, 1)]})
    ms = MatchSet("view0", "view1", ((0, 2, 1.0), (1, 1, 0.5)))
    out = score_sync(SyncResult("view0", {"view0": ViewOffset(0), "view1": ViewOffset(0)}), gt,
                     {("view0", "view1"): ms})
    q = out["matches"]["view0__view1"]
    assert q["correct"] == 1 and q["precision"] == 0.5 and q["recall"] == pytest.approx(1 / 3)


def test_ground_truth_round_trip(tmp_path):
    _, gt = generate_scene(SceneConfig(n_views=2, **SMALL))
    gt.save(tmp_path / "gt.json")
    back = LoadedGroundTruth.load(tmp_path / "gt.json")
    assert back.true_offsets == gt.true_offsets
    assert back.matches_for("view0", "view1") == gt.matches_for("view0", "view1")
