import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rendered
from egotwin.camera import Intrinsics
from egotwin.dataset import Fragment
from egotwin.errors import InvalidCount, NoKeyframes
from egotwin.geometry import Pose
from egotwin.metrics import miou
from egotwin.segmentation import (
    PartMask,
    RegionMap,
    keyframe_masks,
    motion_ratios,
    propagate_masks,
    region_vote,
    select_keyframes,
)
from egotwin.trackfit import tracks_to_world


def test_select_keyframes_examples():
    assert select_keyframes(10, 2).tolist() == [0, 9]
    assert select_keyframes(9, 3).tolist() == [0, 4, 8]
    assert select_keyframes(7, 7).tolist() == list(range(7))
    with pytest.raises(InvalidCount):
        select_keyframes(5, 0)
    with pytest.raises(InvalidCount):
        select_keyframes(5, 6)


def _two_regions():
    lab = np.zeros((10, 10), int)
    lab[:, 5:] = 1
    return RegionMap(lab)


def test_region_vote_ratio_arithmetic():
    lab = _two_regions()
    moving = [(2, 7)] * 8
    static = [(2, 7)] * 2 + [(3, 1)] * 5
    _, _, gamma = motion_ratios(lab, moving, static, 1e-6)
    assert gamma[1] == pytest.approx(0.8, abs=1e-6)
    mask = region_vote(lab, moving, static, eta_m=0.6, epsilon=1e-6).mask
    assert mask[:, 5:].all() and not mask[:, :5].any()


def test_region_without_moving_tracks_is_excluded():
    lab = _two_regions()
    assert not region_vote(lab, [], [(1, 1)]).mask.any()
    # a region that no track projects into stays out as well
    assert not region_vote(lab, [(1, 7)] * 3, []).mask[:, :5].any()


def test_projections_outside_the_image_are_ignored():
    lab = _two_regions()
    m = region_vote(lab, [(-1, 3), (4, 10), (20, 20)], []).mask
    assert not m.any()


labels_st = st.integers(1, 6).flatmap(lambda k: st.lists(st.integers(0, k - 1), min_size=64, max_size=64))
proj_st = st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=30)


@settings(max_examples=100, deadline=None)
@given(labels_st, proj_st, proj_st)
def test_region_vote_is_union_of_whole_regions(labels, moving, static):
    lab = np.array(labels).reshape(8, 8)
    m = region_vote(lab, moving, static).mask
    for r in np.unique(lab):
        vals = m[lab == r]
        assert vals.all() or not vals.any()


@settings(max_examples=100, deadline=None)
@given(labels_st, proj_st, proj_st, st.tuples(st.integers(0, 7), st.integers(0, 7)))
def test_region_vote_monotone_in_moving_evidence(labels, moving, static, extra):
    lab = np.array(labels).reshape(8, 8)
    before = region_vote(lab, moving, static).mask
    after = region_vote(lab, moving + [extra], static).mask
    assert np.all(after[before])


def test_synthetic_keyframe_vote_iou():
    frag, gt = rendered("cabinet-door", seed=1, noisy=True)
    moving = np.flatnonzero(gt.track_labels == 1)
    static = np.flatnonzero(gt.track_labels == 0)
    kms = keyframe_masks(tracks_to_world(frag.tracks, gt.camera_poses), moving, static, gt.camera_poses, frag.region_maps, frag.intrinsics)
    ious = [miou(km.mask[None], gt.part_masks[km.frame][None]) for km in kms]
    assert min(ious) >= 0.8


K_SMALL = Intrinsics(50.0, 50.0, 19.5, 14.5, 40, 30)


def test_propagation_static_identity():
    d = np.full((30, 40), 1.5)
    frag = Fragment([d] * 5, K_SMALL)
    km = np.zeros((30, 40), bool)
    km[10:20, 12:25] = True
    poses = [Pose.identity()] * 5
    out = propagate_masks([PartMask(km, 0)], frag, poses, poses)
    for pm in out:
        assert np.array_equal(pm.mask, km)


def test_propagation_keyframe_fixed_point_and_errors():
    frag, gt = rendered("drawer")
    kq = 30
    junk = np.zeros_like(gt.part_masks[kq])
    junk[5:9, 5:9] = True  # deliberately wrong: must come back unchanged
    out = propagate_masks([PartMask(gt.part_masks[0], 0), PartMask(junk, kq)], frag, gt.part_poses, gt.camera_poses)
    assert np.array_equal(out[kq].mask, junk)
    assert np.array_equal(out[0].mask, gt.part_masks[0])
    with pytest.raises(NoKeyframes):
        propagate_masks([], frag, gt.part_poses, gt.camera_poses)


def test_propagation_drawer_iou():
    frag, gt = rendered("drawer", seed=2, noisy=True)
    moving = np.flatnonzero(gt.track_labels == 1)
    static = np.flatnonzero(gt.track_labels == 0)
    kms = keyframe_masks(tracks_to_world(frag.tracks, gt.camera_poses), moving, static, gt.camera_poses, frag.region_maps, frag.intrinsics)
    out = propagate_masks(kms, frag, gt.part_poses, gt.camera_poses)
    assert miou(np.stack([m.mask for m in out]), gt.part_masks) >= 0.75
    # without region maps the closing fallback still tracks the part
    bare = Fragment(frag.depths, frag.intrinsics)
    out2 = propagate_masks(kms, bare, gt.part_poses, gt.camera_poses)
    assert miou(np.stack([m.mask for m in out2]), gt.part_masks) >= 0.75
