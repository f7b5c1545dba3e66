import numpy as np
import pytest

from pointvoc.geometry import (
    AllBehindCamera,
    Box2D,
    Box3D,
    CameraModel,
    corners_of_box3d,
    iou_2d,
    iou_3d,
    iou_3d_oracle_mc,
    points_in_box,
    project_box_to_2d,
    yaw_rotation,
)


def make_camera(eye, target, fx=140.0, width=128, height=128):
    """Look-at pinhole: x right, y down, z forward (independent of library code)."""
    eye = np.asarray(eye, float)
    fwd = np.asarray(target, float) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return CameraModel(
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
        rotation=rot, translation=-rot @ eye, width=width, height=height,
    )


def random_box(rng, center_span=2.0, size_lo=0.4, size_hi=2.0):
    return Box3D(
        center=rng.uniform(-center_span, center_span, 3),
        size=rng.uniform(size_lo, size_hi, 3),
        yaw=rng.uniform(-np.pi, np.pi),
    )


# ---------------------------------------------------------------- corners


def test_corners_unit_cube_identity():
    box = Box3D(center=np.zeros(3), size=np.ones(3), yaw=0.0)
    corners = corners_of_box3d(box)
    expected = {(sx, sy, sz) for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)}
    got = {tuple(np.round(c, 12)) for c in corners}
    assert got == expected
    assert np.allclose(corners.mean(axis=0), box.center)


def test_corners_yaw_quarter_turn_same_set():
    a = corners_of_box3d(Box3D(np.zeros(3), np.ones(3), 0.0))
    b = corners_of_box3d(Box3D(np.zeros(3), np.ones(3), np.pi / 2))
    set_a = {tuple(np.round(c, 9)) for c in a}
    set_b = {tuple(np.round(c, 9)) for c in b}
    assert set_a == set_b


def test_corners_match_rotation_oracle():
    # independent construction: rotate each +-size/2 offset by R_z(pi/6) by hand
    center = np.array([1.0, 2.0, 3.0])
    size = np.array([2.0, 4.0, 6.0])
    yaw = np.pi / 6
    box = Box3D(center, size, yaw)
    c, s = np.cos(yaw), np.sin(yaw)
    expected = []
    for sx, sy, sz in [(-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1),
                       (-1, -1, 1), (1, -1, 1), (1, 1, 1), (-1, 1, 1)]:
        ox, oy, oz = sx * size[0] / 2, sy * size[1] / 2, sz * size[2] / 2
        expected.append([center[0] + c * ox - s * oy, center[1] + s * ox + c * oy, center[2] + oz])
    assert np.allclose(corners_of_box3d(box), np.array(expected), atol=1e-12)


def test_box_invariants_enforced():
    with pytest.raises(ValueError):
        Box3D(np.zeros(3), np.array([1.0, -1.0, 1.0]), 0.0)
    assert Box3D(np.zeros(3), np.ones(3), 3 * np.pi).yaw == pytest.approx(-np.pi)


# ---------------------------------------------------------------- projection


def test_projection_centered_box():
    cam = make_camera(eye=[0.0, -4.0, 0.0], target=[0.0, 0.0, 0.0])
    box = Box3D(np.zeros(3), np.array([1.0, 1.0, 1.0]), 0.0)
    rect = project_box_to_2d(box, cam)
    mid = (rect.lo + rect.hi) / 2.0
    assert np.allclose(mid, [cam.cx, cam.cy], atol=1e-9)


def test_projection_all_behind_camera():
    cam = make_camera(eye=[0.0, -4.0, 0.0], target=[0.0, 0.0, 0.0])
    box = Box3D(np.array([0.0, -8.0, 0.0]), np.ones(3), 0.3)
    with pytest.raises(AllBehindCamera):
        project_box_to_2d(box, cam)


def test_projection_matches_per_corner_pinhole():
    rng = np.random.default_rng(42)
    cam = make_camera(eye=[0.4, 0.3, 2.4], target=[3.0, 3.0, 1.0])
    for _ in range(50):
        box = Box3D(rng.uniform(1.5, 4.5, 3) * np.array([1, 1, 0.4]),
                    rng.uniform(0.3, 1.2, 3), rng.uniform(-np.pi, np.pi))
        rect = project_box_to_2d(box, cam)
        # oracle: project every corner with the raw pinhole formula
        us, vs = [], []
        for corner in corners_of_box3d(box):
            p = cam.rotation @ corner + cam.translation
            assert p[2] > 0  # scenes keep objects in front by construction
            us.append(cam.fx * p[0] / p[2] + cam.cx)
            vs.append(cam.fy * p[1] / p[2] + cam.cy)
        lo = np.clip([min(us), min(vs)], 0, [cam.width, cam.height])
        hi = np.clip([max(us), max(vs)], 0, [cam.width, cam.height])
        assert np.allclose(rect.lo, lo, atol=1e-9)
        assert np.allclose(rect.hi, hi, atol=1e-9)


def test_projection_rect_contains_front_corner_projections():
    rng = np.random.default_rng(3)
    cam = make_camera(eye=[0.2, 0.2, 2.0], target=[2.0, 2.0, 1.0])
    for _ in range(100):
        box = Box3D(rng.uniform(-1.0, 5.0, 3), rng.uniform(0.2, 2.0, 3),
                    rng.uniform(-np.pi, np.pi))
        cam_pts = cam.world_to_camera(corners_of_box3d(box))
        front = cam_pts[cam_pts[:, 2] > 0]
        if len(front) == 0:
            continue
        rect = project_box_to_2d(box, cam)
        u = cam.fx * front[:, 0] / front[:, 2] + cam.cx
        v = cam.fy * front[:, 1] / front[:, 2] + cam.cy
        unclipped_lo = np.array([u.min(), v.min()])
        unclipped_hi = np.array([u.max(), v.max()])
        # the clipped rect is exactly the unclipped one intersected with the image
        assert np.allclose(rect.lo, np.clip(unclipped_lo, 0, [cam.width, cam.height]))
        assert np.allclose(rect.hi, np.clip(unclipped_hi, 0, [cam.width, cam.height]))


# ---------------------------------------------------------------- containment


def test_center_is_contained():
    box = Box3D(np.array([1.0, -2.0, 0.5]), np.array([0.8, 1.2, 0.6]), 0.7)
    assert list(points_in_box(box.center[None, :], box)) == [0]


def test_point_just_outside_face():
    box = Box3D(np.zeros(3), np.array([2.0, 1.0, 1.0]), 0.0)
    p = np.array([[1.0 + 1e-6, 0.0, 0.0]])
    assert len(points_in_box(p, box)) == 0


def test_containment_against_bruteforce_rotation():
    rng = np.random.default_rng(11)
    box = Box3D(np.array([0.5, -0.3, 0.2]), np.array([1.4, 0.9, 0.7]), 1.1)
    pts = rng.uniform(-1.5, 1.5, size=(1000, 3))
    got = set(points_in_box(pts, box).tolist())
    # per-point oracle with an independently constructed rotation matrix
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot_inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    expected = set()
    for i, p in enumerate(pts):
        local = rot_inv @ (p - box.center)
        if np.all(np.abs(local) <= box.size / 2.0 + 1e-9):
            expected.add(i)
    assert got == expected


def test_corners_are_contained():
    rng = np.random.default_rng(5)
    for _ in range(20):
        box = random_box(rng)
        idx = points_in_box(corners_of_box3d(box), box)
        assert len(idx) == 8


# ---------------------------------------------------------------- IoU


def test_iou3d_identity_and_disjoint():
    box = Box3D(np.zeros(3), np.array([1.0, 2.0, 3.0]), 0.4)
    assert iou_3d(box, box) == pytest.approx(1.0, abs=1e-12)
    far = Box3D(np.array([10.0, 0.0, 0.0]), np.ones(3), 0.0)
    assert iou_3d(box, far) == 0.0


def test_iou3d_axis_aligned_half_overlap():
    a = Box3D(np.zeros(3), np.ones(3), 0.0)
    b = Box3D(np.array([0.5, 0.0, 0.0]), np.ones(3), 0.0)
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_iou3d_symmetry_and_rigid_invariance():
    rng = np.random.default_rng(19)
    for _ in range(50):
        a = random_box(rng)
        b = Box3D(a.center + rng.uniform(-0.8, 0.8, 3), rng.uniform(0.4, 2.0, 3),
                  rng.uniform(-np.pi, np.pi))
        assert iou_3d(a, b) == iou_3d(b, a)
        # common rigid motion: translation + shared yaw about the origin
        t = rng.uniform(-3, 3, 3)
        phi = rng.uniform(-np.pi, np.pi)
        rot = yaw_rotation(phi)

        def moved(box):
            return Box3D(rot @ box.center + t, box.size, box.yaw + phi)

        assert iou_3d(moved(a), moved(b)) == pytest.approx(iou_3d(a, b), abs=1e-9)


def test_iou3d_shared_edge_zero_intersection():
    a = Box3D(np.zeros(3), np.ones(3), 0.0)
    b = Box3D(np.array([1.0, 0.0, 0.0]), np.ones(3), 0.0)  # faces touch exactly
    assert iou_3d(a, b) == pytest.approx(0.0, abs=1e-12)


def test_iou2d_cases():
    a = Box2D([0.0, 0.0], [2.0, 2.0])
    assert iou_2d(a, a) == 1.0
    assert iou_2d(a, Box2D([3.0, 3.0], [4.0, 4.0])) == 0.0
    b = Box2D([1.0, 0.0], [3.0, 2.0])
    assert iou_2d(a, b) == pytest.approx(1.0 / 3.0)


# ---------------------------------------------------------------- MC oracle


def test_mc_oracle_identity_and_disjoint():
    box = Box3D(np.zeros(3), np.ones(3), 0.9)
    assert iou_3d_oracle_mc(box, box, 100_000, seed=1) == 1.0
    far = Box3D(np.array([5.0, 5.0, 0.0]), np.ones(3), 0.0)
    assert iou_3d_oracle_mc(box, far, 100_000, seed=1) == 0.0


def test_mc_oracle_third_overlap_within_binomial_bound():
    a = Box3D(np.zeros(3), np.ones(3), 0.0)
    b = Box3D(np.array([0.5, 0.0, 0.0]), np.ones(3), 0.0)
    n = 200_000
    est = iou_3d_oracle_mc(a, b, n, seed=123)
    # union fills 1.5/ (1.5*1*1 bbox) of the bbox -> ~n hits; 3 sigma of the
    # ratio estimator at p=1/3 over ~n*1 draws
    n_union_expected = n  # bbox == union bbox: x span 1.5, union volume 1.5
    sigma = np.sqrt((1 / 3) * (2 / 3) / n_union_expected)
    assert abs(est - 1 / 3) < 3 * sigma + 1e-6


def test_mc_oracle_deterministic():
    rng = np.random.default_rng(2)
    a, b = random_box(rng), random_box(rng)
    assert iou_3d_oracle_mc(a, b, 100_000, seed=9) == iou_3d_oracle_mc(a, b, 100_000, seed=9)


def test_iou3d_matches_mc_oracle_small_batch():
    # 20-pair smoke version; the full 200-pair run lives in the acceptance suite
    rng = np.random.default_rng(77)
    for i in range(20):
        a = Box3D(rng.uniform(-1, 1, 3), rng.uniform(0.8, 2.0, 3), rng.uniform(-np.pi, np.pi))
        b = Box3D(a.center + rng.uniform(-0.6, 0.6, 3), rng.uniform(0.8, 2.0, 3),
                  rng.uniform(-np.pi, np.pi))
        est = iou_3d_oracle_mc(a, b, 200_000, seed=1000 + i)
        assert abs(iou_3d(a, b) - est) < 8e-3
