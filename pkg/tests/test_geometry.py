import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vesselscreen.geometry import (
    GeometryError,
    ImageCalibration,
    Pose,
    angle_between,
    format_calibration,
    image_to_base,
    load_calibration,
    parse_calibration,
    pixel_to_probe,
    plane_normal_from_points,
    probe_mount,
    so3_exp,
    so3_log,
)
from tests.oracles import homogeneous_pixel_chain, random_homogeneous

CAL = ImageCalibration(L_p=37.5, D_I=40.0, H=256, W=256, eps0=0.0)


def test_center_pixel_maps_to_origin():
    assert np.allclose(pixel_to_probe(CAL, 128, 0), [0, 0, 0], atol=1e-12)


def test_left_edge_is_minus_half_footprint():
    assert np.allclose(pixel_to_probe(CAL, 0, 0), [-18.75, 0, 0], atol=1e-12)


def test_far_corner():
    assert np.allclose(pixel_to_probe(CAL, 256, 256), [18.75, 0, 40], atol=1e-12)


def test_element_offset_shifts_depth():
    cal = ImageCalibration(eps0=1.5)
    assert np.allclose(pixel_to_probe(cal, 128, 0), [0, 0, 1.5])


@pytest.mark.parametrize(
    "u,v,name", [(-1, 0, "u=-1"), (257, 0, "u=257"), (0, -0.1, "v=-0.1"), (0, 256.5, "v=256.5"), (np.nan, 0, "u=nan")]
)
def test_out_of_range_pixel_names_index(u, v, name):
    with pytest.raises(GeometryError, match=name):
        pixel_to_probe(CAL, u, v)


def test_vectorised_pixels():
    out = pixel_to_probe(CAL, np.array([0, 128, 256]), np.array([0, 128, 256]))
    assert out.shape == (3, 3)
    assert np.allclose(out[1], [0, 0, 20])


def test_pixel_map_is_affine():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = rng.uniform(0, 256, 2)
        b = rng.uniform(0, 256, 2)
        m = (a + b) / 2
        mid = pixel_to_probe(CAL, *m)
        assert np.allclose(mid, (pixel_to_probe(CAL, *a) + pixel_to_probe(CAL, *b)) / 2, atol=1e-12)


def test_calibration_invariants():
    with pytest.raises(GeometryError):
        ImageCalibration(L_p=0)
    with pytest.raises(GeometryError):
        ImageCalibration(H=1)


def test_image_to_base_identity_chain():
    assert np.allclose(image_to_base(Pose(), Pose(), CAL, 128, 0), 0, atol=1e-12)


def test_image_to_base_pure_translation():
    T = Pose(np.eye(3), [10, 0, 0])
    assert np.allclose(image_to_base(T, Pose(), CAL, 40, 77), pixel_to_probe(CAL, 40, 77) + [10, 0, 0])


def test_image_to_base_matches_homogeneous_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        Tb, Tf = random_homogeneous(rng), random_homogeneous(rng, 5.0)
        u, v = rng.uniform(0, 256, 2)
        got = image_to_base(Pose.from_matrix(Tb), Pose.from_matrix(Tf), CAL, u, v)
        want = homogeneous_pixel_chain(Tb, Tf, 37.5, 40, 256, 256, 0.0, u, v)
        assert np.max(np.abs(got - want)) < 1e-9


def test_image_to_base_functoriality():
    rng = np.random.default_rng(5)
    P1, P2, mount = (Pose.from_matrix(random_homogeneous(rng)) for _ in range(3))
    got = image_to_base(P1 @ P2, mount, CAL, 17.0, 200.0)
    assert np.allclose(got, P1.apply(image_to_base(P2, mount, CAL, 17.0, 200.0)), atol=1e-9)


def test_flipped_mount_mirrors_lateral_axis():
    a = image_to_base(Pose(), probe_mount(True), CAL, 0, 10)
    b = image_to_base(Pose(), probe_mount(False), CAL, 0, 10)
    assert np.allclose(a[[0, 1]], -b[[0, 1]]) and np.isclose(a[2], b[2])


def test_pose_rejects_non_rotation():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(GeometryError):
        Pose(np.eye(3) * 1.001)


def test_pose_inverse_and_associativity():
    rng = np.random.default_rng(2)
    A, B, C = (Pose.from_matrix(random_homogeneous(rng)) for _ in range(3))
    assert (A @ A.inverse()).allclose(Pose(), atol=1e-9)
    assert ((A @ B) @ C).allclose(A @ (B @ C), atol=1e-9)
    assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-9)


def test_pose_is_immutable():
    P = Pose()
    with pytest.raises(ValueError):
        P.translation[0] = 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3))
def test_so3_exp_log_roundtrip(w):
    w = np.array(w)
    R = so3_exp(w)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    if np.linalg.norm(w) < np.pi - 1e-3:
        assert np.allclose(so3_log(R), w, atol=1e-8)
    assert np.allclose(so3_exp(so3_log(R)), R, atol=1e-8)


def test_so3_log_half_turn():
    R = np.diag([1.0, -1.0, -1.0])
    assert np.allclose(np.abs(so3_log(R)), [np.pi, 0, 0])


def test_plane_normal_reference_sign():
    pts = ([0, 0, 0], [1, 0, 0], [0, 1, 0])
    assert np.allclose(plane_normal_from_points(*pts), [0, 0, 1])
    assert np.allclose(plane_normal_from_points(*pts, reference=[0, 0, -1]), [0, 0, -1])


def test_plane_normal_analytic_plane():
    rng = np.random.default_rng(9)
    want = np.array([2.0, 1.0, 2.0]) / 3.0
    for _ in range(20):
        xy = rng.uniform(-10, 10, (3, 2))
        pts = [np.array([x, y, (5 - 2 * x - y) / 2]) for x, y in xy]
        n = plane_normal_from_points(*pts)
        assert np.max(np.abs(n - want)) < 1e-9


def test_plane_normal_permutation_invariant():
    rng = np.random.default_rng(1)
    p = rng.normal(size=(3, 3))
    ref = rng.normal(size=3)
    base = plane_normal_from_points(*p, reference=ref)
    for perm in ([1, 0, 2], [2, 1, 0], [1, 2, 0]):
        assert np.allclose(plane_normal_from_points(*p[perm], reference=ref), base)


def test_plane_normal_collinear_raises():
    with pytest.raises(GeometryError):
        plane_normal_from_points([0, 0, 0], [1, 1, 1], [2, 2, 2])


def test_angle_between_undirected():
    assert angle_between([1, 0, 0], [-1, 0, 0]) == pytest.approx(180.0)
    assert angle_between([1, 0, 0], [-1, 0, 0], undirected=True) == pytest.approx(0.0)


def test_calibration_file_roundtrip(tmp_path):
    cal = ImageCalibration(30.0, 50.0, 128, 200, 0.25)
    path = tmp_path / "cal.txt"
    path.write_text("# probe\n" + format_calibration(cal))
    assert load_calibration(path) == cal


def test_calibration_file_rejects_unknown_key():
    with pytest.raises((GeometryError, ValueError)):
        parse_calibration("L_p_mm = 37.5\nbogus = 1\n")
