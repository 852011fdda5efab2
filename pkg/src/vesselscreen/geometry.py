"""Rigid transforms and the image -> probe -> base calibration chain.

Frames: {b} robot base, {f} flange, {p} probe tip, {I} B-mode image.
A pose ``T_ab`` maps coordinates expressed in {b} into {a}:
``x_a = R @ x_b + t``.  Lengths are millimetres throughout.

In {p} the image plane is the x-z plane: x is lateral (along the
transducer footprint), z is depth into tissue, y is the elevational axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Out-of-range pixel, degenerate geometry or malformed transform."""


def _as_vec3(x, name: str = "vector") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.shape != (3,):
        raise GeometryError(f"{name} must have shape (3,), got {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """SE(3) rigid transform with translation in mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise GeometryError("rotation must be 3x3 and translation a 3-vector")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise GeometryError("homogeneous transform must be 4x4")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix(), translation)

    @classmethod
    def from_axes(cls, x_axis, y_axis, z_axis, translation=(0.0, 0.0, 0.0)) -> "Pose":
        """Build a pose whose rotation columns are the given frame axes."""
        return cls(np.column_stack([x_axis, y_axis, z_axis]), translation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        # re-project to SO(3) so long chains do not drift past ORTHO_TOL
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return Pose(R, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or an array of points (N, 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        """Rotate free vectors (no translation)."""
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def axis(self, i: int) -> np.ndarray:
        return self.rotation[:, i].copy()

    def rotvec(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        rv = np.round(self.rotvec(), 6).tolist()
        t = np.round(self.translation, 6).tolist()
        return f"Pose(rotvec={rv}, t={t})"


def probe_mount(flipped: bool = False, offset=(0.0, 0.0, 0.0)) -> Pose:
    """Flange-to-probe transform: the probe is mounted parallel to the flange,
    either as-is or rotated 180 degrees about z."""
    R = np.diag([-1.0, -1.0, 1.0]) if flipped else np.eye(3)
    return Pose(R, offset)


@dataclass(frozen=True)
class ImageCalibration:
    """Linear-array image geometry.

    ``H`` counts pixels along the transducer footprint (index ``u``), ``W``
    counts pixels along depth (index ``v``).
    """

    L_p: float = 37.5
    D_I: float = 40.0
    H: int = 256
    W: int = 256
    eps0: float = 0.0

    def __post_init__(self):
        if not (self.L_p > 0 and self.D_I > 0):
            raise GeometryError("L_p and D_I must be positive")
        if self.H < 2 or self.W < 2:
            raise GeometryError("image must be at least 2x2 pixels")

    @property
    def lateral_scale(self) -> float:
        """mm per lateral pixel."""
        return self.L_p / self.H

    @property
    def axial_scale(self) -> float:
        """mm per depth pixel."""
        return self.D_I / self.W

    def image_to_probe_matrix(self) -> np.ndarray:
        """4x4 map from homogeneous pixel coordinates (u, v, w, 1) into {p}."""
        return np.array(
            [
                [self.lateral_scale, 0.0, 0.0, -self.L_p / 2.0],
                [0.0, 0.0, -1.0, 0.0],
                [0.0, self.axial_scale, 0.0, self.eps0],
                [0.0, 0.0, 0.0, 1.0],
            ]
        )

    def check_pixel(self, u, v) -> None:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if np.any(u < 0) or np.any(u > self.H) or np.any(~np.isfinite(u)):
            bad = u[(u < 0) | (u > self.H) | ~np.isfinite(u)].ravel()[0] if u.ndim else u
            raise GeometryError(f"lateral pixel index u={float(bad)} outside [0, {self.H}]")
        if np.any(v < 0) or np.any(v > self.W) or np.any(~np.isfinite(v)):
            bad = v[(v < 0) | (v > self.W) | ~np.isfinite(v)].ravel()[0] if v.ndim else v
            raise GeometryError(f"axial pixel index v={float(bad)} outside [0, {self.W}]")

    def probe_to_pixel(self, points_p) -> np.ndarray:
        """Inverse of the in-plane mapping; returns (..., 2) float (u, v).

        The elevational coordinate is dropped, so points off the image plane
        are projected onto it.
        """
        pts = np.asarray(points_p, dtype=float)
        u = (pts[..., 0] + self.L_p / 2.0) / self.lateral_scale
        v = (pts[..., 2] - self.eps0) / self.axial_scale
        return np.stack([u, v], axis=-1)

    def in_view(self, points_p, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of probe-frame points inside the imaged rectangle."""
        pts = np.asarray(points_p, dtype=float)
        x, z = pts[..., 0], pts[..., 2]
        return (
            (np.abs(x) <= self.L_p / 2.0 - margin)
            & (z >= self.eps0 + margin)
            & (z <= self.eps0 + self.D_I - margin)
        )


def pixel_to_probe(cal: ImageCalibration, u, v) -> np.ndarray:
    """Map pixel (u, v) into the probe frame (mm).  Vectorised over arrays."""
    cal.check_pixel(u, v)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = cal.lateral_scale * u - cal.L_p / 2.0
    z = cal.axial_scale * v + cal.eps0
    return np.stack([x, np.zeros_like(x), z], axis=-1)


def image_to_base_pose(robot_pose: Pose, mount: Pose) -> Pose:
    """Probe pose in {b}: flange pose composed with the mount."""
    return robot_pose.compose(mount)


def image_to_base(robot_pose: Pose, mount: Pose, cal: ImageCalibration, u, v) -> np.ndarray:
    """Pixel (u, v) expressed in the robot base frame."""
    return robot_pose.apply(mount.apply(pixel_to_probe(cal, u, v)))


def plane_normal_from_points(p1, p2, p3, reference=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Unit normal of the plane through three points.

    The sign is chosen so that the normal has a non-negative dot product
    with ``reference``.
    """
    a, b, c = _as_vec3(p1, "p1"), _as_vec3(p2, "p2"), _as_vec3(p3, "p3")
    n = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(n)
    if area <= 1e-6:
        raise GeometryError(f"points are collinear (triangle area {area:.3g} mm^2)")
    n = n / (2.0 * area)
    if np.dot(n, _as_vec3(reference, "reference")) < 0:
        n = -n
    return n


def angle_between(a, b, *, undirected: bool = False) -> float:
    """Angle in degrees between two vectors; lines fold into [0, 90]."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    if undirected:
        c = abs(c)
    # arctan2 form keeps precision near 0 and 180 degrees
    s = np.linalg.norm(np.cross(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.degrees(np.arctan2(s, c)))


_CAL_KEYS = {"L_p_mm": "L_p", "D_I_mm": "D_I", "H_px": "H", "W_px": "W", "eps0_mm": "eps0"}


def parse_calibration(text: str) -> ImageCalibration:
    """Parse ``key = value`` (or ``key: value``) lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, val = (s.strip() for s in line.split(sep, 1))
                break
        else:
            raise GeometryError(f"line {lineno}: expected 'key = value'")
        if key not in _CAL_KEYS:
            raise GeometryError(f"line {lineno}: unknown calibration key {key!r}")
        name = _CAL_KEYS[key]
        values[name] = int(val) if name in ("H", "W") else float(val)
    return ImageCalibration(**values)


def load_calibration(path: Union[str, Path]) -> ImageCalibration:
    return parse_calibration(Path(path).read_text())


def format_calibration(cal: ImageCalibration) -> str:
    inv = {v: k for k, v in _CAL_KEYS.items()}
    return "".join(f"{inv[k]} = {getattr(cal, k)}\n" for k in ("L_p", "D_I", "H", "W", "eps0"))


def orthonormal_complement(d, hint: Optional[Sequence[float]] = None):
    """Two unit vectors completing ``d`` to a right-handed frame (e1, e2, d).

    ``hint`` picks the direction of e1 when it is not parallel to ``d``.
    """
    d = np.asarray(d, float)
    d = d / np.linalg.norm(d)
    candidates = [] if hint is None else [np.asarray(hint, float)]
    candidates += [np.eye(3)[i] for i in np.argsort(np.abs(d))]
    for h in candidates:
        e1 = h - np.dot(h, d) * d
        n = np.linalg.norm(e1)
        if n > 1e-6:
            e1 = e1 / n
            return e1, np.cross(d, e1)
    raise GeometryError("cannot complete a zero vector to a frame")


def so3_exp(rotvec) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(rotvec, float)
    th = float(np.sqrt(w @ w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + (np.sin(th) / th) * K + ((1.0 - np.cos(th)) / (th * th)) * K @ K


def so3_log(R) -> np.ndarray:
    """Rotation vector of a rotation matrix."""
    R = np.asarray(R, float)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    # sin from the antisymmetric part, cos from the trace: atan2 of the pair
    # stays accurate near 0 and pi where arccos or arcsin alone would not
    s = 0.5 * float(np.linalg.norm(v))
    th = float(np.arctan2(s, 0.5 * (np.trace(R) - 1.0)))
    if th < 1e-6:
        return 0.5 * v
    if np.pi - th < 1e-4:
        # near a half turn the antisymmetric part vanishes; defer to scipy
        return Rotation.from_matrix(R).as_rotvec()
    return (th / (2.0 * s)) * v
