"""Ground-truth tube phantom and the synthetic imaging process.

The probe's image plane is intersected with the tube to produce the
elliptic boundary a perfect segmenter would return; :class:`NoiseModel`
then degrades it the way a real segmenter might.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from vesselscreen.buffer import BoundaryCloud
from vesselscreen.geometry import GeometryError, ImageCalibration, Pose

MAX_KINK_DEG = 30.0


@dataclass(frozen=True)
class RadiusProfile:
    """Constant radius with optional Gaussian bumps (aneurysm, amplitude > 0)
    or dips (stenosis, amplitude < 0) in arclength.

    Each bump is ``(center_mm, relative_amplitude, width_mm)``.
    """

    base: float = 7.5
    bumps: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("radius must be positive")
        s = np.linspace(-1e4, 1e4, 2001)
        centers = [b[0] for b in self.bumps]
        s = np.concatenate([s, np.asarray(centers, float)])
        if np.any(self(s) <= 0):
            raise ValueError("radius profile must stay positive")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        r = np.full_like(s, self.base)
        for c, a, w in self.bumps:
            r = r + self.base * a * np.exp(-0.5 * ((s - c) / w) ** 2)
        return r if r.ndim else float(r)


@dataclass(frozen=True)
class SurfacePlane:
    point: np.ndarray = field(default_factory=lambda: np.zeros(3))
    inward_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))

    def __post_init__(self):
        n = np.asarray(self.inward_normal, float)
        object.__setattr__(self, "inward_normal", n / np.linalg.norm(n))
        object.__setattr__(self, "point", np.asarray(self.point, float))

    def depth(self, p) -> np.ndarray:
        """Signed depth below the surface (positive inside the tissue)."""
        return (np.asarray(p, float) - self.point) @ self.inward_normal

    def project(self, p) -> np.ndarray:
        p = np.asarray(p, float)
        return p - np.multiply.outer(self.depth(p), self.inward_normal)

    def sample_points(self, center, spacing: float = 20.0) -> np.ndarray:
        """Three non-collinear surface points around ``center`` (e.g. for
        estimating the normal the way an operator would pick them)."""
        c = self.project(center)
        n = self.inward_normal
        a = np.cross(n, [1.0, 0.0, 0.0])
        if np.linalg.norm(a) < 1e-6:
            a = np.cross(n, [0.0, 1.0, 0.0])
        a /= np.linalg.norm(a)
        b = np.cross(n, a)
        return np.stack([c, c + spacing * a, c + spacing * b])


@dataclass(frozen=True, eq=False)
class TubePhantom:
    """Tube around a polyline centerline in {b}; extended infinitely past
    both ends for slicing."""

    vertices: np.ndarray
    radius_profile: RadiusProfile = field(default_factory=RadiusProfile)
    surface: SurfacePlane = field(default_factory=SurfacePlane)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        if len(v) < 2:
            raise ValueError("centerline needs at least two vertices")
        seg = np.diff(v, axis=0)
        lengths = np.linalg.norm(seg, axis=1)
        if np.any(lengths <= 0):
            raise ValueError("repeated centerline vertex")
        dirs = seg / lengths[:, None]
        if len(dirs) > 1:
            kinks = np.degrees(np.arccos(np.clip(np.sum(dirs[1:] * dirs[:-1], axis=1), -1, 1)))
            if np.any(kinks >= MAX_KINK_DEG):
                raise ValueError(f"centerline kink of {kinks.max():.1f} deg exceeds {MAX_KINK_DEG}")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "_dirs", dirs)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(lengths)]))

    @classmethod
    def straight(cls, point=(0.0, 0.0, -20.0), direction=(0.0, 1.0, 0.0), length=200.0, radius=7.5, **kw):
        d = np.asarray(direction, float)
        d = d / np.linalg.norm(d)
        p = np.asarray(point, float)
        profile = kw.pop("radius_profile", RadiusProfile(radius))
        return cls(np.stack([p - 0.5 * length * d, p + 0.5 * length * d]), profile, **kw)

    @classmethod
    def helix_segment(
        cls,
        center=(0.0, 0.0, -20.0),
        bend_radius=150.0,
        pitch=0.0,
        arc_deg=60.0,
        n_vertices=61,
        radius=7.5,
        **kw,
    ):
        """A gently curving tube: arc of a (possibly pitched) helix whose axis
        is the surface normal, centred on ``center`` and heading along +y."""
        t = np.radians(np.linspace(-arc_deg / 2, arc_deg / 2, n_vertices))
        c = np.asarray(center, float)
        x = bend_radius * (1 - np.cos(t))
        y = bend_radius * np.sin(t)
        z = pitch * t / (2 * np.pi)
        profile = kw.pop("radius_profile", RadiusProfile(radius))
        return cls(np.stack([x, y, z], axis=1) + c, profile, **kw)

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def point_at(self, s: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self._cum, s) - 1, 0, len(self._dirs) - 1))
        return self.vertices[i] + (s - self._cum[i]) * self._dirs[i]

    def segment_direction(self, i: int) -> np.ndarray:
        return self._dirs[i].copy()

    def radius_at(self, s: float) -> float:
        return float(self.radius_profile(s))

    def plane_crossing(self, origin, normal, reference=None) -> Optional[Tuple[int, float, np.ndarray]]:
        """Where the centerline (with its end extensions) crosses a plane.

        Returns ``(segment index, arclength, point)`` of the crossing nearest
        to ``reference`` (default: ``origin``), or None when the plane is
        parallel to every candidate segment.
        """
        origin = np.asarray(origin, float)
        normal = np.asarray(normal, float)
        ref = origin if reference is None else np.asarray(reference, float)
        h = (self.vertices - origin) @ normal
        found = []
        n_seg = len(self._dirs)
        for i in range(n_seg):
            denom = h[i + 1] - h[i]
            if denom == 0:
                continue
            t = -h[i] / denom
            inside = 0.0 <= t <= 1.0
            extension = (i == 0 and t < 0) or (i == n_seg - 1 and t > 1)
            if inside or extension:
                seg_len = self._cum[i + 1] - self._cum[i]
                s = self._cum[i] + t * seg_len
                p = self.vertices[i] + t * (self.vertices[i + 1] - self.vertices[i])
                found.append((i, float(s), p))
        if not found:
            return None
        return min(found, key=lambda f: np.linalg.norm(f[2] - ref))

    def ground_truth(self, probe_pose: Pose, cal: ImageCalibration):
        """(centerline direction, radius, arclength) where the image plane
        currently cuts the tube; None if it does not."""
        mid = probe_pose.apply(np.array([0.0, 0.0, cal.eps0 + cal.D_I / 2]))
        hit = self.plane_crossing(probe_pose.translation, probe_pose.axis(1), mid)
        if hit is None:
            return None
        i, s, _ = hit
        return self._dirs[i].copy(), self.radius_at(s), s


def ellipse_section(axis_point, axis_dir, radius, origin, e_x, e_z, n_points):
    """Points where the plane ``origin + x e_x + z e_z`` meets the infinite
    cylinder; returns (n_points, 3), or an empty array if parallel."""
    d = np.asarray(axis_dir, float)
    d = d / np.linalg.norm(d)
    P = np.eye(3) - np.outer(d, d)
    w0 = np.asarray(origin, float) - np.asarray(axis_point, float)
    E = np.stack([e_x, e_z], axis=1)
    A = E.T @ P @ E
    b = E.T @ P @ w0
    c = w0 @ P @ w0 - radius * radius
    if np.linalg.det(A) < 1e-12:
        return np.zeros((0, 3))
    center = -np.linalg.solve(A, b)
    k = b @ np.linalg.solve(A, b) - c
    if k <= 0:
        return np.zeros((0, 3))
    lam, V = np.linalg.eigh(A)
    th = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
    local = np.stack([np.sqrt(k / lam[0]) * np.cos(th), np.sqrt(k / lam[1]) * np.sin(th)], axis=1)
    xz = center + local @ V.T
    return np.asarray(origin, float) + xz @ E.T


def slice_tube(
    phantom: TubePhantom,
    image_plane_pose: Pose,
    cal: ImageCalibration,
    n_points: int = 64,
    timestamp: float = 0.0,
    frame_id: int = 0,
) -> BoundaryCloud:
    """Boundary of the tube cross-section seen in the image, in {b}.

    Points are ordered around the ellipse and restricted to the field of
    view.  An empty, invisible cloud is returned when nothing is in view.
    """
    if n_points < 8:
        raise GeometryError("need at least 8 boundary samples")
    pose = image_plane_pose
    origin = pose.translation
    mid = pose.apply(np.array([0.0, 0.0, cal.eps0 + cal.D_I / 2]))
    hit = phantom.plane_crossing(origin, pose.axis(1), mid)
    empty = BoundaryCloud(np.zeros((0, 3)), timestamp, pose, frame_id, visible=False)
    if hit is None:
        return empty
    i, s, p = hit
    pts = ellipse_section(p, phantom.segment_direction(i), phantom.radius_at(s), origin, pose.axis(0), pose.axis(2), n_points)
    if len(pts) == 0:
        return empty
    keep = cal.in_view(pose.inverse().apply(pts))
    if not np.any(keep):
        return empty
    return BoundaryCloud(pts[keep], timestamp, pose, frame_id, visible=True)


@dataclass
class NoiseModel:
    """Segmentation error knobs.  Owns its RNG; do not share mid-stream."""

    boundary_jitter_sigma: float = 0.2
    outlier_rate: float = 0.02
    dropout_rate: float = 0.1
    false_positive_rate: float = 0.05
    rng_seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.boundary_jitter_sigma < 0:
            raise ValueError("jitter sigma must be >= 0")
        for name in ("outlier_rate", "dropout_rate"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.false_positive_rate <= 1.0:
            raise ValueError("false_positive_rate must lie in [0, 1]")
        self.reseed(self.rng_seed)

    def reseed(self, seed: int) -> None:
        self.rng_seed = int(seed)
        self.rng = np.random.default_rng(self.rng_seed)

    @classmethod
    def noiseless(cls, seed: int = 0) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0, 0.0, seed)

    @property
    def is_noiseless(self) -> bool:
        return (
            self.boundary_jitter_sigma == 0
            and self.outlier_rate == 0
            and self.dropout_rate == 0
            and self.false_positive_rate == 0
        )


def _uniform_in_view(rng, cal: ImageCalibration, pose: Pose, n: int) -> np.ndarray:
    x = rng.uniform(-cal.L_p / 2, cal.L_p / 2, n)
    z = rng.uniform(cal.eps0, cal.eps0 + cal.D_I, n)
    return pose.apply(np.stack([x, np.zeros(n), z], axis=1))


def corrupt_cloud(cloud: BoundaryCloud, noise: NoiseModel, cal: Optional[ImageCalibration] = None) -> BoundaryCloud:
    """Jitter, drop and replace boundary points.

    Jitter is isotropic Gaussian within the image plane of
    ``cloud.source_pose`` (segmentation error cannot leave the plane).
    Replaced points are moved to uniform positions in the field of view and
    appended after the contour.
    """
    if cloud.empty or (
        noise.boundary_jitter_sigma == 0 and noise.outlier_rate == 0 and noise.dropout_rate == 0
    ):
        return cloud
    cal = cal or ImageCalibration()
    rng = noise.rng
    pose = cloud.source_pose
    pts = cloud.contour
    n = len(pts)
    jitter = rng.normal(0.0, noise.boundary_jitter_sigma, (n, 2)) if noise.boundary_jitter_sigma > 0 else np.zeros((n, 2))
    pts = pts + np.outer(jitter[:, 0], pose.axis(0)) + np.outer(jitter[:, 1], pose.axis(2))
    keep = rng.random(n) >= noise.dropout_rate
    moved = (rng.random(n) < noise.outlier_rate) & keep
    contour = pts[keep & ~moved]
    extra = [cloud.points[len(cloud.contour):]]
    if np.any(moved):
        extra.append(_uniform_in_view(rng, cal, pose, int(moved.sum())))
    outliers = np.concatenate(extra, axis=0)
    return cloud.replace(points=np.concatenate([contour, outliers], axis=0), outlier_count=len(outliers))


def spawn_false_candidate(
    cloud: BoundaryCloud,
    noise: NoiseModel,
    cal: Optional[ImageCalibration] = None,
    r_v: Optional[float] = None,
) -> List[BoundaryCloud]:
    """With probability ``false_positive_rate`` add a second, spurious
    elliptic cluster somewhere in view, at least ``2 r_v`` from the true one.
    """
    cal = cal or ImageCalibration()
    draw = noise.rng.random()
    if cloud.empty or draw >= noise.false_positive_rate:
        return [cloud]
    rng = noise.rng
    pose = cloud.source_pose
    local = pose.inverse().apply(cloud.contour)
    c = local.mean(axis=0)
    if r_v is None:
        r_v = float(np.mean(np.linalg.norm(local - c, axis=1)))
    scale = rng.uniform(0.4, 0.9)
    shape = (local - c) * scale
    shape[:, 1] = 0.0
    centre_2d = c[[0, 2]]
    for _ in range(200):
        target = np.array([rng.uniform(-cal.L_p / 2, cal.L_p / 2), 0.0, rng.uniform(cal.eps0, cal.eps0 + cal.D_I)])
        fake = shape + target
        fake = fake[cal.in_view(fake)]
        if len(fake) >= 8 and np.linalg.norm(fake.mean(axis=0)[[0, 2]] - centre_2d) >= 2.0 * r_v:
            return [cloud, cloud.replace(points=pose.apply(fake), outlier_count=0)]
    return [cloud]
