"""Centerline direction and radius estimation from buffered boundary clouds.

The direction is parameterized as ``n = (n1, n2, 1)`` in an anchor frame
whose third axis is a nominal vessel direction.  The fit minimizes

    1/(2N) * sum_i [(dist(P_i, line(C, n)) - r)^2 + eps^2]
        + lam1/2 * (orient(n) - orient(n_ref))^2
        + lam2/2 * (r - r_ref)^2

subject to eps >= eps_min, r > r_l, r <= eps + r_h, where ``orient`` is
the orientation of the line through (0, 0) and (n1, n2), i.e.
arctan(n2 / n1) taken modulo pi.  The problem is solved by alternating a
direction update at fixed radius with a closed-form radius update at fixed
direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from vesselscreen.buffer import is_degenerate
from vesselscreen.geometry import Pose, orthonormal_complement

MIN_POINTS = 6
# below this (n1, n2) norm the line orientation is undefined
ORIENT_EPS = 1e-12
# The orientation term is an arctan of (n2, n1) and is singular at the chart
# origin, so estimates are kept inside a tilt band around the anchor axis and
# re-anchored at ANCHOR_OFFSET_DEG when they leave it.
MIN_ANCHOR_TILT = np.tan(np.radians(10.0))
MAX_ANCHOR_TILT = np.tan(np.radians(50.0))
ANCHOR_OFFSET_DEG = 30.0


class InsufficientDataError(ValueError):
    pass


class ColdStartError(ValueError):
    """Degenerate (coplanar) data and no previous estimate to fall back on."""


@dataclass(frozen=True)
class OptimizerConfig:
    r_l: float = 1.0
    r_h: float = 15.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    eps_min: float = 1e-6
    tick_tock_rounds: int = 1
    inner_max_iters: int = 50
    convergence_tol: float = 1e-12

    def __post_init__(self):
        if not self.r_l < self.r_h:
            raise ValueError("r_l must be below r_h")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("stabilization weights must be non-negative")
        if self.eps_min <= 0:
            raise ValueError("eps_min must be positive")
        if self.tick_tock_rounds < 1 or self.inner_max_iters < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass(frozen=True, eq=False)
class CenterlineEstimate:
    n1: float
    n2: float
    r_v: float
    eps: float
    anchor_frame: Pose = field(default_factory=Pose)
    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    objective_value: float = float("inf")
    degenerate: bool = False

    @property
    def direction(self) -> np.ndarray:
        """Unit centerline direction in {b}."""
        n = np.array([self.n1, self.n2, 1.0])
        return self.anchor_frame.rotation @ (n / np.linalg.norm(n))

    @property
    def tilt(self) -> float:
        return float(np.hypot(self.n1, self.n2))

    def in_anchor(self, anchor: Pose) -> Tuple[float, float]:
        """(n1, n2) of this direction re-expressed in another anchor frame."""
        d = anchor.rotation.T @ self.direction
        if d[2] <= 0:
            d = -d
        if d[2] < 1e-9:
            raise ValueError("direction is perpendicular to the anchor axis")
        return float(d[0] / d[2]), float(d[1] / d[2])

    def feasible(self, cfg: OptimizerConfig) -> bool:
        return bool(self.eps >= cfg.eps_min and self.r_v > cfg.r_l and self.r_v <= self.eps + cfg.r_h + 1e-12)


def anchor_from_direction(d, hint=None) -> Pose:
    """Anchor frame with third axis ``d``; ``hint`` orients the first axis."""
    d = np.asarray(d, float)
    d = d / np.linalg.norm(d)
    e1, e2 = orthonormal_complement(d, hint)
    return Pose.from_axes(e1, e2, d)


def offset_anchor(d, toward=None, hint=None, offset_deg: float = ANCHOR_OFFSET_DEG) -> Pose:
    """Anchor whose axis leans ``offset_deg`` from ``d`` toward ``toward``.

    ``d`` then sits at tilt tan(offset) in the new chart, clear of the
    origin where the orientation term is undefined.
    """
    d = np.asarray(d, float)
    d = d / np.linalg.norm(d)
    t = None
    if toward is not None:
        t = np.asarray(toward, float) - np.dot(toward, d) * d
        t = t / np.linalg.norm(t) if np.linalg.norm(t) > 1e-6 else None
    if t is None:
        t = orthonormal_complement(d, hint)[0]
    a = np.radians(offset_deg)
    axis = np.cos(a) * d + np.sin(a) * t
    return anchor_from_direction(axis, hint=hint)


def wrap_half_turn(a):
    """Wrap an angle difference into [-pi/2, pi/2): line orientations are mod pi."""
    return (np.asarray(a) + np.pi / 2) % np.pi - np.pi / 2


def _orientation(n1: float, n2: float) -> Optional[float]:
    if np.hypot(n1, n2) < ORIENT_EPS:
        return None
    return float(np.arctan2(n2, n1))


def _check_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < MIN_POINTS:
        raise InsufficientDataError(f"need at least {MIN_POINTS} points, got {len(pts)}")
    return pts


def _local(points: np.ndarray, C, anchor: Optional[Pose]) -> np.ndarray:
    q = points - np.asarray(C, float)
    if anchor is not None:
        q = q @ anchor.rotation
    return q


def _distances(q: np.ndarray, n1: float, n2: float) -> np.ndarray:
    """Perpendicular distances from local points to the line along (n1, n2, 1)."""
    n = np.array([n1, n2, 1.0])
    nn = n @ n
    s = q @ n
    d2 = np.einsum("ij,ij->i", q, q) - s * s / nn
    return np.sqrt(np.maximum(d2, 0.0))


def _distance_jacobian(q: np.ndarray, n1: float, n2: float, d: np.ndarray) -> np.ndarray:
    """d(dist_i)/d(n1, n2), shape (N, 2); rows with dist_i == 0 are zero."""
    n = np.array([n1, n2, 1.0])
    nn = n @ n
    s = q @ n
    # d(d^2)/dn_k = -2 s q_k / |n|^2 + 2 s^2 n_k / |n|^4
    dd2 = -2.0 * s[:, None] * q[:, :2] / nn + 2.0 * (s * s)[:, None] * n[None, :2] / (nn * nn)
    out = np.zeros_like(dd2)
    ok = d > 1e-12
    out[ok] = dd2[ok] / (2.0 * d[ok, None])
    return out


def _reference(prev: Optional[CenterlineEstimate], anchor: Optional[Pose]):
    """Reference (n1', n2', r') in the given anchor, or None."""
    if prev is None:
        return None
    if anchor is None or anchor is prev.anchor_frame:
        return prev.n1, prev.n2, prev.r_v
    n1p, n2p = prev.in_anchor(anchor)
    return n1p, n2p, prev.r_v


def _stabilization(n1, n2, r_v, ref, cfg: OptimizerConfig) -> Tuple[float, float]:
    """(orientation term, radius term)."""
    if ref is None:
        return 0.0, 0.0
    n1p, n2p, rp = ref
    a, ap = _orientation(n1, n2), _orientation(n1p, n2p)
    orient = 0.0 if a is None or ap is None else 0.5 * cfg.lambda1 * float(wrap_half_turn(a - ap)) ** 2
    return orient, 0.5 * cfg.lambda2 * (r_v - rp) ** 2


def objective(
    points,
    C,
    n1: float,
    n2: float,
    r_v: float,
    eps: float,
    prev: Optional[CenterlineEstimate] = None,
    cfg: Optional[OptimizerConfig] = None,
    anchor: Optional[Pose] = None,
) -> float:
    """Fit objective in mm^2.

    ``points`` and ``C`` are in {b}; (n1, n2) live in ``anchor`` (defaults
    to ``prev.anchor_frame``, else the identity).  With ``prev=None`` the
    stabilization terms vanish.
    """
    cfg = cfg or OptimizerConfig()
    pts = _check_points(points)
    if anchor is None and prev is not None:
        anchor = prev.anchor_frame
    q = _local(pts, C, anchor)
    d = _distances(q, n1, n2)
    data = 0.5 * np.mean((d - r_v) ** 2) + 0.5 * eps * eps
    orient, radius = _stabilization(n1, n2, r_v, _reference(prev, anchor), cfg)
    return float(data + orient + radius)


def gradient_direction(
    points,
    C,
    n1: float,
    n2: float,
    r_v: float,
    prev: Optional[CenterlineEstimate] = None,
    cfg: Optional[OptimizerConfig] = None,
    anchor: Optional[Pose] = None,
) -> np.ndarray:
    """Analytic (df/dn1, df/dn2) of :func:`objective` at fixed r_v and eps.

    Points lying on the candidate axis contribute zero (subgradient choice);
    the orientation term contributes zero where the orientation is undefined.
    """
    cfg = cfg or OptimizerConfig()
    pts = _check_points(points)
    if anchor is None and prev is not None:
        anchor = prev.anchor_frame
    q = _local(pts, C, anchor)
    d = _distances(q, n1, n2)
    g = (d - r_v) @ _distance_jacobian(q, n1, n2, d) / len(d)
    ref = _reference(prev, anchor)
    if ref is not None and cfg.lambda1 > 0:
        a, ap = _orientation(n1, n2), _orientation(ref[0], ref[1])
        if a is not None and ap is not None:
            rho2 = n1 * n1 + n2 * n2
            delta = float(wrap_half_turn(a - ap))
            g = g + cfg.lambda1 * delta * np.array([-n2 / rho2, n1 / rho2])
    return g


def estimate_radius(raw_points, C, n_v) -> float:
    """Mean perpendicular distance from the points to the line (C, n_v)."""
    pts = _check_points(raw_points)
    n = np.asarray(n_v, float)
    nn = np.linalg.norm(n)
    if nn == 0:
        raise ValueError("direction must be non-zero")
    q = pts - np.asarray(C, float)
    return float(np.mean(np.linalg.norm(np.cross(q, n), axis=1)) / nn)


def _direction_update(
    q: np.ndarray,
    n1: float,
    n2: float,
    r_v: float,
    eps: float,
    ref,
    cfg: OptimizerConfig,
) -> Tuple[float, float, float]:
    """Levenberg-Marquardt on (n1, n2) at fixed radius.  Only accepts steps
    that lower the objective, so the result never scores worse than the start."""
    N = len(q)
    sqrt_n = np.sqrt(N)
    const = 0.5 * eps * eps + (0.5 * cfg.lambda2 * (r_v - ref[2]) ** 2 if ref is not None else 0.0)
    ref_orient = None if ref is None or cfg.lambda1 == 0 else _orientation(ref[0], ref[1])
    w1 = np.sqrt(cfg.lambda1)

    def residuals(a, b):
        d = _distances(q, a, b)
        res = (d - r_v) / sqrt_n
        orient = _orientation(a, b)
        extra = 0.0
        if ref_orient is not None and orient is not None:
            extra = w1 * float(wrap_half_turn(orient - ref_orient))
        return d, res, extra

    def value(res, extra):
        return 0.5 * (res @ res + extra * extra) + const

    d, res, extra = residuals(n1, n2)
    f = value(res, extra)
    damping = 1e-3
    for _ in range(cfg.inner_max_iters):
        J = _distance_jacobian(q, n1, n2, d) / sqrt_n
        g = J.T @ res
        A = J.T @ J
        rho2 = n1 * n1 + n2 * n2
        if ref_orient is not None and rho2 > ORIENT_EPS**2:
            jo = w1 * np.array([-n2 / rho2, n1 / rho2])
            g = g + jo * extra
            A = A + np.outer(jo, jo)
        if np.max(np.abs(g)) < 1e-15:
            break
        accepted = False
        while damping < 1e12:
            step = np.linalg.solve(A + damping * (np.diag(np.diag(A)) + 1e-12 * np.eye(2)), -g)
            a, b = n1 + step[0], n2 + step[1]
            d_new, res_new, extra_new = residuals(a, b)
            f_new = value(res_new, extra_new)
            if f_new < f:
                accepted = True
                damping = max(damping / 3.0, 1e-9)
                break
            damping *= 4.0
        if not accepted:
            break
        decrease = f - f_new
        n1, n2, d, res, extra, f = a, b, d_new, res_new, extra_new, f_new
        if decrease < cfg.convergence_tol:
            break
    return n1, n2, f


def radius_update(d: np.ndarray, ref_radius: Optional[float], cfg: OptimizerConfig) -> Tuple[float, float]:
    """Exact minimizer of the objective over (r_v, eps) for fixed distances."""
    m = float(np.mean(d))
    lam = cfg.lambda2 if ref_radius is not None else 0.0
    r_star = (m + lam * (ref_radius or 0.0)) / (1.0 + lam)
    lower = cfg.r_l + max(cfg.eps_min, 1e-9 * cfg.r_l)
    if r_star <= cfg.r_h + cfg.eps_min:
        return max(r_star, lower), cfg.eps_min
    # upper bound active: r = r_h + eps, minimize (1+lam)/2 (r - r*)^2 + eps^2/2
    eps = max(cfg.eps_min, (1.0 + lam) * (r_star - cfg.r_h) / (2.0 + lam))
    return cfg.r_h + eps, eps


def _coarse_direction(q: np.ndarray, n_dirs: int = 600) -> np.ndarray:
    """Best axis over a Fibonacci hemisphere, scoring each by the variance of
    point-to-axis distances (the data term at its optimal radius)."""
    k = np.arange(n_dirs) + 0.5
    z = k / n_dirs
    phi = np.pi * (1 + 5**0.5) * k
    rho = np.sqrt(1 - z * z)
    dirs = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    proj = q @ dirs.T
    d = np.sqrt(np.maximum(np.einsum("ij,ij->i", q, q)[:, None] - proj * proj, 0.0))
    return dirs[int(np.argmin(d.var(axis=0)))]


def cold_start(spread_points, raw_points, cfg: Optional[OptimizerConfig] = None, anchor: Optional[Pose] = None) -> CenterlineEstimate:
    """Initial estimate without a previous one: coarse axis search, then radius."""
    cfg = cfg or OptimizerConfig()
    sp = _check_points(spread_points)
    raw = _check_points(raw_points)
    if is_degenerate(sp):
        raise ColdStartError("coplanar clouds and no previous estimate")
    c_sp = sp.mean(axis=0)
    d = _coarse_direction(sp - c_sp)
    if anchor is None:
        anchor = anchor_from_direction(d)
    local = anchor.rotation.T @ d
    if local[2] < 0:
        local = -local
    if local[2] < 1e-3:
        anchor = anchor_from_direction(d, hint=anchor.axis(0))
        local = np.array([0.0, 0.0, 1.0])
    n1, n2 = local[0] / local[2], local[1] / local[2]
    c_raw = raw.mean(axis=0)
    dist = _distances(_local(raw, c_raw, anchor), n1, n2)
    r_v, eps = radius_update(dist, None, cfg)
    est = CenterlineEstimate(n1, n2, r_v, eps, anchor, c_raw)
    return replace(est, objective_value=objective(sp, c_sp, n1, n2, r_v, eps, None, cfg, anchor))


_PREV = object()


def tick_tock_step(
    spread_points,
    raw_points,
    prev: Optional[CenterlineEstimate],
    cfg: Optional[OptimizerConfig] = None,
    reference=_PREV,
    anchor: Optional[Pose] = None,
) -> CenterlineEstimate:
    """One alternating update.

    TICK: direction on the spread points at fixed radius.  TOCK: radius and
    slack on the raw points at fixed direction, in closed form.  ``prev`` is
    the starting point and, unless ``reference`` is given, also the target
    of the stabilization terms (``reference=None`` disables them).  Without ``prev`` a cold start is attempted
    (``anchor`` then fixes the chart).  Degenerate data with a ``prev``
    returns ``prev`` flagged as degenerate.
    """
    cfg = cfg or OptimizerConfig()
    sp = _check_points(spread_points)
    raw = _check_points(raw_points)
    if reference is _PREV:
        reference = prev
    if prev is None:
        start = cold_start(sp, raw, cfg, anchor)
    else:
        if is_degenerate(sp):
            return replace(prev, degenerate=True)
        start = prev

    anchor = start.anchor_frame
    n1, n2 = start.n1, start.n2
    tilt = np.hypot(n1, n2)
    if not MIN_ANCHOR_TILT <= tilt <= MAX_ANCHOR_TILT:
        anchor = offset_anchor(start.direction, toward=anchor.axis(2), hint=anchor.axis(0))
        n1, n2 = start.in_anchor(anchor)
    ref = _reference(reference, anchor)
    r_v, eps = start.r_v, start.eps

    c_sp = sp.mean(axis=0)
    c_raw = raw.mean(axis=0)
    q_sp = _local(sp, c_sp, anchor)
    q_raw = _local(raw, c_raw, anchor)
    for _ in range(cfg.tick_tock_rounds):
        n1, n2, _ = _direction_update(q_sp, n1, n2, r_v, eps, ref, cfg)
        d = _distances(q_raw, n1, n2)
        r_v, eps = radius_update(d, None if ref is None else ref[2], cfg)

    orient, radius = _stabilization(n1, n2, r_v, ref, cfg)
    d_sp = _distances(q_sp, n1, n2)
    value = 0.5 * np.mean((d_sp - r_v) ** 2) + 0.5 * eps * eps + orient + radius
    return CenterlineEstimate(n1, n2, r_v, eps, anchor, c_raw, float(value), False)


def fit_centerline(
    spread_points,
    raw_points=None,
    reference: Optional[CenterlineEstimate] = None,
    cfg: Optional[OptimizerConfig] = None,
    init: Optional[CenterlineEstimate] = None,
    anchor: Optional[Pose] = None,
    max_steps: int = 200,
    tol: float = 1e-13,
) -> CenterlineEstimate:
    """Iterate :func:`tick_tock_step` against a fixed stabilization
    ``reference`` (None: no stabilization) until the objective settles.

    Without ``init`` the data-driven cold start is tried alongside the
    reference, and the lower final objective wins; the reference alone can
    sit in the basin of a perpendicular axis when the buffer is short.
    """
    cfg = cfg or OptimizerConfig()
    raw_points = spread_points if raw_points is None else raw_points
    if init is not None:
        starts = [init]
    else:
        starts = [] if reference is None else [reference]
        try:
            starts.append(cold_start(spread_points, raw_points, cfg, anchor))
        except ColdStartError:
            if not starts:
                raise
    best = None
    for est in starts:
        est = _iterate(spread_points, raw_points, est, reference, cfg, max_steps, tol)
        if best is None or est.objective_value < best.objective_value:
            best = est
    return best


def _iterate(spread_points, raw_points, est, reference, cfg, max_steps, tol) -> CenterlineEstimate:
    last = np.inf
    for _ in range(max_steps):
        est = tick_tock_step(spread_points, raw_points, est, cfg, reference=reference)
        if last - est.objective_value < tol:
            break
        last = est.objective_value
    return est
