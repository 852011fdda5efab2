"""Probe target construction and a Cartesian impedance plant.

The plant renders the probe as a 6-DoF mass-spring-damper about the
commanded pose, one decoupled second-order system per axis of the target
frame (x, y, z, rx, ry, rz).  Translations are in mm, rotations in rad;
stiffness is given in N/m and Nm/rad.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import expm

from vesselscreen.geometry import GeometryError, ImageCalibration, Pose, so3_exp, so3_log
from vesselscreen.phantom import SurfacePlane

MAX_MARCH_VELOCITY = 20.0  # mm/s
MIN_VESSEL_SURFACE_ANGLE = 10.0  # deg between the vessel and the surface normal


def _vec6(x, name):
    arr = np.asarray(x, dtype=float).reshape(-1)
    if arr.shape != (6,):
        raise ValueError(f"{name} must have 6 entries")
    return arr


@dataclass(frozen=True, eq=False)
class ImpedanceParams:
    K_m: np.ndarray = field(default_factory=lambda: np.array([1000.0, 1000.0, 300.0, 20.0, 20.0, 2.0]))
    damping_ratio: float = 0.8
    M: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 2.0, 0.02, 0.02, 0.02]))
    F_d: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 5.0, 0.0, 0.0, 0.0]))
    force_limit: float = 25.0

    def __post_init__(self):
        for name in ("K_m", "M", "F_d"):
            object.__setattr__(self, name, _vec6(getattr(self, name), name))
        if np.any(self.K_m <= 0):
            raise ValueError("stiffness must be positive")
        if np.any(self.M <= 0):
            raise ValueError("inertia must be positive")
        if not 0.0 < self.damping_ratio <= 2.0:
            raise ValueError("damping ratio must lie in (0, 2]")
        if self.force_limit <= 0:
            raise ValueError("force limit must be positive")

    @property
    def D(self) -> np.ndarray:
        return 2.0 * self.damping_ratio * np.sqrt(self.K_m * self.M)

    def key(self):
        return (tuple(self.K_m), tuple(self.M), self.damping_ratio)


@dataclass(frozen=True, eq=False)
class ProbeCommand:
    target_pose: Pose
    march_velocity: float = 0.0
    centering_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not 0.0 <= self.march_velocity <= MAX_MARCH_VELOCITY:
            raise ValueError(f"march velocity must lie in [0, {MAX_MARCH_VELOCITY}] mm/s")
        object.__setattr__(self, "centering_offset", np.asarray(self.centering_offset, float))


@dataclass(frozen=True, eq=False)
class PlantState:
    pose: Pose = field(default_factory=Pose)
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))  # (mm/s, rad/s) in {b}

    def __post_init__(self):
        object.__setattr__(self, "twist", _vec6(self.twist, "twist"))


@dataclass(frozen=True)
class ContactModel:
    """Unilateral spring along the surface normal acting on the probe tip."""

    surface: SurfacePlane = field(default_factory=SurfacePlane)
    stiffness: float = 5000.0  # N/m

    def force(self, tip) -> np.ndarray:
        """Reaction force on the probe in N, in {b}."""
        depth = float(self.surface.depth(tip))
        if depth <= 0:
            return np.zeros(3)
        return -self.stiffness * depth * 1e-3 * self.surface.inward_normal


def target_orientation(n_v, n_s, previous_y=None) -> np.ndarray:
    """Probe rotation with Y along the vessel and Z along the surface normal.

    ``n_s`` is the contact-surface normal pointing into the tissue.  The sign
    of Y follows ``previous_y`` when given so the march direction does not
    flip.  Columns are (X, Y, Z) with X = Y x Z.
    """
    y = np.asarray(n_v, float)
    y = y / np.linalg.norm(y)
    s = np.asarray(n_s, float)
    s = s / np.linalg.norm(s)
    if abs(y @ s) >= np.cos(np.radians(MIN_VESSEL_SURFACE_ANGLE)):
        raise GeometryError("vessel direction is nearly parallel to the surface normal")
    if previous_y is not None and y @ np.asarray(previous_y, float) < 0:
        y = -y
    z = s - (s @ y) * y
    z /= np.linalg.norm(z)
    x = np.cross(y, z)
    return np.column_stack([x, y, z])


def centering_offset(x_c_I: float, cal: ImageCalibration, probe_pose: Pose) -> np.ndarray:
    """Lateral offset (mm, in {b}) of the image center relative to the vessel
    centroid at lateral pixel ``x_c_I``.

    Uses only the linear part of the image-to-base map (``probe_pose``
    composed with the pixel scaling), so no translation is added.  The probe
    has to move by the negative of this vector to center the vessel.
    """
    if not 0.0 <= x_c_I <= cal.H:
        raise GeometryError(f"centroid pixel {x_c_I} outside [0, {cal.H}]")
    linear = probe_pose.rotation @ cal.image_to_probe_matrix()[:3, :3]
    return linear @ np.array([cal.H / 2.0 - x_c_I, 0.0, 0.0])


@lru_cache(maxsize=64)
def _zoh(key, h: float):
    """Exact zero-order-hold transition (Phi, Gamma) per axis for
    x'' + 2 zeta w x' + w^2 x = u."""
    K, M, zeta = np.array(key[0]), np.array(key[1]), key[2]
    phis, gammas = [], []
    for k, m in zip(K, M):
        w = np.sqrt(k / m)
        A = np.zeros((3, 3))
        A[0, 1] = 1.0
        A[1, 0] = -w * w
        A[1, 1] = -2.0 * zeta * w
        A[1, 2] = 1.0
        E = expm(A * h)
        phis.append(E[:2, :2])
        gammas.append(E[:2, 2])
    return np.array(phis), np.array(gammas)


def lyapunov(state: PlantState, target: Pose, params: ImpedanceParams) -> float:
    """0.5 v'Mv + 0.5 e'Ke in SI units (J)."""
    R_d = target.rotation
    e = np.concatenate([R_d.T @ (state.pose.translation - target.translation) * 1e-3, R_d.T @ _rot_error(state.pose.rotation, R_d)])
    v = np.concatenate([R_d.T @ state.twist[:3] * 1e-3, R_d.T @ state.twist[3:]])
    return float(0.5 * np.sum(params.M * v * v) + 0.5 * np.sum(params.K_m * e * e))


def _rot_error(R, R_d) -> np.ndarray:
    return so3_log(R @ R_d.T)


def step_impedance(
    current: PlantState,
    command: ProbeCommand,
    params: ImpedanceParams,
    contact: Optional[ContactModel] = None,
    dt: float = 0.01,
    substep: float = 2e-3,
) -> Tuple[PlantState, np.ndarray]:
    """Advance the plant by ``dt`` seconds toward ``command.target_pose``.

    Solves M e'' + D e' + K e = F_contact + F_d per target-frame axis with
    the forcing held over each substep, which makes free motion exact.
    ``F_d`` is expressed in the target frame.  Returns the new state and the
    contact wrench (N, Nm) in {b} at the end of the step.
    """
    if not 0.0 < dt <= 0.02:
        raise ValueError("dt must lie in (0, 0.02] s")
    n_sub = max(1, int(np.ceil(dt / substep - 1e-9)))
    h = dt / n_sub
    Phi, Gamma = _zoh(params.key(), h)
    R_d = command.target_pose.rotation
    p_d = command.target_pose.translation
    fd_world = R_d @ params.F_d[:3]

    p = current.pose.translation.copy()
    R = current.pose.rotation
    v = current.twist[:3].copy()
    w = current.twist[3:].copy()
    f_contact = contact.force(p) if contact is not None else np.zeros(3)
    for _ in range(n_sub):
        e = np.concatenate([R_d.T @ (p - p_d), R_d.T @ _rot_error(R, R_d)])
        de = np.concatenate([R_d.T @ v, R_d.T @ w])
        force = R_d.T @ (f_contact + fd_world) * 1e3  # N -> kg mm/s^2
        u = np.concatenate([force, params.F_d[3:]]) / params.M
        x = np.einsum("aij,aj->ai", Phi, np.stack([e, de], axis=1)) + Gamma * u[:, None]
        p = p_d + R_d @ x[:3, 0]
        v = R_d @ x[:3, 1]
        R = so3_exp(R_d @ x[3:, 0]) @ R_d
        w = R_d @ x[3:, 1]
        f_contact = contact.force(p) if contact is not None else np.zeros(3)
    u_, _, vt = np.linalg.svd(R)
    nxt = PlantState(Pose(u_ @ vt, p), np.concatenate([v, w]))
    return nxt, np.concatenate([f_contact, np.zeros(3)])


class GateState(str, enum.Enum):
    CONTINUE = "continue"
    HALTED = "halted"


class SafetyGate:
    """Latching contact-force limit."""

    def __init__(self, force_limit: float = 25.0):
        self.force_limit = float(force_limit)
        self.halted = False
        self.tripped_force: Optional[float] = None

    def __call__(self, contact_force: float) -> GateState:
        if not self.halted and contact_force > self.force_limit:
            self.halted = True
            self.tripped_force = float(contact_force)
        return GateState.HALTED if self.halted else GateState.CONTINUE

    check = __call__

    def reset(self) -> None:
        self.halted = False
        self.tripped_force = None


def frozen_command(state: PlantState) -> ProbeCommand:
    """Hold the current pose (used once the gate has tripped)."""
    return ProbeCommand(state.pose)
