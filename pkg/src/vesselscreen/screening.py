"""Closed-loop screening simulation and its error metrics.

One control tick every ``1/control_rate_hz`` seconds of virtual time; a new
image every ``control_rate_hz / frame_rate_hz`` ticks.  Per image:
slice -> corrupt -> rasterize -> candidates -> track -> pixels to {b} ->
buffer -> alternating fit.  Per tick: probe target -> impedance step ->
safety gate -> metrics row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from vesselscreen.buffer import BoundaryCloud, CloudRingBuffer
from vesselscreen.centerline import (
    CenterlineEstimate,
    anchor_from_direction,
    estimate_radius,
    tick_tock_step,
)
from vesselscreen.config import ScenarioConfig
from vesselscreen.control import (
    ContactModel,
    PlantState,
    ProbeCommand,
    SafetyGate,
    centering_offset,
    step_impedance,
    target_orientation,
)
from vesselscreen.geometry import ImageCalibration, Pose, angle_between, image_to_base, plane_normal_from_points, probe_mount
from vesselscreen.phantom import corrupt_cloud, slice_tube, spawn_false_candidate
from vesselscreen.segmentation import extract_candidates, rasterize_clouds, track_nearest

log = logging.getLogger(__name__)

TRACE_COLUMNS = [
    "t",
    "frame",
    "buffer_full",
    "marching",
    "halted",
    "px",
    "py",
    "pz",
    "rx",
    "ry",
    "rz",
    "target_x",
    "target_y",
    "target_z",
    "force_N",
    "nv_x",
    "nv_y",
    "nv_z",
    "r_v",
    "eps",
    "objective",
    "degenerate",
    "x_c_px",
    "r_true",
    "e_or_rea",
    "e_or_com",
    "e_ce",
    "e_ra",
]

ERROR_NAMES = ("e_or_rea", "e_or_com", "e_ce", "e_ra")


@dataclass
class ScreeningMetrics:
    """Errors at one instant plus (once known) convergence times."""

    e_or_rea: float = math.nan
    e_or_com: float = math.nan
    e_ce: float = math.nan
    e_ra: float = math.nan
    t_or: float = math.nan
    t_ce: float = math.nan
    t_ra: float = math.nan


def compute_metrics(
    probe_pose: Pose,
    estimate: Optional[CenterlineEstimate],
    x_c_I: Optional[float],
    n_g,
    r_true: float,
    cal: ImageCalibration,
) -> ScreeningMetrics:
    """Error row against the ground-truth centerline ``n_g`` and radius."""
    m = ScreeningMetrics()
    if n_g is not None:
        m.e_or_rea = angle_between(n_g, probe_pose.axis(1), undirected=True)
        if estimate is not None:
            m.e_or_com = angle_between(n_g, estimate.direction, undirected=True)
    if x_c_I is not None:
        m.e_ce = abs(x_c_I - cal.H / 2.0) * cal.lateral_scale
    if estimate is not None and r_true is not None and np.isfinite(r_true):
        m.e_ra = estimate.r_v - r_true
    return m


def convergence_time(t: np.ndarray, err: np.ndarray, threshold: float, hold: float) -> float:
    """First time after which |err| stays within ``threshold`` for ``hold`` s.

    NaN samples count as outside.  Returns NaN if it never happens within
    the record.
    """
    t = np.asarray(t, float)
    ok = np.abs(np.nan_to_num(np.asarray(err, float), nan=np.inf)) <= threshold
    if len(t) == 0:
        return math.nan
    # index of the next violation at or after each sample
    n = len(t)
    next_bad = np.full(n + 1, n)
    for i in range(n - 1, -1, -1):
        next_bad[i] = next_bad[i + 1] if ok[i] else i
    end = t[-1]
    for i in range(n):
        if not ok[i] or t[i] + hold > end + 1e-9:
            continue
        j = next_bad[i]
        if j == n or t[j] >= t[i] + hold - 1e-9:
            return float(t[i])
    return math.nan


@dataclass
class ScreeningTrace:
    config: ScenarioConfig
    columns: Dict[str, np.ndarray]
    status: str = "ok"
    header: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.columns["t"])


def steady_summary(cols: Dict[str, np.ndarray], ms, status: str = "ok") -> Dict[str, float]:
    """Convergence times and steady-state statistics of |error|."""
    t = cols["t"]
    out: Dict[str, float] = {"status": status}
    times = {
        "t_or": convergence_time(t, cols["e_or_rea"], ms.or_threshold_deg, ms.hold_s),
        "t_ce": convergence_time(t, cols["e_ce"], ms.ce_threshold_mm, ms.hold_s),
        "t_ra": convergence_time(t, cols["e_ra"], ms.ra_threshold_mm, ms.hold_s),
    }
    out.update(times)
    if len(t) == 0:
        start = 0.0
        converged = False
    elif all(np.isfinite(v) for v in times.values()):
        start = max(times.values())
        converged = True
    else:
        start = float(t[0] + 0.5 * (t[-1] - t[0]))
        converged = False
    out["steady_start"] = start
    out["converged"] = float(converged)
    window = t >= start
    out["n_steady"] = int(window.sum())
    for name in ERROR_NAMES:
        vals = np.abs(cols[name][window])
        vals = vals[np.isfinite(vals)]
        out.update(error_stats(name, vals))
    ra = cols["e_ra"][window]
    ra = ra[np.isfinite(ra)]
    out["e_ra_signed_mean"] = float(ra.mean()) if len(ra) else math.nan
    return out


def error_stats(name: str, vals: np.ndarray) -> Dict[str, float]:
    if len(vals) == 0:
        return {f"{name}_{s}": math.nan for s in ("mean", "sd", "median", "max")}
    return {
        f"{name}_mean": float(np.mean(vals)),
        f"{name}_sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
        f"{name}_median": float(np.median(vals)),
        f"{name}_max": float(np.max(vals)),
    }


class LostTarget(RuntimeError):
    pass


def initial_probe_pose(cfg: ScenarioConfig, phantom, sign: int) -> Pose:
    """Tip on the skin above the vessel, yawed by the configured offset about
    the surface normal and shifted laterally."""
    s0 = cfg.phantom.start_fraction * phantom.length
    c = phantom.point_at(s0)
    i = int(np.clip(np.searchsorted(phantom._cum, s0) - 1, 0, len(phantom.vertices) - 2))
    n_g = phantom.segment_direction(i)
    z = phantom.surface.inward_normal
    y0 = n_g - (n_g @ z) * z
    y0 /= np.linalg.norm(y0)
    a = np.radians(sign * cfg.initial_offset_deg)
    x0 = np.cross(y0, z)
    y = np.cos(a) * y0 + np.sin(a) * x0
    x = np.cross(y, z)
    tip = phantom.surface.project(c) + cfg.initial_lateral_offset_mm * x0
    return Pose.from_axes(x, y, z, tip)


def run_screening(cfg: ScenarioConfig, dump_dir=None) -> ScreeningTrace:
    """Simulate one autonomous sweep.  Deterministic for a given config."""
    cal = cfg.calibration
    phantom = cfg.phantom.build()
    mount = probe_mount(cfg.mount_flipped)
    mount_inv = mount.inverse()
    noise = cfg.noise.build(cfg.seed)
    side_rng = np.random.default_rng([cfg.seed, 7])
    sign = int(side_rng.choice([-1, 1])) if cfg.offset_sign == "random" else int(cfg.offset_sign)

    dt = 1.0 / cfg.control_rate_hz
    ticks_per_frame = int(round(cfg.control_rate_hz / cfg.frame_rate_hz))
    n_ticks = int(round(cfg.duration_s * cfg.control_rate_hz))

    start = initial_probe_pose(cfg, phantom, sign)
    surf_pts = phantom.surface.sample_points(start.translation)
    n_s = plane_normal_from_points(*surf_pts, reference=start.axis(2))
    contact = ContactModel(phantom.surface, cfg.contact_stiffness_N_m)
    state = PlantState(start)
    gate = SafetyGate(cfg.impedance.force_limit)
    buffer = CloudRingBuffer(cfg.buffer_capacity, cfg.spread_mu)

    estimate: Optional[CenterlineEstimate] = None
    prev_centroid = None
    x_c: Optional[float] = None
    last_seen = 0.0
    frame_id = 0
    marching = False
    carrot = start.translation.copy()
    target = start
    correction = np.zeros(3)
    status = "ok"

    rows = {c: np.full(n_ticks, np.nan) for c in TRACE_COLUMNS}
    n_done = 0
    for k in range(n_ticks):
        t = k * dt
        probe_pose = state.pose
        new_frame = k % ticks_per_frame == 0
        gt = phantom.ground_truth(probe_pose, cal)
        r_true = gt[1] if gt is not None else math.nan
        if new_frame:
            flange = probe_pose.compose(mount_inv)
            true_cloud = slice_tube(phantom, probe_pose, cal, cfg.segmentation.boundary_samples, t, frame_id)
            noisy = corrupt_cloud(true_cloud, noise, cal)
            clouds = spawn_false_candidate(noisy, noise, cal, r_true if np.isfinite(r_true) else None)
            mask = rasterize_clouds(clouds, cal, probe_pose)
            chosen = track_nearest(prev_centroid, extract_candidates(mask, cfg.segmentation.min_area_px))
            if chosen is None:
                x_c = None
                if t - last_seen > cfg.metrics.lost_timeout_s:
                    status = "lost_target"
                    log.warning("vessel lost for more than %.2f s at t=%.2f", cfg.metrics.lost_timeout_s, t)
                    break
            else:
                last_seen = t
                prev_centroid = chosen.centroid
                x_c = chosen.centroid[0]
                bnd = chosen.boundary
                if len(bnd) > cfg.segmentation.max_cloud_points:
                    idx = np.linspace(0, len(bnd), cfg.segmentation.max_cloud_points, endpoint=False).astype(int)
                    bnd = bnd[idx]
                pts = image_to_base(flange, mount, cal, bnd[:, 0], bnd[:, 1])
                buffer.push(BoundaryCloud(pts, t, probe_pose, frame_id))
                correction = -centering_offset(x_c, cal, probe_pose)
                if buffer.is_full:
                    estimate = _update_estimate(buffer, estimate, probe_pose, cfg)
                    marching = True
            frame_id += 1

        if gate.halted and cfg.operator_reset:
            gate.reset()
        if marching and not gate.halted:
            y_prev = target.axis(1)
            R_t = target_orientation(estimate.direction, n_s, previous_y=y_prev)
            y_t = R_t[:, 1] - (R_t[:, 1] @ n_s) * n_s
            y_t /= np.linalg.norm(y_t)
            carrot = carrot + cfg.march_velocity_mm_s * dt * y_t
            if new_frame and x_c is not None:
                x_axis = probe_pose.axis(0)
                carrot = carrot + x_axis * ((probe_pose.translation + correction - carrot) @ x_axis)
            carrot = phantom.surface.project(carrot)
            target = Pose(R_t, carrot)
        command = ProbeCommand(target, cfg.march_velocity_mm_s if marching else 0.0, correction)
        if gate.halted:
            wrench = np.concatenate([contact.force(state.pose.translation), np.zeros(3)])
        else:
            state, wrench = step_impedance(state, command, cfg.impedance, contact, dt)
        force = float(np.linalg.norm(wrench[:3]))
        gate(force)

        m = compute_metrics(state.pose, estimate, x_c, gt[0] if gt is not None else None, r_true, cal)
        _record(rows, k, t, new_frame, buffer.is_full, marching, gate.halted, state, target, force, estimate, x_c, r_true, m)
        n_done = k + 1

    if dump_dir is not None:
        from pathlib import Path

        Path(dump_dir).mkdir(parents=True, exist_ok=True)
        buffer.dump_ply(Path(dump_dir) / "buffer_raw.ply")
        buffer.dump_ply(Path(dump_dir) / "buffer_spread.ply", spread=True)

    cols = {c: v[:n_done] for c, v in rows.items()}
    trace = ScreeningTrace(cfg, cols, status, header=_header(cfg, sign))
    trace.summary = steady_summary(cols, cfg.metrics, status)
    return trace


def _update_estimate(buffer: CloudRingBuffer, estimate, probe_pose: Pose, cfg: ScenarioConfig) -> CenterlineEstimate:
    spread, raw, degenerate = buffer.views()
    centroids = np.array([c.centroid for c in buffer.clouds()])
    travel = float(np.max(np.linalg.norm(centroids - centroids[0], axis=1)))
    # with the clouds still bunched together the spread points carry no
    # direction information; keep the direction and refit the radius only
    held = degenerate or travel < cfg.min_travel_mm
    if estimate is None:
        anchor = anchor_from_direction(probe_pose.axis(1), hint=probe_pose.axis(0))
        if held:
            # nothing to fit yet, assume the vessel runs along the elevational axis
            estimate = CenterlineEstimate(0.0, 0.0, cfg.optimizer.r_h, cfg.optimizer.eps_min, anchor, raw.mean(axis=0))
        else:
            return tick_tock_step(spread, raw, None, cfg.optimizer, anchor=anchor)
    elif not held:
        return tick_tock_step(spread, raw, estimate, cfg.optimizer)
    c = raw.mean(axis=0)
    r = estimate_radius(raw, c, estimate.direction)
    r = min(max(r, cfg.optimizer.r_l + cfg.optimizer.eps_min), cfg.optimizer.r_h)
    return replace(estimate, r_v=r, centroid=c, degenerate=True)


def _record(rows, k, t, frame, full, marching, halted, state, target, force, est, x_c, r_true, m):
    p = state.pose.translation
    rv = state.pose.rotvec()
    vals = {
        "t": t,
        "frame": float(frame),
        "buffer_full": float(full),
        "marching": float(marching),
        "halted": float(halted),
        "px": p[0],
        "py": p[1],
        "pz": p[2],
        "rx": rv[0],
        "ry": rv[1],
        "rz": rv[2],
        "target_x": target.translation[0],
        "target_y": target.translation[1],
        "target_z": target.translation[2],
        "force_N": force,
        "x_c_px": x_c if x_c is not None else math.nan,
        "r_true": r_true,
        "e_or_rea": m.e_or_rea,
        "e_or_com": m.e_or_com,
        "e_ce": m.e_ce,
        "e_ra": m.e_ra,
    }
    if est is not None:
        d = est.direction
        vals.update(nv_x=d[0], nv_y=d[1], nv_z=d[2], r_v=est.r_v, eps=est.eps, objective=est.objective_value, degenerate=float(est.degenerate))
    for key, val in vals.items():
        rows[key][k] = val


def _header(cfg: ScenarioConfig, sign: int) -> Dict[str, str]:
    imp = cfg.impedance
    fmt = lambda a: " ".join(f"{x:g}" for x in a)
    return {
        "seed": str(cfg.seed),
        "initial_offset_deg": f"{sign * cfg.initial_offset_deg:g}",
        "K_m": fmt(imp.K_m),
        "damping_ratio": f"{imp.damping_ratio:g}",
        "M": fmt(imp.M),
        "F_d": fmt(imp.F_d),
        "force_limit_N": f"{imp.force_limit:g}",
        "march_velocity_mm_s": f"{cfg.march_velocity_mm_s:g}",
        "command_blend": "vector sum of march velocity and lateral centering correction",
        "frame_rate_hz": f"{cfg.frame_rate_hz:g}",
        "control_rate_hz": f"{cfg.control_rate_hz:g}",
    }


SUMMARY_STATS = ("mean", "sd", "median", "max")
BATCH_COLUMNS = (
    ["kind", "offset_deg", "repeat", "seed", "status", "n_runs", "n_aborted", "t_or", "t_ce", "t_ra", "converged", "n_steady"]
    + [f"{e}_{s}" for e in ERROR_NAMES for s in SUMMARY_STATS]
    + ["e_ra_signed_mean"]
)


def run_seed(base_seed: int, offset_index: int, repeat: int) -> int:
    """Seed of one batch run, derived from the template seed."""
    return int(np.random.SeedSequence([base_seed, offset_index, repeat]).generate_state(1)[0])


@dataclass
class BatchResult:
    rows: List[Dict[str, object]]
    traces: List[ScreeningTrace] = field(default_factory=list, repr=False)

    def runs(self) -> List[Dict[str, object]]:
        return [r for r in self.rows if r["kind"] == "run"]

    def aggregates(self) -> List[Dict[str, object]]:
        return [r for r in self.rows if r["kind"] == "aggregate"]


def _steady_samples(trace: ScreeningTrace) -> Dict[str, np.ndarray]:
    cols = trace.columns
    window = cols["t"] >= trace.summary["steady_start"]
    return {name: cols[name][window] for name in ERROR_NAMES}


def batch_runs(cfg: ScenarioConfig, offsets: Sequence[float], repeats: int, keep_traces: bool = False) -> BatchResult:
    """Run every (offset, repeat) pair and tabulate per-run and per-offset results.

    Aggregates pool the steady-window samples of all runs that finished with
    status ``ok``; aborted runs only show up in ``n_aborted``.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows: List[Dict[str, object]] = []
    aggregates: List[Dict[str, object]] = []
    traces: List[ScreeningTrace] = []
    for oi, offset in enumerate(offsets):
        pooled = {name: [] for name in ERROR_NAMES}
        times = {"t_or": [], "t_ce": [], "t_ra": []}
        conv = []
        n_abort = 0
        for rep in range(repeats):
            seed = run_seed(cfg.seed, oi, rep)
            trace = run_screening(cfg.with_(initial_offset_deg=float(offset), seed=seed))
            if keep_traces:
                traces.append(trace)
            row = {"kind": "run", "offset_deg": float(offset), "repeat": rep, "seed": seed, "n_runs": 1}
            row.update(trace.summary)
            row["n_aborted"] = int(trace.status != "ok")
            rows.append(row)
            if trace.status != "ok":
                n_abort += 1
                log.warning("run offset=%g repeat=%d aborted: %s", offset, rep, trace.status)
                continue
            for name, vals in _steady_samples(trace).items():
                pooled[name].append(vals)
            for key in times:
                times[key].append(trace.summary[key])
            conv.append(trace.summary["converged"])
        agg: Dict[str, object] = {
            "kind": "aggregate",
            "offset_deg": float(offset),
            "status": "ok" if n_abort < repeats else "all_aborted",
            "n_runs": repeats - n_abort,
            "n_aborted": n_abort,
        }
        for key, vals in times.items():
            # NaN (never converged) sorts above every finite time
            med = float(np.median(np.where(np.isnan(vals), np.inf, vals))) if vals else math.nan
            agg[key] = med if np.isfinite(med) else math.nan
        agg["converged"] = float(np.mean(conv)) if conv else math.nan
        agg["n_steady"] = int(sum(len(v) for v in pooled["e_or_rea"]))
        for name in ERROR_NAMES:
            vals = np.abs(np.concatenate(pooled[name])) if pooled[name] else np.zeros(0)
            agg.update(error_stats(name, vals[np.isfinite(vals)]))
        ra = np.concatenate(pooled["e_ra"]) if pooled["e_ra"] else np.zeros(0)
        ra = ra[np.isfinite(ra)]
        agg["e_ra_signed_mean"] = float(ra.mean()) if len(ra) else math.nan
        aggregates.append(agg)
    return BatchResult(rows + aggregates, traces)
