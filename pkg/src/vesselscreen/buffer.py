"""Per-frame boundary clouds and the ring buffer that feeds the optimizer."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np

from vesselscreen.geometry import Pose

DEFAULT_CAPACITY = 10
DEFAULT_SPREAD_MU = 5.0
COPLANAR_RATIO = 1e-6


class EmptyInputError(ValueError):
    """An empty cloud was offered to, or read from, the buffer."""


@dataclass(frozen=True, eq=False)
class BoundaryCloud:
    """Boundary points of one detected cross-section, in {b} (mm).

    ``outlier_count`` trailing points are isolated detections that are not
    part of the ordered contour (used when rasterizing the cloud).
    """

    points: np.ndarray
    timestamp: float = 0.0
    source_pose: Pose = field(default_factory=Pose)
    frame_id: int = 0
    visible: bool = True
    outlier_count: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "outlier_count", min(int(self.outlier_count), len(pts)))
        if len(pts) == 0:
            object.__setattr__(self, "visible", False)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    @property
    def centroid(self) -> np.ndarray:
        if self.empty:
            return np.full(3, np.nan)
        return self.points.mean(axis=0)

    @property
    def contour(self) -> np.ndarray:
        return self.points[: len(self.points) - self.outlier_count]

    def replace(self, **changes) -> "BoundaryCloud":
        kw = dict(
            points=self.points,
            timestamp=self.timestamp,
            source_pose=self.source_pose,
            frame_id=self.frame_id,
            visible=self.visible,
            outlier_count=self.outlier_count,
        )
        kw.update(changes)
        return BoundaryCloud(**kw)


def coplanarity_ratio(points: np.ndarray) -> float:
    """Smallest over largest singular value of the centered point set."""
    pts = np.asarray(points, float)
    if len(pts) < 3:
        return 0.0
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return float(s[-1] / s[0]) if s[0] > 0 else 0.0


def is_degenerate(points: np.ndarray, ratio: float = COPLANAR_RATIO) -> bool:
    return coplanarity_ratio(points) < ratio


def spread_clouds(clouds: Iterable[BoundaryCloud], mu: float) -> np.ndarray:
    """Push clouds apart along their centroid offsets from the first one.

    Every point of cloud j moves by ``mu * (C_j - C_1)``; cloud 1 is the
    first (oldest) cloud and stays put.
    """
    clouds = list(clouds)
    if not clouds:
        raise EmptyInputError("nothing to spread")
    c1 = clouds[0].centroid
    return np.concatenate([c.points + mu * (c.centroid - c1) for c in clouds], axis=0)


class CloudRingBuffer:
    """FIFO of the newest ``capacity`` boundary clouds.

    ``push`` and the read methods take an internal lock, so one acquisition
    thread and one optimizer thread may share an instance.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, spread_mu: float = DEFAULT_SPREAD_MU):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if spread_mu < 0:
            raise ValueError("spread_mu must be >= 0")
        self.capacity = int(capacity)
        self.spread_mu = float(spread_mu)
        self._slots: deque = deque(maxlen=self.capacity)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._slots)

    @property
    def is_full(self) -> bool:
        with self._lock:
            return len(self._slots) == self.capacity

    def push(self, cloud: BoundaryCloud) -> "CloudRingBuffer":
        if cloud.empty:
            raise EmptyInputError("refusing to buffer an empty cloud")
        with self._lock:
            self._slots.append(cloud)
        return self

    def clear(self) -> None:
        with self._lock:
            self._slots.clear()

    def clouds(self) -> List[BoundaryCloud]:
        """Snapshot, oldest first."""
        with self._lock:
            return list(self._slots)

    def raw_points(self) -> np.ndarray:
        snap = self.clouds()
        if not snap:
            raise EmptyInputError("buffer is empty")
        return np.concatenate([c.points for c in snap], axis=0)

    def spread_view(self) -> np.ndarray:
        """All buffered points with centroid spreading applied.

        The stored clouds are never modified.
        """
        snap = self.clouds()
        if not snap:
            raise EmptyInputError("buffer is empty")
        return spread_clouds(snap, self.spread_mu)

    def views(self) -> Tuple[np.ndarray, np.ndarray, bool]:
        """(spread points, raw points, degenerate flag) from one snapshot."""
        snap = self.clouds()
        if not snap:
            raise EmptyInputError("buffer is empty")
        spread = spread_clouds(snap, self.spread_mu)
        raw = np.concatenate([c.points for c in snap], axis=0)
        return spread, raw, is_degenerate(spread)

    def degenerate(self) -> bool:
        return is_degenerate(self.spread_view())

    def dump_ply(self, path, spread: bool = False) -> Path:
        """Write the buffered points as an ASCII PLY file (one vertex per point,
        with the cloud's slot index as an extra property)."""
        snap = self.clouds()
        path = Path(path)
        if spread and snap:
            pts = spread_clouds(snap, self.spread_mu)
        else:
            pts = np.concatenate([c.points for c in snap], axis=0) if snap else np.zeros((0, 3))
        slot = np.concatenate([np.full(len(c), i) for i, c in enumerate(snap)]) if snap else np.zeros(0)
        write_ply(path, pts, slot)
        return path


def write_ply(path, points: np.ndarray, slot: Optional[np.ndarray] = None) -> None:
    points = np.asarray(points, float).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if slot is not None:
        lines.append("property int slot")
    lines.append("end_header")
    for i, p in enumerate(points):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if slot is not None:
            row += f" {int(slot[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    """Read x, y, z from an ASCII PLY written by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    n = next(int(l.split()[-1]) for l in text[:end] if l.startswith("element vertex"))
    rows = [l.split()[:3] for l in text[end + 1 : end + 1 + n]]
    return np.array(rows, dtype=float).reshape(-1, 3)
