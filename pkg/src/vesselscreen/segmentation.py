"""Mask-level utilities: overlap metric, connected-component candidates and
nearest-candidate tracking.

Masks are indexed ``bits[v, u]``: rows run along depth, columns along the
transducer footprint.  Pixel ``(u, v)`` in candidate coordinates refers to
the pixel center, i.e. column index + 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from matplotlib.path import Path as PolygonPath

from vesselscreen.buffer import BoundaryCloud
from vesselscreen.geometry import GeometryError, ImageCalibration, Pose

DEFAULT_MIN_AREA = 30
_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray = None

    def __post_init__(self):
        if self.bits is None:
            bits = np.zeros((self.height, self.width), dtype=bool)
        else:
            bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise GeometryError(f"mask bits {bits.shape} do not match {self.height}x{self.width}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_array(cls, bits) -> "BinaryMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits.shape[1], bits.shape[0], bits)

    @classmethod
    def for_image(cls, cal: ImageCalibration) -> "BinaryMask":
        return cls(cal.H, cal.W)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        _check_same(self, other)
        return BinaryMask(self.width, self.height, self.bits | other.bits)


@dataclass(frozen=True, eq=False)
class Candidate:
    centroid: Tuple[float, float]
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    area: float = 0.0


def _check_same(a: BinaryMask, b: BinaryMask) -> None:
    if (a.width, a.height) != (b.width, b.height):
        raise GeometryError(f"mask size mismatch: {a.width}x{a.height} vs {b.width}x{b.height}")


def dice(G: BinaryMask, S: BinaryMask) -> float:
    """Overlap 2|G∩S| / (|G| + |S|); 1.0 when both masks are empty."""
    _check_same(G, S)
    total = G.count + S.count
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(G.bits & S.bits)) / total


def extract_candidates(mask: BinaryMask, min_area: float = DEFAULT_MIN_AREA) -> List[Candidate]:
    """4-connected components of at least ``min_area`` pixels, largest first,
    each with its outer boundary pixels ordered by angle about the centroid."""
    labels, n = ndimage.label(mask.bits, structure=_FOUR)
    if n == 0:
        return []
    out = []
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        comp = labels[sl] == idx
        area = int(comp.sum())
        if area < min_area:
            continue
        rows, cols = np.nonzero(comp)
        cu = cols.mean() + sl[1].start + 0.5
        cv = rows.mean() + sl[0].start + 0.5
        solid = np.pad(ndimage.binary_fill_holes(comp), 1)
        edge = solid & ~ndimage.binary_erosion(solid, structure=_FOUR)
        br, bc = np.nonzero(edge)
        bu = bc - 1 + sl[1].start + 0.5
        bv = br - 1 + sl[0].start + 0.5
        order = np.lexsort((bv, np.arctan2(bv - cv, bu - cu)))
        out.append(Candidate((float(cu), float(cv)), np.stack([bu[order], bv[order]], axis=1), float(area)))
    out.sort(key=lambda c: -c.area)
    return out


def track_nearest(previous_centroid: Optional[Sequence[float]], candidates: Sequence[Candidate]) -> Optional[Candidate]:
    """Candidate closest to the previous centroid; ties (within 1e-9 px) go to
    the larger area.  Without history the largest candidate wins."""
    if not candidates:
        return None
    if previous_centroid is None:
        return max(candidates, key=lambda c: c.area)
    p = np.asarray(previous_centroid, float)
    dist = np.array([np.hypot(*(np.asarray(c.centroid) - p)) for c in candidates])
    near = np.flatnonzero(dist <= dist.min() + 1e-9)
    return max((candidates[i] for i in near), key=lambda c: c.area)


def rasterize_clouds(clouds: Iterable[BoundaryCloud], cal: ImageCalibration, pose: Pose) -> BinaryMask:
    """Render clouds as a segmentation mask in the image of ``pose``.

    Each cloud's ordered contour is filled as a polygon; trailing outlier
    points become isolated pixels.
    """
    bits = np.zeros((cal.W, cal.H), dtype=bool)
    inv = pose.inverse()
    for cloud in clouds:
        if cloud.empty:
            continue
        uv = cal.probe_to_pixel(inv.apply(cloud.points))
        contour = uv[: len(uv) - cloud.outlier_count]
        if len(contour) >= 3:
            _fill(bits, contour)
        stray = np.floor(uv[len(contour):]).astype(int)
        ok = (stray[:, 0] >= 0) & (stray[:, 0] < cal.H) & (stray[:, 1] >= 0) & (stray[:, 1] < cal.W)
        bits[stray[ok, 1], stray[ok, 0]] = True
    return BinaryMask(cal.H, cal.W, bits)


def _fill(bits: np.ndarray, contour: np.ndarray) -> None:
    """Set pixels whose centers fall inside the polygon ``contour`` (u, v)."""
    u0 = max(int(np.floor(contour[:, 0].min())), 0)
    u1 = min(int(np.ceil(contour[:, 0].max())), bits.shape[1])
    v0 = max(int(np.floor(contour[:, 1].min())), 0)
    v1 = min(int(np.ceil(contour[:, 1].max())), bits.shape[0])
    if u1 <= u0 or v1 <= v0:
        return
    uu, vv = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    inside = PolygonPath(contour).contains_points(np.column_stack([uu.ravel(), vv.ravel()]))
    bits[v0:v1, u0:u1] |= inside.reshape(uu.shape)


def write_pgm(mask: BinaryMask, path) -> Path:
    """Binary PGM (P5), 255 for set pixels."""
    path = Path(path)
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    path.write_bytes(header + (mask.bits.astype(np.uint8) * 255).tobytes())
    return path


def read_pgm(path, threshold: int = 128) -> BinaryMask:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError("16-bit PGM is not supported")
    pixels = np.frombuffer(data[pos + 1 : pos + 1 + width * height], dtype=np.uint8)
    return BinaryMask(width, height, pixels.reshape(height, width) >= threshold)
