"""Point cloud container, exact nearest neighbour search, normals, cropping and ASCII I/O."""

import logging
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from gmmcalib.errors import EmptyCloud, InvalidObservationSet, ParseError, TooFewPoints, UnsupportedFormat
from gmmcalib.se3 import RigidTransform
from gmmcalib.utils import atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_NORMAL_K = 15
NORMAL_TOLERANCE = 1e-6

FORMAT_PLY = "ply-ascii"
FORMAT_PCD = "pcd-ascii"
FORMAT_CSV = "xyz-csv"
SUFFIX_FORMATS = {".ply": FORMAT_PLY, ".pcd": FORMAT_PCD, ".csv": FORMAT_CSV, ".xyz": FORMAT_CSV}
BINARY_HEADER = re.compile(r"^(?:format|DATA)\s+binary\S*", re.MULTILINE)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered (n, 3) point array tagged with the sensor and frame it is expressed in."""

    points: np.ndarray
    normals: np.ndarray | None = None
    sensor_id: str = ""
    frame_label: str = ""

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            msg = f"Point cloud {self.sensor_id!r} contains NaN or Inf coordinates"
            raise ValueError(msg)
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(normals) != len(points):
                msg = f"Got {len(normals)} normals for {len(points)} points"
                raise ValueError(msg)
            if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > NORMAL_TOLERANCE:
                msg = "Normals must have unit length"
                raise ValueError(msg)
            normals.setflags(write=False)
            object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def transformed(self, transform: RigidTransform, frame_label: str | None = None) -> "PointCloud":
        """Apply a rigid transform to points (and normals)."""
        normals = transform.rotate(self.normals) if self.normals is not None else None
        return PointCloud(
            transform.apply(self.points),
            normals,
            sensor_id=self.sensor_id,
            frame_label=self.frame_label if frame_label is None else frame_label,
        )

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.is_empty:
            msg = "Empty cloud has no bounds"
            raise EmptyCloud(msg)
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Paired observations from exactly two sensors.

    ``observations`` holds every cloud of the first sensor followed by every cloud of the
    second sensor; ``pair_index[j]`` names the two members of pair ``j``.
    """

    observations: tuple[PointCloud, ...]
    pair_index: Mapping[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        observations = tuple(self.observations)
        object.__setattr__(self, "observations", observations)
        pair_index = {int(j): (int(a), int(b)) for j, (a, b) in dict(self.pair_index).items()}
        object.__setattr__(self, "pair_index", pair_index)

        sensors = []
        for cloud in observations:
            if cloud.sensor_id not in sensors:
                sensors.append(cloud.sensor_id)
        if len(sensors) != 2:
            msg = f"Observation set needs exactly two distinct sensors, got {sensors}"
            raise InvalidObservationSet(msg)
        counts = [sum(c.sensor_id == s for c in observations) for s in sensors]
        if counts[0] != counts[1]:
            msg = f"Unequal observation counts per sensor: {dict(zip(sensors, counts, strict=True))}"
            raise InvalidObservationSet(msg)
        if sorted(pair_index) != list(range(counts[0])):
            msg = f"Pair index must cover 0..{counts[0] - 1}, got {sorted(pair_index)}"
            raise InvalidObservationSet(msg)
        for j, (first, second) in pair_index.items():
            if observations[first].sensor_id != sensors[0] or observations[second].sensor_id != sensors[1]:
                msg = f"Pair {j} does not hold one observation per sensor"
                raise InvalidObservationSet(msg)

    @classmethod
    def from_pairs(cls, first: Sequence[PointCloud], second: Sequence[PointCloud]) -> "ObservationSet":
        """Build from two equally long per-sensor lists, pairing them by position."""
        if len(first) != len(second):
            msg = f"Unequal observation counts per sensor: {len(first)} != {len(second)}"
            raise InvalidObservationSet(msg)
        n = len(first)
        return cls((*first, *second), {j: (j, n + j) for j in range(n)})

    @property
    def sensor_ids(self) -> tuple[str, str]:
        first, second = self.pair_index[0]
        return self.observations[first].sensor_id, self.observations[second].sensor_id

    @property
    def n_pairs(self) -> int:
        return len(self.pair_index)

    def __len__(self) -> int:
        return len(self.observations)

    def pair(self, j: int) -> tuple[PointCloud, PointCloud]:
        first, second = self.pair_index[j]
        return self.observations[first], self.observations[second]

    def union_points(self) -> np.ndarray:
        return np.concatenate([c.points for c in self.observations], axis=0)


class SpatialIndex:
    """Exact Euclidean nearest neighbour search over a fixed point set."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            msg = "Cannot index an empty cloud"
            raise EmptyCloud(msg)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries: np.ndarray, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Return (distances, indices) of the k nearest points for each query row."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        distances, indices = self._tree.query(q, k=k, eps=0.0)
        return np.asarray(distances), np.asarray(indices)

    def nearest(self, query: np.ndarray) -> np.ndarray:
        _, idx = self.query(np.asarray(query).reshape(1, 3))
        return self.points[int(idx[0])]


def build_spatial_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_NORMAL_K, index: SpatialIndex | None = None) -> PointCloud:
    """Estimate per-point normals from k-nearest-neighbour covariances.

    Each normal is the eigenvector of its neighbourhood covariance with the smallest
    eigenvalue, flipped to face the origin of the cloud's own frame.

    Raises:
        TooFewPoints: If k < 3 or the cloud has fewer than k points
    """
    if k < 3 or len(cloud) < k:
        msg = f"Normal estimation needs k >= 3 and at least k points (k={k}, n={len(cloud)})"
        raise TooFewPoints(msg)
    index = index or build_spatial_index(cloud)
    _, neighbours = index.query(cloud.points, k=k)
    normals = local_frames(cloud.points[neighbours])[:, :, 0]
    facing_away = np.einsum("ij,ij->i", normals, cloud.points) > 0
    normals[facing_away] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return replace(cloud, normals=normals)


def local_frames(neighbourhoods: np.ndarray) -> np.ndarray:
    """Eigenvectors (columns, ascending eigenvalue) of each (k, 3) neighbourhood covariance."""
    centered = neighbourhoods - neighbourhoods.mean(axis=1, keepdims=True)
    covariances = np.einsum("nki,nkj->nij", centered, centered) / neighbourhoods.shape[1]
    _, vectors = np.linalg.eigh(covariances)
    return vectors


def crop_box(cloud: PointCloud, lower: Sequence[float], upper: Sequence[float], invert: bool = False) -> PointCloud:
    """Keep the points inside the closed axis-aligned box (or outside it when ``invert``)."""
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)
    if np.any(lo >= hi):
        msg = f"Crop box min {lo.tolist()} must be below max {hi.tolist()} on every axis"
        raise ValueError(msg)
    inside = np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1)
    keep = ~inside if invert else inside
    normals = cloud.normals[keep] if cloud.normals is not None else None
    return PointCloud(cloud.points[keep], normals, sensor_id=cloud.sensor_id, frame_label=cloud.frame_label)


def concatenate(clouds: Iterable[PointCloud], sensor_id: str = "", frame_label: str = "") -> PointCloud:
    parts = [c.points for c in clouds]
    points = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
    return PointCloud(points, sensor_id=sensor_id, frame_label=frame_label)


def resolve_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in (FORMAT_PLY, FORMAT_PCD, FORMAT_CSV):
            msg = f"Unsupported point cloud format: {fmt}"
            raise UnsupportedFormat(msg)
        return fmt
    try:
        return SUFFIX_FORMATS[path.suffix.lower()]
    except KeyError:
        msg = f"Cannot infer point cloud format from suffix {path.suffix!r}"
        raise UnsupportedFormat(msg) from None


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def _rows(cloud: PointCloud, sep: str) -> list[str]:
    if cloud.normals is None:
        data = cloud.points
    else:
        data = np.hstack([cloud.points, cloud.normals])
    return [sep.join(_fmt(v) for v in row) for row in data.tolist()]


def _parse_row(tokens: list[str], width: int, line_no: int) -> list[float]:
    if len(tokens) < width:
        msg = f"expected {width} values, got {len(tokens)}"
        raise ParseError(msg, line_no)
    try:
        values = [float(t) for t in tokens[:width]]
    except ValueError:
        msg = f"malformed coordinate in {' '.join(tokens)!r}"
        raise ParseError(msg, line_no) from None
    if not all(math.isfinite(v) for v in values):
        msg = f"non-finite coordinate in {' '.join(tokens)!r}"
        raise ParseError(msg, line_no)
    return values


def _build(rows: list[list[float]], has_normals: bool, sensor_id: str, frame_label: str) -> PointCloud:
    data = np.array(rows, dtype=np.float64).reshape(-1, 6 if has_normals else 3)
    normals = data[:, 3:6] if has_normals else None
    if normals is not None and len(normals):
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(data[:, :3], normals, sensor_id=sensor_id, frame_label=frame_label)


def _write_ply(cloud: PointCloud) -> str:
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment sensor_id {cloud.sensor_id}", f"comment frame_label {cloud.frame_label}"]
    lines.append(f"element vertex {len(cloud)}")
    lines += [f"property float {axis}" for axis in "xyz"]
    if cloud.normals is not None:
        lines += [f"property float {axis}" for axis in ("nx", "ny", "nz")]
    lines.append("end_header")
    return "\n".join(lines + _rows(cloud, " ")) + "\n"


def _read_ply(lines: list[str], sensor_id: str, frame_label: str) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        msg = "missing 'ply' magic"
        raise ParseError(msg, 1)
    count = None
    properties: list[str] = []
    current_element = None
    header_end = None
    for line_no, raw in enumerate(lines[1:], start=2):
        tokens = raw.split()
        if not tokens:
            continue
        keyword = tokens[0]
        if keyword == "format":
            if len(tokens) < 2 or tokens[1] != "ascii":
                msg = f"Only ASCII PLY is supported, got {raw.strip()!r}"
                raise UnsupportedFormat(msg)
        elif keyword == "comment":
            if len(tokens) >= 2 and tokens[1] == "sensor_id":
                sensor_id = tokens[2] if len(tokens) > 2 else ""
            elif len(tokens) >= 2 and tokens[1] == "frame_label":
                frame_label = tokens[2] if len(tokens) > 2 else ""
        elif keyword == "element":
            if len(tokens) != 3:
                msg = f"malformed element line {raw.strip()!r}"
                raise ParseError(msg, line_no)
            current_element = tokens[1]
            try:
                element_count = int(tokens[2])
            except ValueError:
                msg = f"malformed element count {tokens[2]!r}"
                raise ParseError(msg, line_no) from None
            if current_element == "vertex":
                count = element_count
            elif element_count:
                msg = f"Unsupported PLY element {current_element!r}"
                raise UnsupportedFormat(msg)
        elif keyword == "property":
            if current_element == "vertex":
                properties.append(tokens[-1])
        elif keyword == "end_header":
            header_end = line_no
            break
        else:
            msg = f"unexpected header line {raw.strip()!r}"
            raise ParseError(msg, line_no)
    if header_end is None or count is None:
        msg = "header has no vertex element or no end_header"
        raise ParseError(msg, len(lines))
    if properties[:3] != ["x", "y", "z"]:
        msg = f"vertex properties must start with x y z, got {properties}"
        raise ParseError(msg, header_end)
    has_normals = properties[3:6] == ["nx", "ny", "nz"]
    width = 6 if has_normals else 3

    rows = []
    for line_no, raw in enumerate(lines[header_end:], start=header_end + 1):
        if len(rows) == count:
            break
        tokens = raw.split()
        if not tokens:
            continue
        rows.append(_parse_row(tokens, width, line_no))
    if len(rows) != count:
        msg = f"expected {count} vertices, found {len(rows)}"
        raise ParseError(msg, len(lines))
    return _build(rows, has_normals, sensor_id, frame_label)


def _write_pcd(cloud: PointCloud) -> str:
    fields = ["x", "y", "z"]
    if cloud.normals is not None:
        fields += ["normal_x", "normal_y", "normal_z"]
    n = len(cloud)
    lines = [
        f"# sensor_id {cloud.sensor_id}",
        f"# frame_label {cloud.frame_label}",
        "VERSION 0.7",
        f"FIELDS {' '.join(fields)}",
        f"SIZE {' '.join('4' for _ in fields)}",
        f"TYPE {' '.join('F' for _ in fields)}",
        f"COUNT {' '.join('1' for _ in fields)}",
        f"WIDTH {n}",
        "HEIGHT 1",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    return "\n".join(lines + _rows(cloud, " ")) + "\n"


def _read_pcd(lines: list[str], sensor_id: str, frame_label: str) -> PointCloud:
    fields: list[str] = []
    count = None
    data_start = None
    for line_no, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if tokens[0].startswith("#"):
            if len(tokens) >= 2 and tokens[1] == "sensor_id":
                sensor_id = tokens[2] if len(tokens) > 2 else ""
            elif len(tokens) >= 2 and tokens[1] == "frame_label":
                frame_label = tokens[2] if len(tokens) > 2 else ""
            continue
        keyword = tokens[0].upper()
        if keyword == "FIELDS":
            fields = tokens[1:]
        elif keyword == "POINTS":
            try:
                count = int(tokens[1])
            except (IndexError, ValueError):
                msg = f"malformed POINTS line {raw.strip()!r}"
                raise ParseError(msg, line_no) from None
        elif keyword == "DATA":
            if len(tokens) < 2 or tokens[1] != "ascii":
                msg = f"Only ASCII PCD is supported, got {raw.strip()!r}"
                raise UnsupportedFormat(msg)
            data_start = line_no
            break
    if data_start is None:
        msg = "missing DATA line"
        raise ParseError(msg, len(lines))
    if fields[:3] != ["x", "y", "z"]:
        msg = f"FIELDS must start with x y z, got {fields}"
        raise ParseError(msg, data_start)
    has_normals = fields[3:6] == ["normal_x", "normal_y", "normal_z"]
    width = 6 if has_normals else 3
    rows = []
    for line_no, raw in enumerate(lines[data_start:], start=data_start + 1):
        tokens = raw.split()
        if not tokens:
            continue
        rows.append(_parse_row(tokens, width, line_no))
    if count is not None and len(rows) != count:
        msg = f"expected {count} points, found {len(rows)}"
        raise ParseError(msg, len(lines))
    return _build(rows, has_normals, sensor_id, frame_label)


def _write_csv(cloud: PointCloud) -> str:
    header = "x,y,z,nx,ny,nz" if cloud.normals is not None else "x,y,z"
    lines = [f"# sensor_id {cloud.sensor_id}", f"# frame_label {cloud.frame_label}", header]
    return "\n".join(lines + _rows(cloud, ",")) + "\n"


def _read_csv(lines: list[str], sensor_id: str, frame_label: str) -> PointCloud:
    rows = []
    has_normals = False
    for line_no, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        if text.startswith("#"):
            tokens = text[1:].split()
            if len(tokens) >= 1 and tokens[0] == "sensor_id":
                sensor_id = tokens[1] if len(tokens) > 1 else ""
            elif len(tokens) >= 1 and tokens[0] == "frame_label":
                frame_label = tokens[1] if len(tokens) > 1 else ""
            continue
        tokens = [t.strip() for t in text.split(",")]
        if not rows and tokens[0].lower() == "x":
            has_normals = [t.lower() for t in tokens[3:6]] == ["nx", "ny", "nz"]
            continue
        rows.append(_parse_row(tokens, 6 if has_normals else 3, line_no))
    return _build(rows, has_normals, sensor_id, frame_label)


def write_cloud(cloud: PointCloud, path: Path, fmt: str | None = None) -> Path:
    """Write a cloud as ASCII PLY, PCD or CSV with 9 significant digits."""
    path = Path(path)
    fmt = resolve_format(path, fmt)
    writers = {FORMAT_PLY: _write_ply, FORMAT_PCD: _write_pcd, FORMAT_CSV: _write_csv}
    atomic_write_text(path, writers[fmt](cloud))
    logger.debug(f"Wrote {len(cloud)} points to {path}")
    return path


def _decode(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        head = data[: e.start].decode("utf-8")
        binary = BINARY_HEADER.search(head)
        if binary:
            msg = f"Binary point clouds are not supported: {binary.group(0)!r}"
            raise UnsupportedFormat(msg) from None
        msg = f"undecodable byte 0x{data[e.start]:02x}"
        raise ParseError(msg, head.count("\n") + 1) from None


def read_cloud(path: Path, fmt: str | None = None, sensor_id: str = "", frame_label: str = "") -> PointCloud:
    """Read an ASCII PLY, PCD or CSV cloud.

    Raises:
        ParseError: With the offending line number
        UnsupportedFormat: For binary variants or unknown suffixes
    """
    path = Path(path)
    fmt = resolve_format(path, fmt)
    lines = _decode(path.read_bytes()).splitlines()
    readers = {FORMAT_PLY: _read_ply, FORMAT_PCD: _read_pcd, FORMAT_CSV: _read_csv}
    cloud = readers[fmt](lines, sensor_id, frame_label)
    logger.debug(f"Read {len(cloud)} points from {path}")
    return cloud
