"""Point clouds: file IO, voxel sampling, nearest-neighbour search, sub-target neighbourhoods."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import CloudFormatError, EmptyCloudError
from .manifold import Pose


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    timestamp: float | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=float)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose) -> PointCloud:
        return PointCloud(pose.apply(self.points), self.timestamp)


# ---------------------------------------------------------------- file IO


def _parse_float_row(fields: list[str], lineno: int) -> list[float]:
    try:
        row = [float(f) for f in fields]
    except ValueError:
        raise CloudFormatError(f"cannot parse {fields!r} as floats", lineno) from None
    if not all(math.isfinite(v) for v in row):
        raise CloudFormatError("non-finite coordinate", lineno)
    return row


def _load_csv(text: str) -> np.ndarray:
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) != 3:
            raise CloudFormatError(f"expected 3 comma-separated values, got {len(fields)}", lineno)
        rows.append(_parse_float_row(fields, lineno))
    return np.array(rows, dtype=float).reshape(-1, 3)


def _load_ply(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    elements: list[tuple[str, int]] = []
    current = None
    header_end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise CloudFormatError(f"unsupported PLY format {' '.join(tok[1:])!r}", lineno)
        elif tok[0] == "element":
            current = tok[1]
            count = int(tok[2])
            elements.append((current, count))
            if current == "vertex":
                n_vertex = count
        elif tok[0] == "property" and current == "vertex":
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = lineno
            break
    if header_end is None:
        raise CloudFormatError("missing end_header", len(lines))
    if n_vertex is None:
        raise CloudFormatError("no vertex element", header_end)
    try:
        ix, iy, iz = props.index("x"), props.index("y"), props.index("z")
    except ValueError:
        raise CloudFormatError("vertex element lacks x/y/z properties", header_end) from None

    # vertex data follows any elements declared before it
    skip = 0
    for name, count in elements:
        if name == "vertex":
            break
        skip += count
    body = lines[header_end:]
    rows = []
    seen = 0
    for offset, raw in enumerate(body):
        lineno = header_end + 1 + offset
        tok = raw.split()
        if not tok:
            continue
        if seen < skip:
            seen += 1
            continue
        if len(rows) == n_vertex:
            break
        if len(tok) < len(props):
            raise CloudFormatError(f"expected {len(props)} values, got {len(tok)}", lineno)
        rows.append(_parse_float_row([tok[ix], tok[iy], tok[iz]], lineno))
    if len(rows) != n_vertex:
        raise CloudFormatError(f"expected {n_vertex} vertices, found {len(rows)}", len(lines))
    return np.array(rows, dtype=float).reshape(-1, 3)


def load_cloud(path: str | Path, fmt: str | None = None) -> PointCloud:
    """Load an ASCII PLY or CSV-XYZ file. Format is inferred from the suffix when not given."""
    path = Path(path)
    if fmt is None:
        fmt = "ply-ascii" if path.suffix.lower() == ".ply" else "csv-xyz"
    text = path.read_text()
    if fmt == "ply-ascii":
        pts = _load_ply(text)
    elif fmt == "csv-xyz":
        pts = _load_csv(text)
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")
    if pts.shape[0] == 0:
        raise EmptyCloudError(f"{path}: no points")
    return PointCloud(pts)


def save_cloud(path: str | Path, cloud: PointCloud, fmt: str | None = None) -> None:
    """Write coordinates at 9 significant digits."""
    path = Path(path)
    if fmt is None:
        fmt = "ply-ascii" if path.suffix.lower() == ".ply" else "csv-xyz"
    rows = "".join(f"{x:.9g},{y:.9g},{z:.9g}\n" for x, y, z in cloud.points)
    if fmt == "csv-xyz":
        path.write_text("# x,y,z\n" + rows)
    elif fmt == "ply-ascii":
        header = (
            "ply\nformat ascii 1.0\n"
            f"element vertex {len(cloud)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        path.write_text(header + rows.replace(",", " "))
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")


# ------------------------------------------------------------ downsampling


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Keep, per occupied voxel, the point closest to that voxel's centroid.

    Output is ordered by ascending voxel key; ties go to the lower point index.
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    pts = cloud.points
    if len(pts) == 0:
        return cloud
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = counts.shape[0]
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inverse, pts)
    centroids = sums / counts[:, None]
    d2 = np.sum((pts - centroids[inverse]) ** 2, axis=1)
    idx = np.arange(len(pts))
    order = np.lexsort((idx, d2, inverse))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    keep = order[first]
    return PointCloud(pts[keep], cloud.timestamp)


# ------------------------------------------------------- nearest neighbours


class KDTree:
    """Exact k-NN over a fixed cloud.

    Median splits (``balanced_tree``) on the widest axis; results are ordered by
    ascending distance, ties by ascending point index.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[0] == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        self.points = points
        self._tree = cKDTree(points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        k = int(min(max(k, 1), len(self)))
        # one extra neighbour lets a tie at the k-th slot resolve by index
        kq = min(k + 1, len(self))
        dist, idx = self._tree.query(queries, k=kq)
        dist = dist.reshape(len(queries), kq)
        idx = idx.reshape(len(queries), kq)
        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)[:, :k]
        idx = np.take_along_axis(idx, order, axis=1)[:, :k]
        return dist, idx


def build_kdtree(cloud: PointCloud) -> KDTree:
    if len(cloud) == 0:
        raise EmptyCloudError("cannot index an empty cloud")
    return KDTree(cloud.points)


@dataclass(frozen=True)
class SubTargetIndex:
    """Per-source-point candidate target indices, each row sorted by distance."""

    neighbors: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        for arr in (self.neighbors, self.distances):
            arr.setflags(write=False)

    @property
    def m(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self) -> int:
        return self.neighbors.shape[0]


def build_sub_targets(
    source: PointCloud, target_index: KDTree, m: int = 20, prior: Pose | None = None
) -> SubTargetIndex:
    """The m nearest target points of every source point placed by ``prior``."""
    if m < 1:
        raise ValueError("neighbourhood size must be >= 1")
    pts = source.points if prior is None else prior.apply(source.points)
    dist, idx = target_index.query(pts, m)
    return SubTargetIndex(np.ascontiguousarray(idx), np.ascontiguousarray(dist))


def nearest_in_subtarget(
    p: np.ndarray, neighborhood: np.ndarray, target: PointCloud
) -> tuple[int, np.ndarray]:
    neighborhood = np.asarray(neighborhood)
    cand = target.points[neighborhood]
    d2 = np.sum((cand - np.asarray(p, dtype=float)) ** 2, axis=1)
    ties = neighborhood[d2 == d2.min()]
    best = int(ties.min())
    return best, target.points[best]


def nearest_in_subtargets(
    points: np.ndarray, neighbors: np.ndarray, candidates: np.ndarray
) -> np.ndarray:
    """Vectorised restricted search.

    ``points`` (N, 3) are queried against ``candidates`` (N, m, 3), the target
    coordinates of ``neighbors`` (N, m). Returns the chosen target index per point.
    """
    diff = candidates - points[:, None, :]
    d2 = np.einsum("nmd,nmd->nm", diff, diff)
    best = d2.min(axis=1, keepdims=True)
    masked = np.where(d2 == best, neighbors, np.iinfo(neighbors.dtype).max)
    return masked.min(axis=1)


class RestrictedSearch:
    """Repeated nearest-neighbour queries against fixed per-point neighbourhoods.

    Candidates are stored relative to an anchor per source point (its position under
    the prior) and sorted by target index, so ``argmin`` resolves ties to the lower index.
    """

    def __init__(self, anchors: np.ndarray, sub: SubTargetIndex, target: np.ndarray):
        order = np.argsort(sub.neighbors, axis=1, kind="stable")
        self.neighbors = np.take_along_axis(sub.neighbors, order, axis=1)
        self.anchors = np.asarray(anchors, dtype=float)
        self.rel = target[self.neighbors] - self.anchors[:, None, :]
        self.rel_sq = np.einsum("nmd,nmd->nm", self.rel, self.rel)

    def query(self, points: np.ndarray) -> np.ndarray:
        q = points - self.anchors
        d2 = self.rel_sq - 2.0 * np.matmul(self.rel, q[:, :, None])[..., 0]
        best = np.argmin(d2, axis=1)
        return self.neighbors[np.arange(len(best)), best]
