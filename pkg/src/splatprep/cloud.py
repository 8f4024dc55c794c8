"""Colored point clouds: in-memory model, PLY 1.0 I/O, nearest-neighbor index.

Positions are always float64 (N, 3) arrays regardless of the precision a file
declares; colors are uint8 (N, 3). Files may interleave other vertex
properties, which are skipped on load.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import PlyDataError, PlyParseError, PlyTruncationError

# PLY scalar type name -> (numpy dtype, size in bytes). Both the 1994-era
# names and the sized aliases appear in the wild.
_PLY_TYPES = {
    "char": ("i1", 1), "int8": ("i1", 1),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "short": ("i2", 2), "int16": ("i2", 2),
    "ushort": ("u2", 2), "uint16": ("u2", 2),
    "int": ("i4", 4), "int32": ("i4", 4),
    "uint": ("u4", 4), "uint32": ("u4", 4),
    "float": ("f4", 4), "float32": ("f4", 4),
    "double": ("f8", 8), "float64": ("f8", 8),
}

_COLOR_ALIASES = {"red": 0, "r": 0, "green": 1, "g": 1, "blue": 2, "b": 2}


class SourceTag(str, enum.Enum):
    """Where a cloud came from within the pipeline."""

    LIDAR = "lidar"
    SFM = "sfm"
    FUSED = "fused"


@dataclass(frozen=True)
class Point:
    """One vertex: position in meters plus an 8-bit RGB color."""

    x: float
    y: float
    z: float
    color: tuple[int, int, int] = (0, 0, 0)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(eq=False)
class PointCloud:
    """Dense array-backed cloud. ``positions`` (N, 3) float64, ``colors`` (N, 3) uint8."""

    positions: np.ndarray
    colors: np.ndarray = field(default=None)  # type: ignore[assignment]
    source_tag: SourceTag = SourceTag.LIDAR

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if not np.isfinite(pos).all():
            bad = int(np.argwhere(~np.isfinite(pos).all(axis=1))[0, 0])
            raise PlyDataError(f"non-finite coordinate at vertex {bad}")
        self.positions = pos
        if self.colors is None:
            self.colors = np.zeros((len(pos), 3), dtype=np.uint8)
        else:
            col = np.asarray(self.colors)
            if col.shape != pos.shape:
                raise ValueError(f"colors must match positions shape, got {col.shape}")
            if col.dtype != np.uint8:
                if col.min(initial=0) < 0 or col.max(initial=0) > 255:
                    raise ValueError("colors must fit 8-bit unsigned range")
                col = col.astype(np.uint8)
            self.colors = col
        self.source_tag = SourceTag(self.source_tag)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Point:
        x, y, z = self.positions[i]
        r, g, b = self.colors[i]
        return Point(float(x), float(y), float(z), (int(r), int(g), int(b)))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.source_tag == other.source_tag
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.colors, other.colors)
        )

    def select(self, indices: np.ndarray) -> "PointCloud":
        """New cloud containing the given rows, order preserved."""
        idx = np.asarray(indices, dtype=np.intp)
        return PointCloud(self.positions[idx].copy(), self.colors[idx].copy(), self.source_tag)

    def bbox_diagonal(self) -> float:
        """Length of the axis-aligned bounding-box diagonal."""
        if len(self) == 0:
            return 0.0
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span))


class SpatialIndex:
    """k-nearest-neighbor queries over a fixed cloud.

    Built once, never mutated. Results are deterministic: neighbors come back
    sorted by distance and exact distance ties are broken by the lower point
    index, matching a brute-force scan.
    """

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        if len(pts) == 0:
            raise ValueError("cannot index an empty cloud")
        self._points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return len(self._points)

    def knn(self, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and distances of the min(k, N) nearest points to ``query``.

        Parameters
        ----------
        query : (3,) array-like
        k : int, must be >= 1

        Returns
        -------
        (indices, distances) : int and float arrays sorted by (distance, index).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        n = len(self._points)
        k_eff = min(k, n)
        # Query one extra neighbor to detect a tie straddling the cutoff.
        d, i = self._tree.query(q, k=min(n, k_eff + 1))
        d = np.atleast_1d(d)
        i = np.atleast_1d(i)
        if k_eff < n and d[k_eff] == d[k_eff - 1]:
            return self._knn_brute(q, k_eff)
        d, i = d[:k_eff], i[:k_eff]
        order = np.lexsort((i, d))  # stable (distance, index) ordering inside ties
        return i[order], d[order]

    def _knn_brute(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        d = np.sqrt(((self._points - q) ** 2).sum(axis=1))
        order = np.lexsort((np.arange(len(d)), d))[:k]
        return order, d[order]

    def nearest(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized 1-NN for a (M, 3) query block; two-way ties pick the lower index."""
        queries = np.asarray(queries, dtype=np.float64)
        if len(self._points) == 1:
            d = np.linalg.norm(queries - self._points[0], axis=1)
            return np.zeros(len(queries), dtype=np.intp), d
        d, i = self._tree.query(queries, k=2, workers=-1)
        tie = d[:, 0] == d[:, 1]
        idx = np.where(tie, np.minimum(i[:, 0], i[:, 1]), i[:, 0])
        return idx.astype(np.intp), d[:, 0]

    def neighbor_mean_distances(self, k: int) -> np.ndarray:
        """Mean distance from each indexed point to its k nearest other points."""
        n = len(self._points)
        if k >= n:
            raise ValueError("k must be smaller than the cloud size")
        d, _ = self._tree.query(self._points, k=k + 1, workers=-1)
        # Column 0 is the query point itself at distance zero (any duplicate
        # occupying it instead contributes the same zero).
        return d[:, 1:].mean(axis=1)


def _parse_header(lines: list[bytes]) -> tuple[str, int, list[tuple[str, str]], int]:
    """Return (format, vertex_count, vertex properties, header line count)."""
    if not lines or lines[0].strip() != b"ply":
        raise PlyParseError("missing 'ply' magic", line=1)
    fmt = None
    vertex_count = None
    properties: list[tuple[str, str]] = []
    in_vertex = False
    for lineno, raw in enumerate(lines[1:], start=2):
        text = raw.decode("ascii", errors="replace").strip()
        if not text:
            continue
        tokens = text.split()
        kw = tokens[0]
        if kw == "comment" or kw == "obj_info":
            continue
        if kw == "format":
            if len(tokens) != 3 or tokens[2] != "1.0":
                raise PlyParseError(f"unsupported format declaration {text!r}", line=lineno)
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported format {tokens[1]!r}", line=lineno)
            fmt = tokens[1]
        elif kw == "element":
            if len(tokens) != 3:
                raise PlyParseError(f"malformed element declaration {text!r}", line=lineno)
            if tokens[1] == "vertex":
                try:
                    vertex_count = int(tokens[2])
                except ValueError:
                    raise PlyParseError(f"bad vertex count {tokens[2]!r}", line=lineno) from None
                if vertex_count < 0:
                    raise PlyParseError("negative vertex count", line=lineno)
                in_vertex = True
            else:
                # Elements after the vertex block are ignored, but data for an
                # element placed before it would shift the vertex bytes.
                if vertex_count is None and int(tokens[2]) > 0:
                    raise PlyParseError(
                        f"element {tokens[1]!r} with data precedes the vertex element",
                        line=lineno,
                    )
                in_vertex = False
        elif kw == "property":
            if not in_vertex:
                continue  # properties of elements we do not read
            if tokens[1] == "list":
                raise PlyParseError("list property on vertex element is not supported", line=lineno)
            if len(tokens) != 3:
                raise PlyParseError(f"malformed property {text!r}", line=lineno)
            ptype, pname = tokens[1], tokens[2]
            if ptype not in _PLY_TYPES:
                raise PlyParseError(f"unknown property type {ptype!r}", line=lineno)
            properties.append((ptype, pname))
        elif kw == "end_header":
            if fmt is None:
                raise PlyParseError("end_header before format declaration", line=lineno)
            if vertex_count is None:
                raise PlyParseError("no vertex element declared", line=lineno)
            return fmt, vertex_count, properties, lineno
        else:
            raise PlyParseError(f"unknown header keyword {kw!r}", line=lineno)
    raise PlyParseError("header never terminated with end_header", line=len(lines))


def load_ply(path, source_tag: SourceTag = SourceTag.LIDAR) -> PointCloud:
    """Load a PLY 1.0 point cloud (ascii or binary_little_endian).

    x/y/z may be float or double; colors are uchar and may be named
    red/green/blue or r/g/b. Missing colors default to black. Extra vertex
    properties and non-vertex elements are ignored.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    end_marker = b"end_header"
    idx = blob.find(end_marker)
    if idx < 0:
        raise PlyParseError("header never terminated with end_header", line=1)
    nl = blob.find(b"\n", idx)
    if nl < 0:
        raise PlyParseError("no data after end_header", line=1)
    header_lines = blob[:nl].split(b"\n")
    fmt, count, props, _ = _parse_header(header_lines)
    body = blob[nl + 1:]

    names = [name for _, name in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise PlyParseError(f"vertex element lacks property {axis!r}", line=1)

    if fmt == "ascii":
        rows = body.split(b"\n")
        values = []
        for row in rows:
            row = row.strip()
            if row:
                values.append(row.split())
            if len(values) == count:
                break
        if len(values) < count:
            raise PlyTruncationError(
                f"expected {count} vertices, file ends after {len(values)}"
            )
        short = [k for k, v in enumerate(values) if len(v) < len(props)]
        if short:
            raise PlyParseError(
                f"vertex row {short[0]} has {len(values[short[0]])} fields, "
                f"header declares {len(props)}"
            )
        data = {}
        try:
            table = np.array([v[: len(props)] for v in values], dtype=np.float64)
        except ValueError as exc:
            raise PlyParseError(f"non-numeric vertex data ({exc})") from None
        for j, (_, name) in enumerate(props):
            data[name] = table[:, j] if count else np.empty(0)
    else:
        dtype = np.dtype([(f"f{j}", "<" + _PLY_TYPES[t][0]) for j, (t, _) in enumerate(props)])
        need = count * dtype.itemsize
        if len(body) < need:
            have = len(body) // dtype.itemsize if dtype.itemsize else 0
            raise PlyTruncationError(f"expected {count} vertices, file holds {have}")
        rec = np.frombuffer(body[:need], dtype=dtype)
        data = {name: rec[f"f{j}"] for j, (_, name) in enumerate(props)}

    pos = np.empty((count, 3), dtype=np.float64)
    for col, axis in enumerate(("x", "y", "z")):
        pos[:, col] = data[axis]
    if count and not np.isfinite(pos).all():
        bad = int(np.argwhere(~np.isfinite(pos).all(axis=1))[0, 0])
        raise PlyDataError(f"non-finite coordinate at vertex {bad}")

    colors = np.zeros((count, 3), dtype=np.uint8)
    for (ptype, name) in props:
        chan = _COLOR_ALIASES.get(name)
        if chan is not None and ptype in ("uchar", "uint8"):
            colors[:, chan] = np.asarray(data[name], dtype=np.uint8)
    return PointCloud(pos, colors, source_tag)


def save_ply(cloud: PointCloud, path, binary: bool = True, with_normals: bool = False) -> None:
    """Write a cloud as PLY 1.0.

    Binary output stores positions as doubles, so a save/load cycle is
    bit-exact. ASCII output prints 9 significant digits. ``with_normals``
    appends all-zero nx/ny/nz properties for trainers that require them.
    """
    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property double {axis}" for axis in ("x", "y", "z")]
    if with_normals:
        header += [f"property double n{axis}" for axis in ("x", "y", "z")]
    header += [f"property uchar {chan}" for chan in ("red", "green", "blue")]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
            if with_normals:
                fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
            fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.zeros(n, dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = cloud.positions.T
            rec["red"], rec["green"], rec["blue"] = cloud.colors.T
            fh.write(rec.tobytes())
        else:
            zeros = " 0 0 0" if with_normals else ""
            for (x, y, z), (r, g, b) in zip(cloud.positions, cloud.colors):
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}{zeros} {r} {g} {b}\n".encode("ascii"))
