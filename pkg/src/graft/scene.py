"""Metric scene point cloud, camera model and exact nearest-neighbor index.

The spatial index is a balanced axis-aligned splitting tree (leaf size 16)
whose queries return exactly the brute-force nearest point, ties broken by
lowest point index. Determinism matters more here than raw speed: probe
results feed a learned model.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, SceneFormatError, TooFewPoints

LEAF_SIZE = 16
DEFAULT_NORMAL_K = 16


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self):
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d):
        return CameraIntrinsics(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def project(intrinsics, p):
    """Pinhole projection. Returns (u, v) in pixels, or None when behind.

    Points with z <= 1e-6 are behind (or numerically on) the camera plane.
    """
    x, y, z = float(p[0]), float(p[1]), float(p[2])
    if z <= 1e-6:
        return None
    return (intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def unproject(intrinsics, u, v, z):
    """Back-project a pixel at depth z into the camera frame."""
    return np.array(
        [
            (u - intrinsics.cx) * z / intrinsics.fx,
            (v - intrinsics.cy) * z / intrinsics.fy,
            z,
        ]
    )


def pixel_in_image(intrinsics, uv):
    u, v = uv
    return 0.0 <= u < intrinsics.width and 0.0 <= v < intrinsics.height


# ---------------------------------------------------------------------------
# k-nearest neighbors (brute force, chunked) and normal estimation


def knn_indices(points, queries, k):
    """Indices of the k nearest points per query, ties broken by lowest index."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.empty((len(queries), k), dtype=np.int64)
    chunk = max(1, int(2e6) // max(len(pts), 1))
    for start in range(0, len(queries), chunk):
        q = queries[start : start + chunk]
        d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        rows = np.arange(len(q))[:, None]
        order = np.lexsort((part, d2[rows, part]), axis=1)
        out[start : start + chunk] = np.take_along_axis(part, order, axis=1)
    return out


def estimate_normals(points, k=DEFAULT_NORMAL_K, camera_origin=(0.0, 0.0, 0.0)):
    """Per-point unit normals from the k-NN covariance eigen-decomposition.

    The normal is the smallest-eigenvalue eigenvector, sign-flipped to face
    the camera origin.

    Raises:
        TooFewPoints: fewer than k points or k < 3.
    """
    pts = np.asarray(points, dtype=np.float64)
    if k < 3 or len(pts) < k:
        raise TooFewPoints(f"need at least k={k} >= 3 points, have {len(pts)}")
    neighbors = pts[knn_indices(pts, pts, k)]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    toward = np.asarray(camera_origin, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, toward) < 0.0
    normals[flip] = -normals[flip]
    return normals


# ---------------------------------------------------------------------------
# point cloud + spatial index


@dataclass(frozen=True)
class ScenePointCloud:
    points: np.ndarray  # (N, 3) camera frame, meters
    normals: np.ndarray  # (N, 3) unit, oriented toward camera_origin
    camera_origin: np.ndarray = field(
        default_factory=lambda: np.zeros(3, dtype=np.float64)
    )

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        nrm = np.ascontiguousarray(self.normals, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", nrm)
        object.__setattr__(
            self, "camera_origin", np.asarray(self.camera_origin, dtype=np.float64)
        )
        if len(pts) < 1:
            raise EmptyCloud("point cloud must contain at least one point")
        if nrm.shape != pts.shape:
            raise ValueError("normals must match points")
        lengths = np.linalg.norm(nrm, axis=1)
        if np.max(np.abs(lengths - 1.0)) > 1e-6:
            raise ValueError("normals must have unit length within 1e-6")

    @staticmethod
    def from_points(points, normals=None, camera_origin=(0.0, 0.0, 0.0), k=DEFAULT_NORMAL_K):
        """Build a cloud; estimates and/or reorients normals as needed.

        Provided normals whose dot with (origin - point) is negative are
        flipped to satisfy the orientation invariant.
        """
        points = np.asarray(points, dtype=np.float64)
        origin = np.asarray(camera_origin, dtype=np.float64)
        if normals is None:
            normals = estimate_normals(points, k=k, camera_origin=origin)
        else:
            normals = np.asarray(normals, dtype=np.float64).copy()
            lengths = np.linalg.norm(normals, axis=1, keepdims=True)
            normals /= np.maximum(lengths, 1e-300)
            flip = np.einsum("ij,ij->i", normals, origin - points) < 0.0
            normals[flip] = -normals[flip]
        return ScenePointCloud(points=points, normals=normals, camera_origin=origin)

    def downsample(self, max_points, rng):
        """Uniform random subset of at most max_points (seeded, sorted ids)."""
        n = len(self.points)
        if max_points is None or n <= max_points:
            return self
        keep = np.sort(rng.choice(n, size=max_points, replace=False))
        return ScenePointCloud(
            points=self.points[keep],
            normals=self.normals[keep],
            camera_origin=self.camera_origin,
        )


class SpatialIndex:
    """Balanced k-d tree over a cloud; immutable after build, thread-safe reads."""

    def __init__(self, cloud, leaf_size=LEAF_SIZE):
        if len(cloud.points) == 0:
            raise EmptyCloud("cannot index an empty cloud")
        self.cloud = cloud
        self.points = cloud.points
        self.leaf_size = leaf_size
        n = len(self.points)
        self._perm = np.arange(n, dtype=np.int64)
        # node arrays: left == -1 marks a leaf over perm[start:end]
        self._left = []
        self._right = []
        self._start = []
        self._end = []
        self._box_lo = []
        self._box_hi = []
        self._build(0, n)
        self._left = np.array(self._left, dtype=np.int64)
        self._right = np.array(self._right, dtype=np.int64)
        self._start = np.array(self._start, dtype=np.int64)
        self._end = np.array(self._end, dtype=np.int64)
        self._box_lo = np.array(self._box_lo)
        self._box_hi = np.array(self._box_hi)
        self._leaf_points = [
            self.points[self._perm[s:e]]
            for s, e in zip(self._start, self._end)
        ]

    def _build(self, start, end):
        node = len(self._left)
        for arr in (self._left, self._right, self._start, self._end):
            arr.append(-1)
        ids = self._perm[start:end]
        coords = self.points[ids]
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        self._box_lo.append(lo)
        self._box_hi.append(hi)
        count = end - start
        if count <= self.leaf_size:
            self._start[node] = start
            self._end[node] = end
            return node
        axis = int(np.argmax(hi - lo))
        order = np.argsort(coords[:, axis], kind="stable")
        self._perm[start:end] = ids[order]
        mid = count // 2
        left = self._build(start, start + mid)
        right = self._build(start + mid, end)
        self._left[node] = left
        self._right[node] = right
        return node

    def _scan_leaf(self, node, q, best_d2, best_id):
        ids = self._perm[self._start[node] : self._end[node]]
        d2 = ((self._leaf_points[node] - q) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        cand_d2 = d2[i]
        if cand_d2 < best_d2:
            # argmin returns the first minimum, but perm order != index order;
            # collect all minima and take the lowest original index.
            tied = ids[d2 == cand_d2]
            return cand_d2, int(tied.min())
        if cand_d2 == best_d2 and best_id >= 0:
            tied = ids[d2 == cand_d2]
            low = int(tied.min())
            if low < best_id:
                return best_d2, low
        return best_d2, best_id

    def _box_d2(self, node, q):
        lo = self._box_lo[node]
        hi = self._box_hi[node]
        d = 0.0
        for a in range(3):
            v = q[a]
            if v < lo[a]:
                d += (lo[a] - v) ** 2
            elif v > hi[a]:
                d += (v - hi[a]) ** 2
        return d

    def nearest(self, p):
        """Exact nearest neighbor of p.

        Returns:
            (point (3,), normal (3,), distance, point_id)
        """
        q = np.asarray(p, dtype=np.float64)
        best_d2 = np.inf
        best_id = -1
        # (lower bound on d^2 inside node, node); bounds are re-checked at pop
        # time and pruning uses > (never >=) so equal-distance candidates in
        # other nodes are still visited for exact index tie-breaking
        stack = [(0.0, 0)]
        left = self._left
        right = self._right
        while stack:
            bound, node = stack.pop()
            if bound > best_d2:
                continue
            l = left[node]
            if l < 0:
                best_d2, best_id = self._scan_leaf(node, q, best_d2, best_id)
                continue
            r = right[node]
            bl = self._box_d2(l, q)
            br = self._box_d2(r, q)
            if bl <= br:
                if br <= best_d2:
                    stack.append((br, r))
                if bl <= best_d2:
                    stack.append((bl, l))
            else:
                if bl <= best_d2:
                    stack.append((bl, l))
                if br <= best_d2:
                    stack.append((br, r))
        return (
            self.cloud.points[best_id],
            self.cloud.normals[best_id],
            float(np.sqrt(best_d2)),
            best_id,
        )

    # one full (M, N) distance matrix up to this many entries
    _BATCH_LIMIT = 4_000_000

    def nearest_batch(self, queries):
        """Exact nearest neighbors for an (M, 3) query array.

        For moderate sizes this scans a vectorized (M, N) distance matrix;
        results are identical to per-query tree search (same per-point
        arithmetic, same lowest-index tie rule via argmin's first-minimum).

        Returns:
            (points (M, 3), normals (M, 3), distances (M,), ids (M,))
        """
        queries = np.asarray(queries, dtype=np.float64)
        m, n = len(queries), len(self.points)
        if m * n <= self._BATCH_LIMIT:
            # same arithmetic as the per-point scan: x^2 + y^2 then + z^2
            pts = self.points
            d2 = (queries[:, 0, None] - pts[:, 0]) ** 2
            d2 += (queries[:, 1, None] - pts[:, 1]) ** 2
            d2 += (queries[:, 2, None] - pts[:, 2]) ** 2
            ids = np.argmin(d2, axis=1)
            dist = np.sqrt(d2[np.arange(m), ids])
        else:
            ids = np.empty(m, dtype=np.int64)
            dist = np.empty(m)
            for i, q in enumerate(queries):
                _, _, dist[i], ids[i] = self.nearest(q)
        return self.cloud.points[ids], self.cloud.normals[ids], dist, ids


# ---------------------------------------------------------------------------
# binary little-endian PLY


def write_ply(path, points, normals=None):
    """Write points (and optional normals) as binary little-endian PLY f32."""
    points = np.asarray(points, dtype=np.float32)
    props = ["x", "y", "z"]
    columns = [points]
    if normals is not None:
        props += ["nx", "ny", "nz"]
        columns.append(np.asarray(normals, dtype=np.float32))
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        + "".join(f"property float {p}\n" for p in props)
        + "end_header\n"
    )
    data = np.concatenate(columns, axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_ply(path):
    """Read a binary little-endian PLY; returns (points, normals or None).

    Only float32 vertex properties are supported; x, y, z are required and
    nx, ny, nz are used when all three are present.
    """
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise SceneFormatError(f"{path} is not a PLY file")
    header = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n") :]
    n_vertex = None
    props = []
    fmt_ok = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise SceneFormatError("only vertex elements are supported")
            n_vertex = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in ("float", "float32"):
                raise SceneFormatError(f"unsupported property type {parts[1]}")
            props.append(parts[2])
    if not fmt_ok or n_vertex is None:
        raise SceneFormatError("expected binary_little_endian PLY with a vertex element")
    rows = np.frombuffer(body, dtype="<f4", count=n_vertex * len(props)).reshape(
        n_vertex, len(props)
    )
    cols = {name: rows[:, i] for i, name in enumerate(props)}
    for need in ("x", "y", "z"):
        if need not in cols:
            raise SceneFormatError(f"PLY missing property {need}")
    points = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    normals = None
    if all(n in cols for n in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1).astype(np.float64)
    return points, normals


def load_scene(path, normals_k=DEFAULT_NORMAL_K, camera_origin=(0.0, 0.0, 0.0)):
    """Load scene PLY into a ScenePointCloud, estimating normals when absent."""
    points, normals = read_ply(path)
    return ScenePointCloud.from_points(
        points, normals=normals, camera_origin=camera_origin, k=normals_k
    )
