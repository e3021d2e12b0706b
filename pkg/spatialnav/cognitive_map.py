"""
Voxelized cognitive map.

Each occupied voxel keeps a bounded buffer of patch features. New features are
admitted only when they are surprising with respect to the features already
stored around their voxel; retrieval scores every voxel by its best cosine
match against a query and clusters the matches into goal hypotheses.
"""

import csv
import io
import logging
import struct
import threading
from dataclasses import dataclass
from itertools import product
from typing import BinaryIO, Dict, List, Optional, Tuple

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import ContractViolation, PersistenceError
from .geometry import (
    AgentPose,
    CameraIntrinsics,
    GridParams,
    RigidTransform,
    VoxelIndex,
    patch_center,
    pixels_to_camera,
    pose_to_world_transform,
    voxels_to_world,
    world_to_voxels,
)
from .telemetry import navigation_metrics

logger = logging.getLogger(__name__)

BSCM_MAGIC = b"BSCM"
BSCM_VERSION = 1
_HEADER = struct.Struct("<4sIdIIdIIQI")
_CELL = struct.Struct("<iiiI")
_ENTRY_TAIL = struct.Struct("<dQ")


def _as_unit(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return v / norm


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float((_as_unit(a) * _as_unit(b)).sum())


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity, clamped to [0, 1]."""
    return min(1.0, max(0.0, 1.0 - cosine_similarity(a, b)))


def validate_feature(f: np.ndarray, dim: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(f, dtype=np.float32).reshape(-1)
    if dim is not None and arr.shape[0] != dim:
        raise ContractViolation(f"Feature dimension {arr.shape[0]} does not match map dimension {dim}")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation("Feature has non-finite entries")
    if not np.any(arr):
        raise ContractViolation("Feature has zero norm")
    return arr


@dataclass
class BufferedFeature:
    feature: np.ndarray  # float32
    surprise: float
    tick: int


@dataclass(frozen=True)
class VoxelMatch:
    voxel: VoxelIndex
    similarity: float


@dataclass(frozen=True)
class ClusterCenter:
    position: Tuple[float, float, float]
    score: float
    size: int


@dataclass
class IntegrateStats:
    inserted: int = 0
    rejected: int = 0
    evicted: int = 0
    invalid_depth: int = 0
    out_of_bounds: int = 0

    def __iadd__(self, other: "IntegrateStats") -> "IntegrateStats":
        self.inserted += other.inserted
        self.rejected += other.rejected
        self.evicted += other.evicted
        self.invalid_depth += other.invalid_depth
        self.out_of_bounds += other.out_of_bounds
        return self

    def as_dict(self) -> Dict[str, int]:
        return {
            "inserted": self.inserted,
            "rejected": self.rejected,
            "evicted": self.evicted,
            "invalid_depth": self.invalid_depth,
            "out_of_bounds": self.out_of_bounds,
        }


class CognitiveMap:
    """Sparse voxel -> feature buffer map with surprise-gated updates."""

    def __init__(
        self,
        grid: GridParams = GridParams(),
        buffer_capacity: int = 10,
        tau: float = 0.5,
        hop: int = 1,
        feature_dim: Optional[int] = None,
    ):
        if buffer_capacity < 1:
            raise ContractViolation("buffer_capacity must be at least 1")
        if hop < 0:
            raise ContractViolation("hop must be non-negative")
        self.grid = grid
        self.buffer_capacity = buffer_capacity
        self.tau = tau
        self.hop = hop
        self.feature_dim = feature_dim
        self.cells: Dict[VoxelIndex, List[BufferedFeature]] = {}
        self._tick = 0
        self._lock = threading.RLock()
        self._offsets = list(product(range(-hop, hop + 1), repeat=3))
        self._cache: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        """Number of stored features."""
        with self._lock:
            return sum(len(buf) for buf in self.cells.values())

    @property
    def voxel_count(self) -> int:
        with self._lock:
            return len(self.cells)

    def is_empty(self) -> bool:
        with self._lock:
            return not self.cells

    def _neighbourhood(self, v: VoxelIndex) -> List[np.ndarray]:
        feats = []
        for dx, dy, dz in self._offsets:
            buf = self.cells.get(VoxelIndex(v[0] + dx, v[1] + dy, v[2] + dz))
            if buf:
                feats.extend(entry.feature for entry in buf)
        return feats

    def surprise(self, f: np.ndarray, v) -> float:
        """Mean cosine distance from f to every buffered feature around voxel v."""
        f = validate_feature(f, self.feature_dim)
        v = VoxelIndex(*(int(c) for c in v))
        with self._lock:
            feats = self._neighbourhood(v)
        if not feats:
            return 1.0
        sims = (_as_unit(np.stack(feats)) * _as_unit(f)).sum(axis=1)
        distances = np.clip(1.0 - sims, 0.0, 1.0)
        return float(distances.mean())

    def insert_feature(self, f: np.ndarray, v) -> Tuple[bool, bool]:
        """
        Gate a single feature into voxel v.

        Returns (inserted, evicted).
        """
        f = validate_feature(f, self.feature_dim)
        v = VoxelIndex(*(int(c) for c in v))
        with self._lock:
            if self.feature_dim is None:
                self.feature_dim = int(f.shape[0])
            score = self.surprise(f, v)
            if not score > self.tau:
                return False, False
            buf = self.cells.setdefault(v, [])
            evicted = False
            if len(buf) >= self.buffer_capacity:
                victim = min(range(len(buf)), key=lambda i: (buf[i].surprise, buf[i].tick))
                del buf[victim]
                evicted = True
            self._tick += 1
            buf.append(BufferedFeature(feature=f.copy(), surprise=score, tick=self._tick))
            self._cache = None
            return True, evicted

    def integrate(
        self,
        patch_grid: np.ndarray,
        depth: np.ndarray,
        pose: AgentPose,
        k: CameraIntrinsics,
        t_base_cam: RigidTransform,
        stride: int,
    ) -> IntegrateStats:
        """Project every patch feature of one view into the map and gate it in."""
        patches = np.asarray(patch_grid, dtype=np.float32)
        depth = np.asarray(depth, dtype=np.float64)
        if depth.shape != (k.height, k.width):
            raise ContractViolation(f"Depth shape {depth.shape} does not match {k.height}x{k.width} image")
        rows, cols = k.height // stride, k.width // stride
        if patches.ndim != 3 or patches.shape[:2] != (rows, cols):
            raise ContractViolation(
                f"Patch grid shape {patches.shape[:2]} does not match {rows}x{cols} for stride {stride}"
            )

        stats = IntegrateStats()
        us, vs, ds, feats = [], [], [], []
        for i in range(rows):
            for j in range(cols):
                u, v = patch_center(i, j, stride)
                px = min(int(round(u)), k.width - 1)
                py = min(int(round(v)), k.height - 1)
                d = depth[py, px]
                if not (np.isfinite(d) and d > 0):
                    stats.invalid_depth += 1
                    continue
                us.append(u)
                vs.append(v)
                ds.append(d)
                feats.append(patches[i, j])

        if ds:
            pc = pixels_to_camera(np.array(us), np.array(vs), np.array(ds), k)
            t_world_cam = pose_to_world_transform(pose).compose(t_base_cam)
            world = t_world_cam.apply(pc)
            voxels, in_bounds = world_to_voxels(world, self.grid)

            with self._lock:
                for feat, vox, ok in zip(feats, voxels, in_bounds):
                    if not ok:
                        stats.out_of_bounds += 1
                        continue
                    inserted, evicted = self.insert_feature(feat, VoxelIndex(*(int(c) for c in vox)))
                    if inserted:
                        stats.inserted += 1
                    else:
                        stats.rejected += 1
                    if evicted:
                        stats.evicted += 1

        stats.rejected += stats.invalid_depth + stats.out_of_bounds
        logger.debug("Integrated view at %s: %s", pose, stats.as_dict())
        navigation_metrics.record_memory_update("cognitive", "inserted", stats.inserted)
        navigation_metrics.record_memory_update("cognitive", "rejected", stats.rejected)
        navigation_metrics.record_memory_update("cognitive", "evicted", stats.evicted)
        return stats

    def _matrix(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(unit features, voxel array sorted lexicographically, start offset per voxel)."""
        if self._cache is None:
            voxels = sorted(self.cells)
            rows, starts = [], []
            for vox in voxels:
                starts.append(len(rows))
                rows.extend(entry.feature for entry in self.cells[vox])
            self._cache = (
                _as_unit(np.stack(rows)),
                np.array(voxels, dtype=np.int64).reshape(-1, 3),
                np.array(starts, dtype=np.int64),
            )
        return self._cache

    def query_topk(self, q: np.ndarray, k: int = 10) -> List[VoxelMatch]:
        """Best-matching voxels by max cosine similarity over each buffer."""
        if k < 1:
            raise ContractViolation("k must be at least 1")
        q = validate_feature(q, self.feature_dim)
        with self._lock:
            if not self.cells:
                return []
            unit, voxels, starts = self._matrix()
        sims = (unit * _as_unit(q)).sum(axis=1)
        per_voxel = np.maximum.reduceat(sims, starts)
        order = np.lexsort((voxels[:, 2], voxels[:, 1], voxels[:, 0], -per_voxel))[:k]
        return [
            VoxelMatch(voxel=VoxelIndex(*(int(c) for c in voxels[i])), similarity=float(per_voxel[i]))
            for i in order
        ]

    def equals(self, other: "CognitiveMap") -> bool:
        """Cell-by-cell, feature-by-feature equality."""
        if (self.grid, self.buffer_capacity, self.tau, self.hop, self.feature_dim) != (
            other.grid, other.buffer_capacity, other.tau, other.hop, other.feature_dim
        ):
            return False
        if set(self.cells) != set(other.cells):
            return False
        for vox, buf in self.cells.items():
            obuf = other.cells[vox]
            if len(buf) != len(obuf):
                return False
            for a, b in zip(buf, obuf):
                if a.tick != b.tick or a.surprise != b.surprise or not np.array_equal(a.feature, b.feature):
                    return False
        return True

    def write_bscm(self, fh: BinaryIO) -> None:
        with self._lock:
            dim = self.feature_dim or 0
            fh.write(_HEADER.pack(
                BSCM_MAGIC, BSCM_VERSION, self.grid.delta, self.grid.g, self.buffer_capacity,
                self.tau, self.hop, dim, self._tick, len(self.cells),
            ))
            for vox in sorted(self.cells):
                buf = self.cells[vox]
                fh.write(_CELL.pack(vox[0], vox[1], vox[2], len(buf)))
                for entry in buf:
                    fh.write(entry.feature.astype("<f4").tobytes())
                    fh.write(_ENTRY_TAIL.pack(entry.surprise, entry.tick))

    @classmethod
    def read_bscm(cls, fh: BinaryIO) -> "CognitiveMap":
        def read_exact(n: int) -> bytes:
            data = fh.read(n)
            if len(data) != n:
                raise PersistenceError("Truncated BSCM stream")
            return data

        magic, version, delta, g, capacity, tau, hop, dim, tick, n_cells = _HEADER.unpack(
            read_exact(_HEADER.size)
        )
        if magic != BSCM_MAGIC:
            raise PersistenceError(f"Bad BSCM magic {magic!r}")
        if version != BSCM_VERSION:
            raise PersistenceError(f"Unsupported BSCM version {version}")
        cog = cls(GridParams(delta=delta, g=g), buffer_capacity=capacity, tau=tau, hop=hop,
                  feature_dim=dim or None)
        for _ in range(n_cells):
            vx, vy, vz, count = _CELL.unpack(read_exact(_CELL.size))
            buf = []
            for _ in range(count):
                feature = np.frombuffer(read_exact(4 * dim), dtype="<f4").astype(np.float32)
                surprise, entry_tick = _ENTRY_TAIL.unpack(read_exact(_ENTRY_TAIL.size))
                buf.append(BufferedFeature(feature=feature, surprise=surprise, tick=entry_tick))
            cog.cells[VoxelIndex(vx, vy, vz)] = buf
        cog._tick = tick
        return cog

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        self.write_bscm(out)
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CognitiveMap":
        return cls.read_bscm(io.BytesIO(data))

    def export_csv(self, path: str) -> None:
        """Per-voxel occupancy debug dump: vx, vy, vz, count, max_tick."""
        with self._lock, open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["vx", "vy", "vz", "count", "max_tick"])
            for vox in sorted(self.cells):
                buf = self.cells[vox]
                writer.writerow([vox[0], vox[1], vox[2], len(buf), max(e.tick for e in buf)])


def cluster_matches(
    matches: List[VoxelMatch],
    eps: float = 3.0,
    min_pts: int = 1,
    gp: GridParams = GridParams(),
) -> List[ClusterCenter]:
    """
    DBSCAN (Chebyshev metric, voxel units) over matched voxels.

    Each cluster reduces to the similarity-weighted centroid of its voxel
    centres; its score is the best member similarity.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    if not matches:
        return []

    coords = np.array([m.voxel for m in matches], dtype=np.float64)
    sims = np.array([m.similarity for m in matches], dtype=np.float64)
    labels = DBSCAN(eps=eps, min_samples=min_pts, metric="chebyshev").fit_predict(coords)

    centres = []
    for label in dict.fromkeys(labels.tolist()):
        if label == -1:
            continue
        members = labels == label
        weights = sims[members]
        points = voxels_to_world(coords[members], gp)
        if weights.sum() > 0:
            centroid = (points * weights[:, None]).sum(axis=0) / weights.sum()
        else:
            centroid = points.mean(axis=0)
        centres.append(ClusterCenter(
            position=tuple(float(c) for c in centroid),
            score=float(weights.max()),
            size=int(members.sum()),
        ))

    centres.sort(key=lambda c: -c.score)
    return centres
