"""
Coordinate frames and voxel arithmetic.

World frame: right-handed, z up, yaw counterclockwise about z from +x.
Camera frame: optical axis +z, x right, y down (u = column, v = row, origin top-left).
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np

from .errors import ContractViolation, InvalidDepthError, OutOfBoundsError

Point3 = Tuple[float, float, float]


def normalize_angle(angle: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    wrapped = math.fmod(angle, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ContractViolation(
                f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        """Square-pixel pinhole camera with the given horizontal field of view."""
        f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def position(self) -> Tuple[float, float]:
        return (self.x, self.y)

    def distance_to(self, x: float, y: float) -> float:
        return math.hypot(x - self.x, y - self.y)


class RigidTransform:
    """4x4 homogeneous rigid transform."""

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ContractViolation(f"Transform must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ContractViolation("Transform bottom row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), rtol=0.0, atol=1e-9):
            raise ContractViolation("Transform rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ContractViolation("Transform rotation block is a reflection")
        self.matrix = m

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_parts(cls, rotation: np.ndarray, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self . other"""
        return RigidTransform(self.matrix @ other.matrix)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or an (N, 3) array."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __repr__(self) -> str:
        return f"RigidTransform({self.matrix.tolist()})"


@dataclass(frozen=True)
class GridParams:
    delta: float = 0.1
    g: int = 1000

    def __post_init__(self):
        if not self.delta > 0:
            raise ContractViolation(f"Voxel size must be positive, got {self.delta}")
        if self.g <= 0 or self.g % 2:
            raise ContractViolation(f"Grid dimension must be positive and even, got {self.g}")

    @property
    def half(self) -> int:
        return self.g // 2


class VoxelIndex(NamedTuple):
    vx: int
    vy: int
    vz: int


def pixel_to_camera(u: float, v: float, depth: float, k: CameraIntrinsics) -> Point3:
    """Back-project pixel (u, v) at the given depth into the camera frame."""
    if not (math.isfinite(depth) and depth > 0):
        raise InvalidDepthError(f"Depth must be positive and finite, got {depth}")
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise ContractViolation(f"Pixel ({u}, {v}) outside {k.width}x{k.height} image")
    return (depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth)


def pixels_to_camera(u: np.ndarray, v: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Vectorised pixel_to_camera; every depth must already be valid."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.size and not (np.all(np.isfinite(depth)) and np.all(depth > 0)):
        raise InvalidDepthError("Depth must be positive and finite")
    x = depth * (np.asarray(u, dtype=np.float64) - k.cx) / k.fx
    y = depth * (np.asarray(v, dtype=np.float64) - k.cy) / k.fy
    return np.stack([x, y, depth], axis=-1)


def project_to_pixel(pc, k: CameraIntrinsics) -> Optional[Tuple[float, float]]:
    """Perspective projection; None for points at or behind the camera plane."""
    x, y, z = pc
    if z <= 0:
        return None
    return (x * k.fx / z + k.cx, y * k.fy / z + k.cy)


def pose_to_world_transform(p: AgentPose, z_base: float = 0.0) -> RigidTransform:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform.from_parts(rotation, (p.x, p.y, z_base))


def base_to_camera_transform(camera_height: float) -> RigidTransform:
    """Forward-looking camera mounted at camera_height above the base origin."""
    # camera +z -> base +x, camera +x -> base -y, camera +y -> base -z
    rotation = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    return RigidTransform.from_parts(rotation, (0.0, 0.0, camera_height))


def camera_to_world(pc, t_base_cam: RigidTransform, t_world_base: RigidTransform) -> Point3:
    homogeneous = np.append(np.asarray(pc, dtype=np.float64), 1.0)
    out = t_world_base.matrix @ (t_base_cam.matrix @ homogeneous)
    return (float(out[0]), float(out[1]), float(out[2]))


def world_to_voxel(pw, gp: GridParams) -> VoxelIndex:
    x, y, z = (float(c) for c in pw)
    if not (math.isfinite(x) and math.isfinite(y) and math.isfinite(z)):
        raise OutOfBoundsError(f"Point ({x}, {y}, {z}) is not finite")
    vx = math.floor(x / gp.delta + gp.half)
    vy = math.floor(y / gp.delta + gp.half)
    if z < 0:
        raise OutOfBoundsError(f"Point z={z} below the floor")
    vz = math.floor(z / gp.delta)
    if not (0 <= vx < gp.g and 0 <= vy < gp.g):
        raise OutOfBoundsError(f"Point ({x}, {y}) outside the {gp.g}x{gp.g} grid")
    return VoxelIndex(vx, vy, vz)


def world_to_voxels(points: np.ndarray, gp: GridParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised world_to_voxel.

    Returns (indices, in_bounds) where indices is an (N, 3) int64 array and
    in_bounds flags the rows that satisfy the grid domain.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    finite = np.isfinite(pts).all(axis=1)
    pts = np.where(finite[:, None], pts, 0.0)
    idx = np.empty(pts.shape, dtype=np.int64)
    idx[:, 0] = np.floor(pts[:, 0] / gp.delta + gp.half)
    idx[:, 1] = np.floor(pts[:, 1] / gp.delta + gp.half)
    idx[:, 2] = np.floor(pts[:, 2] / gp.delta)
    in_bounds = (
        finite
        & (pts[:, 2] >= 0)
        & (idx[:, 0] >= 0) & (idx[:, 0] < gp.g)
        & (idx[:, 1] >= 0) & (idx[:, 1] < gp.g)
    )
    return idx, in_bounds


def voxel_to_world(v, gp: GridParams) -> Point3:
    vx, vy, vz = (int(c) for c in v)
    if not (0 <= vx < gp.g and 0 <= vy < gp.g and vz >= 0):
        raise OutOfBoundsError(f"Voxel {tuple(v)} outside the grid")
    return (
        (vx - gp.half + 0.5) * gp.delta,
        (vy - gp.half + 0.5) * gp.delta,
        (vz + 0.5) * gp.delta,
    )


def voxels_to_world(voxels: np.ndarray, gp: GridParams) -> np.ndarray:
    v = np.asarray(voxels, dtype=np.float64).reshape(-1, 3)
    out = np.empty_like(v)
    out[:, 0] = (v[:, 0] - gp.half + 0.5) * gp.delta
    out[:, 1] = (v[:, 1] - gp.half + 0.5) * gp.delta
    out[:, 2] = (v[:, 2] + 0.5) * gp.delta
    return out


def patch_center(i: int, j: int, s: int) -> Tuple[float, float]:
    """Pixel (u, v) at the centre of patch row i, column j for stride s."""
    if i < 0 or j < 0 or s <= 0:
        raise ContractViolation(f"Invalid patch ({i}, {j}) for stride {s}")
    return (j * s + s / 2, i * s + s / 2)
