"""
Deterministic grid world: seeded room layouts with object instances, raycast
depth from a forward-facing pinhole camera, discrete agent dynamics and
episode bookkeeping.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .config import AgentConfig
from .errors import ContractViolation, EpisodeFinishedError, PersistenceError
from .geometry import (
    AgentPose,
    CameraIntrinsics,
    base_to_camera_transform,
    normalize_angle,
    pose_to_world_transform,
    project_to_pixel,
)
from .planner import FREE, OCCUPIED, UNKNOWN, Action, Cell, OccupancyGrid, distance_field

logger = logging.getLogger(__name__)

SCENE_FORMAT_VERSION = 1
CELL_SIZE = 0.25
OBJECT_HEIGHT = 1.0
RAY_STEP = 0.02
COLLISION_STEP = 0.05

# Pixel labels; instance pixels carry the instance id (>= 0)
LABEL_WALL = -1
LABEL_FLOOR = -2
LABEL_NONE = -3

CATEGORIES = [
    "sofa", "chair", "bed", "table", "toilet", "television",
    "plant", "cabinet", "sink", "bookshelf", "lamp", "refrigerator",
]
COLOURS = {
    "red": (200, 40, 40), "blue": (40, 70, 200), "green": (40, 160, 60),
    "white": (235, 235, 235), "black": (30, 30, 30), "yellow": (230, 200, 40),
    "brown": (130, 80, 40), "orange": (240, 140, 30),
}
MATERIALS = ["wooden", "leather", "metal", "fabric", "plastic", "marble"]
ROOM_NAMES = ["living room", "bedroom", "kitchen", "bathroom", "study", "dining room"]

WALL_RGB = (150, 150, 150)
FLOOR_RGB = (90, 75, 60)


@dataclass(frozen=True)
class Room:
    name: str
    row0: int
    col0: int
    rows: int
    cols: int

    def contains(self, cell: Cell) -> bool:
        return self.row0 <= cell[0] < self.row0 + self.rows and self.col0 <= cell[1] < self.col0 + self.cols


@dataclass(frozen=True)
class Instance:
    instance_id: int
    category: str
    description: str
    cell: Cell
    position: Tuple[float, float]
    feature_seed: int
    attributes: Dict[str, str] = field(default_factory=dict, hash=False, compare=False)

    @property
    def centre(self) -> Tuple[float, float, float]:
        return (self.position[0], self.position[1], OBJECT_HEIGHT / 2.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "category": self.category,
            "description": self.description,
            "cell": list(self.cell),
            "position": list(self.position),
            "feature_seed": self.feature_seed,
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Instance":
        return cls(
            instance_id=int(data["instance_id"]),
            category=data["category"],
            description=data["description"],
            cell=tuple(data["cell"]),
            position=tuple(data["position"]),
            feature_seed=int(data["feature_seed"]),
            attributes=dict(data.get("attributes", {})),
        )


@dataclass
class SyntheticImage:
    """
    Image stand-in for goal photos and imagined targets.

    token is the identity feature the picture depicts; rgb is a flat-colour
    rendering so remote encoders still receive pixels.
    """
    rgb: np.ndarray
    token: Optional[np.ndarray] = None
    instance_id: Optional[int] = None
    variant: int = 0


@dataclass(frozen=True)
class VisibleInstance:
    instance_id: int
    u: float
    v: float
    depth: float


@dataclass
class SimObservation:
    pose: AgentPose
    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray
    scan_ranges: np.ndarray
    scan_angles: np.ndarray
    visible: List[VisibleInstance]
    step: int = 0


def unit_feature(seed: int, dim: int) -> np.ndarray:
    vec = np.random.default_rng(seed).standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float32)


class Scene:
    """Walls, rooms and object instances on a CELL_SIZE grid centred at the world origin."""

    def __init__(
        self,
        seed: int,
        walls: np.ndarray,
        rooms: List[Room],
        instances: List[Instance],
        feature_dim: int = 64,
        background_seed: int = 0,
        resolution: float = CELL_SIZE,
    ):
        self.seed = seed
        self.walls = np.asarray(walls, dtype=bool)
        self.rooms = rooms
        self.instances = instances
        self.feature_dim = feature_dim
        self.background_seed = background_seed
        self.resolution = resolution
        rows, cols = self.walls.shape
        self.origin = (-cols * resolution / 2.0, -rows * resolution / 2.0)

        ids = [inst.instance_id for inst in instances]
        if len(set(ids)) != len(ids):
            raise ContractViolation("Instance ids must be unique")
        self.label_grid = np.zeros(self.walls.shape, dtype=np.int32)
        self.label_grid[self.walls] = -1
        for inst in instances:
            if self.walls[inst.cell]:
                raise ContractViolation(f"Instance {inst.instance_id} placed inside a wall")
            self.label_grid[inst.cell] = inst.instance_id + 1
        self._by_id = {inst.instance_id: inst for inst in instances}
        self._features = {inst.instance_id: unit_feature(inst.feature_seed, feature_dim) for inst in instances}
        self.background_feature = unit_feature(background_seed, feature_dim)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.walls.shape

    def instance(self, instance_id: int) -> Instance:
        return self._by_id[instance_id]

    def feature(self, instance_id: int) -> np.ndarray:
        return self._features[instance_id]

    def occupancy(self) -> OccupancyGrid:
        """Ground-truth grid; walls and instances are occupied."""
        data = np.where(self.label_grid != 0, OCCUPIED, FREE).astype(np.int8)
        return OccupancyGrid(data, self.resolution, self.origin)

    def world_to_cell(self, x: float, y: float) -> Cell:
        return (
            math.floor((y - self.origin[1]) / self.resolution),
            math.floor((x - self.origin[0]) / self.resolution),
        )

    def cell_center(self, cell: Cell) -> Tuple[float, float]:
        return (
            self.origin[0] + (cell[1] + 0.5) * self.resolution,
            self.origin[1] + (cell[0] + 0.5) * self.resolution,
        )

    def is_free_point(self, x: float, y: float) -> bool:
        r, c = self.world_to_cell(x, y)
        rows, cols = self.shape
        return 0 <= r < rows and 0 <= c < cols and self.label_grid[r, c] == 0

    def room_of(self, cell: Cell) -> Optional[Room]:
        for room in self.rooms:
            if room.contains(cell):
                return room
        return None

    def categories(self) -> List[str]:
        return sorted({inst.category for inst in self.instances})

    def instances_of(self, category: str) -> List[Instance]:
        key = category.strip().casefold()
        return [inst for inst in self.instances if inst.category.casefold() == key]

    def match_text(self, text: str) -> List[Instance]:
        """
        Instances a free-text goal refers to: description match first, else the
        longest category word contained in the text.
        """
        key = (text or "").strip().casefold()
        if not key:
            return []
        exact = [inst for inst in self.instances if inst.description.casefold() in key
                 or key in inst.description.casefold()]
        if exact:
            return exact
        categories = sorted(
            (cat for cat in self.categories() if cat.casefold() in key), key=lambda c: (-len(c), c)
        )
        return self.instances_of(categories[0]) if categories else []

    def resolve_targets(self, goal) -> List[Instance]:
        """Ground-truth instances that satisfy a goal (anything with modality/text/image)."""
        modality = getattr(goal, "modality", "category")
        if modality == "image_instance":
            image = getattr(goal, "image", None)
            if image is None or getattr(image, "instance_id", None) is None:
                return []
            return [self.instance(image.instance_id)]
        if modality == "category":
            return self.instances_of(goal.text)
        return self.match_text(goal.text)

    def goal_image(self, instance_id: int, variant: int = 0) -> SyntheticImage:
        """A close-up picture of an instance, used for image-goal episodes."""
        inst = self.instance(instance_id)
        colour = COLOURS.get(inst.attributes.get("colour", ""), (128, 128, 128))
        rgb = np.empty((48, 64, 3), dtype=np.uint8)
        rgb[:] = colour
        return SyntheticImage(rgb=rgb, token=self.feature(instance_id), instance_id=instance_id, variant=variant)

    def raycast(self, x: float, y: float, angles: np.ndarray, max_range: float):
        """
        March horizontal rays from (x, y).

        Returns (hit_range, hit_label, wall_range); ranges are inf when nothing
        is hit within max_range. hit_label is the label grid value at the first
        hit (-1 wall, instance_id + 1 for instances, 0 when nothing is hit).
        """
        angles = np.atleast_1d(np.asarray(angles, dtype=np.float64))
        ts = np.arange(1, int(math.ceil(max_range / RAY_STEP)) + 1) * RAY_STEP
        ts = ts[ts <= max_range + 1e-9]
        px = x + np.cos(angles)[:, None] * ts[None, :]
        py = y + np.sin(angles)[:, None] * ts[None, :]
        rows = np.floor((py - self.origin[1]) / self.resolution).astype(np.int64)
        cols = np.floor((px - self.origin[0]) / self.resolution).astype(np.int64)
        h, w = self.shape
        inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        labels = np.full(rows.shape, -1, dtype=np.int32)
        labels[inside] = self.label_grid[rows[inside], cols[inside]]

        hit = labels != 0
        any_hit = hit.any(axis=1)
        first = hit.argmax(axis=1)
        idx = np.arange(len(angles))
        hit_range = np.where(any_hit, ts[first], np.inf)
        hit_label = np.where(any_hit, labels[idx, first], 0)

        wall = labels == -1
        any_wall = wall.any(axis=1)
        wall_range = np.where(any_wall, ts[wall.argmax(axis=1)], np.inf)
        return hit_range, hit_label, wall_range

    def line_of_sight(self, x: float, y: float, instance_id: int, max_range: float) -> bool:
        inst = self.instance(instance_id)
        angle = math.atan2(inst.position[1] - y, inst.position[0] - x)
        _, label, _ = self.raycast(x, y, np.array([angle]), max_range)
        return int(label[0]) == instance_id + 1

    def render(self, pose: AgentPose, config: AgentConfig, step: int = 0) -> SimObservation:
        k = config.intrinsics
        cam_h = config.camera_height
        columns = np.arange(k.width, dtype=np.float64)
        slopes = (columns - k.cx) / k.fx
        offsets = -np.arctan(slopes)
        angles = pose.yaw + offsets
        hit_range, hit_label, wall_range = self.raycast(pose.x, pose.y, angles, config.max_range)

        cos_off = 1.0 / np.sqrt(1.0 + slopes ** 2)
        d_hit = hit_range * cos_off
        d_wall = wall_range * cos_off
        b = (np.arange(k.height, dtype=np.float64) - k.cy) / k.fy
        with np.errstate(divide="ignore"):
            d_floor = np.where(b > 0, cam_h / np.where(b > 0, b, 1.0), np.inf)

        is_obj = (hit_label > 0)[None, :]
        d_obj = np.where(hit_label > 0, d_hit, 0.0)[None, :]
        z_obj = cam_h - d_obj * b[:, None]
        obj_mask = is_obj & (z_obj >= 0.0) & (z_obj <= OBJECT_HEIGHT)
        wall_mask = ~obj_mask & np.isfinite(d_wall)[None, :] & (d_wall[None, :] <= d_floor[:, None])
        floor_mask = ~obj_mask & ~wall_mask & np.isfinite(d_floor)[:, None]

        shape = (k.height, k.width)
        depth = np.zeros(shape, dtype=np.float64)
        depth[obj_mask] = np.broadcast_to(d_hit[None, :], shape)[obj_mask]
        depth[wall_mask] = np.broadcast_to(d_wall[None, :], shape)[wall_mask]
        depth[(depth < config.min_range) | (depth > config.max_range)] = 0.0

        labels = np.full(shape, LABEL_NONE, dtype=np.int32)
        labels[floor_mask] = LABEL_FLOOR
        labels[wall_mask] = LABEL_WALL
        labels[obj_mask] = np.broadcast_to((hit_label - 1)[None, :], shape)[obj_mask]

        scan = hit_range.copy()
        scan[np.isfinite(d_hit) & (d_hit < config.min_range)] = 0.0

        return SimObservation(
            pose=pose,
            rgb=self._colourise(labels, depth, config.max_range),
            depth=depth,
            labels=labels,
            scan_ranges=scan,
            scan_angles=angles,
            visible=self._visible_instances(pose, k, config),
            step=step,
        )

    def _visible_instances(self, pose: AgentPose, k: CameraIntrinsics, config: AgentConfig) -> List[VisibleInstance]:
        t_world_cam = pose_to_world_transform(pose).compose(base_to_camera_transform(config.camera_height))
        r, t = t_world_cam.rotation, t_world_cam.translation
        visible = []
        for inst in self.instances:
            pc = r.T @ (np.array(inst.centre) - t)
            pixel = project_to_pixel(pc, k)
            if pixel is None:
                continue
            u, v = pixel
            if not (0 <= u < k.width and 0 <= v < k.height):
                continue
            if not (config.min_range <= pc[2] <= config.max_range):
                continue
            if not self.line_of_sight(pose.x, pose.y, inst.instance_id, config.max_range):
                continue
            visible.append(VisibleInstance(inst.instance_id, float(u), float(v), float(pc[2])))
        return visible

    def _colourise(self, labels: np.ndarray, depth: np.ndarray, max_range: float) -> np.ndarray:
        rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
        shade = np.clip(1.0 - depth / (max_range * 1.5), 0.3, 1.0)[..., None]
        rgb[labels == LABEL_WALL] = WALL_RGB
        rgb[labels == LABEL_FLOOR] = FLOOR_RGB
        for inst in self.instances:
            mask = labels == inst.instance_id
            if mask.any():
                rgb[mask] = COLOURS.get(inst.attributes.get("colour", ""), (128, 128, 128))
        return (rgb * shade).astype(np.uint8)

    def sample_start(self, rng: np.random.Generator, avoid: Sequence[Instance] = (), min_distance: float = 0.0) -> Tuple[float, float, int]:
        """Random free cell clear of obstacles by one cell, at a random heading index."""
        inflated = self.occupancy().inflate(1)
        free = np.argwhere(inflated.data == FREE)
        order = rng.permutation(len(free))
        for i in order:
            cell = (int(free[i][0]), int(free[i][1]))
            x, y = self.cell_center(cell)
            if all(math.hypot(x - inst.position[0], y - inst.position[1]) > min_distance for inst in avoid):
                return x, y, int(rng.integers(0, 12))
        raise ContractViolation("No free start cell satisfies the distance constraint")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": SCENE_FORMAT_VERSION,
            "seed": self.seed,
            "resolution": self.resolution,
            "feature_dim": self.feature_dim,
            "background_seed": self.background_seed,
            "rows": int(self.walls.shape[0]),
            "cols": int(self.walls.shape[1]),
            "walls": [_rle_encode(row) for row in self.walls],
            "rooms": [asdict(room) for room in self.rooms],
            "instances": [inst.to_dict() for inst in self.instances],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Scene":
        if data.get("version") != SCENE_FORMAT_VERSION:
            raise PersistenceError(f"Unsupported scene version: {data.get('version')}")
        walls = np.array([_rle_decode(runs, data["cols"]) for runs in data["walls"]], dtype=bool)
        return cls(
            seed=data["seed"],
            walls=walls,
            rooms=[Room(**room) for room in data["rooms"]],
            instances=[Instance.from_dict(item) for item in data["instances"]],
            feature_dim=data["feature_dim"],
            background_seed=data["background_seed"],
            resolution=data["resolution"],
        )

    def save_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load_json(cls, path: str) -> "Scene":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise PersistenceError(f"Could not load scene {path}: {e}") from e


def _rle_encode(row: np.ndarray) -> List[int]:
    """Alternating run lengths, starting with a (possibly empty) free run."""
    runs, current, count = [], False, 0
    for value in row.tolist():
        if value == current:
            count += 1
        else:
            runs.append(count)
            current, count = value, 1
    runs.append(count)
    return runs


def _rle_decode(runs: List[int], width: int) -> List[bool]:
    out, value = [], False
    for n in runs:
        out.extend([value] * n)
        value = not value
    if len(out) != width:
        raise PersistenceError(f"Run lengths cover {len(out)} cells, expected {width}")
    return out


def generate_scene(seed: int, feature_dim: int = 64, max_similarity: float = 0.3) -> Scene:
    """
    Procedural apartment: a 1-2 x 2-3 grid of 4-6 m rooms joined by 1 m
    doorways, with one or two instances per room.
    """
    rng = np.random.default_rng(seed)
    nx, ny = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    widths = [int(w) for w in rng.integers(16, 25, size=nx)]
    heights = [int(h) for h in rng.integers(16, 25, size=ny)]
    cols = sum(widths) + nx + 1
    rows = sum(heights) + ny + 1
    walls = np.zeros((rows, cols), dtype=bool)
    walls[0, :] = walls[-1, :] = True
    walls[:, 0] = walls[:, -1] = True

    col_starts = [1 + sum(widths[:i]) + i for i in range(nx)]
    row_starts = [1 + sum(heights[:j]) + j for j in range(ny)]
    for i in range(1, nx):
        walls[:, col_starts[i] - 1] = True
    for j in range(1, ny):
        walls[row_starts[j] - 1, :] = True

    names = list(rng.permutation(ROOM_NAMES))
    rooms = []
    for j in range(ny):
        for i in range(nx):
            rooms.append(Room(str(names[len(rooms)]), row_starts[j], col_starts[i], heights[j], widths[i]))

    # doorways between horizontal and vertical neighbours
    for j in range(ny):
        for i in range(1, nx):
            start = int(rng.integers(row_starts[j] + 2, row_starts[j] + heights[j] - 6 + 1))
            walls[start:start + 4, col_starts[i] - 1] = False
    for j in range(1, ny):
        for i in range(nx):
            start = int(rng.integers(col_starts[i] + 2, col_starts[i] + widths[i] - 6 + 1))
            walls[row_starts[j] - 1, start:start + 4] = False

    instances: List[Instance] = []
    used_descriptions = set()
    clearance = 4
    for room in rooms:
        for _ in range(int(rng.integers(1, 3))):
            category = str(CATEGORIES[int(rng.integers(len(CATEGORIES)))])
            cells = [
                (r, c)
                for r in range(room.row0 + clearance - 1, room.row0 + room.rows - clearance + 1)
                for c in range(room.col0 + clearance - 1, room.col0 + room.cols - clearance + 1)
            ]
            cells = [cells[i] for i in rng.permutation(len(cells))]
            chosen = None
            for cell in cells:
                if any(max(abs(cell[0] - o.cell[0]), abs(cell[1] - o.cell[1])) < clearance for o in instances):
                    continue
                if any(o.category == category and
                       math.hypot(cell[0] - o.cell[0], cell[1] - o.cell[1]) * CELL_SIZE < 2.0
                       for o in instances):
                    continue
                chosen = cell
                break
            if chosen is None:
                continue
            colour_names = list(COLOURS)
            for _ in range(100):
                colour = colour_names[int(rng.integers(len(colour_names)))]
                material = MATERIALS[int(rng.integers(len(MATERIALS)))]
                description = f"{colour} {material} {category} in the {room.name}"
                if description not in used_descriptions:
                    break
            used_descriptions.add(description)
            position = (
                -cols * CELL_SIZE / 2.0 + (chosen[1] + 0.5) * CELL_SIZE,
                -rows * CELL_SIZE / 2.0 + (chosen[0] + 0.5) * CELL_SIZE,
            )
            instances.append(Instance(
                instance_id=len(instances),
                category=category,
                description=description,
                cell=chosen,
                position=position,
                feature_seed=int(rng.integers(2 ** 31 - 1)),
                attributes={"colour": colour, "material": material, "room": room.name},
            ))

    background_seed = int(rng.integers(2 ** 31 - 1))
    instances = _separate_features(instances, background_seed, feature_dim, max_similarity, rng)
    return Scene(seed, walls, rooms, instances, feature_dim=feature_dim, background_seed=background_seed)


def _separate_features(instances: List[Instance], background_seed: int, dim: int,
                       max_similarity: float, rng: np.random.Generator) -> List[Instance]:
    """Redraw identity seeds until every pair (background included) has |cos| < max_similarity."""
    accepted = [unit_feature(background_seed, dim)]
    out = []
    for inst in instances:
        seed = inst.feature_seed
        for _ in range(1000):
            feat = unit_feature(seed, dim)
            if all(abs(float(np.dot(feat, other))) < max_similarity for other in accepted):
                break
            seed = int(rng.integers(2 ** 31 - 1))
        else:
            raise ContractViolation("Could not draw well-separated identity features")
        accepted.append(feat)
        out.append(Instance(inst.instance_id, inst.category, inst.description, inst.cell,
                            inst.position, seed, inst.attributes))
    return out


def geodesic_shortest(scene: Scene, start: Tuple[float, float], goal: Tuple[float, float]) -> float:
    """Obstacle-respecting distance between two free points in metres (inf if sealed off)."""
    grid = scene.occupancy()
    s, g = grid.world_to_cell(*start), grid.world_to_cell(*goal)
    if not (grid.is_free(s) and grid.is_free(g)):
        raise ContractViolation("Geodesic endpoints must lie on free space")
    return float(distance_field(grid, [g])[s]) * grid.resolution


def success_cells(scene: Scene, targets: Sequence[Instance], radius: float) -> List[Cell]:
    """Free cells whose centre lies within radius of any target centre."""
    grid = scene.occupancy()
    cells = []
    reach = int(math.ceil(radius / grid.resolution)) + 1
    for inst in targets:
        r0, c0 = inst.cell
        for r in range(r0 - reach, r0 + reach + 1):
            for c in range(c0 - reach, c0 + reach + 1):
                if not grid.is_free((r, c)):
                    continue
                x, y = grid.cell_center((r, c))
                if math.hypot(x - inst.position[0], y - inst.position[1]) <= radius:
                    cells.append((r, c))
    return sorted(set(cells))


def geodesic_to_targets(scene: Scene, start: Tuple[float, float], targets: Sequence[Instance],
                        radius: float = 1.0) -> float:
    """Shortest distance from start into the success region of any target."""
    if not targets:
        return math.inf
    grid = scene.occupancy()
    s = grid.world_to_cell(*start)
    if not grid.is_free(s):
        raise ContractViolation("Start must lie on free space")
    sources = success_cells(scene, targets, radius)
    if not sources:
        return math.inf
    return float(distance_field(grid, sources)[s]) * grid.resolution


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    shortest_length: float
    steps: int
    stop_distance: float
    reason: str = ""
    candidates_visited: int = 0
    collisions: int = 0
    answer: Optional[str] = None

    @property
    def solvable(self) -> bool:
        return math.isfinite(self.shortest_length) and self.shortest_length > 0


class GridWorldSim:
    """
    One agent in one scene. Tracks pose, executed length and the per-step trace.

    Heading is an integer index of turn increments so repeated turns stay exact.
    """

    def __init__(self, scene: Scene, config: AgentConfig, start: Tuple[float, float, int],
                 step_budget: Optional[int] = None, seed: int = 0):
        self.scene = scene
        self.config = config
        self.seed = seed
        self.headings = int(round(360.0 / config.turn_deg))
        if not math.isclose(self.headings * config.turn_deg, 360.0):
            raise ContractViolation("turn_deg must divide 360")
        x, y, heading = start
        if not scene.is_free_point(x, y):
            raise ContractViolation(f"Start ({x}, {y}) is not on free space")
        self.x, self.y = float(x), float(y)
        self.heading = int(heading) % self.headings
        self.start = (self.x, self.y)
        self.step_budget = step_budget
        self.steps = 0
        self.collisions = 0
        self.executed_length = 0.0
        self.stopped = False
        self.trace: List[Dict[str, Any]] = []
        self._cache: Optional[SimObservation] = None

    @property
    def pose(self) -> AgentPose:
        return AgentPose(self.x, self.y, normalize_angle(math.radians(self.heading * self.config.turn_deg)))

    @property
    def done(self) -> bool:
        return self.stopped or self.budget_exhausted

    @property
    def budget_exhausted(self) -> bool:
        return self.step_budget is not None and self.steps >= self.step_budget

    @property
    def steps_remaining(self) -> Optional[int]:
        if self.step_budget is None:
            return None
        return max(0, self.step_budget - self.steps)

    def observe(self) -> SimObservation:
        if self._cache is None:
            self._cache = self.scene.render(self.pose, self.config, step=self.steps)
        return self._cache

    def step(self, action: Action) -> Tuple[SimObservation, bool]:
        if self.done:
            raise EpisodeFinishedError("Episode already finished")
        action = Action(action)
        collided = False
        if action == Action.FORWARD:
            yaw = self.pose.yaw
            dx, dy = math.cos(yaw), math.sin(yaw)
            samples = np.arange(1, int(round(self.config.forward_step / COLLISION_STEP)) + 1) * COLLISION_STEP
            if all(self.scene.is_free_point(self.x + s * dx, self.y + s * dy) for s in samples):
                self.x += self.config.forward_step * dx
                self.y += self.config.forward_step * dy
                self.executed_length += self.config.forward_step
            else:
                collided = True
                self.collisions += 1
        elif action == Action.TURN_LEFT:
            self.heading = (self.heading + 1) % self.headings
        elif action == Action.TURN_RIGHT:
            self.heading = (self.heading - 1) % self.headings
        elif action == Action.STOP:
            self.stopped = True
        self.steps += 1
        self._cache = None
        pose = self.pose
        self.trace.append({
            "step": self.steps, "x": pose.x, "y": pose.y, "yaw": pose.yaw,
            "action": action.value, "collided": collided,
        })
        return self.observe(), collided

    def distance_to(self, instances: Sequence[Instance]) -> float:
        if not instances:
            return math.inf
        return min(math.hypot(self.x - inst.position[0], self.y - inst.position[1]) for inst in instances)

    def result(self, targets: Sequence[Instance], reason: str = "", candidates_visited: int = 0,
               shortest_length: Optional[float] = None, answer: Optional[str] = None) -> EpisodeResult:
        if shortest_length is None:
            shortest_length = geodesic_to_targets(self.scene, self.start, targets, self.config.success_distance)
        stop_distance = self.distance_to(targets)
        success = self.stopped and stop_distance <= self.config.success_distance
        if not success and not reason:
            reason = "budget-exhausted" if self.budget_exhausted and not self.stopped else "stopped-away-from-goal"
        return EpisodeResult(
            success=success,
            path_length=self.executed_length,
            shortest_length=shortest_length,
            steps=self.steps,
            stop_distance=stop_distance,
            reason="" if success else reason,
            candidates_visited=candidates_visited,
            collisions=self.collisions,
            answer=answer,
        )

    def write_trace(self, path: str) -> None:
        with open(path, "w") as f:
            for row in self.trace:
                f.write(json.dumps(row) + "\n")


def run_episode(scene: Scene, agent, goal, start: Tuple[float, float, int], config: AgentConfig,
                target_ids: Optional[Sequence[int]] = None, seed: int = 0,
                trace_path: Optional[str] = None, shortest_length: Optional[float] = None) -> EpisodeResult:
    """
    Run one episode: the agent executes the task inside a fresh simulator and
    success is judged against the ground-truth targets at the stop pose.
    """
    sim = GridWorldSim(scene, config, start, step_budget=config.step_budget, seed=seed)
    if target_ids is None:
        targets = scene.resolve_targets(goal)
    else:
        targets = [scene.instance(i) for i in target_ids]
    outcome = agent.execute(goal, sim)
    if trace_path:
        sim.write_trace(trace_path)
    return sim.result(targets, reason=outcome.reason, candidates_visited=outcome.candidates_visited,
                      shortest_length=shortest_length, answer=outcome.answer)


def render_topdown(scene: Scene, grid: Optional[OccupancyGrid] = None,
                   trajectory: Sequence[Tuple[float, float]] = (), scale: int = 4) -> np.ndarray:
    """RGB top-down view, north up: walls, instances, optional known map and a trajectory."""
    rows, cols = scene.shape
    img = np.full((rows, cols, 3), 255, dtype=np.uint8)
    if grid is not None:
        img[grid.data == UNKNOWN] = (200, 200, 200)
    img[scene.walls] = (40, 40, 40)
    for inst in scene.instances:
        img[inst.cell] = COLOURS.get(inst.attributes.get("colour", ""), (128, 128, 128))
    for x, y in trajectory:
        cell = scene.world_to_cell(x, y)
        if 0 <= cell[0] < rows and 0 <= cell[1] < cols:
            img[cell] = (220, 0, 220)
    img = np.flipud(img)
    return np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)


def save_ppm(image: np.ndarray, path: str) -> None:
    Image.fromarray(np.ascontiguousarray(image)).save(path, format="PPM")
