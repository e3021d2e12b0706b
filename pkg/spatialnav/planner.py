"""
Occupancy-grid planning: A* over 8-connected cells, discrete action synthesis,
frontier detection and the exploration budget rule.

Cells are (row, col) tuples. Row 0 is the lowest y; the grid origin is the
world position of the lower-left corner of cell (0, 0).
"""

import json
import logging
import math
from enum import Enum
from heapq import heappop, heappush
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import ContractViolation, PersistenceError
from .geometry import AgentPose, normalize_angle

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

SQRT2 = math.sqrt(2.0)

# ROS map_server conventions
PGM_FREE = 254
PGM_OCCUPIED = 0
PGM_UNKNOWN = 205

_AXIAL = [(-1, 0), (0, -1), (0, 1), (1, 0)]
_DIAGONAL = [(-1, -1), (-1, 1), (1, -1), (1, 1)]


class Action(str, Enum):
    FORWARD = "forward"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    STOP = "stop"


class OccupancyGrid:
    """Rectangular grid of FREE / OCCUPIED / UNKNOWN cells."""

    def __init__(self, data: np.ndarray, resolution: float = 0.25, origin: Tuple[float, float] = (0.0, 0.0)):
        data = np.asarray(data, dtype=np.int8)
        if data.ndim != 2:
            raise ContractViolation(f"Occupancy grid must be 2D, got shape {data.shape}")
        if resolution <= 0:
            raise ContractViolation("Grid resolution must be positive")
        self.data = data
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))

    @classmethod
    def unknown(cls, rows: int, cols: int, resolution: float = 0.25,
                origin: Tuple[float, float] = (0.0, 0.0)) -> "OccupancyGrid":
        return cls(np.full((rows, cols), UNKNOWN, dtype=np.int8), resolution, origin)

    @classmethod
    def from_strings(cls, rows: Sequence[str], resolution: float = 0.25,
                     origin: Tuple[float, float] = (0.0, 0.0)) -> "OccupancyGrid":
        """
        Build a grid from text rows, top row first ('.' free, '#' occupied, '?' unknown).
        """
        lookup = {".": FREE, "#": OCCUPIED, "?": UNKNOWN}
        data = np.array([[lookup[ch] for ch in line] for line in reversed(rows)], dtype=np.int8)
        return cls(data, resolution, origin)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.data.copy(), self.resolution, self.origin)

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.data.shape[0] and 0 <= cell[1] < self.data.shape[1]

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.data[cell] == FREE

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

    def free_mask(self) -> np.ndarray:
        return self.data == FREE

    def count(self, state: int) -> int:
        return int(np.count_nonzero(self.data == state))

    def known_fraction(self, reference: np.ndarray) -> float:
        """Share of the cells flagged in reference that are no longer unknown here."""
        total = int(np.count_nonzero(reference))
        if total == 0:
            return 1.0
        return float(np.count_nonzero(reference & (self.data != UNKNOWN))) / total

    def inflate(self, radius: int = 1) -> "OccupancyGrid":
        """Grow occupied cells by radius (Chebyshev); unknown cells stay unknown."""
        occupied = self.data == OCCUPIED
        grown = occupied.copy()
        rows, cols = occupied.shape
        for dr in range(-radius, radius + 1):
            for dc in range(-radius, radius + 1):
                src = occupied[max(0, -dr):rows - max(0, dr), max(0, -dc):cols - max(0, dc)]
                grown[max(0, dr):rows - max(0, -dr), max(0, dc):cols - max(0, -dc)] |= src
        data = self.data.copy()
        data[grown & (self.data == FREE)] = OCCUPIED
        return OccupancyGrid(data, self.resolution, self.origin)

    def mark_ray(self, x: float, y: float, angle: float, hit_range: Optional[float], max_range: float):
        """
        Mark cells along one horizontal ray: free up to the hit, occupied at the hit.

        hit_range None means nothing was hit within max_range. Occupied cells are
        never cleared.
        """
        reach = max_range if hit_range is None else hit_range
        step = self.resolution / 4.0
        ts = np.arange(0.0, max(reach - 0.01, 0.0), step)
        if ts.size:
            px = x + ts * math.cos(angle)
            py = y + ts * math.sin(angle)
            rows = np.floor((py - self.origin[1]) / self.resolution).astype(np.int64)
            cols = np.floor((px - self.origin[0]) / self.resolution).astype(np.int64)
            ok = (rows >= 0) & (rows < self.data.shape[0]) & (cols >= 0) & (cols < self.data.shape[1])
            rows, cols = rows[ok], cols[ok]
            cells = self.data[rows, cols]
            clear = cells == UNKNOWN
            self.data[rows[clear], cols[clear]] = FREE
        if hit_range is not None:
            hx = x + (hit_range + 0.01) * math.cos(angle)
            hy = y + (hit_range + 0.01) * math.sin(angle)
            cell = self.world_to_cell(hx, hy)
            if self.in_bounds(cell):
                self.data[cell] = OCCUPIED

    def to_pgm(self, path: str) -> None:
        """Write a P5 PGM (north up) plus a JSON sidecar with resolution and origin."""
        image = np.full(self.data.shape, PGM_UNKNOWN, dtype=np.uint8)
        image[self.data == FREE] = PGM_FREE
        image[self.data == OCCUPIED] = PGM_OCCUPIED
        Image.fromarray(np.flipud(image)).save(path, format="PPM")
        sidecar = {
            "image": path.rsplit("/", 1)[-1],
            "resolution": self.resolution,
            "origin": [self.origin[0], self.origin[1], 0.0],
            "width": int(self.data.shape[1]),
            "height": int(self.data.shape[0]),
            "negate": 0,
            "occupied_thresh": 0.65,
            "free_thresh": 0.196,
        }
        with open(_sidecar_path(path), "w") as f:
            json.dump(sidecar, f, indent=2)

    @classmethod
    def from_pgm(cls, path: str) -> "OccupancyGrid":
        try:
            with open(_sidecar_path(path), "r") as f:
                sidecar = json.load(f)
            with Image.open(path) as img:
                pixels = np.flipud(np.array(img.convert("L"), dtype=np.uint8))
        except (OSError, json.JSONDecodeError) as e:
            raise PersistenceError(f"Could not read occupancy map {path}: {e}") from e
        data = np.full(pixels.shape, UNKNOWN, dtype=np.int8)
        data[pixels >= PGM_FREE] = FREE
        data[pixels <= 50] = OCCUPIED
        return cls(data, float(sidecar["resolution"]), tuple(sidecar["origin"][:2]))


def _sidecar_path(pgm_path: str) -> str:
    base = pgm_path[:-4] if pgm_path.endswith(".pgm") else pgm_path
    return base + ".json"


def octile_distance(a: Cell, b: Cell) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (max(dr, dc) - min(dr, dc)) + SQRT2 * min(dr, dc)


def step_cost(axial: int, diagonal: int) -> float:
    """Cost of a move multiset, evaluated the same way regardless of order."""
    return axial + diagonal * SQRT2


def path_cost(path: Sequence[Cell]) -> float:
    axial = diagonal = 0
    for a, b in zip(path, path[1:]):
        if a[0] != b[0] and a[1] != b[1]:
            diagonal += 1
        else:
            axial += 1
    return step_cost(axial, diagonal)


def _neighbours(free: List[List[bool]], cell: Cell, rows: int, cols: int):
    r, c = cell
    for dr, dc in _AXIAL:
        nr, nc = r + dr, c + dc
        if 0 <= nr < rows and 0 <= nc < cols and free[nr][nc]:
            yield (nr, nc), False
    for dr, dc in _DIAGONAL:
        nr, nc = r + dr, c + dc
        if 0 <= nr < rows and 0 <= nc < cols and free[nr][nc]:
            # no corner cutting
            if free[r + dr][c] and free[r][c + dc]:
                yield (nr, nc), True


def astar(grid: OccupancyGrid, start: Cell, goal: Cell) -> Optional[List[Cell]]:
    """Shortest 8-connected path over free cells, or None when unreachable."""
    if not grid.is_free(start):
        raise ContractViolation(f"A* start {start} is not a free cell")
    if not grid.is_free(goal):
        return None
    if start == goal:
        return [start]

    rows, cols = grid.shape
    free = grid.free_mask().tolist()
    counts: Dict[Cell, Tuple[int, int]] = {start: (0, 0)}
    parent: Dict[Cell, Cell] = {}
    closed = set()
    queue = [(octile_distance(start, goal), start)]

    while queue:
        _, current = heappop(queue)
        if current in closed:
            continue
        if current == goal:
            path = [current]
            while current in parent:
                current = parent[current]
                path.append(current)
            return path[::-1]
        closed.add(current)

        axial, diagonal = counts[current]
        for nxt, is_diagonal in _neighbours(free, current, rows, cols):
            if nxt in closed:
                continue
            candidate = (axial, diagonal + 1) if is_diagonal else (axial + 1, diagonal)
            g = step_cost(*candidate)
            known = counts.get(nxt)
            if known is None or g < step_cost(*known):
                counts[nxt] = candidate
                parent[nxt] = current
                heappush(queue, (g + octile_distance(nxt, goal), nxt))
    return None


def distance_field(grid: OccupancyGrid, sources: Iterable[Cell]) -> np.ndarray:
    """Multi-source Dijkstra over free cells; unreachable cells hold inf."""
    rows, cols = grid.shape
    free = grid.free_mask().tolist()
    dist = np.full((rows, cols), np.inf)
    counts: Dict[Cell, Tuple[int, int]] = {}
    queue = []
    for s in sources:
        if grid.is_free(s) and s not in counts:
            counts[s] = (0, 0)
            heappush(queue, (0.0, s))
    done = set()
    while queue:
        g, current = heappop(queue)
        if current in done:
            continue
        done.add(current)
        dist[current] = g
        axial, diagonal = counts[current]
        for nxt, is_diagonal in _neighbours(free, current, rows, cols):
            if nxt in done:
                continue
            candidate = (axial, diagonal + 1) if is_diagonal else (axial + 1, diagonal)
            cost = step_cost(*candidate)
            known = counts.get(nxt)
            if known is None or cost < step_cost(*known):
                counts[nxt] = candidate
                heappush(queue, (cost, nxt))
    return dist


def path_to_actions(
    path: Sequence[Cell],
    pose: AgentPose,
    grid: OccupancyGrid,
    forward_step: float = 0.25,
    turn_deg: float = 30.0,
    max_iterations: int = 1000,
) -> List[Action]:
    """
    Greedy action synthesis along a cell path.

    Turns until the heading is within half a turn increment of the bearing to
    the next waypoint, then steps forward. Intermediate waypoints are passed
    once strictly closer than one step; the sequence stops when the final cell
    centre is strictly closer than one step.
    """
    if not path:
        raise ContractViolation("path_to_actions needs a non-empty path")
    waypoints = [grid.cell_center(c) for c in path[1:]] or [grid.cell_center(path[0])]
    turn = math.radians(turn_deg)
    tolerance = turn / 2.0 + 1e-9
    x, y, yaw = pose.x, pose.y, pose.yaw
    actions: List[Action] = []
    index = 0

    for _ in range(max_iterations):
        tx, ty = waypoints[index]
        dist = math.hypot(tx - x, ty - y)
        last = index == len(waypoints) - 1
        if dist < forward_step - 1e-9:
            if last:
                actions.append(Action.STOP)
                return actions
            index += 1
            continue
        diff = normalize_angle(math.atan2(ty - y, tx - x) - yaw)
        if abs(diff) > tolerance:
            if diff > 0:
                actions.append(Action.TURN_LEFT)
                yaw = normalize_angle(yaw + turn)
            else:
                actions.append(Action.TURN_RIGHT)
                yaw = normalize_angle(yaw - turn)
        else:
            actions.append(Action.FORWARD)
            x += forward_step * math.cos(yaw)
            y += forward_step * math.sin(yaw)

    logger.warning("Action synthesis hit %d iterations; stopping early", max_iterations)
    actions.append(Action.STOP)
    return actions


def find_frontiers(grid: OccupancyGrid) -> List[Cell]:
    """Free cells with at least one unknown 4-neighbour, in row-major order."""
    unknown = grid.data == UNKNOWN
    touching = np.zeros_like(unknown)
    touching[1:, :] |= unknown[:-1, :]
    touching[:-1, :] |= unknown[1:, :]
    touching[:, 1:] |= unknown[:, :-1]
    touching[:, :-1] |= unknown[:, 1:]
    rows, cols = np.nonzero(grid.free_mask() & touching)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def nearest_frontier(frontiers: Sequence[Cell], cell: Cell) -> Optional[Cell]:
    """Euclidean-nearest frontier with lexicographic tie-break."""
    if not frontiers:
        return None
    return min(frontiers, key=lambda f: (math.hypot(f[0] - cell[0], f[1] - cell[1]), f))


def exploration_budget(grid: OccupancyGrid) -> int:
    """Half of the traversable area in cells, rounded up."""
    free = grid.count(FREE)
    if free == 0:
        raise ContractViolation("Exploration budget needs at least one free cell")
    return math.ceil(free / 2)


def plan_path(grid: OccupancyGrid, start_xy: Tuple[float, float], goal_cell: Cell,
              inflate: bool = True) -> Optional[List[Cell]]:
    """
    Plan from a world position to a goal cell, on the inflated grid first.

    The start cell is always treated as free so an agent hugging an obstacle
    can still leave it.
    """
    start = grid.world_to_cell(*start_xy)
    if not grid.in_bounds(start):
        return None
    attempts = [grid.inflate(1), grid] if inflate else [grid]
    for candidate in attempts:
        working = candidate.copy() if candidate is grid else candidate
        working.data[start] = FREE
        path = astar(working, start, goal_cell)
        if path is not None:
            return path
    return None
