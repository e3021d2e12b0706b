import math

import numpy as np
import pytest

from spatialnav.errors import ContractViolation, PersistenceError
from spatialnav.geometry import AgentPose
from spatialnav.planner import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    Action,
    OccupancyGrid,
    astar,
    distance_field,
    exploration_budget,
    find_frontiers,
    nearest_frontier,
    octile_distance,
    path_cost,
    path_to_actions,
    plan_path,
)

pytestmark = pytest.mark.unit


def free_grid(rows, cols):
    return OccupancyGrid(np.zeros((rows, cols), dtype=np.int8))


def random_grid(rng, rows=50, cols=50, density=0.3):
    data = np.where(rng.random((rows, cols)) < density, OCCUPIED, FREE).astype(np.int8)
    return OccupancyGrid(data)


class TestGrid:
    def test_from_strings_puts_top_row_last(self):
        grid = OccupancyGrid.from_strings(["##?", "..."])
        assert grid.data[0].tolist() == [FREE, FREE, FREE]
        assert grid.data[1].tolist() == [OCCUPIED, OCCUPIED, UNKNOWN]

    def test_cell_conversions(self):
        grid = OccupancyGrid.unknown(10, 10, resolution=0.5, origin=(-1.0, -2.0))
        assert grid.world_to_cell(0.0, 0.0) == (4, 2)
        assert grid.cell_center((4, 2)) == pytest.approx((0.25, 0.25))
        assert grid.world_to_cell(*grid.cell_center((7, 3))) == (7, 3)

    def test_inflate(self):
        grid = OccupancyGrid.from_strings([".....", ".....", "..#..", ".....", "????."])
        inflated = grid.inflate(1)
        assert inflated.count(OCCUPIED) == 9
        assert inflated.count(UNKNOWN) == 4
        assert grid.count(OCCUPIED) == 1

    def test_mark_ray(self):
        grid = OccupancyGrid.unknown(8, 8, resolution=0.25)
        grid.mark_ray(0.125, 0.125, 0.0, 1.0, max_range=8.0)
        assert grid.data[0, :4].tolist() == [FREE] * 4
        assert grid.data[0, 4] == OCCUPIED
        assert grid.data[0, 5] == UNKNOWN

    def test_mark_ray_never_clears_occupied(self):
        grid = OccupancyGrid.from_strings(["?#??"])
        grid.mark_ray(0.125, 0.125, 0.0, None, max_range=1.0)
        assert grid.data[0].tolist() == [FREE, OCCUPIED, FREE, FREE]

    def test_known_fraction(self):
        grid = OccupancyGrid.from_strings(["..??"])
        reference = np.ones((1, 4), dtype=bool)
        assert grid.known_fraction(reference) == pytest.approx(0.5)

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.choice([FREE, OCCUPIED, UNKNOWN], size=(13, 21)).astype(np.int8)
        grid = OccupancyGrid(data, resolution=0.25, origin=(-2.5, 1.75))
        path = str(tmp_path / "occupancy.pgm")
        grid.to_pgm(path)
        with open(path, "rb") as f:
            assert f.read(2) == b"P5"
        loaded = OccupancyGrid.from_pgm(path)
        assert np.array_equal(loaded.data, grid.data)
        assert loaded.resolution == grid.resolution
        assert loaded.origin == grid.origin

    def test_pgm_missing(self, tmp_path):
        with pytest.raises(PersistenceError):
            OccupancyGrid.from_pgm(str(tmp_path / "missing.pgm"))


class TestAstar:
    def test_straight_corridor(self):
        path = astar(free_grid(10, 10), (0, 0), (0, 9))
        assert path[0] == (0, 0) and path[-1] == (0, 9)
        assert path_cost(path) == pytest.approx(9.0)

    def test_diagonal_cost(self):
        path = astar(free_grid(10, 10), (0, 0), (3, 5))
        assert path_cost(path) == pytest.approx(2 + 3 * math.sqrt(2))
        assert path_cost(path) == pytest.approx(octile_distance((0, 0), (3, 5)))

    def test_wall_disconnects(self):
        grid = OccupancyGrid.from_strings([".#.", ".#.", ".#."])
        assert astar(grid, (0, 0), (0, 2)) is None

    def test_goal_occupied(self):
        grid = OccupancyGrid.from_strings(["..#"])
        assert astar(grid, (0, 0), (0, 2)) is None

    def test_start_must_be_free(self):
        grid = OccupancyGrid.from_strings(["#.."])
        with pytest.raises(ContractViolation):
            astar(grid, (0, 0), (0, 2))

    def test_no_corner_cutting(self):
        grid = OccupancyGrid.from_strings([
            "..",
            "#.",
            ".#",
        ])
        # bottom-left (0, 0) touches (1, 1) only diagonally between two walls
        assert astar(grid, (0, 0), (1, 1)) is None

    def test_trivial_path(self):
        assert astar(free_grid(3, 3), (1, 1), (1, 1)) == [(1, 1)]

    def test_matches_dijkstra_on_random_grids(self):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(100):
            grid = random_grid(rng)
            free = np.argwhere(grid.data == FREE)
            start, goal = (tuple(int(c) for c in free[i]) for i in rng.choice(len(free), 2, replace=False))
            dist = distance_field(grid, [start])
            path = astar(grid, start, goal)
            if math.isinf(dist[goal]):
                assert path is None
                continue
            checked += 1
            assert path_cost(path) == dist[goal]
            for a, b in zip(path, path[1:]):
                assert grid.is_free(b)
                assert max(abs(a[0] - b[0]), abs(a[1] - b[1])) == 1
        assert checked > 0


class TestDistanceField:
    def test_multi_source(self):
        dist = distance_field(free_grid(1, 7), [(0, 0), (0, 6)])
        assert dist[0].tolist() == [0, 1, 2, 3, 2, 1, 0]

    def test_unreachable_is_inf(self):
        dist = distance_field(OccupancyGrid.from_strings([".#."]), [(0, 0)])
        assert math.isinf(dist[0, 1]) and math.isinf(dist[0, 2])


class TestPathToActions:
    def test_straight_ahead(self):
        grid = free_grid(1, 5)
        x, y = grid.cell_center((0, 0))
        actions = path_to_actions([(0, c) for c in range(5)], AgentPose(x, y, 0.0), grid)
        assert actions == [Action.FORWARD] * 4 + [Action.STOP]

    def test_directly_behind(self):
        grid = free_grid(1, 5)
        x, y = grid.cell_center((0, 4))
        actions = path_to_actions([(0, c) for c in range(4, -1, -1)], AgentPose(x, y, 0.0), grid)
        turns = [a for a in actions if a in (Action.TURN_LEFT, Action.TURN_RIGHT)]
        assert len(turns) == 6
        assert actions[:6] == turns
        assert actions[6:] == [Action.FORWARD] * 4 + [Action.STOP]

    def test_already_there(self):
        grid = free_grid(3, 3)
        x, y = grid.cell_center((1, 1))
        assert path_to_actions([(1, 1)], AgentPose(x + 0.1, y, 1.0), grid) == [Action.STOP]

    def test_quarter_turn_left(self):
        grid = free_grid(3, 3)
        x, y = grid.cell_center((0, 0))
        actions = path_to_actions([(0, 0), (1, 0), (2, 0)], AgentPose(x, y, 0.0), grid)
        assert actions == [Action.TURN_LEFT] * 3 + [Action.FORWARD] * 2 + [Action.STOP]

    def test_replay_ends_near_goal(self):
        rng = np.random.default_rng(5)
        grid = free_grid(20, 20)
        for _ in range(20):
            start = (int(rng.integers(0, 20)), int(rng.integers(0, 20)))
            goal = (int(rng.integers(0, 20)), int(rng.integers(0, 20)))
            path = astar(grid, start, goal)
            x, y = grid.cell_center(start)
            yaw = float(rng.choice(np.arange(12)) * math.pi / 6)
            for action in path_to_actions(path, AgentPose(x, y, yaw), grid):
                if action == Action.FORWARD:
                    x += 0.25 * math.cos(yaw)
                    y += 0.25 * math.sin(yaw)
                elif action == Action.TURN_LEFT:
                    yaw += math.pi / 6
                elif action == Action.TURN_RIGHT:
                    yaw -= math.pi / 6
            gx, gy = grid.cell_center(goal)
            assert math.hypot(gx - x, gy - y) < 0.25

    def test_empty_path(self):
        with pytest.raises(ContractViolation):
            path_to_actions([], AgentPose(0.0, 0.0, 0.0), free_grid(2, 2))


class TestFrontiers:
    def test_fully_known(self):
        assert find_frontiers(OccupancyGrid.from_strings(["..#", "...", "#.."])) == []

    def test_single_free_cell(self):
        grid = OccupancyGrid.from_strings(["???", "?.?", "???"])
        assert find_frontiers(grid) == [(1, 1)]

    def test_left_half_free(self):
        grid = OccupancyGrid.from_strings(["...??"] * 5)
        assert find_frontiers(grid) == [(r, 2) for r in range(5)]

    def test_occupied_cells_are_not_frontiers(self):
        grid = OccupancyGrid.from_strings(["#?", ".."])
        assert find_frontiers(grid) == [(0, 1)]

    def test_nearest_with_tie_break(self):
        assert nearest_frontier([(2, 0), (0, 2), (5, 5)], (0, 0)) == (0, 2)
        assert nearest_frontier([], (0, 0)) is None


class TestBudget:
    def test_hundred_free_cells(self):
        assert exploration_budget(free_grid(10, 10)) == 50

    def test_single_free_cell(self):
        assert exploration_budget(OccupancyGrid.from_strings(["#.#"])) == 1

    def test_no_free_cells(self):
        with pytest.raises(ContractViolation):
            exploration_budget(OccupancyGrid.unknown(4, 4))


class TestPlanPath:
    def test_prefers_inflated_clearance(self):
        grid = OccupancyGrid.from_strings([
            ".......",
            ".......",
            ".......",
            "...#...",
            ".......",
            ".......",
            ".......",
        ])
        path = plan_path(grid, grid.cell_center((3, 0)), (3, 6))
        assert all(max(abs(r - 3), abs(c - 3)) > 1 for r, c in path)

    def test_falls_back_to_raw_grid(self):
        grid = OccupancyGrid.from_strings(["###", "...", "###"])
        path = plan_path(grid, grid.cell_center((1, 0)), (1, 2))
        assert path == [(1, 0), (1, 1), (1, 2)]

    def test_start_next_to_wall(self):
        grid = OccupancyGrid.from_strings(["....", ".#..", "...."])
        assert plan_path(grid, grid.cell_center((1, 0)), (1, 3)) is not None

    def test_start_outside_grid(self):
        assert plan_path(free_grid(3, 3), (-5.0, -5.0), (1, 1)) is None
