"""
Agent runtime: frontier exploration that builds both memories, memory-guided
navigation with on-arrival verification, instruction following, question
answering and a memoryless frontier-search baseline.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cognitive_map import CognitiveMap
from .config import AgentConfig
from .errors import (
    ContractViolation,
    EpisodeFinishedError,
    InvalidDepthError,
    RetrievalUnavailableError,
)
from .geometry import base_to_camera_transform, camera_to_world, pixel_to_camera, pose_to_world_transform
from .gridworld import GridWorldSim, Scene, SimObservation
from .landmark_memory import Landmark, LandmarkStore
from .perception import InterfaceSet, VerificationResult
from .planner import (
    FREE,
    OCCUPIED,
    Action,
    Cell,
    OccupancyGrid,
    distance_field,
    exploration_budget,
    find_frontiers,
    nearest_frontier,
    path_to_actions,
    plan_path,
)
from .telemetry import navigation_metrics
from .working_memory import (
    CATEGORY,
    TEXT_INSTANCE,
    WAYPOINT,
    CandidateGoal,
    GoalSpec,
    merge_candidates,
    rank_candidates,
    retrieve_cognitive_candidates,
    retrieve_landmark_candidates,
)

logger = logging.getLogger(__name__)

FRONTIER_APPROACH = 0.75
LOOKOUT_RADIUS = 1.0
FALLBACK_APPROACH = 1.5
MAX_REPLANS = 10
BASELINE_FORWARD_LIMIT = 8
GO_AROUND_FRONTIERS = 3


@dataclass
class Memories:
    store: LandmarkStore
    cmap: CognitiveMap
    grid: OccupancyGrid
    manifest: Optional[Dict[str, Any]] = None

    def __iter__(self):
        return iter((self.store, self.cmap, self.grid))

    @classmethod
    def empty(cls, config: AgentConfig, grid: OccupancyGrid) -> "Memories":
        return cls(
            store=LandmarkStore(config.overlap_distance, config.confidence_floor),
            cmap=CognitiveMap(config.grid, config.buffer_capacity, config.tau, config.hop, config.feature_dim),
            grid=grid,
        )


@dataclass(frozen=True)
class InstructionTask:
    """A long-horizon instruction, decomposed into waypoints by the reasoner."""
    text: str
    modality: str = "instruction"


@dataclass(frozen=True)
class QuestionTask:
    """An embodied question; the agent moves to the relevant object and answers."""
    text: str
    reference: str = ""
    modality: str = "eqa"


Task = Union[GoalSpec, InstructionTask, QuestionTask]


@dataclass
class NavigationOutcome:
    reason: str = ""
    candidates_visited: int = 0
    verified: List[str] = field(default_factory=list)
    answer: Optional[str] = None


@dataclass
class ExplorationStats:
    visits: int = 0
    views: int = 0
    unreachable: int = 0
    halted: bool = False
    budget: float = 0.0


def blank_grid(scene: Scene, config: AgentConfig) -> OccupancyGrid:
    """All-unknown grid covering the scene's bounding box at the planner resolution."""
    rows, cols = scene.shape
    res = config.planner_resolution
    return OccupancyGrid.unknown(
        int(math.ceil(rows * scene.resolution / res)),
        int(math.ceil(cols * scene.resolution / res)),
        res,
        scene.origin,
    )


def centre_of_best_run(flags: Sequence[bool]) -> Optional[int]:
    """
    Index at the middle of the longest circular run of True values, or None
    when no flag is set. Ties go to the run met first when scanning from the
    first False entry.
    """
    n = len(flags)
    if not any(flags):
        return None
    if all(flags):
        return 0
    # scan once around the circle starting just after a False entry
    begin = next(i for i in range(n) if not flags[i]) + 1
    best_start, best_len = 0, 0
    run_start, run_len = 0, 0
    for step in range(n):
        idx = (begin + step) % n
        if not flags[idx]:
            run_len = 0
            continue
        if run_len == 0:
            run_start = idx
        run_len += 1
        if run_len > best_len:
            best_start, best_len = run_start, run_len
    return (best_start + (best_len - 1) // 2) % n


class Agent:
    """Memory-guided agent over one InterfaceSet; one instance may serve many simulators."""

    def __init__(self, config: AgentConfig, interfaces: InterfaceSet, memories: Optional[Memories] = None):
        interfaces.validate()
        self.config = config
        self.interfaces = interfaces
        self.memories = memories
        self.t_base_cam = base_to_camera_transform(config.camera_height)
        self.intrinsics = config.intrinsics
        self.last_exploration: Optional[ExplorationStats] = None

    # Task dispatch

    def execute(self, task: Task, sim: GridWorldSim) -> NavigationOutcome:
        try:
            if isinstance(task, InstructionTask):
                return self.follow_instruction(task.text, sim)
            if isinstance(task, QuestionTask):
                return self.answer_question(task.text, sim)
            return self.navigate(task, sim)
        except EpisodeFinishedError:
            return NavigationOutcome(reason="budget-exhausted")

    # Sensing

    def _map_scan(self, grid: OccupancyGrid, obs: SimObservation) -> None:
        pose = obs.pose
        for angle, r in zip(obs.scan_angles, obs.scan_ranges):
            if r == 0:
                continue
            grid.mark_ray(pose.x, pose.y, float(angle), None if not np.isfinite(r) else float(r),
                          self.config.max_range)

    def _mark_blocked(self, grid: OccupancyGrid, sim: GridWorldSim) -> None:
        pose = sim.pose
        cell = grid.world_to_cell(pose.x + self.config.forward_step * math.cos(pose.yaw),
                                  pose.y + self.config.forward_step * math.sin(pose.yaw))
        if grid.in_bounds(cell) and cell != grid.world_to_cell(pose.x, pose.y):
            grid.data[cell] = OCCUPIED

    def ingest(self, obs: SimObservation, memories: Memories) -> None:
        """Feed one view into the landmark store and the cognitive map."""
        t_world_base = pose_to_world_transform(obs.pose)
        for det in self.interfaces.detector.detect(obs):
            try:
                pc = pixel_to_camera(det.u, det.v, det.depth, self.intrinsics)
            except (InvalidDepthError, ContractViolation) as e:
                logger.debug("Skipping detection %s: %s", det.category, e)
                continue
            position = camera_to_world(pc, self.t_base_cam, t_world_base)
            memories.store.insert(Landmark(det.category, tuple(position), det.confidence, det.description))
        patches = self.interfaces.encoder.encode(obs)
        memories.cmap.integrate(patches, obs.depth, obs.pose, self.intrinsics, self.t_base_cam,
                                self.config.patch_stride)

    # Motion

    def _drive(self, sim: GridWorldSim, grid: OccupancyGrid, path: List[Cell]) -> bool:
        """Follow a path without stopping; False on collision."""
        actions = path_to_actions(path, sim.pose, grid, self.config.forward_step, self.config.turn_deg)
        for action in actions:
            if action == Action.STOP:
                return True
            obs, collided = sim.step(action)
            self._map_scan(grid, obs)
            if collided:
                self._mark_blocked(grid, sim)
                return False
        return True

    def _go_to_cell(self, sim: GridWorldSim, grid: OccupancyGrid, goal: Cell) -> bool:
        for _ in range(MAX_REPLANS):
            path = plan_path(grid, (sim.x, sim.y), goal, self.config.inflate_obstacles)
            if path is None:
                return False
            if self._drive(sim, grid, path):
                return True
        return False

    def _approach_cell(self, sim: GridWorldSim, grid: OccupancyGrid, target: Tuple[float, float],
                       radius: float) -> Optional[Cell]:
        """Reachable free cell within radius of target with the shortest path from the agent."""
        start = grid.world_to_cell(sim.x, sim.y)
        if not grid.in_bounds(start):
            return None
        layers = [grid.inflate(1), grid.copy()] if self.config.inflate_obstacles else [grid.copy()]
        reach = int(math.ceil(radius / grid.resolution)) + 1
        centre = grid.world_to_cell(*target)
        for layer in layers:
            layer.data[start] = FREE
            dist = distance_field(layer, [start])
            best = None
            for r in range(centre[0] - reach, centre[0] + reach + 1):
                for c in range(centre[1] - reach, centre[1] + reach + 1):
                    cell = (r, c)
                    if not layer.is_free(cell) or not np.isfinite(dist[cell]):
                        continue
                    x, y = grid.cell_center(cell)
                    if math.hypot(x - target[0], y - target[1]) > radius:
                        continue
                    key = (float(dist[cell]), cell)
                    if best is None or key < best:
                        best = key
            if best is not None:
                return best[1]
        return None

    def _approach(self, sim: GridWorldSim, grid: OccupancyGrid, target: Tuple[float, float],
                  radius: float) -> bool:
        for _ in range(MAX_REPLANS):
            cell = self._approach_cell(sim, grid, target, radius)
            if cell is None:
                return False
            if self._go_to_cell(sim, grid, cell):
                return True
        return False

    def _turn_to(self, sim: GridWorldSim, offset: int) -> None:
        """Turn by offset heading increments (positive is left) along the shorter direction."""
        n = sim.headings
        offset %= n
        if offset <= n // 2:
            for _ in range(offset):
                sim.step(Action.TURN_LEFT)
        else:
            for _ in range(n - offset):
                sim.step(Action.TURN_RIGHT)

    # Exploration

    def _look_around(self, sim: GridWorldSim, grid: OccupancyGrid,
                     on_view: Callable[[SimObservation], bool], stats: ExplorationStats) -> bool:
        for i in range(sim.headings):
            obs = sim.observe()
            self._map_scan(grid, obs)
            stats.views += 1
            if on_view(obs):
                return True
            if i < sim.headings - 1:
                sim.step(Action.TURN_LEFT)
        return False

    def _explore(self, sim: GridWorldSim, grid: OccupancyGrid, on_view: Callable[[SimObservation], bool],
                 budget: Optional[float] = None) -> ExplorationStats:
        stats = ExplorationStats()
        stats.budget = self._visit_limit(grid, budget)
        if self._look_around(sim, grid, on_view, stats):
            stats.halted = True
            return stats
        lookouts = [(sim.x, sim.y)]
        blacklist = set()
        while stats.visits < stats.budget:
            frontiers = [f for f in find_frontiers(grid) if f not in blacklist]
            if frontiers:
                centres = np.array([grid.cell_center(f) for f in frontiers])
                seen = np.array(lookouts)
                gaps = np.linalg.norm(centres[:, None, :] - seen[None, :, :], axis=2).min(axis=1)
                frontiers = [f for f, gap in zip(frontiers, gaps) if gap > LOOKOUT_RADIUS]
            target = nearest_frontier(frontiers, grid.world_to_cell(sim.x, sim.y))
            if target is None:
                break
            stats.visits += 1
            if not self._approach(sim, grid, grid.cell_center(target), FRONTIER_APPROACH):
                blacklist.add(target)
                stats.unreachable += 1
                continue
            lookouts.append((sim.x, sim.y))
            if self._look_around(sim, grid, on_view, stats):
                stats.halted = True
                break
            stats.budget = max(stats.budget, self._visit_limit(grid, budget))
        return stats

    @staticmethod
    def _visit_limit(grid: OccupancyGrid, budget: Optional[float]) -> float:
        # half of the free area mapped so far; grows as the map does
        if budget is not None:
            return budget
        if grid.count(FREE) == 0:
            return 1
        return exploration_budget(grid)

    def explore_and_build(self, sim: GridWorldSim, budget: Optional[float] = None) -> Memories:
        """
        Frontier exploration with a 360 degree look-around at every frontier,
        feeding each view into the memories.

        Without a budget the visit limit is half of the free cells in the
        agent's own occupancy grid at the planner resolution, re-read after
        every look-around. The scene's ground truth is never consulted.
        Pass math.inf for no limit.
        """
        if self.memories is None:
            self.memories = Memories.empty(self.config, blank_grid(sim.scene, self.config))
        memories = self.memories
        before = len(memories.cmap)
        def build(obs: SimObservation) -> bool:
            self.ingest(obs, memories)
            return False

        stats = self._explore(sim, memories.grid, build, budget)
        self.last_exploration = stats
        logger.info(
            "Explored scene %s: %d frontier visits (%d unreachable), %d views, %d landmarks, %d features (+%d)",
            sim.scene.seed, stats.visits, stats.unreachable, stats.views, len(memories.store),
            len(memories.cmap), len(memories.cmap) - before,
        )
        return memories

    # Navigation

    def retrieve(self, goal: GoalSpec, sim: GridWorldSim) -> List[CandidateGoal]:
        """Hierarchical retrieval: landmarks first for category and waypoint goals, cognitive map otherwise."""
        if self.memories is None:
            return []
        store, cmap = self.memories.store, self.memories.cmap
        cfg = self.config

        def landmark_branch() -> List[CandidateGoal]:
            try:
                return retrieve_landmark_candidates(goal, store, self.interfaces.reasoner, cfg.landmark_k)
            except RetrievalUnavailableError as e:
                logger.warning("Landmark retrieval unavailable for %s: %s", goal.describe(), e)
                navigation_metrics.record_error(type(e).__name__, "landmark_retrieval")
                return []

        def cognitive_branch() -> List[CandidateGoal]:
            try:
                return retrieve_cognitive_candidates(goal, cmap, self.interfaces.enricher, self.interfaces.imaginer,
                                                     self.interfaces.encoder, cfg)
            except RetrievalUnavailableError as e:
                logger.warning("Cognitive retrieval unavailable for %s: %s", goal.describe(), e)
                navigation_metrics.record_error(type(e).__name__, "cognitive_retrieval")
                return []

        if goal.modality in (CATEGORY, WAYPOINT):
            candidates = landmark_branch()
            if cfg.merge_branches or not candidates:
                candidates = candidates + cognitive_branch()
        elif goal.modality == TEXT_INSTANCE:
            candidates = cognitive_branch()
            if cfg.merge_branches or not candidates:
                candidates = candidates + landmark_branch()
        else:
            candidates = cognitive_branch()

        candidates = merge_candidates(candidates, cfg.candidate_merge_radius)
        if not candidates:
            return []
        return rank_candidates(candidates, sim.pose, cfg.priority_lambda)

    def _verify_here(self, sim: GridWorldSim, goal) -> Optional[VerificationResult]:
        """
        Rotate through every heading asking the verifier, then face the middle
        of the widest run of positive views and close in while it asks for it.
        """
        results: List[Optional[VerificationResult]] = []
        for i in range(sim.headings):
            try:
                results.append(self.interfaces.verifier.verify(sim.observe(), goal))
            except RetrievalUnavailableError as e:
                logger.warning("Verifier unavailable at step %d: %s", sim.steps, e)
                results.append(None)
            if i < sim.headings - 1:
                sim.step(Action.TURN_LEFT)

        best = centre_of_best_run([bool(r and r.success) for r in results])
        if best is None:
            return None
        self._turn_to(sim, best - (sim.headings - 1))
        result = results[best]
        forwards = 0
        while result.need_forward and forwards < self.config.verify_forward_limit:
            _, collided = sim.step(Action.FORWARD)
            if collided:
                break
            forwards += 1
            try:
                result = self.interfaces.verifier.verify(sim.observe(), goal)
            except RetrievalUnavailableError:
                break
            if not result.success:
                break
        return results[best]

    def _navigate(self, goal: GoalSpec, sim: GridWorldSim, grid: OccupancyGrid, stop: bool) -> NavigationOutcome:
        candidates = self.retrieve(goal, sim)
        if not candidates:
            return NavigationOutcome(reason="retrieval-empty")

        limit = self.config.landmark_k + self.config.cognitive_q
        outcome = NavigationOutcome()
        for cand in candidates[:limit]:
            outcome.candidates_visited += 1
            navigation_metrics.record_candidate_visit()
            target = cand.position[:2]
            if not (self._approach(sim, grid, target, self.config.approach_radius)
                    or self._approach(sim, grid, target, FALLBACK_APPROACH)):
                logger.debug("Candidate %s unreachable", cand.position)
                continue
            if self._verify_here(sim, goal) is not None:
                outcome.verified.append(goal.describe())
                if stop:
                    sim.step(Action.STOP)
                return outcome
        outcome.reason = "candidates-exhausted"
        return outcome

    def navigate(self, goal: GoalSpec, sim: GridWorldSim) -> NavigationOutcome:
        """Retrieve, rank and visit candidates until one verifies; stop there."""
        grid = self.memories.grid.copy() if self.memories is not None else blank_grid(sim.scene, self.config)
        outcome = self._navigate(goal, sim, grid, stop=True)
        if outcome.reason and not sim.done:
            sim.step(Action.STOP)
        return outcome

    def follow_instruction(self, instruction: str, sim: GridWorldSim) -> NavigationOutcome:
        """Decompose into waypoints and navigate to each in turn; stop only after the last."""
        try:
            waypoints = self.interfaces.reasoner.decompose(instruction)
        except RetrievalUnavailableError as e:
            logger.warning("Could not decompose instruction %r: %s", instruction, e)
            waypoints = []
        if not waypoints:
            sim.step(Action.STOP)
            return NavigationOutcome(reason="decomposition-failed")

        grid = self.memories.grid.copy() if self.memories is not None else blank_grid(sim.scene, self.config)
        total = NavigationOutcome()
        for i, text in enumerate(waypoints):
            last = i == len(waypoints) - 1
            outcome = self._navigate(GoalSpec(WAYPOINT, text), sim, grid, stop=last)
            total.candidates_visited += outcome.candidates_visited
            total.verified.extend(outcome.verified)
            if outcome.reason:
                total.reason = f"waypoint-{i + 1}-{outcome.reason}"
                if not sim.done:
                    sim.step(Action.STOP)
                return total
        return total

    def answer_question(self, question: str, sim: GridWorldSim) -> NavigationOutcome:
        """
        Move to the object the question is about, then answer from the final
        view. Without a target, sweep a few nearby frontiers until some view
        yields an answer.
        """
        target = None
        if self.memories is not None:
            try:
                target = self.interfaces.reasoner.eqa_target(question, self.memories.store)
            except RetrievalUnavailableError as e:
                logger.warning("EQA target unavailable: %s", e)
        if target:
            outcome = self.navigate(GoalSpec(WAYPOINT, target), sim)
            outcome.answer = self._answer(question, sim.observe())
            return outcome

        outcome = NavigationOutcome(reason="go-around")
        answers: List[str] = []

        def listen(obs: SimObservation) -> bool:
            answer = self._answer(question, obs)
            if answer and answer.casefold() != "unknown":
                answers.append(answer)
                return True
            return False

        grid = self.memories.grid.copy() if self.memories is not None else blank_grid(sim.scene, self.config)
        self._explore(sim, grid, listen, GO_AROUND_FRONTIERS)
        if not sim.done:
            sim.step(Action.STOP)
        outcome.answer = answers[-1] if answers else self._answer(question, sim.observe())
        return outcome

    def _answer(self, question: str, obs: SimObservation) -> str:
        try:
            return self.interfaces.answerer.answer(question, obs)
        except RetrievalUnavailableError as e:
            logger.warning("Answerer unavailable: %s", e)
            return ""


class FrontierSearchAgent(Agent):
    """Memoryless baseline: explore frontiers until the verifier fires, then close in and stop."""

    def __init__(self, config: AgentConfig, interfaces: InterfaceSet):
        super().__init__(config, interfaces, memories=None)

    def execute(self, task: Task, sim: GridWorldSim) -> NavigationOutcome:
        if not isinstance(task, GoalSpec):
            raise ContractViolation("Frontier search only handles single goals")
        try:
            return self.frontier_search(task, sim)
        except EpisodeFinishedError:
            return NavigationOutcome(reason="budget-exhausted")

    def frontier_search(self, goal: GoalSpec, sim: GridWorldSim) -> NavigationOutcome:
        grid = blank_grid(sim.scene, self.config)
        found: List[VerificationResult] = []

        def check(obs: SimObservation) -> bool:
            try:
                result = self.interfaces.verifier.verify(obs, goal)
            except RetrievalUnavailableError:
                return False
            if result.success:
                found.append(result)
                return True
            return False

        self._explore(sim, grid, check, math.inf)
        if not found:
            if not sim.done:
                sim.step(Action.STOP)
            return NavigationOutcome(reason="target-not-found")

        result, forwards = found[-1], 0
        while result.need_forward and forwards < BASELINE_FORWARD_LIMIT:
            _, collided = sim.step(Action.FORWARD)
            if collided:
                break
            forwards += 1
            result = self.interfaces.verifier.verify(sim.observe(), goal)
            if not result.success:
                break
        sim.step(Action.STOP)
        return NavigationOutcome(verified=[goal.describe()])
