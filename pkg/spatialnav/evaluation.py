"""
Benchmark metrics (SR, SPL, LLM-Match) and the batch harness that generates
scenes, builds memories once per scene and runs every episode of a suite.
"""

import csv
import json
import logging
import math
import os
import statistics
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .agent import Agent, FrontierSearchAgent, InstructionTask, Memories, QuestionTask, Task
from .config import AgentConfig, config_hash
from .errors import ConfigError, ContractViolation, RetrievalUnavailableError
from .gridworld import EpisodeResult, GridWorldSim, Scene, generate_scene, geodesic_to_targets, run_episode
from .perception import InterfaceSet, build_mock_interfaces
from .persistence import MANIFEST_FILE, load_memories, save_memories
from .telemetry import navigation_metrics
from .working_memory import CATEGORY, IMAGE_INSTANCE, TEXT_INSTANCE, GoalSpec

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

INSTRUCTION = "instruction"
EQA = "eqa"
TASK_TYPES = (CATEGORY, TEXT_INSTANCE, IMAGE_INSTANCE, INSTRUCTION, EQA)
BASELINE_TASKS = (CATEGORY, TEXT_INSTANCE, IMAGE_INSTANCE)

AGENT_MEMORY = "memory"
AGENT_BASELINE = "baseline"

REPORT_FILE = "report.json"
EPISODES_FILE = "episodes.csv"
METRICS_FILE = "metrics.prom"
TRAJECTORIES_FILE = "trajectories.svg"
SUMMARY_FILE = "summary.svg"

# start poses keep this much extra clearance beyond the success radius
START_MARGIN = 1.0
MAX_PLOTTED_SCENES = 4

InterfaceFactory = Callable[[Scene], InterfaceSet]


# Metrics

def success_rate(results: Sequence[EpisodeResult]) -> float:
    if not results:
        raise ContractViolation("success_rate needs at least one result")
    return sum(1 for r in results if r.success) / len(results)


def spl_term(result: EpisodeResult) -> float:
    """One episode's S * L* / max(L, L*); unsolvable episodes contribute 0."""
    if not result.success or not result.solvable:
        return 0.0
    return result.shortest_length / max(result.path_length, result.shortest_length)


def spl(results: Sequence[EpisodeResult]) -> float:
    """Success weighted by path length over all results."""
    if not results:
        raise ContractViolation("spl needs at least one result")
    for r in results:
        if r.success and not r.solvable:
            raise ContractViolation(f"Successful episode with shortest length {r.shortest_length}")
    return sum(spl_term(r) for r in results) / len(results)


def llm_match(scores: Sequence[int]) -> float:
    """Judge scores on the 1-5 scale mapped to a percentage."""
    if not scores:
        raise ContractViolation("llm_match needs at least one score")
    for s in scores:
        if s not in (1, 2, 3, 4, 5):
            raise ContractViolation(f"Score out of range: {s}")
    return sum((s - 1) / 4.0 for s in scores) / len(scores) * 100.0


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for fewer than two values)."""
    if not values:
        return 0.0, 0.0
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


# Suites and episodes

class SuiteConfig(BaseModel):
    """A benchmark suite: which scenes, which task types, how many episodes each."""

    model_config = ConfigDict(extra="forbid")

    name: str = "suite"
    scene_seeds: List[int] = Field(..., min_length=1)
    task_types: List[str] = Field(default_factory=lambda: [CATEGORY, TEXT_INSTANCE])
    episodes_per_task: int = Field(1, ge=1)
    seed: int = 0
    workers: int = Field(1, ge=1)
    baseline: bool = False
    exploration_budget: Optional[int] = Field(None, ge=1)
    config_overrides: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("task_types")
    @classmethod
    def _known_tasks(cls, value: List[str]) -> List[str]:
        unknown = [t for t in value if t not in TASK_TYPES]
        if unknown:
            raise ValueError(f"unknown task types {unknown}; expected any of {list(TASK_TYPES)}")
        if not value:
            raise ValueError("at least one task type is required")
        return value


def load_suite(path: str) -> SuiteConfig:
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not read suite {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Suite {path} must hold a JSON object")
    try:
        return SuiteConfig(**data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


@dataclass
class EpisodeSpec:
    episode_id: str
    scene_seed: int
    task_type: str
    task: Task
    target_ids: Tuple[int, ...]
    start: Tuple[float, float, int]
    seed: int
    reference: str = ""

    @property
    def goal_label(self) -> str:
        if isinstance(self.task, GoalSpec):
            return self.task.describe()
        return f"{self.task_type}:{self.task.text}"


def _make_task(scene: Scene, task_type: str, rng: np.random.Generator) -> Tuple[Task, List, str]:
    instances = scene.instances
    inst = instances[int(rng.integers(len(instances)))]
    if task_type == CATEGORY:
        return GoalSpec(CATEGORY, inst.category), scene.instances_of(inst.category), ""
    if task_type == TEXT_INSTANCE:
        return GoalSpec(TEXT_INSTANCE, inst.description), [inst], ""
    if task_type == IMAGE_INSTANCE:
        return GoalSpec(IMAGE_INSTANCE, image=scene.goal_image(inst.instance_id)), [inst], ""
    if task_type == INSTRUCTION:
        others = [o for o in instances if o.instance_id != inst.instance_id]
        if not others:
            return InstructionTask(f"Go to the {inst.description}."), [inst], ""
        last = others[int(rng.integers(len(others)))]
        text = f"Go to the {inst.description}, then go to the {last.description}."
        return InstructionTask(text), [last], ""
    if task_type == EQA:
        unique = [o for o in instances if len(scene.instances_of(o.category)) == 1]
        if unique:
            inst = unique[int(rng.integers(len(unique)))]
        reference = inst.attributes.get("colour", "")
        return QuestionTask(f"What color is the {inst.category}?", reference), [inst], reference
    raise ContractViolation(f"Unknown task type: {task_type!r}")


def generate_episodes(scene: Scene, suite: SuiteConfig, config: AgentConfig) -> List[EpisodeSpec]:
    """Deterministic episodes for one scene; depends only on the suite seed and the scene seed."""
    if not scene.instances:
        logger.warning("Scene %s has no instances; no episodes generated", scene.seed)
        return []
    rng = np.random.default_rng((suite.seed, scene.seed, 0))
    episodes = []
    for task_type in suite.task_types:
        for i in range(suite.episodes_per_task):
            task, targets, reference = _make_task(scene, task_type, rng)
            start = scene.sample_start(rng, avoid=targets,
                                       min_distance=config.success_distance + START_MARGIN)
            episodes.append(EpisodeSpec(
                episode_id=f"s{scene.seed}-{task_type}-{i}",
                scene_seed=scene.seed,
                task_type=task_type,
                task=task,
                target_ids=tuple(t.instance_id for t in targets),
                start=start,
                seed=int(rng.integers(2 ** 31 - 1)),
                reference=reference,
            ))
    return episodes


def parse_goal(text: str, scene: Scene) -> Task:
    """
    Goal strings for the command line: category:<name>, text:<description>,
    image:<instance id>, instruction:<text> or eqa:<question>.
    """
    kind, sep, value = (text or "").partition(":")
    kind, value = kind.strip().casefold(), value.strip()
    if not sep or not value:
        raise ContractViolation(f"Goal must look like <kind>:<value>, got {text!r}")
    if kind == CATEGORY:
        return GoalSpec(CATEGORY, value)
    if kind in ("text", TEXT_INSTANCE):
        return GoalSpec(TEXT_INSTANCE, value)
    if kind in ("image", IMAGE_INSTANCE):
        try:
            return GoalSpec(IMAGE_INSTANCE, image=scene.goal_image(int(value)))
        except (ValueError, KeyError) as e:
            raise ContractViolation(f"No instance {value!r} in scene {scene.seed}") from e
    if kind == INSTRUCTION:
        return InstructionTask(value)
    if kind == EQA:
        return QuestionTask(value)
    raise ContractViolation(f"Unknown goal kind {kind!r}")


# Rows and reports

@dataclass
class EpisodeRow:
    agent: str
    scene_seed: int
    episode_id: str
    task: str
    goal: str
    success: bool
    solvable: bool
    spl: float
    path_length: float
    shortest_length: float
    steps: int
    stop_distance: float
    collisions: int
    candidates_visited: int
    reason: str = ""
    answer: str = ""
    reference: str = ""
    score: int = 0
    duration_s: float = 0.0
    error: str = ""

    @property
    def result(self) -> EpisodeResult:
        return EpisodeResult(self.success, self.path_length, self.shortest_length, self.steps,
                             self.stop_distance, self.reason, self.candidates_visited, self.collisions)


_CSV_FIELDS = [f.name for f in fields(EpisodeRow)]
_CSV_TYPES = {f.name: f.type for f in fields(EpisodeRow)}


def write_episodes_csv(rows: Iterable[EpisodeRow], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            record = asdict(row)
            for name, value in record.items():
                if isinstance(value, float):
                    record[name] = repr(value)
            writer.writerow(record)


def read_episodes_csv(path: str) -> List[EpisodeRow]:
    rows = []
    with open(path, "r", newline="") as f:
        for record in csv.DictReader(f):
            values = {}
            for name in _CSV_FIELDS:
                raw = record.get(name, "")
                kind = _CSV_TYPES[name]
                if kind is bool:
                    values[name] = raw == "True"
                elif kind is int:
                    values[name] = int(raw)
                elif kind is float:
                    values[name] = float(raw)
                else:
                    values[name] = raw
            rows.append(EpisodeRow(**values))
    return rows


@dataclass
class TaskSummary:
    task: str
    agent: str
    episodes: int
    solvable: int
    successes: int
    sr: float
    sr_solvable: float
    spl_mean: float
    spl_std: float
    spl_solvable: float
    llm_match: Optional[float] = None


@dataclass
class BenchmarkReport:
    suite: str
    config_hash: str
    scene_seeds: List[int]
    summaries: List[TaskSummary]
    rows: List[EpisodeRow]
    wall_clock_s: float
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))

    def summary(self, task: str, agent: str = AGENT_MEMORY) -> Optional[TaskSummary]:
        return next((s for s in self.summaries if s.task == task and s.agent == agent), None)

    def rows_for(self, agent: str = AGENT_MEMORY) -> List[EpisodeRow]:
        return [r for r in self.rows if r.agent == agent]

    def overall(self, agent: str = AGENT_MEMORY) -> Optional[TaskSummary]:
        rows = self.rows_for(agent)
        return summarize("all", agent, rows) if rows else None

    def to_dict(self) -> Dict[str, Any]:
        overall = [s for s in (self.overall(AGENT_MEMORY), self.overall(AGENT_BASELINE)) if s is not None]
        return {
            "suite": self.suite,
            "created": self.created,
            "config_hash": self.config_hash,
            "scene_seeds": self.scene_seeds,
            "episodes": len(self.rows),
            "wall_clock_s": self.wall_clock_s,
            "summaries": [asdict(s) for s in self.summaries],
            "overall": [asdict(s) for s in overall],
            "rows": [{k: _json_number(v) for k, v in asdict(r).items()} for r in self.rows],
        }


def _json_number(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def summarize(task: str, agent: str, rows: Sequence[EpisodeRow]) -> TaskSummary:
    results = [r.result for r in rows]
    solvable = [r for r in results if r.solvable]
    terms = [spl_term(r) for r in results]
    spl_mean, spl_std = mean_std(terms)
    scores = [r.score for r in rows if r.score]
    return TaskSummary(
        task=task,
        agent=agent,
        episodes=len(rows),
        solvable=len(solvable),
        successes=sum(1 for r in results if r.success),
        sr=success_rate(results),
        sr_solvable=success_rate(solvable) if solvable else 0.0,
        spl_mean=spl_mean,
        spl_std=spl_std,
        spl_solvable=spl(solvable) if solvable else 0.0,
        llm_match=llm_match(scores) if scores else None,
    )


# Harness

@dataclass
class SceneContext:
    scene: Scene
    interfaces: Optional[InterfaceSet] = None
    memories: Optional[Memories] = None
    episodes: List[EpisodeSpec] = field(default_factory=list)
    error: str = ""


def _memory_dir(mem_root: str, scene_seed: int) -> str:
    return os.path.join(mem_root, f"scene_{scene_seed:05d}")


def _prepare_scene(seed: int, suite: SuiteConfig, config: AgentConfig, factory: InterfaceFactory,
                   mem_root: Optional[str]) -> SceneContext:
    ctx = SceneContext(scene=generate_scene(seed, feature_dim=config.feature_dim))
    try:
        ctx.episodes = generate_episodes(ctx.scene, suite, config)
        ctx.interfaces = factory(ctx.scene)
        mem_dir = _memory_dir(mem_root, seed) if mem_root else None
        if mem_dir and os.path.exists(os.path.join(mem_dir, MANIFEST_FILE)):
            ctx.memories = load_memories(mem_dir, config)
            logger.info("Scene %d: reusing memories from %s", seed, mem_dir)
            return ctx
        agent = Agent(config, ctx.interfaces)
        start = ctx.scene.sample_start(np.random.default_rng((suite.seed, seed, 1)))
        sim = GridWorldSim(ctx.scene, config, start, step_budget=None, seed=seed)
        ctx.memories = agent.explore_and_build(sim, suite.exploration_budget)
        if mem_dir:
            save_memories(ctx.memories, mem_dir, config, scene_seed=seed, stats=agent.last_exploration)
    except Exception as e:
        logger.exception("Scene %d could not be prepared", seed)
        navigation_metrics.record_error(type(e).__name__, "prepare_scene")
        ctx.error = f"{type(e).__name__}: {e}"
    return ctx


def _failure_row(spec: EpisodeSpec, agent_label: str, scene: Scene, config: AgentConfig,
                 error: str, duration: float) -> EpisodeRow:
    targets = [scene.instance(i) for i in spec.target_ids]
    try:
        shortest = geodesic_to_targets(scene, spec.start[:2], targets, config.success_distance)
    except ContractViolation:
        shortest = math.inf
    return EpisodeRow(
        agent=agent_label, scene_seed=spec.scene_seed, episode_id=spec.episode_id, task=spec.task_type,
        goal=spec.goal_label, success=False, solvable=math.isfinite(shortest) and shortest > 0,
        spl=0.0, path_length=0.0, shortest_length=shortest, steps=0, stop_distance=math.inf,
        collisions=0, candidates_visited=0, reason="crashed", reference=spec.reference,
        duration_s=duration, error=error,
    )


def _run_job(ctx: SceneContext, spec: EpisodeSpec, agent_label: str, config: AgentConfig,
             trace_dir: Optional[str]) -> EpisodeRow:
    start = time.time()
    try:
        if ctx.error:
            raise RuntimeError(f"scene preparation failed: {ctx.error}")
        if agent_label == AGENT_BASELINE:
            agent = FrontierSearchAgent(config, ctx.interfaces)
        else:
            agent = Agent(config, ctx.interfaces, ctx.memories)
        trace_path = os.path.join(trace_dir, f"{agent_label}_{spec.episode_id}.jsonl") if trace_dir else None
        result = run_episode(ctx.scene, agent, spec.task, spec.start, config, target_ids=spec.target_ids,
                             seed=spec.seed, trace_path=trace_path)
        score = 0
        if isinstance(spec.task, QuestionTask):
            try:
                score = ctx.interfaces.scorer.score(spec.task.text, result.answer or "", spec.reference)
            except RetrievalUnavailableError as e:
                logger.warning("Scorer unavailable for %s: %s", spec.episode_id, e)
                score = 1
        row = EpisodeRow(
            agent=agent_label, scene_seed=spec.scene_seed, episode_id=spec.episode_id, task=spec.task_type,
            goal=spec.goal_label, success=result.success, solvable=result.solvable, spl=spl_term(result),
            path_length=result.path_length, shortest_length=result.shortest_length, steps=result.steps,
            stop_distance=result.stop_distance, collisions=result.collisions,
            candidates_visited=result.candidates_visited, reason=result.reason, answer=result.answer or "",
            reference=spec.reference, score=score, duration_s=time.time() - start,
        )
    except Exception as e:
        logger.exception("Episode %s (%s) crashed", spec.episode_id, agent_label)
        navigation_metrics.record_error(type(e).__name__, "episode")
        row = _failure_row(spec, agent_label, ctx.scene, config, f"{type(e).__name__}: {e}", time.time() - start)
    navigation_metrics.record_episode(spec.task_type, row.success, row.duration_s)
    return row


def run_benchmark(suite: SuiteConfig, config: AgentConfig, out_dir: Optional[str] = None,
                  interfaces_factory: Optional[InterfaceFactory] = None, mem_root: Optional[str] = None,
                  baseline: Optional[bool] = None, workers: Optional[int] = None) -> BenchmarkReport:
    """
    Run every episode of the suite. Memories are built (or loaded from
    mem_root) once per scene; episodes run in a thread pool and a crash in one
    episode becomes a failure row instead of aborting the suite.
    """
    wall_start = time.time()
    workers = workers or suite.workers
    baseline = suite.baseline if baseline is None else baseline
    factory = interfaces_factory or (lambda scene: build_mock_interfaces(scene, config, suite.seed))
    trace_dir = None
    if out_dir:
        trace_dir = os.path.join(out_dir, "traces")
        os.makedirs(trace_dir, exist_ok=True)

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="scene") as pool:
        contexts = list(pool.map(lambda s: _prepare_scene(s, suite, config, factory, mem_root),
                                 suite.scene_seeds))

    jobs = []
    for ctx in contexts:
        for spec in ctx.episodes:
            jobs.append((ctx, spec, AGENT_MEMORY))
            if baseline and spec.task_type in BASELINE_TASKS:
                jobs.append((ctx, spec, AGENT_BASELINE))
    logger.info("Running %d episodes over %d scenes with %d workers", len(jobs), len(contexts), workers)

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="episode") as pool:
        rows = list(pool.map(lambda job: _run_job(job[0], job[1], job[2], config, trace_dir), jobs))

    summaries = []
    for agent_label in (AGENT_MEMORY, AGENT_BASELINE):
        for task in suite.task_types:
            task_rows = [r for r in rows if r.agent == agent_label and r.task == task]
            if task_rows:
                summaries.append(summarize(task, agent_label, task_rows))

    report = BenchmarkReport(
        suite=suite.name,
        config_hash=config_hash(config),
        scene_seeds=list(suite.scene_seeds),
        summaries=summaries,
        rows=rows,
        wall_clock_s=time.time() - wall_start,
    )
    if len(report.rows) != len(jobs):
        raise ContractViolation(f"Report holds {len(report.rows)} rows for {len(jobs)} episodes")
    if out_dir:
        write_report(report, out_dir, {ctx.scene.seed: ctx.scene for ctx in contexts}, trace_dir)
    return report


# Report files

_plot_lock = threading.Lock()


def write_report(report: BenchmarkReport, out_dir: str, scenes: Optional[Dict[int, Scene]] = None,
                 trace_dir: Optional[str] = None) -> List[str]:
    """Write report.json, episodes.csv, metrics.prom and the SVG plots; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    path = os.path.join(out_dir, REPORT_FILE)
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    written.append(path)

    path = os.path.join(out_dir, EPISODES_FILE)
    write_episodes_csv(report.rows, path)
    written.append(path)

    navigation_metrics.sample_process()
    path = os.path.join(out_dir, METRICS_FILE)
    with open(path, "w") as f:
        f.write(navigation_metrics.get_metrics())
    written.append(path)

    with _plot_lock:
        path = os.path.join(out_dir, SUMMARY_FILE)
        plot_summary(report, path)
        written.append(path)
        if scenes and trace_dir:
            path = os.path.join(out_dir, TRAJECTORIES_FILE)
            plot_trajectories(report, scenes, trace_dir, path)
            written.append(path)
    logger.info("Report written to %s", out_dir)
    return written


def _read_trace(path: str) -> List[Tuple[float, float]]:
    if not os.path.exists(path):
        return []
    points = []
    with open(path, "r") as f:
        for line in f:
            step = json.loads(line)
            points.append((step["x"], step["y"]))
    return points


def plot_trajectories(report: BenchmarkReport, scenes: Dict[int, Scene], trace_dir: str, path: str) -> None:
    """Top-down wall maps of the first few scenes with every memory-agent trajectory drawn on them."""
    seeds = [s for s in report.scene_seeds if s in scenes][:MAX_PLOTTED_SCENES]
    if not seeds:
        return
    fig, axes = plt.subplots(1, len(seeds), figsize=(5 * len(seeds), 5), squeeze=False)
    for ax, seed in zip(axes[0], seeds):
        scene = scenes[seed]
        rows, cols = scene.shape
        extent = (scene.origin[0], scene.origin[0] + cols * scene.resolution,
                  scene.origin[1], scene.origin[1] + rows * scene.resolution)
        ax.imshow(scene.walls, cmap="Greys", origin="lower", extent=extent, interpolation="nearest")
        for inst in scene.instances:
            ax.plot(inst.position[0], inst.position[1], "s", color="tab:orange", markersize=4)
        for row in report.rows:
            if row.scene_seed != seed or row.agent != AGENT_MEMORY:
                continue
            points = _read_trace(os.path.join(trace_dir, f"{row.agent}_{row.episode_id}.jsonl"))
            if not points:
                continue
            xs, ys = zip(*points)
            ax.plot(xs, ys, "-", linewidth=1, color="tab:green" if row.success else "tab:red")
            ax.plot(xs[0], ys[0], "o", color="tab:blue", markersize=3)
        ax.set_title(f"scene {seed}")
        ax.set_aspect("equal")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_summary(report: BenchmarkReport, path: str) -> None:
    """Bar chart of SR and SPL (mean +/- sample std) per task type and agent."""
    tasks = sorted({s.task for s in report.summaries}, key=lambda t: TASK_TYPES.index(t))
    agents = [a for a in (AGENT_MEMORY, AGENT_BASELINE) if any(s.agent == a for s in report.summaries)]
    fig, ax = plt.subplots(figsize=(max(6, 2 * len(tasks)), 4))
    width = 0.8 / max(1, 2 * len(agents))
    x = np.arange(len(tasks))
    offset = 0
    for agent in agents:
        found = [report.summary(t, agent) for t in tasks]
        sr = [s.sr if s else 0.0 for s in found]
        spl_means = [s.spl_mean if s else 0.0 for s in found]
        spl_stds = [s.spl_std if s else 0.0 for s in found]
        ax.bar(x + offset * width, sr, width, label=f"SR ({agent})")
        offset += 1
        ax.bar(x + offset * width, spl_means, width, yerr=spl_stds, capsize=3, label=f"SPL ({agent})")
        offset += 1
    ax.set_xticks(x + width * (offset - 1) / 2)
    ax.set_xticklabels(tasks)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("rate")
    ax.set_title(report.suite)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
