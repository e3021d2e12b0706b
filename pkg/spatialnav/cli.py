"""
Command line entry point: explore, navigate, bench, inspect and serve-stub.

Exit codes: 0 success, 1 task failure, 2 configuration or input error.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from typing import Callable, List, Optional, Sequence

import numpy as np

from .agent import Agent, InstructionTask, Task
from .config import AgentConfig, EndpointSettings, load_config
from .errors import ConfigError, ContractViolation, PersistenceError, RetrievalUnavailableError
from .evaluation import SuiteConfig, load_suite, parse_goal, run_benchmark
from .gridworld import GridWorldSim, Instance, Scene, generate_scene, render_topdown, run_episode, save_ppm
from .perception import FallbackReasoner, InterfaceSet, build_mock_interfaces
from .persistence import LANDMARKS_FILE, VOXELS_FILE, load_memories, save_memories
from .planner import FREE, OCCUPIED, UNKNOWN
from .remote import build_remote_interfaces
from .stub_server import load_script, serve

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_TASK_FAILURE = 1
EXIT_CONFIG_ERROR = 2
TOPDOWN_FILE = "topdown.ppm"


def _load_scene(spec: str, config: AgentConfig) -> Scene:
    """A scene JSON file, or an integer seed for a generated scene."""
    if os.path.exists(spec):
        return Scene.load_json(spec)
    try:
        seed = int(spec)
    except ValueError:
        raise ConfigError(f"Scene must be a scene JSON file or an integer seed, got {spec!r}")
    return generate_scene(seed, feature_dim=config.feature_dim)


def _interface_factory(args, config: AgentConfig) -> Callable[[Scene], InterfaceSet]:
    if args.remote:
        settings = EndpointSettings.from_env()
        settings.validate()
        return lambda scene: build_remote_interfaces(settings, config, scene, args.seed)
    return lambda scene: build_mock_interfaces(scene, config, args.seed)


def _parse_start(text: str):
    try:
        x, y, heading = text.split(",")
        return float(x), float(y), int(heading)
    except ValueError:
        raise ConfigError(f"--start must look like x,y,heading_index, got {text!r}")


def _targets_for(task: Task, scene: Scene) -> List[Instance]:
    """Ground-truth instances an episode is judged against; an instruction ends at its last waypoint."""
    if isinstance(task, InstructionTask):
        try:
            return scene.match_text(FallbackReasoner().decompose(task.text)[-1])
        except RetrievalUnavailableError:
            return []
    return scene.resolve_targets(task)


def cmd_explore(args) -> int:
    config = load_config(args.config)
    scene = _load_scene(args.scene, config)
    interfaces = _interface_factory(args, config)(scene)
    start = _parse_start(args.start) if args.start else scene.sample_start(np.random.default_rng(args.seed))
    budget = math.inf if args.unbounded else args.budget

    agent = Agent(config, interfaces)
    sim = GridWorldSim(scene, config, start, step_budget=None, seed=args.seed)
    memories = agent.explore_and_build(sim, budget)
    manifest = save_memories(memories, args.out, config, scene_seed=scene.seed, stats=agent.last_exploration)
    trajectory = [(row["x"], row["y"]) for row in sim.trace]
    save_ppm(render_topdown(scene, memories.grid, trajectory), os.path.join(args.out, TOPDOWN_FILE))
    print(f"Explored scene {scene.seed} in {sim.steps} steps")
    print(f"Memories saved to {args.out}: {manifest['landmarks']} landmarks, "
          f"{manifest['features']} features in {manifest['voxels']} voxels")
    return EXIT_OK


def cmd_navigate(args) -> int:
    config = load_config(args.config)
    scene = _load_scene(args.scene, config)
    interfaces = _interface_factory(args, config)(scene)
    memories = load_memories(args.mem, config)
    task = parse_goal(args.goal, scene)

    targets = _targets_for(task, scene)
    if args.start:
        start = _parse_start(args.start)
    else:
        start = scene.sample_start(np.random.default_rng(args.seed), avoid=targets,
                                   min_distance=config.success_distance + 1.0 if targets else 0.0)

    agent = Agent(config, interfaces, memories)
    target_ids = [t.instance_id for t in targets]
    result = run_episode(scene, agent, task, start, config, target_ids=target_ids, seed=args.seed,
                         trace_path=args.trace)
    print(json.dumps({k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                      for k, v in asdict(result).items()}, indent=2))
    return EXIT_OK if result.success else EXIT_TASK_FAILURE


def cmd_bench(args) -> int:
    suite: SuiteConfig = load_suite(args.suite)
    config = load_config(args.config, **suite.config_overrides)
    report = run_benchmark(
        suite,
        config,
        out_dir=args.out,
        interfaces_factory=_interface_factory(args, config),
        mem_root=args.mem_root,
        baseline=True if args.baseline else None,
        workers=args.workers,
    )
    print(f"Suite {report.suite}: {len(report.rows)} episodes in {report.wall_clock_s:.1f}s")
    for s in report.summaries:
        line = (f"  {s.agent:<8} {s.task:<15} SR {s.sr:.3f} (solvable {s.sr_solvable:.3f})  "
                f"SPL {s.spl_mean:.3f} +/- {s.spl_std:.3f}")
        if s.llm_match is not None:
            line += f"  LLM-Match {s.llm_match:.1f}%"
        print(line)
    if args.out:
        print(f"Report written to {args.out}")
    crashed = [r for r in report.rows if r.error]
    if crashed:
        print(f"{len(crashed)} episodes crashed; see episodes.csv", file=sys.stderr)
        return EXIT_TASK_FAILURE
    return EXIT_OK


def cmd_inspect(args) -> int:
    memories = load_memories(args.memdir)
    print(json.dumps(memories.manifest, indent=2))
    with open(os.path.join(args.memdir, LANDMARKS_FILE), "r") as f:
        print(json.dumps(json.load(f), indent=2))
    grid = memories.grid
    rows, cols = grid.shape
    print(f"Occupancy grid: {rows}x{cols} cells at {grid.resolution} m, "
          f"{grid.count(FREE)} free, {grid.count(OCCUPIED)} occupied, {grid.count(UNKNOWN)} unknown")
    print(f"Voxel occupancy: {os.path.join(args.memdir, VOXELS_FILE)} "
          f"({memories.cmap.voxel_count} voxels, {len(memories.cmap)} features)")
    return EXIT_OK


def cmd_serve_stub(args) -> int:
    serve(load_script(args.script), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="AgentConfig JSON file")
    common.add_argument("--seed", type=int, default=0, help="Seed for start poses and mock interfaces")
    common.add_argument("--log-level", default="WARNING", help="Logging level (default WARNING)")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--mock", dest="remote", action="store_false", help="Simulator-backed mock interfaces (default)")
    mode.add_argument("--remote", dest="remote", action="store_true", help="OpenAI-compatible remote interfaces")
    common.set_defaults(remote=False)

    parser = argparse.ArgumentParser(prog="spatialnav", description="Spatial memory navigation agent")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explore", parents=[common], help="Explore a scene and save its memories")
    p.add_argument("scene", help="Scene JSON file or integer seed")
    p.add_argument("--out", required=True, help="Memory directory to write")
    p.add_argument("--budget", type=int, default=None, help="Frontier visit budget (default: half the free cells mapped so far)")
    p.add_argument("--unbounded", action="store_true", help="Explore until no frontier is left")
    p.add_argument("--start", help="Start pose as x,y,heading_index")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("navigate", parents=[common], help="Run one task with saved memories")
    p.add_argument("scene", help="Scene JSON file or integer seed")
    p.add_argument("--mem", required=True, help="Memory directory written by explore")
    p.add_argument("--goal", required=True,
                   help="category:<name>, text:<description>, image:<instance id>, instruction:<text> or eqa:<question>")
    p.add_argument("--start", help="Start pose as x,y,heading_index")
    p.add_argument("--trace", help="Write the per-step trace to this JSONL file")
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("bench", parents=[common], help="Run a benchmark suite")
    p.add_argument("suite", help="Suite JSON file")
    p.add_argument("--out", help="Report directory")
    p.add_argument("--workers", type=int, default=None, help="Parallel episodes (default from the suite)")
    p.add_argument("--baseline", action="store_true", help="Also run the memoryless frontier-search baseline")
    p.add_argument("--mem-root", help="Reuse (or save) per-scene memories under this directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", parents=[common], help="Dump a memory directory")
    p.add_argument("memdir")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("serve-stub", parents=[common], help="Serve a scripted OpenAI-compatible endpoint")
    p.add_argument("--script", required=True, help="Stub script JSON")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve_stub)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, PersistenceError, ContractViolation) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
