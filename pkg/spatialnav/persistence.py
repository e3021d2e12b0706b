"""
Memory directories: everything one exploration produced, on disk.

    landmarks.json   landmark store
    cogmap.bscm      cognitive map (binary)
    occupancy.pgm    occupancy grid, with occupancy.json sidecar
    voxels.csv       per-voxel occupancy debug dump (vx, vy, vz, count, max_tick)
    manifest.json    config hash, scene seed and counts
"""

import json
import logging
import os
import time
from dataclasses import asdict
from typing import Any, Dict, Optional

from .agent import ExplorationStats, Memories
from .cognitive_map import CognitiveMap
from .config import AgentConfig, config_hash
from .errors import PersistenceError
from .landmark_memory import LandmarkStore
from .planner import OccupancyGrid

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LANDMARKS_FILE = "landmarks.json"
COGMAP_FILE = "cogmap.bscm"
OCCUPANCY_FILE = "occupancy.pgm"
VOXELS_FILE = "voxels.csv"
MANIFEST_FILE = "manifest.json"


def save_memories(memories: Memories, directory: str, config: Optional[AgentConfig] = None,
                  scene_seed: Optional[int] = None, stats: Optional[ExplorationStats] = None) -> Dict[str, Any]:
    """Write all memory artifacts into directory (created if needed); returns the manifest."""
    os.makedirs(directory, exist_ok=True)
    memories.store.save_json(os.path.join(directory, LANDMARKS_FILE))
    with open(os.path.join(directory, COGMAP_FILE), "wb") as f:
        memories.cmap.write_bscm(f)
    memories.grid.to_pgm(os.path.join(directory, OCCUPANCY_FILE))
    memories.cmap.export_csv(os.path.join(directory, VOXELS_FILE))

    manifest = {
        "version": MANIFEST_VERSION,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "scene_seed": scene_seed,
        "config_hash": config_hash(config) if config is not None else None,
        "landmarks": len(memories.store),
        "features": len(memories.cmap),
        "voxels": memories.cmap.voxel_count,
        "exploration": asdict(stats) if stats is not None else None,
        "files": [LANDMARKS_FILE, COGMAP_FILE, OCCUPANCY_FILE, VOXELS_FILE],
    }
    with open(os.path.join(directory, MANIFEST_FILE), "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info("Saved memories to %s: %d landmarks, %d features", directory,
                manifest["landmarks"], manifest["features"])
    return manifest


def read_manifest(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, MANIFEST_FILE)
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise PersistenceError(f"Could not read manifest {path}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise PersistenceError(f"Unsupported memory manifest version: {manifest.get('version')}")
    return manifest


def load_memories(directory: str, config: Optional[AgentConfig] = None) -> Memories:
    """
    Load a memory directory written by save_memories.

    With a config, a manifest written under a different config hash is
    reported but still loaded.
    """
    manifest = read_manifest(directory)
    if config is not None and manifest.get("config_hash") not in (None, config_hash(config)):
        logger.warning("Memories in %s were built with a different config", directory)

    store = LandmarkStore.load_json(os.path.join(directory, LANDMARKS_FILE))
    try:
        with open(os.path.join(directory, COGMAP_FILE), "rb") as f:
            cmap = CognitiveMap.read_bscm(f)
    except OSError as e:
        raise PersistenceError(f"Could not read cognitive map in {directory}: {e}") from e
    grid = OccupancyGrid.from_pgm(os.path.join(directory, OCCUPANCY_FILE))
    return Memories(store=store, cmap=cmap, grid=grid, manifest=manifest)
