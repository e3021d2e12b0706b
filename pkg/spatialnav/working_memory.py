"""
Task-triggered retrieval over both memories and composite candidate ranking.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cognitive_map import CognitiveMap, VoxelMatch, cluster_matches
from .config import AgentConfig
from .errors import ContractViolation, RetrievalUnavailableError
from .geometry import AgentPose, patch_center
from .landmark_memory import LandmarkStore

logger = logging.getLogger(__name__)

CATEGORY = "category"
TEXT_INSTANCE = "text_instance"
IMAGE_INSTANCE = "image_instance"
WAYPOINT = "waypoint"
MODALITIES = (CATEGORY, TEXT_INSTANCE, IMAGE_INSTANCE, WAYPOINT)

SOURCE_LANDMARK = "landmark"
SOURCE_COGNITIVE = "cognitive_map"
_SOURCE_ORDER = {SOURCE_LANDMARK: 0, SOURCE_COGNITIVE: 1}


@dataclass(frozen=True)
class GoalSpec:
    modality: str
    text: Optional[str] = None
    image: Optional[object] = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ContractViolation(f"Unknown goal modality: {self.modality!r}")
        if self.modality == IMAGE_INSTANCE:
            if self.image is None:
                raise ContractViolation("Image goals need an image")
        elif not (self.text and self.text.strip()):
            raise ContractViolation(f"{self.modality} goals need text")

    def describe(self) -> str:
        if self.modality == IMAGE_INSTANCE:
            instance_id = getattr(self.image, "instance_id", None)
            return f"image:{instance_id}" if instance_id is not None else "image"
        return f"{self.modality}:{self.text}"


@dataclass(frozen=True)
class CandidateGoal:
    position: Tuple[float, float, float]
    p: float
    source: str
    distance: float = 0.0
    priority: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ContractViolation(f"Existence probability must lie in [0, 1], got {self.p}")
        if self.source not in _SOURCE_ORDER:
            raise ContractViolation(f"Unknown candidate source: {self.source!r}")

    def planar_distance(self, x: float, y: float) -> float:
        return math.hypot(self.position[0] - x, self.position[1] - y)


def retrieve_landmark_candidates(goal: GoalSpec, store: LandmarkStore, reasoner, k: int = 3) -> List[CandidateGoal]:
    """
    Ask the reasoner which stored landmarks satisfy the goal text.

    Transport failures surface as RetrievalUnavailableError so the caller can
    fall back to the cognitive map.
    """
    if not goal.text:
        raise ContractViolation("Landmark retrieval needs goal text")
    try:
        picks = reasoner.retrieve_landmarks(goal.text, store, k)
    except RetrievalUnavailableError:
        raise
    except Exception as e:
        raise RetrievalUnavailableError(f"Reasoner failed: {e}") from e
    candidates = []
    for position, p in picks[:k]:
        candidates.append(CandidateGoal(
            position=tuple(float(c) for c in position),
            p=float(min(1.0, max(0.0, p))),
            source=SOURCE_LANDMARK,
        ))
    logger.debug("Landmark branch returned %d candidates for %s", len(candidates), goal.describe())
    return candidates


def pool_patch_features(patches: Sequence[Tuple[np.ndarray, Tuple[float, float]]],
                        center: Tuple[float, float], alpha: float = 0.01) -> np.ndarray:
    """Mean of patch features weighted by exp(-alpha * pixel distance to the image centre)."""
    if not patches:
        raise ContractViolation("Cannot pool an empty patch list")
    features = np.stack([np.asarray(f, dtype=np.float64) for f, _ in patches])
    coords = np.array([xy for _, xy in patches], dtype=np.float64)
    dist = np.linalg.norm(coords - np.asarray(center, dtype=np.float64), axis=1)
    weights = np.exp(-alpha * dist)
    return (features * weights[:, None]).sum(axis=0) / weights.sum()


def pool_grid(patch_grid: np.ndarray, stride: int, alpha: float = 0.01) -> np.ndarray:
    """Centre-weighted pooling of a whole (rows, cols, dim) patch grid."""
    rows, cols = patch_grid.shape[:2]
    patches = [(patch_grid[i, j], patch_center(i, j, stride)) for i in range(rows) for j in range(cols)]
    return pool_patch_features(patches, (cols * stride / 2.0, rows * stride / 2.0), alpha)


def _union_matches(match_sets: Sequence[List[VoxelMatch]]) -> List[VoxelMatch]:
    best: Dict[Tuple[int, int, int], float] = {}
    for matches in match_sets:
        for m in matches:
            key = tuple(m.voxel)
            if key not in best or m.similarity > best[key]:
                best[key] = m.similarity
    return [VoxelMatch(voxel=m, similarity=s) for m, s in sorted(best.items())]


def retrieve_cognitive_candidates(goal: GoalSpec, cmap: CognitiveMap, enricher, imaginer, encoder,
                                  config: AgentConfig, q: Optional[int] = None) -> List[CandidateGoal]:
    """
    Imagine-then-localize: text goals are enriched and rendered to images,
    image goals are used as given; pooled features are matched against the
    map and the union of matches is clustered into candidates.
    """
    q = config.cognitive_q if q is None else q
    if cmap.is_empty():
        return []

    if goal.modality == IMAGE_INSTANCE:
        images = [goal.image]
    else:
        try:
            enriched = enricher.enrich(goal.text)
            images = imaginer.imagine(enriched, config.imagined_images)
        except RetrievalUnavailableError:
            raise
        except Exception as e:
            raise RetrievalUnavailableError(f"Imagination failed for {goal.describe()}: {e}") from e
        if not images:
            raise RetrievalUnavailableError(f"Imaginer returned no images for {goal.describe()}")

    if len(images) > 1:
        with ThreadPoolExecutor(max_workers=len(images), thread_name_prefix="encoder") as pool:
            grids = list(pool.map(encoder.encode, images))
    else:
        grids = [encoder.encode(images[0])]

    match_sets = []
    for grid in grids:
        query = pool_grid(np.asarray(grid), config.patch_stride, config.pooling_alpha)
        matches = cmap.query_topk(query, config.voxel_topk)
        match_sets.append([m for m in matches if m.similarity >= config.match_floor])

    matches = _union_matches(match_sets)
    clusters = cluster_matches(matches, config.dbscan_eps, config.dbscan_min_pts, cmap.grid)
    candidates = [
        CandidateGoal(position=c.position, p=float(min(1.0, max(0.0, c.score))), source=SOURCE_COGNITIVE)
        for c in clusters[:q]
    ]
    logger.debug("Cognitive branch: %d matches, %d clusters, %d candidates for %s",
                 len(matches), len(clusters), len(candidates), goal.describe())
    return candidates


def merge_candidates(cands: Sequence[CandidateGoal], radius: float = 0.5) -> List[CandidateGoal]:
    """
    Drop candidates within radius (horizontal) of a kept, higher-p candidate.

    Candidates are considered in p-descending order, so each kept entry
    already carries the max p of whatever it absorbs; kept entries retain
    their input order.
    """
    order = sorted(range(len(cands)), key=lambda i: -cands[i].p)
    kept: List[int] = []
    for i in order:
        c = cands[i]
        if any(c.planar_distance(*cands[j].position[:2]) <= radius for j in kept):
            continue
        kept.append(i)
    return [cands[i] for i in sorted(kept)]


def rank_candidates(cands: Sequence[CandidateGoal], start: AgentPose, lam: float = 0.5) -> List[CandidateGoal]:
    """
    Order candidates by H = lam * p + (1 - lam) * (1 - d / d_max), d measured
    from the start pose. Ties go to the nearer candidate, then landmark before
    cognitive, then input order.
    """
    if not cands:
        raise ContractViolation("Nothing to rank")
    if not (0.0 <= lam <= 1.0):
        raise ContractViolation("lambda must lie in [0, 1]")
    dists = [c.planar_distance(start.x, start.y) for c in cands]
    d_max = max(dists)
    ranked = []
    for i, (c, d) in enumerate(zip(cands, dists)):
        closeness = 1.0 - d / d_max if d_max > 0 else 1.0
        h = lam * c.p + (1.0 - lam) * closeness
        ranked.append((-h, d, _SOURCE_ORDER[c.source], i, replace(c, distance=d, priority=h)))
    ranked.sort(key=lambda row: row[:4])
    return [row[4] for row in ranked]
