"""
Landmark memory: salient object instances stored as
(category, position, confidence, description) with spatial-overlap fusion.
"""

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .errors import ContractViolation, PersistenceError
from .telemetry import navigation_metrics

logger = logging.getLogger(__name__)

LANDMARK_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Landmark:
    category: str
    position: Tuple[float, float, float]
    confidence: float
    description: str = ""

    def __post_init__(self):
        if not self.category or not self.category.strip():
            raise ContractViolation("Landmark category must be non-empty")
        if not (0.0 <= self.confidence <= 1.0):
            raise ContractViolation(f"Landmark confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))

    @property
    def key(self) -> str:
        return self.category.strip().casefold()

    def distance_to(self, other: "Landmark") -> float:
        return math.dist(self.position, other.position)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "category": self.category,
            "position": list(self.position),
            "confidence": self.confidence,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Landmark":
        return cls(
            category=data["category"],
            position=tuple(data["position"]),
            confidence=float(data["confidence"]),
            description=data.get("description", ""),
        )


def fuse(new: Landmark, overlaps: List[Landmark]) -> Landmark:
    """
    Merge a new detection with the stored landmarks it overlaps.

    Position is the confidence-weighted mean, confidence the arithmetic mean,
    description comes from the most confident member (newest wins ties).
    """
    if not overlaps:
        raise ContractViolation("fuse needs at least one overlapping landmark")
    for lm in overlaps:
        if lm.key != new.key:
            raise ContractViolation(
                f"Cannot fuse category '{lm.category}' into '{new.category}'"
            )

    members = list(overlaps) + [new]
    confidences = [lm.confidence for lm in members]
    total = sum(confidences)
    if total > 0:
        weights = [c / total for c in confidences]
    else:
        weights = [1.0 / len(members)] * len(members)
    position = tuple(
        sum(w * lm.position[axis] for w, lm in zip(weights, members)) for axis in range(3)
    )

    best = members[0]
    for lm in members[1:]:
        if lm.confidence >= best.confidence:
            best = lm

    return Landmark(
        category=new.category,
        position=position,
        confidence=sum(confidences) / len(confidences),
        description=best.description,
    )


@dataclass
class InsertStats:
    inserted: int = 0
    fused: int = 0
    rejected: int = 0

    def as_dict(self) -> Dict[str, int]:
        return {"inserted": self.inserted, "fused": self.fused, "rejected": self.rejected}


class LandmarkStore:
    """Ordered landmark list; no two same-category entries within overlap_distance."""

    def __init__(self, overlap_distance: float = 1.0, confidence_floor: float = 0.55):
        if overlap_distance <= 0:
            raise ContractViolation("overlap_distance must be positive")
        self.overlap_distance = overlap_distance
        self.confidence_floor = confidence_floor
        self._landmarks: List[Landmark] = []
        self.stats = InsertStats()
        self._lock = threading.RLock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._landmarks)

    @property
    def landmarks(self) -> List[Landmark]:
        with self._lock:
            return list(self._landmarks)

    def _overlap_set(self, lm: Landmark) -> List[Landmark]:
        return [
            other for other in self._landmarks
            if other.key == lm.key and lm.distance_to(other) <= self.overlap_distance
        ]

    def insert(self, new: Landmark) -> str:
        """Insert a detection; returns 'inserted', 'fused' or 'rejected'."""
        if new.confidence < self.confidence_floor:
            with self._lock:
                self.stats.rejected += 1
            navigation_metrics.record_memory_update("landmark", "rejected")
            return "rejected"

        with self._lock:
            current = new
            fused = False
            overlaps = self._overlap_set(current)
            # A fused centroid can drift into range of further landmarks; repeat until clear.
            while overlaps:
                ids = {id(o) for o in overlaps}
                self._landmarks = [lm for lm in self._landmarks if id(lm) not in ids]
                current = fuse(current, overlaps)
                fused = True
                overlaps = self._overlap_set(current)
            self._landmarks.append(current)
            if fused:
                self.stats.fused += 1
            else:
                self.stats.inserted += 1

        result = "fused" if fused else "inserted"
        navigation_metrics.record_memory_update("landmark", result)
        return result

    def query_category(self, category: str) -> List[Landmark]:
        """Exact case-insensitive category match, confidence descending, stable."""
        key = category.strip().casefold()
        with self._lock:
            matches = [lm for lm in self._landmarks if lm.key == key]
        return sorted(matches, key=lambda lm: -lm.confidence)

    def categories(self) -> List[str]:
        with self._lock:
            seen: Dict[str, str] = {}
            for lm in self._landmarks:
                seen.setdefault(lm.key, lm.category)
            return list(seen.values())

    def nearest(self, position, max_distance: Optional[float] = None) -> Optional[Landmark]:
        """Closest stored landmark to a point, optionally within max_distance."""
        with self._lock:
            best, best_d = None, math.inf
            for lm in self._landmarks:
                d = math.dist(lm.position, position)
                if d < best_d:
                    best, best_d = lm, d
        if best is None or (max_distance is not None and best_d > max_distance):
            return None
        return best

    def to_dict(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "version": LANDMARK_FORMAT_VERSION,
                "overlap_distance": self.overlap_distance,
                "confidence_floor": self.confidence_floor,
                "landmarks": [lm.to_dict() for lm in self._landmarks],
            }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LandmarkStore":
        if data.get("version") != LANDMARK_FORMAT_VERSION:
            raise PersistenceError(f"Unsupported landmark store version: {data.get('version')}")
        store = cls(
            overlap_distance=float(data["overlap_distance"]),
            confidence_floor=float(data.get("confidence_floor", 0.55)),
        )
        store._landmarks = [Landmark.from_dict(item) for item in data["landmarks"]]
        return store

    def save_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load_json(cls, path: str) -> "LandmarkStore":
        try:
            with open(path, "r") as f:
                data = json.load(f)
            return cls.from_dict(data)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ContractViolation) as e:
            raise PersistenceError(f"Could not load landmark store {path}: {e}") from e
