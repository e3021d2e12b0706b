"""
Interfaces for the perception and reasoning roles, plus deterministic mocks
backed by simulator ground truth.

The mocks are pure functions of (scene, pose, seed) and need no network.
"""

import logging
import math
import re
import zlib
from dataclasses import dataclass, fields
from typing import List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from .config import AgentConfig
from .errors import AdapterParseError, ConfigError, ContractViolation, RetrievalUnavailableError
from .gridworld import Scene, SimObservation, SyntheticImage, unit_feature
from .landmark_memory import LandmarkStore
from .prompts import parse_eqa_target, parse_nav_locations, parse_waypoints

logger = logging.getLogger(__name__)

Point3 = Tuple[float, float, float]


@dataclass(frozen=True)
class Detection:
    category: str
    u: float
    v: float
    depth: float
    confidence: float
    description: str = ""
    instance_id: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ContractViolation(f"Detection confidence must lie in [0, 1], got {self.confidence}")


@dataclass(frozen=True)
class VerificationResult:
    success: bool
    need_forward: bool
    analysis: str = ""


@runtime_checkable
class ObjectDetector(Protocol):
    def detect(self, observation: SimObservation) -> List[Detection]: ...


@runtime_checkable
class PatchEncoder(Protocol):
    def encode(self, image) -> np.ndarray:
        """Patch-feature grid of shape (rows, cols, dim)."""
        ...


@runtime_checkable
class DescriptionEnricher(Protocol):
    def enrich(self, text: str, observations: Sequence[SimObservation] = ()) -> str: ...


@runtime_checkable
class ImageImaginer(Protocol):
    def imagine(self, text: str, count: int = 3) -> List[SyntheticImage]: ...


@runtime_checkable
class GoalVerifier(Protocol):
    def verify(self, observation: SimObservation, goal) -> VerificationResult: ...


@runtime_checkable
class AnswerScorer(Protocol):
    def score(self, question: str, answer: str, reference: str) -> int: ...


@runtime_checkable
class QuestionAnswerer(Protocol):
    def answer(self, question: str, observation: SimObservation) -> str: ...


@runtime_checkable
class Reasoner(Protocol):
    def retrieve_landmarks(self, goal_text: str, store: LandmarkStore, k: int) -> List[Tuple[Point3, float]]: ...

    def decompose(self, instruction: str) -> List[str]: ...

    def eqa_target(self, question: str, store: LandmarkStore) -> Optional[str]: ...


@dataclass
class InterfaceSet:
    detector: ObjectDetector
    encoder: PatchEncoder
    enricher: DescriptionEnricher
    imaginer: ImageImaginer
    verifier: GoalVerifier
    scorer: AnswerScorer
    reasoner: Reasoner
    answerer: QuestionAnswerer

    def validate(self) -> None:
        missing = [f.name for f in fields(self) if getattr(self, f.name) is None]
        if missing:
            raise ConfigError(f"Interface set is missing: {', '.join(missing)}")


def _hash_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode("utf-8"))


def _pose_key(observation: SimObservation) -> Tuple[int, int, int]:
    pose = observation.pose
    return (int(round(pose.x * 1000)), int(round(pose.y * 1000)), int(round(math.degrees(pose.yaw))))


def _bounded_noise(rng: np.random.Generator, shape: Tuple[int, ...], max_norm: float) -> np.ndarray:
    """Random vectors along the last axis with norm strictly below max_norm."""
    noise = rng.standard_normal(shape)
    norms = np.linalg.norm(noise, axis=-1, keepdims=True)
    radii = rng.uniform(0.0, max_norm, size=shape[:-1] + (1,))
    return noise / norms * radii


def longest_category_in(text: str, categories: Sequence[str]) -> Optional[str]:
    key = (text or "").casefold()
    matches = sorted((c for c in categories if c.casefold() in key), key=lambda c: (-len(c), c.casefold()))
    return matches[0] if matches else None


def attach_confidence(points: Sequence[Point3], store: LandmarkStore) -> List[Tuple[Point3, float]]:
    """
    Pair reasoner-chosen coordinates with an existence probability: the
    confidence of the nearest stored landmark within overlap distance, else the
    confidence floor.
    """
    out = []
    for point in points:
        nearest = store.nearest(point, store.overlap_distance)
        p = nearest.confidence if nearest is not None else store.confidence_floor
        out.append((tuple(float(c) for c in point), p))
    return out


class MockDetector:
    """Ground-truth detections with distance-dependent confidence."""

    def __init__(self, scene: Scene, config: AgentConfig, seed: int = 0):
        self.scene = scene
        self.config = config
        self.seed = seed

    def detect(self, observation: SimObservation) -> List[Detection]:
        detections = []
        key = _pose_key(observation)
        for vis in observation.visible:
            inst = self.scene.instance(vis.instance_id)
            rng = np.random.default_rng(_hash_seed(self.seed, vis.instance_id, *key))
            base = 0.6 + 0.35 * (1.0 - vis.depth / self.config.max_range)
            confidence = float(np.clip(base + rng.uniform(-0.05, 0.05), 0.0, 1.0))
            detections.append(Detection(
                category=inst.category,
                u=vis.u,
                v=vis.v,
                depth=vis.depth,
                confidence=confidence,
                description=inst.description,
                instance_id=inst.instance_id,
            ))
        return detections


class MockEncoder:
    """
    Identity feature of whatever each patch centre sees, plus bounded noise.

    Background patches (walls, floor, empty space) share one feature.
    """

    def __init__(self, scene: Scene, config: AgentConfig, seed: int = 0, noise: float = 0.05):
        self.scene = scene
        self.config = config
        self.seed = seed
        self.noise = noise
        self.rows = config.image_rows // config.patch_stride
        self.cols = config.image_columns // config.patch_stride

    def encode(self, image) -> np.ndarray:
        dim = self.scene.feature_dim
        if isinstance(image, SimObservation):
            s = self.config.patch_stride
            grid = np.empty((self.rows, self.cols, dim), dtype=np.float64)
            for i in range(self.rows):
                for j in range(self.cols):
                    label = int(image.labels[i * s + s // 2, j * s + s // 2])
                    grid[i, j] = self.scene.feature(label) if label >= 0 else self.scene.background_feature
            rng = np.random.default_rng(_hash_seed(self.seed, "view", *_pose_key(image)))
        elif isinstance(image, SyntheticImage) and image.token is not None:
            grid = np.broadcast_to(np.asarray(image.token, dtype=np.float64), (self.rows, self.cols, dim)).copy()
            token_key = zlib.crc32(np.asarray(image.token, dtype=np.float32).tobytes())
            rng = np.random.default_rng(_hash_seed(self.seed, "image", token_key, image.variant))
        else:
            raise RetrievalUnavailableError("Mock encoder needs a simulator view or a synthetic image")
        grid += _bounded_noise(rng, grid.shape, self.noise)
        return grid.astype(np.float32)


class MockEnricher:
    def enrich(self, text: str, observations: Sequence[SimObservation] = ()) -> str:
        return f"{text.strip()}, shown prominently in the centre of a tidy indoor room"


class MockImaginer:
    """
    Renders the identity feature of the instance(s) a text refers to.

    Text that matches nothing in the scene yields an image of a feature that
    matches nothing either.
    """

    def __init__(self, scene: Scene, seed: int = 0):
        self.scene = scene
        self.seed = seed

    def imagine(self, text: str, count: int = 3) -> List[SyntheticImage]:
        if not text or not text.strip():
            raise RetrievalUnavailableError("Nothing to imagine from an empty description")
        targets = sorted(self.scene.match_text(text), key=lambda inst: inst.instance_id)
        images = []
        for i in range(count):
            if targets:
                inst = targets[i % len(targets)]
                images.append(self.scene.goal_image(inst.instance_id, variant=i))
            else:
                token = unit_feature(_hash_seed(self.seed, text.casefold()), self.scene.feature_dim)
                rgb = np.full((48, 64, 3), 128, dtype=np.uint8)
                images.append(SyntheticImage(rgb=rgb, token=token, variant=i))
        return images


def instances_in_view(scene: Scene, config: AgentConfig, pose, instances: Sequence, max_distance: float) -> List[Tuple[float, object]]:
    """(distance, instance) pairs within max_distance, inside the horizontal FOV and in line of sight, nearest first."""
    half_fov = math.radians(config.fov_deg) / 2.0
    seen = []
    for inst in instances:
        dx, dy = inst.position[0] - pose.x, inst.position[1] - pose.y
        dist = math.hypot(dx, dy)
        if dist > max_distance:
            continue
        bearing = math.atan2(dy, dx) - pose.yaw
        if abs(math.atan2(math.sin(bearing), math.cos(bearing))) > half_fov:
            continue
        if not scene.line_of_sight(pose.x, pose.y, inst.instance_id, config.max_range):
            continue
        seen.append((dist, inst))
    seen.sort(key=lambda pair: (pair[0], pair[1].instance_id))
    return seen


class MockVerifier:
    """Oracle: success within 2 m and inside the field of view, forward step beyond 1 m."""

    def __init__(self, scene: Scene, config: AgentConfig, success_range: float = 2.0, close_range: float = 1.0):
        self.scene = scene
        self.config = config
        self.success_range = success_range
        self.close_range = close_range

    def verify(self, observation: SimObservation, goal) -> VerificationResult:
        seen = instances_in_view(self.scene, self.config, observation.pose,
                                 self.scene.resolve_targets(goal), self.success_range)
        if not seen:
            return VerificationResult(False, False, "target not in view within 2 m")
        dist, inst = seen[0]
        return VerificationResult(
            success=True,
            need_forward=dist > self.close_range,
            analysis=f"{inst.description} seen {dist:.2f} m ahead",
        )


class MockAnswerer:
    """Reads the asked-about attribute off the nearest in-view instance of the named category."""

    ATTRIBUTE_WORDS = {
        "colour": ("color", "colour"),
        "material": ("material", "made of"),
        "room": ("room", "where"),
    }

    def __init__(self, scene: Scene, config: AgentConfig, view_range: float = 2.0):
        self.scene = scene
        self.config = config
        self.view_range = view_range

    def answer(self, question: str, observation: SimObservation) -> str:
        category = longest_category_in(question, self.scene.categories())
        if category is None:
            return "unknown"
        key = question.casefold()
        attribute = next(
            (name for name, words in self.ATTRIBUTE_WORDS.items() if any(w in key for w in words)),
            "colour",
        )
        seen = instances_in_view(self.scene, self.config, observation.pose,
                                 self.scene.instances_of(category), self.view_range)
        if not seen:
            return "unknown"
        return seen[0][1].attributes.get(attribute, "unknown")


def normalize_answer(text: str) -> str:
    return re.sub(r"[^a-z0-9 ]", "", (text or "").casefold()).strip()


class ExactMatchScorer:
    """5 on normalised string equality, 1 otherwise."""

    def score(self, question: str, answer: str, reference: str) -> int:
        return 5 if normalize_answer(answer) == normalize_answer(reference) else 1


_SPLIT = re.compile(r"\bthen\b|[;,.]|\band\b", re.IGNORECASE)
_GO_TO = re.compile(
    r"(?:go|move|walk|head|navigate|proceed)\s+(?:to|towards|toward|over to)\s+(?:the\s+)?(.+)",
    re.IGNORECASE,
)


class FallbackReasoner:
    """
    Deterministic reasoner: exact category matching over the landmark store,
    phrase-based instruction splitting, and category lookup for questions.
    """

    def retrieve_landmarks(self, goal_text: str, store: LandmarkStore, k: int = 3) -> List[Tuple[Point3, float]]:
        categories = store.categories()
        key = (goal_text or "").strip().casefold()
        category = next((c for c in categories if c.casefold() == key), None)
        if category is None:
            category = longest_category_in(goal_text, categories)
        if category is None:
            return []
        return [(lm.position, lm.confidence) for lm in store.query_category(category)[:k]]

    def decompose(self, instruction: str) -> List[str]:
        waypoints = []
        for segment in _SPLIT.split(instruction or ""):
            match = _GO_TO.search(segment.strip())
            if match:
                target = match.group(1).strip().rstrip("!?")
                if target:
                    waypoints.append(target)
        if not waypoints:
            raise AdapterParseError(f"Could not split instruction into waypoints: {instruction!r}")
        return waypoints

    def eqa_target(self, question: str, store: LandmarkStore) -> Optional[str]:
        return longest_category_in(question, store.categories())


class ScriptedReasoner:
    """Replays canned replies through the same parsers the remote reasoner uses."""

    def __init__(self, landmark_replies: Sequence[str] = (), decompose_replies: Sequence[str] = (),
                 eqa_replies: Sequence[str] = ()):
        self.landmark_replies = list(landmark_replies)
        self.decompose_replies = list(decompose_replies)
        self.eqa_replies = list(eqa_replies)

    @staticmethod
    def _next(queue: List[str], role: str) -> str:
        if not queue:
            raise RetrievalUnavailableError(f"No scripted reply left for {role}")
        return queue.pop(0)

    def retrieve_landmarks(self, goal_text: str, store: LandmarkStore, k: int = 3) -> List[Tuple[Point3, float]]:
        points = parse_nav_locations(self._next(self.landmark_replies, "landmark retrieval"))
        return attach_confidence(points[:k], store)

    def decompose(self, instruction: str) -> List[str]:
        return parse_waypoints(self._next(self.decompose_replies, "instruction decomposition"))

    def eqa_target(self, question: str, store: LandmarkStore) -> Optional[str]:
        return parse_eqa_target(self._next(self.eqa_replies, "EQA waypoint"))


def build_mock_interfaces(scene: Scene, config: AgentConfig, seed: int = 0) -> InterfaceSet:
    interfaces = InterfaceSet(
        detector=MockDetector(scene, config, seed),
        encoder=MockEncoder(scene, config, seed),
        enricher=MockEnricher(),
        imaginer=MockImaginer(scene, seed),
        verifier=MockVerifier(scene, config),
        scorer=ExactMatchScorer(),
        reasoner=FallbackReasoner(),
        answerer=MockAnswerer(scene, config),
    )
    interfaces.validate()
    return interfaces
