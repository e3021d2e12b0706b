"""
HTTP adapters for an OpenAI-compatible endpoint.

Every role renders its prompt template, posts a chat-completion request and
parses the role's reply format. Transport failures and unparseable replies
are retried with exponential backoff, then surfaced as
RetrievalUnavailableError (AdapterParseError for the latter).
"""

import base64
import io
import json
import logging
import threading
import time
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import requests
from PIL import Image

from .config import AgentConfig, EndpointSettings
from .errors import AdapterParseError, RetrievalUnavailableError
from .gridworld import SimObservation, SyntheticImage
from .landmark_memory import LandmarkStore
from .perception import (
    InterfaceSet,
    MockDetector,
    VerificationResult,
    attach_confidence,
)
from . import prompts
from .telemetry import navigation_metrics

logger = logging.getLogger(__name__)

T = TypeVar("T")


def encode_png(rgb: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8)).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png(data: str) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(base64.b64decode(data))) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (TypeError, ValueError, OSError) as e:
        raise AdapterParseError(f"Image payload is not a decodable picture: {e}") from e


class RemoteClient:
    """
    Thin requests-based client with retries and a JSONL transcript.

    One session is shared by all roles; requests from different threads each
    carry their own timeout.
    """

    def __init__(self, settings: EndpointSettings, session: Optional[requests.Session] = None):
        settings.validate()
        self.settings = settings
        self.session = session or requests.Session()
        self._transcript_lock = threading.Lock()

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.settings.api_key:
            headers["Authorization"] = f"Bearer {self.settings.api_key}"
        return headers

    def _log_transcript(self, role: str, url: str, payload: Dict[str, Any], reply: Any, status: str) -> None:
        path = self.settings.transcript_path
        if not path:
            return
        record = {"ts": time.time(), "role": role, "url": url, "status": status,
                  "request": payload, "response": reply}
        with self._transcript_lock:
            with open(path, "a") as f:
                f.write(json.dumps(record, default=str) + "\n")

    def call(self, role: str, url: str, payload: Dict[str, Any], parse: Callable[[Dict[str, Any]], T]) -> T:
        """
        POST payload to url and parse the JSON body, retrying on transport
        errors, non-2xx statuses and parse failures.
        """
        last_error: Optional[Exception] = None
        for attempt in range(self.settings.max_retries):
            start = time.time()
            body: Any = None
            try:
                response = self.session.post(url, json=payload, headers=self._headers(),
                                             timeout=self.settings.timeout_s)
                response.raise_for_status()
                body = response.json()
                result = parse(body)
                navigation_metrics.record_adapter_request(role, "success", time.time() - start)
                self._log_transcript(role, url, payload, body, "success")
                return result
            except AdapterParseError as e:
                last_error = e
                status = "parse_error"
            except (requests.RequestException, ValueError) as e:
                last_error = e
                status = "transport_error"
            navigation_metrics.record_adapter_request(role, status, time.time() - start)
            self._log_transcript(role, url, payload, body, status)
            logger.warning("%s request failed (attempt %d/%d): %s", role, attempt + 1,
                           self.settings.max_retries, last_error)
            if attempt + 1 < self.settings.max_retries:
                time.sleep(self.settings.backoff_s * (2 ** attempt))

        navigation_metrics.record_error(type(last_error).__name__, role)
        if isinstance(last_error, AdapterParseError):
            raise last_error
        raise RetrievalUnavailableError(f"{role} unavailable after {self.settings.max_retries} attempts: {last_error}")

    def chat(self, role: str, prompt: str, parse: Callable[[str], T], images: Sequence[np.ndarray] = ()) -> T:
        content: Any = prompt
        if images:
            content = [{"type": "text", "text": prompt}] + [
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encode_png(rgb)}"}}
                for rgb in images
            ]
        payload = {
            "model": self.settings.chat_model,
            "messages": [{"role": "user", "content": content}],
            "temperature": 0,
        }

        def parse_body(body: Dict[str, Any]) -> T:
            try:
                text = body["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as e:
                raise AdapterParseError(f"Malformed chat-completion body: {e}") from e
            return parse(text or "")

        return self.call(role, f"{self.settings.base_url}/chat/completions", payload, parse_body)


class RemoteReasoner:
    def __init__(self, client: RemoteClient):
        self.client = client

    def retrieve_landmarks(self, goal_text: str, store: LandmarkStore, k: int = 3) -> List[Tuple[Tuple[float, float, float], float]]:
        prompt = prompts.render(
            prompts.LANDMARK_RETRIEVAL,
            max_candidates=k,
            goal=goal_text,
            memory=prompts.format_landmark_memory(store.landmarks),
        )
        points = self.client.chat(prompts.LANDMARK_RETRIEVAL, prompt, prompts.parse_nav_locations)
        return attach_confidence(points[:k], store)

    def decompose(self, instruction: str) -> List[str]:
        prompt = prompts.render(prompts.INSTRUCTION_DECOMPOSITION, instruction=instruction)
        return self.client.chat(prompts.INSTRUCTION_DECOMPOSITION, prompt, prompts.parse_waypoints)

    def eqa_target(self, question: str, store: LandmarkStore) -> Optional[str]:
        prompt = prompts.render(
            prompts.EQA_WAYPOINT,
            question=question,
            memory=prompts.format_landmark_memory(store.landmarks),
        )
        return self.client.chat(prompts.EQA_WAYPOINT, prompt, prompts.parse_eqa_target)


class RemoteEnricher:
    def __init__(self, client: RemoteClient):
        self.client = client

    def enrich(self, text: str, observations: Sequence[SimObservation] = ()) -> str:
        notes = "; ".join(f"view at step {obs.step}" for obs in observations) or "none"
        prompt = prompts.render(prompts.ENHANCE_DESCRIPTION, goal=text, observations=notes)
        return self.client.chat(prompts.ENHANCE_DESCRIPTION, prompt, prompts.parse_enhancement,
                                images=[obs.rgb for obs in observations])


class RemoteVerifier:
    def __init__(self, client: RemoteClient):
        self.client = client

    def verify(self, observation: SimObservation, goal) -> VerificationResult:
        image = getattr(goal, "image", None)
        text = goal.text or "the object shown in the second picture"
        prompt = prompts.render(prompts.GOAL_VERIFICATION, goal=text,
                                observation="the first attached picture")
        images = [observation.rgb] + ([image.rgb] if image is not None else [])
        success, need_forward, analysis = self.client.chat(
            prompts.GOAL_VERIFICATION, prompt, prompts.parse_verification, images=images)
        return VerificationResult(success, need_forward, analysis)


class RemoteAnswerer:
    def __init__(self, client: RemoteClient):
        self.client = client

    def answer(self, question: str, observation: SimObservation) -> str:
        prompt = prompts.render(prompts.ANSWER_QUESTION, question=question,
                                observation="the attached picture")
        return self.client.chat(prompts.ANSWER_QUESTION, prompt, lambda text: text.strip(),
                                images=[observation.rgb])


class RemoteScorer:
    def __init__(self, client: RemoteClient):
        self.client = client

    def score(self, question: str, answer: str, reference: str) -> int:
        prompt = prompts.render(prompts.ANSWER_SCORING, question=question,
                                reference=reference, answer=answer)
        return self.client.chat(prompts.ANSWER_SCORING, prompt, prompts.parse_score)


class RemoteImaginer:
    """Text-to-image through the images/generations route (base64 PNG replies)."""

    def __init__(self, client: RemoteClient):
        self.client = client

    def imagine(self, text: str, count: int = 3) -> List[SyntheticImage]:
        payload = {
            "model": self.client.settings.image_model,
            "prompt": text,
            "n": count,
            "response_format": "b64_json",
        }

        def parse(body: Dict[str, Any]) -> List[SyntheticImage]:
            try:
                items = body["data"]
            except (KeyError, TypeError) as e:
                raise AdapterParseError(f"Image reply lacks 'data': {e}") from e
            if not isinstance(items, list) or not items:
                raise AdapterParseError("Image reply holds no images")
            images = []
            for i, item in enumerate(items):
                try:
                    b64 = item["b64_json"]
                except (KeyError, TypeError) as e:
                    raise AdapterParseError(f"Image {i} lacks 'b64_json': {e}") from e
                images.append(SyntheticImage(rgb=decode_png(b64), variant=i))
            return images

        url = f"{self.client.settings.base_url}/images/generations"
        return self.client.call("imagine", url, payload, parse)


class RemoteEncoder:
    """Patch features from a remote encoder: {"image": <b64 png>} -> {"features": [[[...]]]}."""

    def __init__(self, client: RemoteClient, config: AgentConfig):
        self.client = client
        self.rows = config.image_rows // config.patch_stride
        self.cols = config.image_columns // config.patch_stride
        self.dim = config.feature_dim

    def encode(self, image) -> np.ndarray:
        payload = {"image": encode_png(image.rgb)}

        def parse(body: Dict[str, Any]) -> np.ndarray:
            try:
                grid = np.asarray(body["features"], dtype=np.float32)
            except (KeyError, TypeError, ValueError) as e:
                raise AdapterParseError(f"Encoder reply lacks a numeric 'features' grid: {e}") from e
            if grid.shape != (self.rows, self.cols, self.dim):
                raise AdapterParseError(
                    f"Encoder grid shape {grid.shape} != expected {(self.rows, self.cols, self.dim)}")
            return grid

        return self.client.call("encode", self.client.settings.encoder_url, payload, parse)


def build_remote_interfaces(settings: EndpointSettings, config: AgentConfig, scene=None,
                            seed: int = 0) -> InterfaceSet:
    """
    Remote roles for every model-backed interface. Detection stays on the
    simulator's ground truth since the endpoint exposes no detector route.
    """
    client = RemoteClient(settings)
    interfaces = InterfaceSet(
        detector=MockDetector(scene, config, seed) if scene is not None else None,
        encoder=RemoteEncoder(client, config),
        enricher=RemoteEnricher(client),
        imaginer=RemoteImaginer(client),
        verifier=RemoteVerifier(client),
        scorer=RemoteScorer(client),
        reasoner=RemoteReasoner(client),
        answerer=RemoteAnswerer(client),
    )
    interfaces.validate()
    return interfaces

