"""
Scripted OpenAI-compatible endpoint for running the remote adapters offline.

A script is JSON:

    {
      "replies": {"landmark_retrieval": ["{Nav Loc 1: [1.0, 2.0, 0.5]}"], ...},
      "default_reply": "Success: no\\nNeed forward: no",
      "images": [["<b64 png>", ...], ...],
      "default_image": "<b64 png>",
      "features": [[[[0.1, ...]]], ...],
      "default_features": [[[0.1, ...]]]
    }

Chat replies come from the queue of the role named in the prompt header,
then the "chat" queue, then default_reply. An exhausted queue with no
default answers 503.
"""

import json
import logging
import threading
import time
from collections import deque
from contextlib import asynccontextmanager
from typing import Any, Deque, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.responses import Response
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .prompts import detect_role
from .telemetry import NavigationMetrics

logger = logging.getLogger(__name__)


class StubScript(BaseModel):
    model_config = ConfigDict(extra="forbid")

    replies: Dict[str, List[str]] = Field(default_factory=dict)
    default_reply: Optional[str] = None
    images: List[List[str]] = Field(default_factory=list)
    default_image: Optional[str] = None
    features: List[Any] = Field(default_factory=list)
    default_features: Optional[Any] = None


class ChatRequest(BaseModel):
    model_config = ConfigDict(extra="allow")

    model: str = ""
    messages: List[Dict[str, Any]]
    temperature: Optional[float] = None


class ImageRequest(BaseModel):
    model_config = ConfigDict(extra="allow")

    model: str = ""
    prompt: str
    n: int = Field(1, ge=1)
    response_format: str = "b64_json"


class FeatureRequest(BaseModel):
    image: str


def load_script(path: str) -> StubScript:
    try:
        with open(path, "r") as f:
            return StubScript(**json.load(f))
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise ConfigError(f"Could not read stub script {path}: {e}") from e
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _prompt_text(messages: List[Dict[str, Any]]) -> str:
    parts = []
    for message in messages:
        content = message.get("content", "")
        if isinstance(content, str):
            parts.append(content)
        elif isinstance(content, list):
            parts.extend(p.get("text", "") for p in content if isinstance(p, dict) and p.get("type") == "text")
    return "\n".join(parts)


class ScriptQueues:
    """Per-role reply queues shared by the request handlers."""

    def __init__(self, script: StubScript):
        self.script = script
        self._lock = threading.Lock()
        self._replies: Dict[str, Deque[str]] = {role: deque(items) for role, items in script.replies.items()}
        self._images: Deque[List[str]] = deque(script.images)
        self._features: Deque[Any] = deque(script.features)
        self.requests: List[Dict[str, Any]] = []

    def log(self, route: str, role: Optional[str]) -> None:
        with self._lock:
            self.requests.append({"ts": time.time(), "route": route, "role": role})

    def next_reply(self, role: Optional[str]) -> Optional[str]:
        with self._lock:
            for key in (role, "chat"):
                queue = self._replies.get(key) if key else None
                if queue:
                    return queue.popleft()
        return self.script.default_reply

    def next_images(self, count: int) -> Optional[List[str]]:
        with self._lock:
            if self._images:
                return self._images.popleft()
        if self.script.default_image is None:
            return None
        return [self.script.default_image] * count

    def next_features(self) -> Optional[Any]:
        with self._lock:
            if self._features:
                return self._features.popleft()
        return self.script.default_features

    def remaining(self) -> Dict[str, int]:
        with self._lock:
            counts = {role: len(queue) for role, queue in self._replies.items()}
            counts["images"] = len(self._images)
            counts["features"] = len(self._features)
            return counts


def create_stub_app(script: StubScript) -> FastAPI:
    queues = ScriptQueues(script)
    metrics = NavigationMetrics()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        logger.info("Stub endpoint ready with %d scripted roles", len(script.replies))
        yield
        logger.info("Stub endpoint served %d requests", len(queues.requests))

    app = FastAPI(title="spatialnav stub endpoint", lifespan=lifespan)
    app.state.queues = queues
    app.state.metrics = metrics

    @app.get("/health")
    async def health():
        return {"status": "healthy", "served": len(queues.requests), "remaining": queues.remaining()}

    @app.get("/metrics/prometheus")
    async def prometheus_metrics():
        """Served and exhausted requests per role, for scraping."""
        return Response(content=metrics.get_metrics(), media_type=metrics.get_content_type())

    @app.post("/v1/chat/completions")
    async def chat_completions(request: ChatRequest):
        start = time.time()
        role = detect_role(_prompt_text(request.messages))
        queues.log("chat", role)
        reply = queues.next_reply(role)
        metrics.record_adapter_request(role or "chat", "exhausted" if reply is None else "served", time.time() - start)
        if reply is None:
            raise HTTPException(status_code=503, detail=f"No scripted reply left for role {role or 'chat'}")
        return {
            "id": f"stub-{len(queues.requests)}",
            "object": "chat.completion",
            "created": int(time.time()),
            "model": request.model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": reply},
                "finish_reason": "stop",
            }],
        }

    @app.post("/v1/images/generations")
    async def image_generations(request: ImageRequest):
        start = time.time()
        queues.log("images", None)
        images = queues.next_images(request.n)
        metrics.record_adapter_request("images", "exhausted" if images is None else "served", time.time() - start)
        if images is None:
            raise HTTPException(status_code=503, detail="No scripted images left")
        return {"created": int(time.time()), "data": [{"b64_json": b64} for b64 in images]}

    @app.post("/v1/patch-features")
    async def patch_features(request: FeatureRequest):
        start = time.time()
        queues.log("features", None)
        features = queues.next_features()
        metrics.record_adapter_request("features", "exhausted" if features is None else "served", time.time() - start)
        if features is None:
            raise HTTPException(status_code=503, detail="No scripted features left")
        return {"features": features}

    return app


class StubServer:
    """Runs a stub app with uvicorn on a background thread."""

    def __init__(self, script: StubScript, host: str = "127.0.0.1", port: int = 8765):
        self.app = create_stub_app(script)
        self.host = host
        self.port = port
        self.server = uvicorn.Server(uvicorn.Config(self.app, host=host, port=port, log_level="warning"))
        self.thread: Optional[threading.Thread] = None

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}/v1"

    def start(self, timeout: float = 10.0) -> "StubServer":
        self.thread = threading.Thread(target=self.server.run, name="stub-server", daemon=True)
        self.thread.start()
        deadline = time.time() + timeout
        while not self.server.started:
            if time.time() > deadline:
                raise RuntimeError(f"Stub server did not start on port {self.port}")
            time.sleep(0.05)
        return self

    def stop(self) -> None:
        self.server.should_exit = True
        if self.thread is not None:
            self.thread.join(timeout=5.0)

    def __enter__(self) -> "StubServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(script: StubScript, host: str = "127.0.0.1", port: int = 8765) -> None:
    print(f"Serving stub endpoint on http://{host}:{port}/v1")
    uvicorn.run(create_stub_app(script), host=host, port=port, log_level="info")
