import json
import socket
from types import SimpleNamespace

import numpy as np
import pytest
import requests

from spatialnav.config import EndpointSettings
from spatialnav.errors import AdapterParseError, ConfigError, RetrievalUnavailableError
from spatialnav.gridworld import GridWorldSim
from spatialnav.landmark_memory import Landmark, LandmarkStore
from spatialnav.remote import (
    RemoteClient,
    RemoteEncoder,
    RemoteImaginer,
    RemoteReasoner,
    RemoteScorer,
    RemoteVerifier,
    build_remote_interfaces,
    decode_png,
    encode_png,
)
from spatialnav.stub_server import StubScript, StubServer
from spatialnav.working_memory import CATEGORY, GoalSpec

pytestmark = pytest.mark.integration


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def settings_for(server, transcript=None, retries=2):
    return EndpointSettings(
        base_url=server.base_url,
        api_key="test-key",
        chat_model="stub-chat",
        image_model="stub-image",
        encoder_url=f"{server.base_url}/patch-features",
        timeout_s=5.0,
        max_retries=retries,
        backoff_s=0.0,
        transcript_path=transcript,
    )


@pytest.fixture
def stub(config):
    image = encode_png(np.full((48, 64, 3), 200, dtype=np.uint8))
    features = np.zeros((6, 8, config.feature_dim))
    features[..., 0] = 1.0
    script = StubScript(
        replies={
            "landmark_retrieval": ["{Nav Loc 1: [1.2, 0.0, 0.5]}, {Nav Loc 2: [7.0, 7.0, 0.5]}"],
            "goal_verification": ["The sofa is right ahead.\nSuccess: yes\nNeed forward: yes"],
            "answer_scoring": ["Reasoning: close enough.\nScore: 4", "gibberish", "still gibberish"],
            "instruction_decomposition": ["Move to the {sofa}\nMove to the {lamp}"],
        },
        default_image=image,
        default_features=features.tolist(),
    )
    with StubServer(script, port=free_port()) as server:
        yield server


@pytest.fixture
def store():
    s = LandmarkStore()
    s.insert(Landmark("sofa", (1.0, 0.0, 0.5), 0.9, "red sofa"))
    return s


def test_health(stub):
    body = requests.get(stub.base_url.replace("/v1", "/health"), timeout=5).json()
    assert body["status"] == "healthy"


def test_reasoner(stub, store):
    reasoner = RemoteReasoner(RemoteClient(settings_for(stub)))
    hits = reasoner.retrieve_landmarks("sofa", store, k=3)
    assert hits == [((1.2, 0.0, 0.5), 0.9), ((7.0, 7.0, 0.5), 0.55)]
    assert reasoner.decompose("Go to the sofa then the lamp") == ["sofa", "lamp"]


def test_verifier_sends_images(stub, room, config):
    obs = GridWorldSim(room, config, (0.875, 0.125, 0)).observe()
    result = RemoteVerifier(RemoteClient(settings_for(stub))).verify(obs, GoalSpec(CATEGORY, "sofa"))
    assert result.success and result.need_forward
    assert "sofa" in result.analysis


def test_scorer_then_parse_failure(stub):
    scorer = RemoteScorer(RemoteClient(settings_for(stub)))
    assert scorer.score("What color?", "red", "red") == 4
    with pytest.raises(AdapterParseError):
        scorer.score("What color?", "red", "red")


def test_exhausted_endpoint(stub, store):
    reasoner = RemoteReasoner(RemoteClient(settings_for(stub)))
    reasoner.retrieve_landmarks("sofa", store)
    with pytest.raises(RetrievalUnavailableError):
        reasoner.retrieve_landmarks("sofa", store)


def test_imaginer_and_encoder(stub, config):
    client = RemoteClient(settings_for(stub))
    images = RemoteImaginer(client).imagine("a red sofa", count=2)
    assert len(images) == 2
    assert images[0].rgb.shape == (48, 64, 3)
    grid = RemoteEncoder(client, config).encode(images[0])
    assert grid.shape == (6, 8, config.feature_dim)
    assert grid[..., 0].min() == 1.0


def test_transcript(stub, store, tmp_path):
    path = tmp_path / "transcript.jsonl"
    RemoteReasoner(RemoteClient(settings_for(stub, transcript=str(path)))).retrieve_landmarks("sofa", store)
    records = [json.loads(line) for line in path.read_text().splitlines()]
    assert records[0]["role"] == "landmark_retrieval"
    assert records[0]["status"] == "success"


def test_unreachable_endpoint():
    settings = EndpointSettings(
        base_url=f"http://127.0.0.1:{free_port()}/v1", api_key="", chat_model="m", image_model="m",
        encoder_url="", timeout_s=0.5, max_retries=2, backoff_s=0.0, transcript_path=None,
    )
    with pytest.raises(RetrievalUnavailableError):
        RemoteScorer(RemoteClient(settings)).score("q", "a", "b")


def test_build_remote_interfaces(stub, room, config):
    interfaces = build_remote_interfaces(settings_for(stub), config, room)
    interfaces.validate()


@pytest.mark.unit
def test_settings_require_base_url(monkeypatch):
    monkeypatch.delenv("SPATIALNAV_API_BASE", raising=False)
    monkeypatch.delenv("OPENAI_API_BASE", raising=False)
    with pytest.raises(ConfigError):
        EndpointSettings.from_env().validate()


@pytest.mark.unit
def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("SPATIALNAV_API_BASE", "http://localhost:9000/v1/")
    monkeypatch.setenv("SPATIALNAV_MAX_RETRIES", "0")
    settings = EndpointSettings.from_env()
    assert settings.base_url == "http://localhost:9000/v1"
    assert settings.encoder_url == "http://localhost:9000/v1/patch-features"
    assert settings.max_retries == 1


@pytest.mark.unit
def test_png_helpers():
    rgb = np.zeros((4, 5, 3), dtype=np.uint8)
    rgb[1, 2] = (10, 20, 30)
    np.testing.assert_array_equal(decode_png(encode_png(rgb)), rgb)
    with pytest.raises(AdapterParseError):
        decode_png("bm90IGFuIGltYWdl")


class ReplayClient:
    """Hands a fixed reply body straight to the adapter's parser."""

    def __init__(self, body):
        self.body = body
        self.settings = SimpleNamespace(image_model="stub-image", base_url="http://stub/v1")

    def call(self, role, url, payload, parse):
        return parse(self.body)


@pytest.mark.unit
@pytest.mark.parametrize("body", [
    {"data": [{"url": "http://example.com/a.png"}]},
    {"data": ["not an object"]},
    {"data": [{"b64_json": None}]},
    {"data": {"b64_json": "aaaa"}},
    {"data": []},
    {"images": []},
])
def test_malformed_image_reply(body):
    with pytest.raises(AdapterParseError):
        RemoteImaginer(ReplayClient(body)).imagine("a red sofa", count=1)
