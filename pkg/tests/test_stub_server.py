import asyncio
import json

import httpx
import pytest
from fastapi.testclient import TestClient

from spatialnav.errors import ConfigError
from spatialnav.stub_server import StubScript, create_stub_app, load_script

pytestmark = pytest.mark.unit


def chat(client, prompt, image=None):
    content = [{"type": "text", "text": prompt}]
    if image:
        content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{image}"}})
    return client.post("/v1/chat/completions", json={"model": "stub", "messages": [{"role": "user", "content": content}]})


@pytest.fixture
def client():
    script = StubScript(
        replies={
            "landmark_retrieval": ["{Nav Loc 1: [1.0, 2.0, 0.5]}"],
            "chat": ["generic"],
        },
        images=[["aaaa", "bbbb"]],
        features=[[[[0.5, 0.5]]]],
    )
    with TestClient(create_stub_app(script)) as c:
        yield c


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "healthy"
    assert body["served"] == 0
    assert body["remaining"]["landmark_retrieval"] == 1


def test_reply_by_role_then_chat_queue(client):
    first = chat(client, "# role: landmark_retrieval\nWhere is the sofa?")
    assert first.status_code == 200
    assert first.json()["choices"][0]["message"]["content"] == "{Nav Loc 1: [1.0, 2.0, 0.5]}"

    second = chat(client, "# role: landmark_retrieval\nWhere is the sofa?")
    assert second.json()["choices"][0]["message"]["content"] == "generic"

    third = chat(client, "no header at all")
    assert third.status_code == 503


def test_prometheus_metrics(client):
    chat(client, "# role: landmark_retrieval\nWhere is the sofa?")
    chat(client, "# role: landmark_retrieval\nWhere is the sofa?")
    chat(client, "no header at all")
    response = client.get("/metrics/prometheus")
    assert response.status_code == 200
    assert response.headers["content-type"].startswith("text/plain")
    body = response.text
    assert 'spatialnav_adapter_requests_total{role="landmark_retrieval",status="served"} 2.0' in body
    assert 'spatialnav_adapter_requests_total{role="chat",status="exhausted"} 1.0' in body


def test_string_content(client):
    response = client.post("/v1/chat/completions", json={
        "messages": [{"role": "user", "content": "# role: landmark_retrieval\nfind the bed"}],
    })
    assert response.json()["choices"][0]["message"]["content"].startswith("{Nav Loc 1")


def test_images_and_features(client):
    response = client.post("/v1/images/generations", json={"prompt": "a sofa", "n": 2})
    assert [d["b64_json"] for d in response.json()["data"]] == ["aaaa", "bbbb"]
    assert client.post("/v1/images/generations", json={"prompt": "a sofa"}).status_code == 503

    response = client.post("/v1/patch-features", json={"image": "aaaa"})
    assert response.json()["features"] == [[[0.5, 0.5]]]
    assert client.post("/v1/patch-features", json={"image": "aaaa"}).status_code == 503


def test_defaults_never_run_out():
    script = StubScript(default_reply="Success: no\nNeed forward: no", default_image="cccc",
                        default_features=[[[1.0]]])
    with TestClient(create_stub_app(script)) as client:
        for _ in range(3):
            assert chat(client, "# role: goal_verification\n...").json()["choices"][0]["message"]["content"] \
                .startswith("Success: no")
        images = client.post("/v1/images/generations", json={"prompt": "x", "n": 3}).json()["data"]
        assert len(images) == 3
        assert client.post("/v1/patch-features", json={"image": "x"}).json()["features"] == [[[1.0]]]
        assert client.get("/health").json()["served"] == 5


def test_request_validation(client):
    assert client.post("/v1/chat/completions", json={"model": "stub"}).status_code == 422
    assert client.post("/v1/images/generations", json={"prompt": "x", "n": 0}).status_code == 422
    assert client.get("/v1/unknown").status_code == 404


def test_load_script(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps({"replies": {"chat": ["hi"]}, "default_reply": "bye"}))
    script = load_script(str(path))
    assert script.replies == {"chat": ["hi"]}
    assert script.default_reply == "bye"


@pytest.mark.parametrize("content", ["not json", json.dumps({"unexpected": 1}), json.dumps({"replies": [1]})])
def test_load_script_invalid(tmp_path, content):
    path = tmp_path / "script.json"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_script(str(path))


def test_load_script_missing(tmp_path):
    with pytest.raises(ConfigError):
        load_script(str(tmp_path / "missing.json"))


@pytest.mark.asyncio
async def test_concurrent_requests_share_one_queue():
    script = StubScript(replies={"chat": [f"r{i}" for i in range(5)]})
    transport = httpx.ASGITransport(app=create_stub_app(script))
    payload = {"messages": [{"role": "user", "content": "hello"}]}
    async with httpx.AsyncClient(transport=transport, base_url="http://stub") as client:
        responses = await asyncio.gather(*(client.post("/v1/chat/completions", json=payload) for _ in range(6)))
    served = sorted(r.json()["choices"][0]["message"]["content"] for r in responses if r.status_code == 200)
    assert served == ["r0", "r1", "r2", "r3", "r4"]
    assert sum(r.status_code == 503 for r in responses) == 1
