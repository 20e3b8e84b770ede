import base64
import json
import threading

import numpy as np
import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from facepaste.exceptions import (
    BudgetExhaustedError,
    InvalidParameterError,
    TransportError,
    UnsupportedOperationError,
)
from facepaste.oracle import (
    API_KEY_ENV,
    FaceSet,
    QueryResult,
    RemoteOracle,
    SimOracleConfig,
    SimulatedOracle,
    TemplateFaceClassifier,
    make_server,
)
from facepaste.raster import encode_png, interp_matrix, quantize


@pytest.fixture(scope="module")
def server(sim_oracle):
    srv = make_server(sim_oracle, port=0, budget=5)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    host, port = srv.server_address[:2]
    yield srv, f"http://{host}:{port}/query"
    srv.shutdown()
    srv.server_close()


def test_query_result_validation():
    with pytest.raises(InvalidParameterError):
        QueryResult(1.2, 0.5)
    with pytest.raises(InvalidParameterError):
        QueryResult(0.5, 0.5, probabilities=(0.5, 0.6))
    r = QueryResult(0.3, 0.9, probabilities=np.array([0.3, 0.7]))
    assert r.probabilities == (0.3, 0.7)


def test_face_set_validation(toy_faces):
    with pytest.raises(InvalidParameterError):
        FaceSet(toy_faces.images[:9])
    imgs = list(toy_faces.images)
    imgs[3] = imgs[3][:100]
    with pytest.raises(InvalidParameterError):
        FaceSet(imgs)


def test_oracle_config_validation():
    with pytest.raises(InvalidParameterError):
        SimOracleConfig(embed_size=7)
    with pytest.raises(InvalidParameterError):
        SimOracleConfig(temperature=0.0)


def test_unaltered_faces_classify_as_themselves(sim_oracle, toy_faces):
    for k in range(10):
        p = sim_oracle.classify(toy_faces[k])
        assert int(np.argmax(p)) == k
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(p > 0)


def test_uniform_gray_is_near_uniform(sim_oracle):
    p = sim_oracle.classify(np.full((128, 128, 3), 0.5))
    assert p.max() - p.min() < 0.2


def test_permutation_equivariance(toy_faces):
    perm = np.random.default_rng(0).permutation(10)
    a = TemplateFaceClassifier().fit(toy_faces.images)
    b = TemplateFaceClassifier().fit([toy_faces[i] for i in perm])
    img = 0.5 * (toy_faces[2] + toy_faces[7])
    np.testing.assert_allclose(b.class_probabilities(img), a.class_probabilities(img)[perm], atol=1e-15)


def test_query_examples(sim_oracle, toy_faces):
    r = sim_oracle.query(toy_faces[3], 3, 5)
    assert r.stealthiness == 1.0
    r = sim_oracle.query(toy_faces[5], 3, 5)
    assert r.confidence == max(r.probabilities) == r.probabilities[5]
    with pytest.raises(InvalidParameterError):
        sim_oracle.query(toy_faces[3], 3, 3)
    with pytest.raises(InvalidParameterError):
        sim_oracle.query(toy_faces[3], 3, 10)
    with pytest.raises(InvalidParameterError):
        sim_oracle.query(np.zeros((64, 64, 3)), 3, 4)


def test_simulated_is_deterministic(sim_oracle, toy_faces):
    img = quantize(0.6 * toy_faces[1] + 0.4 * toy_faces[8])
    assert sim_oracle.query(img, 1, 8) == sim_oracle.query(img.copy(), 1, 8)


def test_session_budget_and_indices(sim_oracle, toy_faces):
    seen = []
    session = sim_oracle.session(0, 1, budget=200, listeners=[lambda r, ctx: seen.append((r.query_index, ctx))])
    for i in range(200):
        r = session.query(toy_faces[0], context=i)
        assert r.query_index == i + 1
    assert session.remaining == 0
    with pytest.raises(BudgetExhaustedError):
        session.query(toy_faces[0])
    assert seen == [(i + 1, i) for i in range(200)]


def test_gradient_matches_finite_differences(sim_oracle, toy_faces):
    rng = np.random.default_rng(1)
    img = np.clip(0.5 * toy_faces[4] + 0.5 * toy_faces[6] + 0.02 * rng.standard_normal((128, 128, 3)), 0.05, 0.95)
    t = 6
    grad = sim_oracle.gradient_log_confidence(img, t)
    h = 1e-4
    scale = np.abs(grad).max()
    for _ in range(100):
        r, c, ch = rng.integers(0, 128), rng.integers(0, 128), rng.integers(0, 3)
        up, down = img.copy(), img.copy()
        up[r, c, ch] += h
        down[r, c, ch] -= h
        fd = (np.log(sim_oracle.classify(up)[t]) - np.log(sim_oracle.classify(down)[t])) / (2 * h)
        # relative error, with pixels whose gradient is negligible judged against the field's scale
        assert abs(grad[r, c, ch] - fd) <= 1e-3 * max(abs(fd), 1e-3 * scale)


def test_probability_weighted_gradients_cancel(sim_oracle, toy_faces):
    img = 0.7 * toy_faces[2] + 0.3 * toy_faces[9]
    p = sim_oracle.classify(img)
    total = sum(p[c] * sim_oracle.gradient_log_confidence(img, c) for c in range(10))
    assert np.abs(total).max() < 1e-8


def test_single_pixel_perturbation_has_local_support(toy_faces):
    clf = TemplateFaceClassifier().fit(toy_faces.images)
    base = toy_faces[0]
    img = base.copy()
    img[40, 77] += 0.01
    _, d0, _ = clf._embed(base)
    _, d1, _ = clf._embed(img)
    changed = np.abs(d1 - d0).reshape(64, 64) > 0
    support = np.outer(interp_matrix(128, 64)[:, 40] != 0, interp_matrix(128, 64)[:, 77] != 0)
    assert changed.any() and not np.any(changed & ~support)


def test_remote_has_no_gradient():
    with pytest.raises(UnsupportedOperationError):
        RemoteOracle("http://127.0.0.1:9/query").gradient_log_confidence(np.zeros((4, 4, 3)), 0)


def test_loopback_bit_identical(server, sim_oracle, toy_faces):
    _, url = server
    remote = RemoteOracle(url, api_key="loopback-identity")
    img = quantize(0.5 * toy_faces[0] + 0.5 * toy_faces[3])
    assert remote.query(img, 0, 3) == sim_oracle.query(img, 0, 3)
    assert remote.query(toy_faces[2], 2, 7).stealthiness == 1.0


def _post(url, body, key="raw"):
    data = body if isinstance(body, (bytes, str)) else json.dumps(body)
    return requests.post(url, data=data, headers={"X-Api-Key": key}, timeout=10)


def _payload(img, s=0, t=1):
    return {"image_png_b64": base64.b64encode(encode_png(img)).decode(), "source_id": s, "target_id": t}


def test_server_rejects_malformed(server, toy_faces):
    _, url = server
    for body in (
        b"not json",
        [1, 2],
        {"image_png_b64": "@@not base64@@", "source_id": 0, "target_id": 1},
        {"image_png_b64": base64.b64encode(b"not a png").decode(), "source_id": 0, "target_id": 1},
        {"source_id": 0, "target_id": 1},
        {**_payload(toy_faces[0]), "source_id": "0"},
        _payload(toy_faces[0], 2, 2),
        _payload(np.zeros((16, 16, 3))),
    ):
        resp = _post(url, body, key="malformed")
        assert resp.status_code == 400, body
        assert "error" in resp.json()


def test_server_unknown_ids_and_path(server, toy_faces):
    _, url = server
    assert _post(url, _payload(toy_faces[0], 0, 10)).status_code == 404
    assert _post(url.replace("/query", "/other"), _payload(toy_faces[0])).status_code == 404


def test_server_budget(server, toy_faces):
    _, url = server
    for i in range(5):
        resp = _post(url, _payload(toy_faces[4], 4, 5), key="budget")
        assert resp.status_code == 200 and resp.json()["queries_used"] == i + 1
    resp = _post(url, _payload(toy_faces[4], 4, 5), key="budget")
    assert resp.status_code == 429
    with pytest.raises(BudgetExhaustedError):
        RemoteOracle(url, api_key="budget").query(toy_faces[4], 4, 5)
    # other keys and pairs keep their own counters
    assert _post(url, _payload(toy_faces[4], 4, 6), key="budget").status_code == 200


def test_remote_errors_map_to_exceptions(server, toy_faces):
    _, url = server
    with pytest.raises(InvalidParameterError):
        RemoteOracle(url).query(np.zeros((16, 16, 3)), 0, 1)


class _FakeResponse:
    def __init__(self, status, body):
        self.status_code = status
        self._body = body
        self.text = json.dumps(body)

    def json(self):
        return self._body


class _FakeHttp:
    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = []

    def post(self, url, data=None, headers=None, timeout=None):
        self.calls.append((json.loads(data), headers))
        r = self.responses.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def test_remote_retries_with_backoff():
    sleeps = []
    ok = _FakeResponse(200, {"conf": 0.25, "ssim": 0.75})
    http = _FakeHttp([requests.ConnectionError("down"), _FakeResponse(503, {}), requests.Timeout("slow"), ok])
    oracle = RemoteOracle("http://x/query", field_map={"confidence": "conf", "stealthiness": "ssim"},
                          api_key="k", session=http, sleep=sleeps.append)
    r = oracle.query(np.zeros((4, 4, 3)), 1, 2)
    assert (r.confidence, r.stealthiness, r.probabilities) == (0.25, 0.75, None)
    assert sleeps == [0.5, 1.0, 2.0]
    body, headers = http.calls[0]
    assert (body["source_id"], body["target_id"]) == (1, 2)
    assert headers["X-Api-Key"] == "k"


def test_remote_gives_up_after_three_retries():
    sleeps = []
    http = _FakeHttp([requests.ConnectionError("down")] * 4)
    with pytest.raises(TransportError):
        RemoteOracle("http://x/query", session=http, sleep=sleeps.append).query(np.zeros((4, 4, 3)), 0, 1)
    assert sleeps == [0.5, 1.0, 2.0] and len(http.calls) == 4


def test_remote_malformed_response():
    http = _FakeHttp([_FakeResponse(200, {"nothing": 1})])
    with pytest.raises(TransportError):
        RemoteOracle("http://x/query", session=http, sleep=lambda s: None).query(np.zeros((4, 4, 3)), 0, 1)


def test_api_key_from_environment(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "secret")
    http = _FakeHttp([_FakeResponse(200, {"confidence": 0.1, "stealthiness": 0.2})])
    RemoteOracle("http://x/query", session=http).query(np.zeros((4, 4, 3)), 0, 1)
    assert http.calls[0][1]["X-Api-Key"] == "secret"


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_classify_is_a_distribution(sim_oracle, seed):
    p = sim_oracle.classify(np.random.default_rng(seed).random((128, 128, 3)))
    assert np.all(p > 0) and p.sum() == pytest.approx(1.0, abs=1e-9)
