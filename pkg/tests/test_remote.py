import numpy as np
import pytest
from fastapi.testclient import TestClient

from diffmine.backends import load_backend
from diffmine.backends.remote import RemoteBackend, Tensor, create_app
from diffmine.core import LabelSet, NoiseSchedule
from diffmine.typicality import TypicalityConfig, typicality_for_label

from conftest import PromptGainBackend, random_record

LABELS = LabelSet(("a", "b"), "an image of {}", "an image")


@pytest.fixture
def served():
    local = load_backend("toy-random:2")
    return local, RemoteBackend(client=TestClient(create_app(local)))


def test_tensor_round_trip_and_size_check():
    a = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
    assert np.array_equal(Tensor.from_array(a).to_array(), a)
    bad = Tensor(shape=[5], data=Tensor.from_array(np.zeros(4)).data)
    with pytest.raises(ValueError):
        bad.to_array()


def test_remote_matches_local(served):
    local, remote = served
    assert remote.identifier == f"remote:{local.identifier}" and remote.cond_dim == local.cond_dim
    z = np.random.default_rng(1).normal(size=(3, 32, 32, 1))
    t = np.array([0.1, 0.4, 0.7])
    cond = local.conditioning(LABELS, "a")
    assert np.allclose(remote.predict_batch(z, t, cond), local.predict_batch(z, t, cond), atol=1e-6)
    assert np.allclose(remote.predict(z[0], 0.4, cond), local.predict(z[0], 0.4, cond), atol=1e-6)
    px = np.random.default_rng(2).uniform(size=(32, 32, 1))
    assert np.allclose(remote.decode(remote.encode(px)), px, atol=1e-6)


def test_remote_typicality_close_to_local():
    local = PromptGainBackend()
    remote = RemoteBackend(client=TestClient(create_app(local)))
    rec = random_record(np.random.default_rng(3))
    cfg = TypicalityConfig(n_samples=4)
    a = typicality_for_label(rec, "a", LABELS, local, NoiseSchedule(), cfg)
    b = typicality_for_label(rec, "a", LABELS, remote, NoiseSchedule(), cfg)
    assert np.allclose(a.values, b.values, atol=1e-5)


def test_server_rejects_bad_requests(served):
    local, _ = served
    client = TestClient(create_app(local))
    z = Tensor.from_array(np.zeros((1, 8, 8, 1))).model_dump()
    assert client.post("/predict", json={"noised": z, "t": [0.2, 0.3], "prompt": "x"}).status_code == 422
    assert client.post("/predict", json={"noised": z, "t": [1.5], "prompt": "x"}).status_code == 422
    assert client.post("/predict", json={"noised": z, "prompt": "x"}).status_code == 422
    assert client.post("/predict", json={"noised": z, "t": [0.5], "prompt": "x"}).status_code == 200


def test_load_backend_specs(tmp_path):
    assert load_backend("blind").identifier == "analytic:blind"
    b = load_backend("toy-random:5")
    b.save(tmp_path / "m.pt")
    assert load_backend(f"toy:{tmp_path / 'm.pt'}").identifier == b.identifier
    with pytest.raises(ValueError):
        load_backend("nope:1")
