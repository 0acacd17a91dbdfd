import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

import distill
import features
import harness
import main
from audio_io import decode_wav, encode_wav
from distill import DistilledSet
from tensor_autodiff import Tensor


@pytest.fixture
def client():
    return TestClient(main.app)


@pytest.fixture
def tone_wav(make_tone):
    return encode_wav(make_tone(1000.0))


@pytest.fixture
def distilled_upload(make_tone, tmp_path):
    params = harness.feature_params(main.RUN_CONFIG)
    maps = [features.extract_fd_mfcc(make_tone(f, label=k), params) for k, f in enumerate((500.0, 1500.0))]
    stats = features.fit_stats(maps)
    x, y = features.stack_maps([features.standardize(m, stats) for m in maps])
    path = distill.save_distilled(
        DistilledSet(features=Tensor(x), labels=y, alpha=Tensor(0.01), cpc=1), tmp_path / "d.dset"
    )
    stats_raw = json.dumps({"mean": stats.mean.tolist(), "std": stats.std.tolist()}).encode("utf-8")
    return path.read_bytes(), stats_raw


def test_health(client):
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["feature_mode"] == "fd_mfcc"
    assert body["n_coef"] == 13


def test_features_of_a_tone(client, tone_wav):
    resp = client.post("/api/features", files={"file": ("tone.wav", tone_wav, "audio/wav")})
    assert resp.status_code == 200
    body = resp.json()
    assert (body["rows"], body["cols"], body["n_coef"]) == (39, 66, 13)
    assert np.array(body["values"]).shape == (39, 66)


def test_features_rejects_bad_uploads(client):
    resp = client.post("/api/features", files={"file": ("x.wav", b"not a wav file at all", "audio/wav")})
    assert resp.status_code == 400
    resp = client.post("/api/features", files={"file": ("x.wav", b"", "audio/wav")})
    assert resp.status_code == 400


def test_reconstruct_returns_wav(client, distilled_upload):
    dset_raw, stats_raw = distilled_upload
    resp = client.post(
        "/api/reconstruct",
        files={"dset": ("d.dset", dset_raw), "stats": ("stats.json", stats_raw)},
        data={"index": "1"},
    )
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "audio/wav"
    assert "recon_0001.wav" in resp.headers["content-disposition"]
    clip = decode_wav(resp.content)
    assert len(clip) == 8000
    assert np.all(np.isfinite(clip.samples))


def test_reconstruct_rejects_bad_input(client, distilled_upload):
    dset_raw, stats_raw = distilled_upload
    resp = client.post("/api/reconstruct", files={"dset": ("d.dset", dset_raw), "stats": ("s.json", stats_raw)},
                       data={"index": "5"})
    assert resp.status_code == 400
    resp = client.post("/api/reconstruct", files={"dset": ("d.dset", dset_raw), "stats": ("s.json", b"{")})
    assert resp.status_code == 400
    resp = client.post("/api/reconstruct", files={"dset": ("d.dset", b"garbage"), "stats": ("s.json", stats_raw)})
    assert resp.status_code == 400


def test_report(client, tmp_path, monkeypatch):
    monkeypatch.setattr(main, "WORKDIR", str(tmp_path))
    assert client.get("/api/report").status_code == 404

    (tmp_path / "reports").mkdir()
    (tmp_path / "reports" / "report.md").write_text("| dataset |\n", encoding="utf-8")
    resp = client.get("/api/report")
    assert resp.status_code == 200
    assert resp.text == "| dataset |\n"
    assert resp.headers["content-type"].startswith("text/markdown")
