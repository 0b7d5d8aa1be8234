"""HTTP service: sessions, uploads, assessment, export, configuration."""

import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from scipy.io import wavfile

from lungsound import datasets as ds
from lungsound import service as svc
from lungsound.errors import ConfigError, TooShortError
from lungsound.features import FeatureConfig, Standardization
from lungsound.model import MixStyleConfig, ModelConfig, SpectrogramTransformer
from lungsound.signals import AudioRecording


def wav_bytes(duration_s=9.0, rate=8000, freq=330.0, amplitude=0.4, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(duration_s * rate)) / rate
    x = amplitude * np.sin(2 * np.pi * freq * t) + 0.01 * rng.standard_normal(t.size)
    buf = io.BytesIO()
    wavfile.write(buf, rate, np.clip(x * 32767, -32768, 32767).astype(np.int16))
    return buf.getvalue()


def clipped_wav_bytes(duration_s=9.0, rate=8000):
    t = np.arange(int(duration_s * rate)) / rate
    x = 1.5 * np.sin(2 * np.pi * 200.0 * t)  # drives >1% of samples into the rails
    buf = io.BytesIO()
    wavfile.write(buf, rate, np.clip(x * 32767, -32768, 32767).astype(np.int16))
    return buf.getvalue()


def small_engine(version="test-model"):
    fcfg = FeatureConfig()
    mcfg = ModelConfig.for_features(fcfg, clip_samples=12000, embed_dim=16,
                                    num_layers=2, num_heads=2,
                                    mixstyle=MixStyleConfig(insertion_depths=(0,)))
    return svc.InferenceEngine(SpectrogramTransformer(mcfg),
                               Standardization(mean=-6.0, std=4.0), fcfg, version)


class FakeEngine:
    """Duck-typed engine returning scripted per-site clip probabilities."""

    def __init__(self, by_site):
        self.by_site = by_site
        self.version = "fake-0"
        self.calls = 0

    def clip_probabilities(self, rec, **_kwargs):
        self.calls += 1
        return np.asarray(self.by_site[rec.site], dtype=np.float64)


@pytest.fixture()
def app(tmp_path):
    config = svc.ServiceConfig(storage_dir=str(tmp_path / "store"))
    return svc.create_app(config, engine=small_engine())


@pytest.fixture()
def client(app):
    with TestClient(app) as c:
        yield c


def make_session(client, symptoms=("cough", "fever"), other=""):
    resp = client.post("/sessions", json={"symptoms": list(symptoms), "other": other})
    assert resp.status_code == 201
    return resp.json()["session_id"]


def upload(client, session_id, site, data=None, **kwargs):
    return client.post(f"/sessions/{session_id}/recordings", params={"site": site},
                       content=data if data is not None else wav_bytes(**kwargs))


class TestSessions:
    def test_create_and_fetch(self, client):
        sid = make_session(client, symptoms=["fever", "cough"], other="2 days")
        got = client.get(f"/sessions/{sid}")
        assert got.status_code == 200
        body = got.json()
        assert body["symptoms"] == ["cough", "fever"]
        assert body["other"] == "2 days"
        assert body["status"] == "open"
        assert body["recordings"] == {}
        assert body["result"] is None

    def test_no_symptoms_is_fine(self, client):
        sid = make_session(client, symptoms=())
        assert client.get(f"/sessions/{sid}").json()["symptoms"] == []

    def test_unknown_symptom_rejected(self, client):
        resp = client.post("/sessions", json={"symptoms": ["hiccups"]})
        assert resp.status_code == 422
        assert resp.json()["error"] == "InvalidInput"

    def test_unknown_session_404(self, client):
        resp = client.get("/sessions/nope")
        assert resp.status_code == 404
        assert resp.json()["error"] == "NotFoundError"


class TestUploads:
    def test_happy_path(self, client):
        sid = make_session(client)
        resp = upload(client, sid, "RUL")
        assert resp.status_code == 201
        body = resp.json()
        assert body["recording_ref"]
        assert body["quality_flags"] == []
        session = client.get(f"/sessions/{sid}").json()
        assert list(session["recordings"]) == ["RUL"]
        assert session["recordings"]["RUL"]["duration_s"] == pytest.approx(9.0)

    def test_unknown_session(self, client):
        assert upload(client, "missing", "RUL").status_code == 404

    def test_bad_site(self, client):
        sid = make_session(client)
        resp = upload(client, sid, "LEFT")
        assert resp.status_code == 422

    def test_garbage_bytes(self, client):
        sid = make_session(client)
        resp = upload(client, sid, "RUL", data=b"not a wav at all")
        assert resp.status_code == 400
        assert resp.json()["error"] == "BadAudioError"

    def test_empty_body(self, client):
        sid = make_session(client)
        assert upload(client, sid, "RUL", data=b"").status_code == 400

    def test_too_short(self, client):
        sid = make_session(client)
        resp = upload(client, sid, "RUL", duration_s=3.0)
        assert resp.status_code == 422
        assert resp.json()["error"] == "TooShortError"

    def test_clipping_flagged(self, client):
        sid = make_session(client)
        resp = upload(client, sid, "RUL", data=clipped_wav_bytes())
        assert resp.status_code == 201
        assert "clipping" in resp.json()["quality_flags"]

    def test_reupload_supersedes_but_keeps_audit_trail(self, app, client):
        sid = make_session(client)
        first = upload(client, sid, "RUL", seed=1).json()["recording_ref"]
        second = upload(client, sid, "RUL", seed=2).json()["recording_ref"]
        assert first != second
        session = client.get(f"/sessions/{sid}").json()
        assert session["recordings"]["RUL"]["recording_ref"] == second
        with app.state.storage._connect() as conn:
            rows = conn.execute(
                "SELECT ref, superseded FROM recordings WHERE session_id = ?",
                (sid,)).fetchall()
        assert {r["ref"]: r["superseded"] for r in rows} == {first: 1, second: 0}

    def test_blob_stored_verbatim(self, app, client):
        sid = make_session(client)
        data = wav_bytes(seed=7)
        upload(client, sid, "LUL", data=data)
        row = app.state.storage.current_recordings(sid)[0]
        assert app.state.storage.read_blob(row["blob_sha"]) == data


class TestAssess:
    def test_full_round_trip(self, client):
        sid = make_session(client)
        for site in svc.SITES:
            assert upload(client, sid, site, seed=hash(site) % 100).status_code == 201
        resp = client.post(f"/sessions/{sid}/assess")
        assert resp.status_code == 200
        result = resp.json()
        assert sorted(result["sites"]) == sorted(svc.SITES)
        for block in result["sites"].values():
            assert 0.0 <= block["p_abnormal"] <= 1.0
            assert block["clip_verdicts"]
            assert set(block["clip_verdicts"]) <= {"normal", "abnormal"}
        assert result["overall_verdict"] in ("normal", "abnormal")
        expected_rec = ("consult_physician" if result["overall_verdict"] == "abnormal"
                        else "no_action")
        assert result["recommendation"] == expected_rec
        assert result["model_version"] == "test-model"
        assert result["threshold"] == 0.5
        assert client.get(f"/sessions/{sid}").json()["status"] == "assessed"

    def test_no_recordings_409(self, client):
        sid = make_session(client)
        resp = client.post(f"/sessions/{sid}/assess")
        assert resp.status_code == 409

    def test_no_engine_503(self, tmp_path):
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "store"))
        with TestClient(svc.create_app(config, engine=None)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            resp = client.post(f"/sessions/{sid}/assess")
            assert resp.status_code == 503

    def test_idempotent_without_rerunning_model(self, tmp_path):
        engine = FakeEngine({"RUL": [0.8, 0.6], "LUL": [0.1]})
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "store"))
        with TestClient(svc.create_app(config, engine=engine)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            upload(client, sid, "LUL")
            first = client.post(f"/sessions/{sid}/assess").json()
            calls_after_first = engine.calls
            second = client.post(f"/sessions/{sid}/assess").json()
            assert second == first
            assert engine.calls == calls_after_first == 2
            assert client.get(f"/sessions/{sid}").json()["result"] == first

    def test_upload_after_assessment_409(self, tmp_path):
        engine = FakeEngine({"RUL": [0.2]})
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "store"))
        with TestClient(svc.create_app(config, engine=engine)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            client.post(f"/sessions/{sid}/assess")
            assert upload(client, sid, "LUL").status_code == 409

    def test_any_site_aggregation(self, tmp_path):
        engine = FakeEngine({"RUL": [0.05], "LUL": [0.6]})
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "s"))
        with TestClient(svc.create_app(config, engine=engine)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            upload(client, sid, "LUL")
            result = client.post(f"/sessions/{sid}/assess").json()
            # one site over threshold flips the whole session
            assert result["sites"]["LUL"]["p_abnormal"] == pytest.approx(0.6)
            assert result["overall_verdict"] == "abnormal"

    def test_site_mean_aggregation(self, tmp_path):
        engine = FakeEngine({"RUL": [0.05], "LUL": [0.6]})
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "s"),
                                   aggregation="site_mean")
        with TestClient(svc.create_app(config, engine=engine)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            upload(client, sid, "LUL")
            result = client.post(f"/sessions/{sid}/assess").json()
            # mean (0.05 + 0.6)/2 = 0.325 stays under the 0.5 threshold
            assert result["overall_verdict"] == "normal"

    def test_site_probability_is_mean_of_clips(self, tmp_path):
        engine = FakeEngine({"RUL": [0.2, 0.4, 0.9]})
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "s"))
        with TestClient(svc.create_app(config, engine=engine)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            result = client.post(f"/sessions/{sid}/assess").json()
            assert result["sites"]["RUL"]["p_abnormal"] == pytest.approx(0.5)
            assert result["sites"]["RUL"]["clip_verdicts"] == ["normal", "normal", "abnormal"]

    def test_threshold_config_respected(self, tmp_path):
        engine = FakeEngine({"RUL": [0.7]})
        config = svc.ServiceConfig(storage_dir=str(tmp_path / "s"), threshold=0.9)
        with TestClient(svc.create_app(config, engine=engine)) as client:
            sid = make_session(client)
            upload(client, sid, "RUL")
            result = client.post(f"/sessions/{sid}/assess").json()
            assert result["threshold"] == 0.9
            assert result["overall_verdict"] == "normal"


class TestExport:
    def test_round_trips_through_loader(self, app, client, tmp_path):
        sid = make_session(client)
        payload = wav_bytes(seed=3)
        upload(client, sid, "RUL", data=payload)
        upload(client, sid, "LUL", seed=4)
        client.post(f"/sessions/{sid}/assess")
        resp = client.get("/export/manifest")
        assert resp.status_code == 200
        assert resp.headers["content-type"].startswith("text/csv")

        storage_root = app.state.storage.root
        manifest_path = storage_root / "export.csv"
        manifest_path.write_text(resp.text)
        manifest = ds.load_manifest(manifest_path)
        assert len(manifest) == 2
        for e in manifest.entries:
            assert e.device_domain == "smartphone"
            assert e.raw_label in ("normal", "abnormal")
            assert e.patient_id == sid
            assert e.extra["verified"] == "false"
            assert 0.0 <= float(e.extra["p_abnormal"]) <= 1.0
            assert ds.resolve_audio_path(manifest_path, e).exists()
        paths = {e.site: ds.resolve_audio_path(manifest_path, e) for e in manifest.entries}
        assert paths["RUL"].read_bytes() == payload

    def test_unassessed_sessions_export_unlabeled(self, client, tmp_path):
        sid = make_session(client)
        upload(client, sid, "RLL")
        resp = client.get("/export/manifest")
        manifest_path = tmp_path / "export.csv"
        manifest_path.write_text(resp.text)
        manifest = ds.load_manifest(manifest_path)
        assert [e.raw_label for e in manifest.entries] == ["unlabeled"]

    def test_status_filter(self, client, tmp_path):
        sid_open = make_session(client)
        upload(client, sid_open, "RUL")
        sid_done = make_session(client)
        upload(client, sid_done, "LUL")
        client.post(f"/sessions/{sid_done}/assess")
        resp = client.get("/export/manifest", params={"status": "assessed"})
        manifest_path = tmp_path / "assessed.csv"
        manifest_path.write_text(resp.text)
        manifest = ds.load_manifest(manifest_path)
        assert {e.extra["session_id"] for e in manifest.entries} == {sid_done}

    def test_superseded_recordings_not_exported(self, client, tmp_path):
        sid = make_session(client)
        upload(client, sid, "RUL", seed=1)
        upload(client, sid, "RUL", seed=2)
        resp = client.get("/export/manifest")
        manifest_path = tmp_path / "export.csv"
        manifest_path.write_text(resp.text)
        assert len(ds.load_manifest(manifest_path)) == 1


class TestInferenceEngine:
    def test_clip_probabilities_shape_and_range(self):
        engine = small_engine()
        rng = np.random.default_rng(0)
        rec = AudioRecording(samples=0.3 * rng.standard_normal(9 * 8000),
                             sample_rate_hz=8000, device_domain="smartphone")
        probs = engine.clip_probabilities(rec)
        assert probs.shape == (3,)  # 9 s -> three 3 s windows
        assert np.all(probs >= 0) and np.all(probs <= 1)

    def test_too_short_recording_raises(self):
        engine = small_engine()
        rec = AudioRecording(samples=np.zeros(8000), sample_rate_hz=8000,
                             device_domain="smartphone")
        with pytest.raises(TooShortError):
            engine.clip_probabilities(rec)

    def test_deterministic(self):
        engine = small_engine()
        rng = np.random.default_rng(1)
        rec = AudioRecording(samples=0.2 * rng.standard_normal(8 * 8000),
                             sample_rate_hz=8000, device_domain="smartphone")
        np.testing.assert_array_equal(engine.clip_probabilities(rec),
                                      engine.clip_probabilities(rec))


class TestServiceConfig:
    def test_defaults(self):
        cfg = svc.ServiceConfig()
        assert cfg.threshold == 0.5 and cfg.aggregation == "any_site"

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            svc.ServiceConfig(threshold=1.0)

    def test_bad_aggregation(self):
        with pytest.raises(ConfigError):
            svc.ServiceConfig(aggregation="majority")

    def test_load_with_env_overrides(self, tmp_path):
        path = tmp_path / "svc.json"
        path.write_text(json.dumps({"port": 9000, "threshold": 0.7,
                                    "storage_dir": "/data/lung"}))
        env = {"LUNGSOUND_PORT": "1234", "LUNGSOUND_AGGREGATION": "site_mean"}
        cfg = svc.load_service_config(path, env=env)
        assert cfg.port == 1234           # env beats file
        assert cfg.threshold == 0.7       # file beats default
        assert cfg.aggregation == "site_mean"
        assert cfg.storage_dir == "/data/lung"

    def test_load_defaults_without_file(self):
        assert svc.load_service_config(env={}) == svc.ServiceConfig()
