"""HTTP inference service: symptom intake, per-site recording uploads,
assessment, and corpus export for future retraining.

Storage is an embedded SQLite database plus content-addressed WAV blobs on
disk, so every uploaded byte survives verbatim and duplicate uploads
deduplicate naturally. The classifier is loaded once from a checkpoint and
shared read-only across requests; per-session writes are serialized.
"""

from __future__ import annotations

import hashlib
import json
import os
import sqlite3
import threading
import uuid
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from . import signals
from .datasets import Manifest, ManifestEntry, manifest_text
from .errors import (BadAudioError, ConfigError, InvalidInput, LungSoundError,
                     NotFoundError, PreconditionFailedError,
                     ServiceUnavailableError, TooShortError)
from .features import FeatureConfig, Standardization, log_mel_spectrogram, patchify
from .model import SpectrogramTransformer, encode_domains, encode_labels

SYMPTOMS = frozenset({"fever", "cough", "sputum", "runny_nose",
                      "breathing_difficulty", "chest_pain"})
SITES = ("RUL", "LUL", "RLL", "LLL")
RECOMMENDATIONS = ("no_action", "consult_physician")


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    storage_dir: str = "lungsound-data"
    checkpoint_path: str | None = None
    threshold: float = 0.5
    aggregation: str = "any_site"  # or "site_mean"
    min_upload_s: float = 8.0
    clipping_fraction: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.aggregation not in ("any_site", "site_mean"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


def load_service_config(path=None, env=None) -> ServiceConfig:
    """Config file (JSON) with LUNGSOUND_* environment overrides on top."""
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        data.update(json.loads(Path(path).read_text()))
    casts = {"port": int, "threshold": float, "min_upload_s": float,
             "clipping_fraction": float}
    for key in ("host", "port", "storage_dir", "checkpoint_path", "threshold",
                "aggregation", "min_upload_s", "clipping_fraction"):
        value = env.get(f"LUNGSOUND_{key.upper()}")
        if value is not None:
            data[key] = casts.get(key, str)(value)
    return ServiceConfig(**data)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Storage:
    """SQLite session store plus sha256-addressed audio blobs.

    Superseded uploads keep their rows (marked) and their blobs, so the
    audit trail and the raw corpus never lose data.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        self.db_path = self.root / "sessions.db"
        with self._connect() as conn:
            conn.executescript("""
                CREATE TABLE IF NOT EXISTS sessions (
                    session_id TEXT PRIMARY KEY,
                    symptoms TEXT NOT NULL,
                    other TEXT NOT NULL DEFAULT '',
                    status TEXT NOT NULL DEFAULT 'open',
                    created_at TEXT NOT NULL,
                    result TEXT
                );
                CREATE TABLE IF NOT EXISTS recordings (
                    ref TEXT PRIMARY KEY,
                    session_id TEXT NOT NULL REFERENCES sessions(session_id),
                    site TEXT NOT NULL,
                    blob_sha TEXT NOT NULL,
                    sample_rate_hz INTEGER NOT NULL,
                    duration_s REAL NOT NULL,
                    quality_flags TEXT NOT NULL,
                    superseded INTEGER NOT NULL DEFAULT 0,
                    uploaded_at TEXT NOT NULL
                );
            """)

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        return conn

    def write_blob(self, data: bytes) -> str:
        sha = hashlib.sha256(data).hexdigest()
        path = self.blob_dir / f"{sha}.wav"
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            tmp.replace(path)
        return sha

    def read_blob(self, sha: str) -> bytes:
        path = self.blob_dir / f"{sha}.wav"
        if not path.exists():
            raise ServiceUnavailableError(f"blob {sha} missing from storage")
        return path.read_bytes()

    def create_session(self, symptoms: list[str], other: str) -> dict:
        session_id = uuid.uuid4().hex
        with self._connect() as conn:
            conn.execute(
                "INSERT INTO sessions (session_id, symptoms, other, status, created_at) "
                "VALUES (?, ?, ?, 'open', ?)",
                (session_id, json.dumps(sorted(symptoms)), other, _now()))
        return self.get_session(session_id)

    def get_session(self, session_id: str) -> dict:
        with self._connect() as conn:
            row = conn.execute("SELECT * FROM sessions WHERE session_id = ?",
                               (session_id,)).fetchone()
            if row is None:
                raise NotFoundError(f"unknown session {session_id}")
            recs = conn.execute(
                "SELECT * FROM recordings WHERE session_id = ? AND superseded = 0 "
                "ORDER BY site", (session_id,)).fetchall()
        return {
            "session_id": row["session_id"],
            "symptoms": json.loads(row["symptoms"]),
            "other": row["other"],
            "status": row["status"],
            "created_at": row["created_at"],
            "recordings": {r["site"]: {"recording_ref": r["ref"],
                                       "quality_flags": json.loads(r["quality_flags"]),
                                       "duration_s": r["duration_s"]}
                           for r in recs},
            "result": json.loads(row["result"]) if row["result"] else None,
        }

    def add_recording(self, session_id: str, site: str, blob_sha: str,
                      sample_rate_hz: int, duration_s: float,
                      quality_flags: list[str]) -> str:
        ref = uuid.uuid4().hex[:16]
        with self._connect() as conn:
            conn.execute(
                "UPDATE recordings SET superseded = 1 WHERE session_id = ? AND site = ?",
                (session_id, site))
            conn.execute(
                "INSERT INTO recordings (ref, session_id, site, blob_sha, sample_rate_hz, "
                "duration_s, quality_flags, uploaded_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (ref, session_id, site, blob_sha, sample_rate_hz, duration_s,
                 json.dumps(quality_flags), _now()))
        return ref

    def current_recordings(self, session_id: str) -> list[sqlite3.Row]:
        with self._connect() as conn:
            return conn.execute(
                "SELECT * FROM recordings WHERE session_id = ? AND superseded = 0 "
                "ORDER BY site", (session_id,)).fetchall()

    def store_result(self, session_id: str, result: dict) -> None:
        with self._connect() as conn:
            conn.execute("UPDATE sessions SET status = 'assessed', result = ? "
                         "WHERE session_id = ?", (json.dumps(result), session_id))

    def export_rows(self, status: str | None = None) -> list[sqlite3.Row]:
        query = ("SELECT r.*, s.status AS session_status, s.result AS session_result "
                 "FROM recordings r JOIN sessions s ON r.session_id = s.session_id "
                 "WHERE r.superseded = 0")
        args: tuple = ()
        if status is not None:
            query += " AND s.status = ?"
            args = (status,)
        with self._connect() as conn:
            return conn.execute(query + " ORDER BY r.uploaded_at, r.ref", args).fetchall()


class InferenceEngine:
    """Holds the frozen model plus the statistics and features it was trained with."""

    def __init__(self, model: SpectrogramTransformer, standardization: Standardization,
                 fcfg: FeatureConfig, version: str):
        self.model = model
        self.model.eval()
        self.standardization = standardization
        self.fcfg = fcfg
        self.version = version

    @classmethod
    def from_checkpoint(cls, path) -> "InferenceEngine":
        from .training import load_checkpoint

        model, std, fcfg = load_checkpoint(path)
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
        return cls(model, std, fcfg, version=digest)

    def clip_probabilities(self, rec: signals.AudioRecording,
                           window_s: float = signals.DEFAULT_WINDOW_S,
                           hop_s: float = signals.DEFAULT_HOP_S) -> np.ndarray:
        """p_abnormal for each fixed window of a preprocessed recording."""
        prepared = signals.preprocess(rec)
        clips = signals.segment(prepared, window_s=window_s, hop_s=hop_s)
        if not clips:
            raise TooShortError(
                f"recording shorter than the {window_s:.0f} s analysis window")
        grids = []
        for clip in clips:
            spec = self.standardization.apply(log_mel_spectrogram(clip, self.fcfg))
            grids.append(patchify(spec, self.fcfg))
        labels = encode_labels(["normal"] * len(grids))   # placeholder, unused in eval
        domains = encode_domains([rec.device_domain] * len(grids))
        with torch.no_grad():
            feats = self.model.embed(grids, labels, domains)
            feats = self.model.encode(feats, training=False)
            probs, _ = self.model.classify(feats)
        return probs[:, 1].numpy()


def _decode_upload(data: bytes, site: str = "unknown") -> signals.AudioRecording:
    try:
        samples, rate = signals.decode_wav(data)
        return signals.AudioRecording(samples=samples, sample_rate_hz=rate,
                                      device_domain="smartphone", site=site)
    except LungSoundError as exc:
        raise BadAudioError(f"could not decode audio: {exc}") from exc
    except Exception as exc:
        raise BadAudioError(f"could not decode audio: {exc}") from exc


def _quality_flags(rec: signals.AudioRecording, clipping_fraction: float) -> list[str]:
    flags = []
    clipped = float(np.mean(np.abs(rec.samples) >= 0.999))
    if clipped > clipping_fraction:
        flags.append("clipping")
    return flags


_ERROR_CODES = {
    "NotFoundError": 404,
    "BadAudioError": 400,
    "TooShortError": 422,
    "InvalidInput": 422,
    "LabelError": 422,
    "PreconditionFailedError": 409,
    "ServiceUnavailableError": 503,
}


class CreateSessionBody(BaseModel):
    symptoms: list[str] = Field(default_factory=list)
    other: str = ""


def create_app(config: ServiceConfig | None = None,
               engine: InferenceEngine | None = None) -> FastAPI:
    """Build the service app; tests may inject a pre-built engine."""
    config = config or ServiceConfig()
    storage = Storage(config.storage_dir)
    if engine is None and config.checkpoint_path:
        engine = InferenceEngine.from_checkpoint(config.checkpoint_path)
    app = FastAPI(title="lung-sound assessment service")
    app.state.config = config
    app.state.storage = storage
    app.state.engine = engine
    session_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)

    @app.exception_handler(LungSoundError)
    async def _lungsound_error(_request: Request, exc: LungSoundError):
        code = _ERROR_CODES.get(type(exc).__name__, 400)
        body = {"error": type(exc).__name__, "detail": str(exc)}
        diagnostics = getattr(exc, "diagnostics", None)
        if diagnostics:
            body["diagnostics"] = diagnostics
        return JSONResponse(status_code=code, content=body)

    @app.post("/sessions", status_code=201)
    async def create_session(body: CreateSessionBody):
        unknown = sorted(set(body.symptoms) - SYMPTOMS)
        if unknown:
            raise InvalidInput(f"unknown symptoms {unknown}; valid: {sorted(SYMPTOMS)}")
        session = storage.create_session(body.symptoms, body.other)
        return {"session_id": session["session_id"]}

    @app.post("/sessions/{session_id}/recordings", status_code=201)
    async def upload_recording(session_id: str, request: Request,
                               site: str = Query(...)):
        if site not in SITES:
            raise InvalidInput(f"unknown site {site!r}; valid: {list(SITES)}")
        data = await request.body()
        if not data:
            raise BadAudioError("empty request body")
        with session_locks[session_id]:
            session = storage.get_session(session_id)
            if session["status"] != "open":
                raise PreconditionFailedError(
                    f"session {session_id} is {session['status']}, uploads need an open session")
            rec = _decode_upload(data, site=site)
            if rec.duration_s < config.min_upload_s:
                raise TooShortError(
                    f"recording is {rec.duration_s:.2f} s, need >= {config.min_upload_s:.0f} s")
            flags = _quality_flags(rec, config.clipping_fraction)
            sha = storage.write_blob(data)
            ref = storage.add_recording(session_id, site, sha, rec.sample_rate_hz,
                                        rec.duration_s, flags)
        return {"recording_ref": ref, "quality_flags": flags}

    @app.post("/sessions/{session_id}/assess")
    async def assess(session_id: str):
        with session_locks[session_id]:
            session = storage.get_session(session_id)
            if session["status"] == "assessed":
                return session["result"]  # idempotent: stored result, no rerun
            rows = storage.current_recordings(session_id)
            if not rows:
                raise PreconditionFailedError("session has no recordings to assess")
            if engine is None:
                raise ServiceUnavailableError("no model checkpoint loaded")
            sites = {}
            site_probs = []
            for row in rows:
                rec = _decode_upload(storage.read_blob(row["blob_sha"]), site=row["site"])
                clip_p = engine.clip_probabilities(rec)
                p_site = float(clip_p.mean())
                site_probs.append(p_site)
                sites[row["site"]] = {
                    "recording_ref": row["ref"],
                    "p_abnormal": p_site,
                    "clip_verdicts": ["abnormal" if p >= config.threshold else "normal"
                                      for p in clip_p],
                }
            if config.aggregation == "any_site":
                abnormal = any(p >= config.threshold for p in site_probs)
            else:
                abnormal = float(np.mean(site_probs)) >= config.threshold
            result = {
                "session_id": session_id,
                "sites": sites,
                "overall_verdict": "abnormal" if abnormal else "normal",
                "recommendation": RECOMMENDATIONS[1] if abnormal else RECOMMENDATIONS[0],
                "model_version": engine.version,
                "threshold": config.threshold,
            }
            storage.store_result(session_id, result)
        return result

    @app.get("/sessions/{session_id}")
    async def get_session(session_id: str):
        return storage.get_session(session_id)

    @app.get("/export/manifest")
    async def export_manifest(status: str | None = Query(default=None)):
        manifest = export_corpus(storage, status=status)
        return PlainTextResponse(manifest_text(manifest), media_type="text/csv")

    return app


def export_corpus(storage: Storage, status: str | None = None) -> Manifest:
    """Manifest of stored recordings with assessment verdicts as provisional
    labels (flagged unverified); unassessed sessions export as 'unlabeled'."""
    entries = []
    for row in storage.export_rows(status=status):
        raw_label = "unlabeled"
        extra = {"verified": "false", "session_id": row["session_id"],
                 "recording_ref": row["ref"]}
        if row["session_result"]:
            result = json.loads(row["session_result"])
            site_block = result["sites"].get(row["site"])
            if site_block is not None:
                p = site_block["p_abnormal"]
                raw_label = "abnormal" if p >= result["threshold"] else "normal"
                extra["p_abnormal"] = f"{p:.6f}"
        entries.append(ManifestEntry(
            audio_path=f"blobs/{row['blob_sha']}.wav",
            device_domain="smartphone", site=row["site"], raw_label=raw_label,
            patient_id=row["session_id"], sample_rate_hz=row["sample_rate_hz"],
            extra=extra))
    return Manifest(entries=entries,
                    provenance="assessment service export; labels are provisional "
                               "model verdicts, not clinician-verified")
