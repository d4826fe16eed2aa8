"""HTTP backend of the browser application.

Endpoints: grading with an attribution overlay, clinician-feedback capture
and export, and token-guarded model administration. Feedback is an
append-only newline-delimited JSON file, fsynced before each 201 so a
restart never loses an acknowledged record. The model registry keeps
checkpoints in a directory with an ``active`` marker file; activation
validates the checkpoint fully before an atomic in-memory swap, so requests
already running finish on the old model and no request can observe a
partially loaded one.

Only the SHA-256 of each uploaded image is retained (set
``retain_images=true`` to opt in to storing full images).
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, File, Form, Query, Request, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import model as model_mod
from .attribution import IGConfig, integrated_gradients, render_overlay
from .fundus import DataError, decode_image, encode_png, preprocessed_image

MAX_UPLOAD_BYTES = 20 * 1024 * 1024
PREDICTION_LOG_LIMIT = 10_000


@dataclass
class ServiceConfig:
    model_dir: Path
    feedback_path: Path
    admin_token: str = ""
    ig_steps: int = 50
    retain_images: bool = False
    static_dir: Optional[Path] = None

    @classmethod
    def from_file(cls, path) -> "ServiceConfig":
        with open(path) as fh:
            raw = json.load(fh)
        try:
            return cls(
                model_dir=Path(raw["model_dir"]),
                feedback_path=Path(raw["feedback_path"]),
                admin_token=raw.get("admin_token")
                or os.environ.get("RETGRADE_ADMIN_TOKEN", ""),
                ig_steps=int(raw.get("ig_steps", 50)),
                retain_images=bool(raw.get("retain_images", False)),
                static_dir=Path(raw["static_dir"]) if raw.get("static_dir") else None,
            )
        except KeyError as exc:
            raise ValueError(f"service config missing key: {exc}") from exc


class FeedbackStore:
    """Append-only NDJSON store; record_ids strictly increase across restarts."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: list[dict] = []
        self._next_id = 1
        if self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    self._records.append(record)
                    self._next_id = max(self._next_id, record["record_id"] + 1)
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, **fields) -> dict:
        with self._lock:
            record = {"record_id": self._next_id, **fields}
            self._next_id += 1
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records.append(record)
            return record

    def since(self, since_id: int) -> list[dict]:
        with self._lock:
            return [r for r in self._records if r["record_id"] > since_id]

    def count(self) -> int:
        with self._lock:
            return len(self._records)


@dataclass
class RegistryEntry:
    model_id: str
    checkpoint_path: Path
    model: object


class ModelRegistry:
    """Checkpoint store with exactly one active model; swaps are atomic."""

    def __init__(self, model_dir):
        self.dir = Path(model_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._entries: dict[str, RegistryEntry] = {}
        self._active: Optional[RegistryEntry] = None
        for path in sorted(self.dir.glob("*.ckpt")):
            model_id = path.stem
            try:
                loaded = model_mod.load(path, model_id=model_id)
            except model_mod.CheckpointError:
                continue
            self._entries[model_id] = RegistryEntry(model_id, path, loaded)
        marker = self.dir / "active"
        if marker.exists():
            wanted = marker.read_text().strip()
            if wanted in self._entries:
                self._active = self._entries[wanted]
        if self._active is None and self._entries:
            self._active = next(iter(self._entries.values()))
            self._write_marker(self._active.model_id)

    def _write_marker(self, model_id: str) -> None:
        tmp = self.dir / "active.tmp"
        tmp.write_text(model_id)
        tmp.replace(self.dir / "active")

    def add(self, model_id: str, checkpoint_bytes: bytes) -> None:
        loaded = model_mod.load_bytes(checkpoint_bytes, model_id=model_id,
                                      origin=model_id)  # validates before mutation
        with self._lock:
            if model_id in self._entries:
                raise KeyError(model_id)
            path = self.dir / f"{model_id}.ckpt"
            path.write_bytes(checkpoint_bytes)
            self._entries[model_id] = RegistryEntry(model_id, path, loaded)

    def activate(self, model_id: str) -> None:
        with self._lock:
            entry = self._entries.get(model_id)
            if entry is None:
                raise KeyError(model_id)
            self._write_marker(model_id)
            self._active = entry  # single reference swap: in-flight work keeps the old one

    def active(self) -> Optional[RegistryEntry]:
        return self._active

    def list(self) -> list[dict]:
        with self._lock:
            active_id = self._active.model_id if self._active else None
            return [
                {"model_id": e.model_id, "active": e.model_id == active_id}
                for e in self._entries.values()
            ]


def _error(status: int, code: str, message: str, request_id: str) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"error": {"code": code, "message": message}, "request_id": request_id},
    )


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="retgrade", docs_url=None, redoc_url=None)
    registry = ModelRegistry(config.model_dir)
    feedback = FeedbackStore(config.feedback_path)
    predictions: OrderedDict[str, dict] = OrderedDict()
    predictions_lock = threading.Lock()
    started = time.time()

    app.state.registry = registry
    app.state.feedback = feedback
    app.state.config = config

    def remember_prediction(request_id: str, entry: dict) -> None:
        with predictions_lock:
            predictions[request_id] = entry
            while len(predictions) > PREDICTION_LOG_LIMIT:
                predictions.popitem(last=False)

    def admin_guard(request: Request, request_id: str) -> Optional[JSONResponse]:
        if not config.admin_token:
            return None
        given = request.headers.get("Authorization", "")
        if given == f"Bearer {config.admin_token}":
            return None
        return _error(401, "unauthorized", "admin token required", request_id)

    @app.post("/api/predict")
    def predict_endpoint(
        image: UploadFile = File(...),
        ig_steps: Optional[int] = Query(default=None),
        include_overlay: bool = Query(default=True),
    ):
        request_id = str(uuid.uuid4())
        entry = registry.active()
        if entry is None:
            return _error(503, "no_active_model", "no model is active", request_id)
        steps = ig_steps if ig_steps is not None else config.ig_steps
        if steps < 1 or steps > 2000:
            return _error(422, "invalid_parameter",
                          f"ig_steps must be in [1, 2000], got {steps}", request_id)
        data = image.file.read(MAX_UPLOAD_BYTES + 1)
        if len(data) > MAX_UPLOAD_BYTES:
            return _error(400, "too_large", "image exceeds 20 MB", request_id)
        try:
            img = decode_image(data)
        except DataError as exc:
            return _error(400, "bad_image", str(exc), request_id)
        try:
            mdl = entry.model
            result = model_mod.predict(mdl, img)
            overlay_b64 = None
            completeness_gap = None
            if include_overlay:
                mask = integrated_gradients(mdl, img, IGConfig(steps=steps))
                base = preprocessed_image(img, size=mdl.config.input_size)
                overlay_b64 = base64.b64encode(
                    encode_png(render_overlay(mask, base))).decode("ascii")
                completeness_gap = mask.completeness_gap
        except DataError as exc:
            return _error(400, "bad_image", str(exc), request_id)
        image_hash = hashlib.sha256(data).hexdigest()
        remember_prediction(request_id, {
            "image_sha256": image_hash,
            "model_id": result.model_id,
            "grade": result.grade,
            "probabilities": list(result.probabilities),
            "image_bytes": data if config.retain_images else None,
        })
        return {
            "request_id": request_id,
            "grade": result.grade,
            "probabilities": list(result.probabilities),
            "model_id": result.model_id,
            "overlay_png": overlay_b64,
            "completeness_gap": completeness_gap,
        }

    @app.post("/api/feedback")
    def feedback_endpoint(payload: dict):
        request_id = str(uuid.uuid4())
        pred_id = payload.get("request_id")
        grade = payload.get("clinician_grade")
        if not isinstance(grade, int) or not 0 <= grade <= 4:
            return _error(422, "invalid_grade",
                          f"clinician_grade must be an integer in [0,4], got {grade!r}",
                          request_id)
        with predictions_lock:
            pred = predictions.get(pred_id)
        if pred is None:
            return _error(404, "unknown_request",
                          f"no logged prediction for request_id {pred_id!r}", request_id)
        record = feedback.append(
            timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            image_sha256=pred["image_sha256"],
            model_id=pred["model_id"],
            predicted_grade=pred["grade"],
            probabilities=pred["probabilities"],
            clinician_grade=grade,
            prediction_request_id=pred_id,
        )
        return JSONResponse(status_code=201, content={
            "request_id": request_id,
            "record_id": record["record_id"],
        })

    @app.get("/api/feedback")
    def feedback_export(since_id: int = Query(default=0)):
        request_id = str(uuid.uuid4())
        return {"request_id": request_id, "records": feedback.since(since_id)}

    @app.get("/api/models")
    def list_models(request: Request):
        request_id = str(uuid.uuid4())
        denied = admin_guard(request, request_id)
        if denied is not None:
            return denied
        return {"request_id": request_id, "models": registry.list()}

    @app.post("/api/models")
    def upload_model(request: Request, checkpoint: UploadFile = File(...),
                     model_id: str = Form(...)):
        request_id = str(uuid.uuid4())
        denied = admin_guard(request, request_id)
        if denied is not None:
            return denied
        if not model_id or "/" in model_id or model_id.startswith("."):
            return _error(422, "invalid_model_id",
                          f"model_id {model_id!r} is not a valid name", request_id)
        data = checkpoint.file.read()
        try:
            registry.add(model_id, data)
        except model_mod.CheckpointError as exc:
            return _error(400, "invalid_checkpoint", str(exc), request_id)
        except KeyError:
            return _error(409, "duplicate_model", f"model {model_id!r} already exists",
                          request_id)
        return JSONResponse(status_code=201, content={
            "request_id": request_id, "model_id": model_id, "active": False,
        })

    @app.post("/api/models/{model_id}/activate")
    def activate_model(model_id: str, request: Request):
        request_id = str(uuid.uuid4())
        denied = admin_guard(request, request_id)
        if denied is not None:
            return denied
        try:
            registry.activate(model_id)
        except KeyError:
            return _error(404, "unknown_model", f"no model {model_id!r}", request_id)
        return {"request_id": request_id, "model_id": model_id, "active": True}

    @app.get("/api/health")
    def health():
        request_id = str(uuid.uuid4())
        entry = registry.active()
        return {
            "request_id": request_id,
            "status": "ok" if entry is not None else "degraded",
            "active_model_id": entry.model_id if entry else None,
            "uptime_seconds": time.time() - started,
            "feedback_count": feedback.count(),
        }

    if config.static_dir is not None and Path(config.static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(config.static_dir), html=True),
                  name="webui")

    return app
