"""HTTP session service: live click-to-segment over the cascade.

Sessions hold one interactive episode each.  Every click runs a full
interactive step and returns the binarized mask (run-length encoded,
row-major, counts alternating background/foreground starting with
background), the zoom region used (so a client can draw the intention
box), the step counter, and a live IoU when the scene was generated
server-side and its ground truth is known.

Per-session mutation is serialized with a lock, so concurrent clicks on
one session queue rather than interleave.  Sessions expire after an idle
TTL.  Replaying the same clicks through the library directly yields
bit-identical masks (the service adds no randomness).
"""

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from .cascade import CascadeConfig, SessionState, interactive_step
from .clicks import Click
from .data import SceneConfig, generate_scene
from .errors import (
    DataGenerationError, DuplicateClickError, EmptyForegroundError,
    OutOfBoundsClickError,
)
from .evalbench import iou as mask_iou
from .model import ArchConfig, init_params, load_bundle

Array = np.ndarray

MAX_SIDE = 1024


class CreateBody(BaseModel):
    image_png_base64: Optional[str] = None
    generate: Optional[dict] = None


class ClickBody(BaseModel):
    row: int
    col: int
    polarity: str = Field(pattern="^(positive|negative)$")


def rle_encode(mask: Array) -> dict:
    """Row-major run-length encoding; counts alternate runs of 0s and 1s,
    beginning with the 0-run (possibly of length zero)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    counts = []
    current, run = False, 0
    for v in flat:
        if v == current:
            run += 1
        else:
            counts.append(run)
            current, run = v, 1
    counts.append(run)
    return {"counts": counts, "order": "row-major",
            "height": int(mask.shape[0]), "width": int(mask.shape[1])}


def rle_decode(payload: dict) -> Array:
    h, w = payload["height"], payload["width"]
    flat = np.zeros(h * w, dtype=bool)
    pos, value = 0, False
    for run in payload["counts"]:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    if pos != h * w:
        raise ValueError(f"rle covers {pos} pixels, mask has {h * w}")
    return flat.reshape(h, w)


@dataclass
class _Session:
    state: SessionState
    history: list[SessionState] = field(default_factory=list)
    gt: Optional[Array] = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    created: float = field(default_factory=time.time)
    last_active: float = field(default_factory=time.time)
    max_history: int = 20


def _pad_to_stride(image: Array, stride: int = 4) -> Array:
    _, h, w = image.shape
    ph = (-h) % stride
    pw = (-w) % stride
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return image


def create_app(checkpoint=None, session_ttl: float = 3600.0,
               frontend_dir=None, seed: int = 0,
               cascade_cfg: CascadeConfig = CascadeConfig()):
    """Build the FastAPI app.

    ``checkpoint`` is a model bundle path; without one the service runs
    freshly initialized (untrained) networks, which is enough for API
    exploration and tests.
    """
    from fastapi import FastAPI, Response
    from fastapi.responses import JSONResponse
    from fastapi.staticfiles import StaticFiles

    if checkpoint is not None:
        coarse, fine = load_bundle(checkpoint)
    else:
        coarse = init_params(ArchConfig(), seed=seed)
        fine = init_params(ArchConfig(), seed=seed + 1)

    app = FastAPI(title="clickseg session service")
    sessions: dict[str, _Session] = {}
    store_lock = threading.Lock()

    def _sweep() -> None:
        now = time.time()
        with store_lock:
            for sid in [s for s, e in sessions.items()
                        if now - e.last_active > session_ttl]:
                del sessions[sid]

    def _get(sid: str) -> _Session | None:
        _sweep()
        with store_lock:
            entry = sessions.get(sid)
        if entry is not None:
            entry.last_active = time.time()
        return entry

    def _error(status: int, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"error": message})

    def _click_payload(entry: _Session) -> dict:
        state = entry.state
        mask = state.prev_prob >= 0.5
        payload = {
            "mask": rle_encode(mask),
            "prob_png_url": f"/sessions/{_sid_of(entry)}/prob.png",
            "step": state.step,
            "region": state.last_region.as_dict() if state.last_region else None,
            "iou": None,
        }
        if entry.gt is not None:
            payload["iou"] = mask_iou(mask, entry.gt)
        return payload

    sid_index: dict[int, str] = {}

    def _sid_of(entry: _Session) -> str:
        return sid_index[id(entry)]

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateBody):
        gt = None
        if body.generate is not None:
            spec = body.generate
            try:
                scene_cfg = SceneConfig(height=int(spec.get("height", 96)),
                                        width=int(spec.get("width", 144)))
                scene = generate_scene(int(spec.get("seed", 0)), scene_cfg,
                                       kind=spec.get("kind"))
            except (TypeError, ValueError, DataGenerationError) as exc:
                return _error(400, f"cannot generate scene: {exc}")
            image, gt = scene.image, scene.gt
        elif body.image_png_base64 is not None:
            from PIL import Image
            try:
                raw = base64.b64decode(body.image_png_base64, validate=True)
                with Image.open(io.BytesIO(raw)) as im:
                    im = im.convert("RGB")
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except Exception as exc:
                return _error(400, f"undecodable image: {type(exc).__name__}")
            if arr.shape[0] > MAX_SIDE or arr.shape[1] > MAX_SIDE:
                return _error(413, f"image exceeds {MAX_SIDE}x{MAX_SIDE}")
            image = _pad_to_stride(arr.transpose(2, 0, 1))
        else:
            return _error(400, "provide image_png_base64 or generate")

        entry = _Session(state=SessionState.new(image), gt=gt)
        sid = uuid.uuid4().hex
        with store_lock:
            sessions[sid] = entry
            sid_index[id(entry)] = sid
        return {"session_id": sid, "width": image.shape[2], "height": image.shape[1]}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        entry = _get(sid)
        if entry is None:
            return _error(404, "unknown session")
        return {"session_id": sid, "width": entry.state.width,
                "height": entry.state.height, "step": entry.state.step,
                "clicks": [{"row": c.row, "col": c.col, "polarity": c.polarity,
                            "step": c.step} for c in entry.state.clicks],
                "has_ground_truth": entry.gt is not None}

    @app.post("/sessions/{sid}/clicks")
    def add_click(sid: str, body: ClickBody):
        entry = _get(sid)
        if entry is None:
            return _error(404, "unknown session")
        click = Click(row=body.row, col=body.col,
                      positive=body.polarity == "positive",
                      step=entry.state.step + 1)
        with entry.lock:
            try:
                _, new_state = interactive_step(entry.state, click, coarse,
                                                fine, cascade_cfg)
            except DuplicateClickError as exc:
                return _error(409, str(exc))
            except OutOfBoundsClickError as exc:
                return _error(422, str(exc))
            entry.history.append(entry.state)
            if len(entry.history) > entry.max_history:
                entry.history.pop(0)
            entry.state = new_state
            return _click_payload(entry)

    @app.post("/sessions/{sid}/undo")
    def undo(sid: str):
        entry = _get(sid)
        if entry is None:
            return _error(404, "unknown session")
        with entry.lock:
            if not entry.history:
                return _error(409, "nothing to undo")
            entry.state = entry.history.pop()
            return _click_payload(entry)

    @app.delete("/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        with store_lock:
            if sid not in sessions:
                return _error(404, "unknown session")
            entry = sessions.pop(sid)
            sid_index.pop(id(entry), None)
        return Response(status_code=204)

    @app.get("/sessions/{sid}/prob.png")
    def prob_png(sid: str):
        entry = _get(sid)
        if entry is None:
            return _error(404, "unknown session")
        from PIL import Image
        u8 = np.rint(np.clip(entry.state.prev_prob, 0, 1) * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(u8, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/sessions/{sid}/image.png")
    def image_png(sid: str):
        entry = _get(sid)
        if entry is None:
            return _error(404, "unknown session")
        from PIL import Image
        u8 = np.rint(entry.state.image * 255).astype(np.uint8).transpose(1, 2, 0)
        buf = io.BytesIO()
        Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app


def default_frontend_dir():
    """The built UI bundle, when present next to the package checkout."""
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None
