"""Websocket streaming service: one generation session per connection.

Frames flow through a bounded queue (64) between the generation worker
thread and the async sender, so a stalled client pauses generation for
its own session instead of dropping frames. Prompts arriving mid-stream
are queued and applied at the next segment end unless interrupt mode
forces an immediate transition.
"""

from __future__ import annotations

import asyncio
import hashlib
import queue
import threading
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .engine import Engine, GenerationConfig

FRAME_BUFFER = 64


def _model_hash(module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().numpy().tobytes())
    return h.hexdigest()[:16]


class SessionWorker(threading.Thread):
    """Runs one session's generation loop, pushing messages into the send queue."""

    def __init__(self, engine: Engine, outq: queue.Queue, seed: int, interrupt_mode: bool):
        super().__init__(daemon=True)
        self.engine = engine
        self.outq = outq
        self.seed = seed
        self.interrupt_mode = interrupt_mode
        self.controls: queue.Queue = queue.Queue()
        self.shutdown = threading.Event()

    def submit(self, msg: dict) -> None:
        self.controls.put(msg)

    def stop(self) -> None:
        self.shutdown.set()

    def _put(self, msg: dict) -> bool:
        while not self.shutdown.is_set():
            try:
                self.outq.put(msg, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _frame_messages(self, session, result, start_index: int):
        for i in range(result.frames.shape[0]):
            yield {
                "type": "frame",
                "session": session.session_id,
                "index": start_index + i,
                "joints": [[round(float(v), 6) for v in j] for j in result.joints[i]],
                "pose272": [float(v) for v in result.frames[i]],
            }

    def run(self) -> None:
        session = None
        segment_idx = 0
        while not self.shutdown.is_set():
            try:
                msg = self.controls.get(timeout=0.1)
            except queue.Empty:
                continue
            try:
                if msg["type"] == "prompt":
                    if session is None:
                        session = self.engine.start_session(msg["text"], seed=msg.get("seed", self.seed))
                    else:
                        self.engine.push_prompt(session, msg["text"])
                elif msg["type"] == "recompose":
                    if session is None:
                        self._put({"type": "error", "message": "recompose before any prompt"})
                        continue
                    keep = int(msg["segment"])
                    session, _prefix = self.engine.fork_from_prefix(
                        session, keep, msg["text"], seed=msg.get("seed", self.seed)
                    )
                    segment_idx = keep
                else:
                    self._put({"type": "error", "message": f"unknown control {msg['type']}"})
                    continue
            except (ValueError, RuntimeError) as e:
                self._put({"type": "error", "message": str(e)})
                continue

            start = session.frames_emitted
            self._put(
                {
                    "type": "segment_start",
                    "session": session.session_id,
                    "segment": segment_idx,
                    "text": session.text,
                    "start_frame": start,
                }
            )
            reason = None
            while not self.shutdown.is_set():
                if self.interrupt_mode and not self.controls.empty():
                    reason = "interrupt"
                    session.stopped, session.stop_reason = True, reason
                    break
                result = self.engine.step(session)
                if result.stopped:
                    reason = result.reason
                    break
                idx = session.frames_emitted - result.frames.shape[0]
                for frame_msg in self._frame_messages(session, result, idx):
                    if not self._put(frame_msg):
                        return
            if self.shutdown.is_set():
                return
            self._put(
                {
                    "type": "segment_end",
                    "session": session.session_id,
                    "segment": segment_idx,
                    "reason": reason,
                    "frames": session.frames_emitted - start,
                }
            )
            segment_idx += 1


def create_app(
    tae_path: str | Path | None = None,
    ar_path: str | Path | None = None,
    engine: Engine | None = None,
    cfg_scale: float = 4.0,
    stop_threshold: float | None = None,
    fps_pace: bool = False,
    interrupt: bool = False,
    seed: int = 0,
) -> FastAPI:
    if engine is None:
        from .backbone import load_ar
        from .tae import load_tae

        tae, tae_cfg = load_tae(tae_path)
        model, _ = load_ar(ar_path)
        threshold = stop_threshold if stop_threshold is not None else float(tae_cfg.get("stop_threshold", 1.0))
        engine = Engine(tae, model, GenerationConfig(cfg_scale=cfg_scale, stop_threshold=threshold))

    app = FastAPI(title="posestream")
    app.state.engine = engine

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "tae_hash": _model_hash(engine.tae),
            "ar_hash": _model_hash(engine.model),
        }

    @app.get("/skeleton")
    def skeleton():
        sk = engine.skeleton
        return {"parents": sk.parents.tolist(), "offsets": sk.offsets.tolist()}

    @app.websocket("/session")
    async def session_ws(ws: WebSocket):
        await ws.accept()
        try:
            ws_seed = int(ws.query_params.get("seed", seed))
        except ValueError:
            ws_seed = seed
        outq: queue.Queue = queue.Queue(maxsize=FRAME_BUFFER)
        worker = SessionWorker(engine, outq, ws_seed, interrupt)
        worker.start()
        loop = asyncio.get_running_loop()

        async def sender():
            try:
                while True:
                    msg = await loop.run_in_executor(None, outq.get)
                    if msg is None:
                        return
                    await ws.send_json(msg)
                    if fps_pace and msg.get("type") == "frame":
                        await asyncio.sleep(1.0 / 30.0)
            except Exception:
                return

        send_task = asyncio.create_task(sender())
        try:
            while True:
                try:
                    data = await ws.receive_json()
                except (ValueError, KeyError):
                    await loop.run_in_executor(
                        None, outq.put, {"type": "error", "message": "malformed message"}
                    )
                    continue
                if not isinstance(data, dict) or "type" not in data:
                    await loop.run_in_executor(
                        None, outq.put, {"type": "error", "message": "malformed message"}
                    )
                    continue
                kind = data["type"]
                if kind == "prompt":
                    if not str(data.get("text", "")).strip():
                        await loop.run_in_executor(
                            None, outq.put, {"type": "error", "message": "empty prompt"}
                        )
                        continue
                    worker.submit(data)
                elif kind == "recompose":
                    if "segment" not in data or not str(data.get("text", "")).strip():
                        await loop.run_in_executor(
                            None, outq.put, {"type": "error", "message": "recompose needs segment and text"}
                        )
                        continue
                    worker.submit(data)
                else:
                    await loop.run_in_executor(
                        None, outq.put, {"type": "error", "message": f"unknown type {kind}"}
                    )
        except WebSocketDisconnect:
            pass
        finally:
            worker.stop()
            worker.join(timeout=10)
            try:
                while True:
                    outq.get_nowait()
            except queue.Empty:
                pass
            try:
                outq.put_nowait(None)
            except queue.Full:
                pass
            await send_task

    return app
