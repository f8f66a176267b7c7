"""Websocket front door for live teleoperation sessions.

A single sim thread owns the session and advances it at wall pace;
websocket handlers exchange JSON frames with it through queues, so command
handling stays deterministic relative to tick index. One client may hold
the control token; everyone else observes.
"""

from __future__ import annotations

import asyncio
import json
import os
import queue
import threading
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import HTMLResponse
from fastapi.staticfiles import StaticFiles

from .intervention import record_to_log
from .robot import SIM_DT
from .teleop import DEFAULT_PORT, SessionConfig, TeleopSession

CONTROL_COMMANDS = {"drive", "take_control", "release_control", "mark_begin", "mark_end", "save_record"}

_FALLBACK_PAGE = """<!doctype html>
<html><head><title>navtune teleop</title></head>
<body><h1>navtune teleop server</h1>
<p>The browser console has not been built. Build it with
<code>npm run build</code> in <code>frontend/</code>, or connect a websocket
client to <code>/ws</code>.</p></body></html>
"""


@dataclass
class SessionHost:
    """Owns the session thread and fans frames out to connected clients."""

    session: TeleopSession
    log_dir: str | None = None
    speed: float = 1.0
    commands: "queue.Queue[tuple[int, dict]]" = field(default_factory=queue.Queue)
    clients: dict = field(default_factory=dict)
    controller_id: int | None = None
    _next_client: int = 0
    _stop: threading.Event = field(default_factory=threading.Event)
    _saved_records: int = 0

    def attach(self) -> tuple[int, "queue.Queue[dict]"]:
        cid = self._next_client
        self._next_client += 1
        out: "queue.Queue[dict]" = queue.Queue()
        self.clients[cid] = out
        return cid, out

    def detach(self, cid: int) -> None:
        self.clients.pop(cid, None)
        if self.controller_id == cid:
            self.controller_id = None
            self.commands.put((cid, {"kind": "release_control"}))

    def broadcast(self, frames: list[dict]) -> None:
        for frame in frames:
            for out in self.clients.values():
                out.put(frame)

    def send_to(self, cid: int, frames: list[dict]) -> None:
        out = self.clients.get(cid)
        if out is not None:
            for frame in frames:
                out.put(frame)

    def _authorize(self, cid: int, cmd: dict) -> str | None:
        kind = cmd.get("kind")
        if kind == "take_control":
            if self.controller_id is None or self.controller_id == cid:
                self.controller_id = cid
                return None
            return "another client holds the control token"
        if kind == "release_control":
            if self.controller_id == cid:
                self.controller_id = None
            return None
        if kind in CONTROL_COMMANDS and self.controller_id != cid:
            return "command requires the control token"
        return None

    def run(self) -> None:
        """Sim thread body: apply queued commands at tick boundaries, step
        at wall pace while running."""
        period = SIM_DT / max(self.speed, 1e-6)
        next_deadline = time.monotonic()
        while not self._stop.is_set():
            try:
                while True:
                    cid, cmd = self.commands.get_nowait()
                    denial = self._authorize(cid, cmd)
                    if denial is not None:
                        self.send_to(cid, [self.session._error(denial)])
                        continue
                    frames = self.session.handle(cmd)
                    self.broadcast(frames)
                    self._flush_new_records()
            except queue.Empty:
                pass
            if self.session.running:
                self.broadcast(self.session.step())
                next_deadline += period
                delay = next_deadline - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_deadline = time.monotonic()
            else:
                next_deadline = time.monotonic()
                time.sleep(0.01)

    def _flush_new_records(self) -> None:
        if self.log_dir is None:
            return
        while self._saved_records < len(self.session.records):
            record = self.session.records[self._saved_records]
            name = f"intervention_{record.context_id:03d}_{record.itype.value}.jsonl"
            os.makedirs(self.log_dir, exist_ok=True)
            with open(os.path.join(self.log_dir, name), "w", encoding="ascii") as fh:
                fh.write(record_to_log(record))
            self._saved_records += 1

    def stop(self) -> None:
        self._stop.set()


def create_app(config: SessionConfig, *, log_dir: str | None = None, speed: float = 1.0) -> FastAPI:
    app = FastAPI(title="navtune teleop")
    host = SessionHost(session=TeleopSession(config), log_dir=log_dir, speed=speed)
    app.state.host = host

    thread = threading.Thread(target=host.run, name="sim-loop", daemon=True)

    @app.on_event("startup")
    def _start() -> None:
        thread.start()

    @app.on_event("shutdown")
    def _shutdown() -> None:
        host.stop()

    @app.get("/health")
    def health() -> dict:
        return {
            "ok": True,
            "tick": host.session.tick,
            "running": host.session.running,
            "records": len(host.session.records),
        }

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket) -> None:
        await ws.accept()
        cid, out = host.attach()
        host.send_to(cid, [host.session.hello(), host.session.state_frame()])
        loop = asyncio.get_event_loop()
        try:

            async def pump_out():
                # Polled gets: a blocking get would pin the executor thread
                # and make task cancellation hang the close handshake.
                while True:
                    try:
                        frame = await loop.run_in_executor(None, out.get, True, 0.2)
                    except queue.Empty:
                        continue
                    await ws.send_text(json.dumps(frame, separators=(",", ":")))

            sender = asyncio.ensure_future(pump_out())
            while True:
                raw = await ws.receive_text()
                try:
                    cmd = json.loads(raw)
                    if not isinstance(cmd, dict):
                        raise ValueError("frame must be a JSON object")
                except ValueError as err:
                    host.send_to(cid, [host.session._error(f"malformed frame: {err}")])
                    continue
                host.commands.put((cid, cmd))
        except WebSocketDisconnect:
            pass
        finally:
            sender.cancel()
            host.detach(cid)

    static_dir = os.environ.get(
        "NAVTUNE_CONSOLE_DIST",
        os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), "frontend", "dist"),
    )
    if os.path.isdir(static_dir):
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="console")
    else:

        @app.get("/")
        def index() -> HTMLResponse:
            return HTMLResponse(_FALLBACK_PAGE)

    return app


def serve(
    config: SessionConfig,
    *,
    port: int = DEFAULT_PORT,
    host: str = "127.0.0.1",
    log_dir: str | None = None,
    speed: float = 1.0,
) -> None:
    import uvicorn

    app = create_app(config, log_dir=log_dir, speed=speed)
    uvicorn.run(app, host=host, port=port, log_level="warning")
