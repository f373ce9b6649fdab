"""Interactive synthesis service.

Two bindings share one deterministic render path:

* A persistent TCP session protocol: every message is a 4-byte big-endian
  length followed by a UTF-8 JSON object. Clients send PoseRequest messages
  {"type": "pose", "position": [x,y,z], "yaw"/"pitch"/"roll": rad,
   "output": "equirect"|"perspective", "fov_deg"/"width"/"height",
   "quality": "native"|"low"|"medium"|"high", "channel": "color"|"depth",
   "id": anything} and {"type": "health"}. The server replies
  {"type": "frame", "seq", "request_id", "latency_ms", "hole_fraction",
   "width", "height", "channel", "image_b64"} or {"type": "health", ...} or
  {"type": "error", "message", "request_id"} (the session stays open).
  Per session at most one synthesis is in flight; a newer pose request
  replaces a queued one (latest-wins) and sequence numbers strictly increase.

* A stateless HTTP binding for browsers: GET /health (JSON), POST /frame
  with the PoseRequest JSON body returning image/png plus X-Sequence,
  X-Latency-Ms, X-Hole-Fraction and X-Request-Id headers, and GET / serving
  the viewer's static files when a directory is configured.

The dataset is an immutable snapshot loaded once; concurrent sessions only
read it, so responses are bit-identical to the offline CLI for equal poses.
"""

from __future__ import annotations

import base64
import http.server
import json
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ImageDims, Pose, rotation_yaw_pitch_roll
from .io import LoadedFrame, encode_png, grayscale_png_bytes, load_frames, load_manifest
from .rasters import dims_of
from .synthesis import SynthesisConfig, perspective_view, synthesize_view

log = logging.getLogger(__name__)

TIERS = {
    "low": ImageDims(512, 256),
    "medium": ImageDims(1024, 512),
    "high": ImageDims(2048, 1024),
}
MAX_MESSAGE_BYTES = 1 << 20
MAX_PERSPECTIVE_SIDE = 4096


class RequestError(ValueError):
    """Malformed request; reported to the client, session preserved."""


@dataclass
class RenderedFrame:
    png: bytes
    width: int
    height: int
    latency_ms: float
    hole_fraction: float
    channel: str


class Renderer:
    """Shared deterministic render path for both protocol bindings."""

    def __init__(self, frames: list[LoadedFrame], cfg: SynthesisConfig | None = None,
                 threads: int = 1):
        usable = [f for f in frames if f.refined is not None and f.rgb is not None]
        if not usable:
            raise ValueError("manifest has no frames with refined depth")
        self.frames = usable
        self.cfg = cfg or SynthesisConfig()
        self.threads = threads
        self.native_dims = dims_of(usable[0].rgb)
        self.memory_bytes = sum(
            (f.rgb.nbytes if f.rgb is not None else 0)
            + (f.refined.nbytes if f.refined is not None else 0)
            for f in usable)

    def health(self) -> dict:
        return {
            "type": "health",
            "frames": len(self.frames),
            "width": self.native_dims.width,
            "height": self.native_dims.height,
            "memory_bytes": int(self.memory_bytes),
            "tiers": {"native": list(self.native_dims),
                      **{k: list(v) for k, v in TIERS.items()}},
        }

    def render(self, req: dict) -> RenderedFrame:
        position = req.get("position")
        if (not isinstance(position, (list, tuple)) or len(position) != 3
                or not all(isinstance(v, (int, float)) and np.isfinite(v)
                           for v in position)):
            raise RequestError("position must be 3 finite numbers")
        angles = []
        for key in ("yaw", "pitch", "roll"):
            v = req.get(key, 0.0)
            if not isinstance(v, (int, float)) or not np.isfinite(v):
                raise RequestError(f"{key} must be a finite number")
            angles.append(float(v))
        quality = req.get("quality", "native")
        if quality == "native":
            dims = self.native_dims
        elif quality in TIERS:
            dims = TIERS[quality]
        else:
            raise RequestError(f"unknown quality tier {quality!r}; "
                               f"choices: native, {', '.join(TIERS)}")
        output = req.get("output", "equirect")
        if output not in ("equirect", "perspective"):
            raise RequestError("output must be 'equirect' or 'perspective'")
        channel = req.get("channel", "color")
        if channel not in ("color", "depth"):
            raise RequestError("channel must be 'color' or 'depth'")

        pose = Pose(np.asarray(position, dtype=np.float64),
                    rotation_yaw_pitch_roll(*angles))
        start = time.perf_counter()
        result = synthesize_view(pose, self.frames, self.cfg, dims=dims,
                                 threads=self.threads)
        if channel == "depth":
            raster = (1.0 / (1.0 + np.where(np.isfinite(result.depth),
                                            result.depth, np.inf)))
        else:
            raster = result.rgb
        if output == "perspective":
            fov = float(req.get("fov_deg", 90.0))
            pw = int(req.get("width", 960))
            ph = int(req.get("height", 540))
            if not (0 < fov < 180):
                raise RequestError("fov_deg must be in (0, 180)")
            if not (0 < pw <= MAX_PERSPECTIVE_SIDE and 0 < ph <= MAX_PERSPECTIVE_SIDE):
                raise RequestError("perspective width/height out of bounds")
            raster = perspective_view(raster, *angles, fov_deg=fov,
                                      width=pw, height=ph)
            png = (encode_png(raster) if channel == "color"
                   else grayscale_png_bytes(raster))
            out_w, out_h = pw, ph
        else:
            png = (encode_png(raster) if channel == "color"
                   else grayscale_png_bytes(raster))
            out_w, out_h = dims.width, dims.height
        latency_ms = (time.perf_counter() - start) * 1000.0
        # viewer-facing hole fraction counts every pixel without real scene
        # coverage, so far out-of-bounds poses report high values instead of 0
        holes = float(np.mean(result.hole_mask | result.uncovered_mask))
        return RenderedFrame(png=png, width=out_w, height=out_h,
                             latency_ms=latency_ms, hole_fraction=holes,
                             channel=channel)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_message(sock: socket.socket) -> dict | None:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_MESSAGE_BYTES:
        raise ConnectionError(f"message of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        return None
    return json.loads(payload.decode("utf-8"))


def write_message(sock: socket.socket, msg: dict) -> None:
    payload = json.dumps(msg).encode("utf-8")
    sock.sendall(struct.pack(">I", len(payload)) + payload)


class _Session(threading.Thread):
    """One client connection: a reader plus this synthesis worker.

    The reader parks the newest pose request in a one-deep slot; the worker
    drains it, so a burst of requests collapses to the latest.
    """

    def __init__(self, sock: socket.socket, renderer: Renderer, name: str):
        super().__init__(daemon=True, name=f"session-{name}")
        self.sock = sock
        self.renderer = renderer
        self.cond = threading.Condition()
        self.pending: dict | None = None
        self.closed = False
        self.send_lock = threading.Lock()
        self.seq = 0

    def send(self, msg: dict) -> None:
        with self.send_lock:
            write_message(self.sock, msg)

    def reader(self) -> None:
        try:
            while True:
                try:
                    msg = read_message(self.sock)
                except (json.JSONDecodeError, UnicodeDecodeError) as e:
                    self.send({"type": "error", "message": f"malformed message: {e}"})
                    continue
                if msg is None:
                    break
                mtype = msg.get("type")
                if mtype == "health":
                    self.send(self.renderer.health())
                elif mtype == "pose":
                    with self.cond:
                        if self.pending is not None:
                            log.debug("superseding queued pose request")
                        self.pending = msg
                        self.cond.notify()
                else:
                    self.send({"type": "error",
                               "message": f"unknown message type {mtype!r}"})
        except (ConnectionError, OSError) as e:
            log.debug("session reader closing: %s", e)
        finally:
            with self.cond:
                self.closed = True
                self.cond.notify()

    def run(self) -> None:
        reader = threading.Thread(target=self.reader, daemon=True,
                                  name=self.name + "-reader")
        reader.start()
        try:
            while True:
                with self.cond:
                    while self.pending is None and not self.closed:
                        self.cond.wait()
                    if self.pending is None and self.closed:
                        break
                    req = self.pending
                    self.pending = None
                try:
                    frame = self.renderer.render(req)
                except RequestError as e:
                    self.send({"type": "error", "message": str(e),
                               "request_id": req.get("id")})
                    continue
                except Exception as e:
                    log.exception("render failed")
                    self.send({"type": "error", "message": f"render failed: {e}",
                               "request_id": req.get("id")})
                    continue
                self.seq += 1
                self.send({
                    "type": "frame",
                    "seq": self.seq,
                    "request_id": req.get("id"),
                    "latency_ms": round(frame.latency_ms, 3),
                    "hole_fraction": frame.hole_fraction,
                    "width": frame.width,
                    "height": frame.height,
                    "channel": frame.channel,
                    "image_b64": base64.b64encode(frame.png).decode("ascii"),
                })
        except (ConnectionError, OSError) as e:
            log.debug("session worker closing: %s", e)
        finally:
            try:
                self.sock.close()
            except OSError:
                pass


class TcpServer(threading.Thread):
    """Accept loop for the session protocol."""

    def __init__(self, renderer: Renderer, host: str = "127.0.0.1", port: int = 0):
        super().__init__(daemon=True, name="tcp-server")
        self.renderer = renderer
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(8)
        self.host, self.port = self.sock.getsockname()[:2]
        self._stopping = False

    def run(self) -> None:
        n = 0
        while not self._stopping:
            try:
                conn, addr = self.sock.accept()
            except OSError:
                break
            n += 1
            log.info("session %d from %s", n, addr)
            _Session(conn, self.renderer, str(n)).start()

    def stop(self) -> None:
        self._stopping = True
        try:
            self.sock.close()
        except OSError:
            pass


_STATIC_TYPES = {".html": "text/html; charset=utf-8",
                 ".js": "text/javascript; charset=utf-8",
                 ".css": "text/css; charset=utf-8",
                 ".map": "application/json",
                 ".png": "image/png",
                 ".svg": "image/svg+xml"}

_PLACEHOLDER = b"""<!doctype html><title>panosynth</title>
<h1>panosynth service</h1>
<p>GET /health for dataset stats; POST /frame with a PoseRequest JSON body
for a PNG frame. No viewer bundle is configured (serve --static DIR).</p>
"""


def _http_handler(renderer: Renderer, static_dir: Path | None, seq_counter):
    class Handler(http.server.BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _reply(self, code: int, body: bytes, ctype: str, extra: dict | None = None):
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            for k, v in (extra or {}).items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(body)

        def _reply_json(self, code: int, doc: dict):
            self._reply(code, json.dumps(doc).encode("utf-8"), "application/json")

        def do_GET(self):
            if self.path == "/health":
                self._reply_json(200, renderer.health())
                return
            path = "/index.html" if self.path in ("", "/") else self.path
            if static_dir is not None:
                target = (static_dir / path.lstrip("/")).resolve()
                if (target.is_file()
                        and str(target).startswith(str(static_dir.resolve()))
                        and target.suffix in _STATIC_TYPES):
                    self._reply(200, target.read_bytes(), _STATIC_TYPES[target.suffix])
                    return
            if self.path in ("", "/"):
                self._reply(200, _PLACEHOLDER, "text/html; charset=utf-8")
                return
            self._reply_json(404, {"error": f"no such path {self.path}"})

        def do_POST(self):
            if self.path != "/frame":
                self._reply_json(404, {"error": f"no such path {self.path}"})
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                if length > MAX_MESSAGE_BYTES:
                    raise RequestError("request body too large")
                req = json.loads(self.rfile.read(length).decode("utf-8"))
                frame = renderer.render(req)
            except (RequestError, json.JSONDecodeError, UnicodeDecodeError) as e:
                self._reply_json(400, {"error": str(e)})
                return
            with seq_counter["lock"]:
                seq_counter["value"] += 1
                seq = seq_counter["value"]
            self._reply(200, frame.png, "image/png", {
                "X-Sequence": str(seq),
                "X-Latency-Ms": f"{frame.latency_ms:.3f}",
                "X-Hole-Fraction": f"{frame.hole_fraction:.6f}",
                "X-Request-Id": str(req.get("id", "")),
                "Cache-Control": "no-store",
            })

    return Handler


class HttpServer:
    def __init__(self, renderer: Renderer, host: str = "127.0.0.1", port: int = 0,
                 static_dir: str | Path | None = None):
        counter = {"value": 0, "lock": threading.Lock()}
        handler = _http_handler(renderer,
                                Path(static_dir) if static_dir else None, counter)
        self.httpd = http.server.ThreadingHTTPServer((host, port), handler)
        self.host, self.port = self.httpd.server_address[:2]
        self.thread = threading.Thread(target=self.httpd.serve_forever,
                                       daemon=True, name="http-server")

    def start(self) -> None:
        self.thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


def serve(manifest_path: str | Path, bind: str = "127.0.0.1:7077",
          http_bind: str = "127.0.0.1:7078", threads: int = 1,
          static_dir: str | Path | None = None,
          cfg: SynthesisConfig | None = None, block: bool = True):
    """Load the dataset and run both bindings until interrupted."""
    manifest = load_manifest(manifest_path)
    frames = load_frames(manifest, need=("rgb", "refined"))
    renderer = Renderer(frames, cfg, threads)
    host, port = bind.rsplit(":", 1)
    tcp = TcpServer(renderer, host, int(port))
    hhost, hport = http_bind.rsplit(":", 1)
    http_srv = HttpServer(renderer, hhost, int(hport), static_dir)
    tcp.start()
    http_srv.start()
    log.info("serving %d frames at %dx%d; tcp %s:%d http %s:%d",
             len(renderer.frames), renderer.native_dims.width,
             renderer.native_dims.height, tcp.host, tcp.port,
             http_srv.host, http_srv.port)
    if not block:
        return tcp, http_srv
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        log.info("shutting down")
    finally:
        tcp.stop()
        http_srv.stop()
    return None
