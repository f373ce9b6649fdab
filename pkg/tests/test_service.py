"""Session protocol, latest-wins queuing, and the HTTP frame binding."""

import base64
import io as std_io
import json
import queue
import socket
import struct
import threading
import urllib.error
import urllib.request
from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from panosynth.geometry import Pose
from panosynth.io import encode_png, grayscale_png_bytes, load_frames, load_manifest
from panosynth.service import (TIERS, HttpServer, RenderedFrame, Renderer,
                               RequestError, TcpServer, _Session, read_message,
                               serve, write_message)
from panosynth.synthesis import synthesize_view


@pytest.fixture(scope="module")
def service_stack(tiny_fixture):
    manifest = load_manifest(tiny_fixture)
    frames = load_frames(manifest, need=("rgb", "refined"))
    renderer = Renderer(frames, threads=1)
    tcp = TcpServer(renderer)
    tcp.start()
    http_srv = HttpServer(renderer)
    http_srv.start()
    res = synthesize_view(Pose.identity((0.0, 0.0, 0.0)), renderer.frames,
                          renderer.cfg, dims=renderer.native_dims, threads=1)
    expected_png = encode_png(res.rgb)
    depth_raster = 1.0 / (1.0 + np.where(np.isfinite(res.depth), res.depth, np.inf))
    expected_depth_png = grayscale_png_bytes(depth_raster)
    yield renderer, tcp, http_srv, expected_png, expected_depth_png
    tcp.stop()
    http_srv.stop()


def _connect(tcp):
    sock = socket.create_connection((tcp.host, tcp.port), timeout=30)
    sock.settimeout(30)
    return sock


def _http(port, path, body=None, method=None):
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}{path}", data=body,
        method=method or ("POST" if body is not None else "GET"))
    try:
        with urllib.request.urlopen(req, timeout=60) as resp:
            return resp.status, dict(resp.headers), resp.read()
    except urllib.error.HTTPError as e:
        return e.code, dict(e.headers), e.read()


def _png_image(data: bytes) -> Image.Image:
    return Image.open(std_io.BytesIO(data))


def test_message_framing_roundtrip():
    a, b = socket.socketpair()
    try:
        write_message(a, {"type": "health", "n": 3})
        assert read_message(b) == {"type": "health", "n": 3}
        b.sendall(struct.pack(">I", (1 << 20) + 1))
        with pytest.raises(ConnectionError, match="exceeds"):
            read_message(a)
        b.close()
        assert read_message(a) is None
    finally:
        a.close()


class _StubRenderer:
    """Blocks each render on a per-request event so queue timing is exact."""

    def __init__(self):
        self.started = queue.Queue()
        self.release = defaultdict(threading.Event)
        self.rendered = []

    def health(self):
        return {"type": "health", "frames": 0}

    def render(self, req):
        rid = req.get("id")
        if rid == "boom":
            raise RuntimeError("kaput")
        self.rendered.append(rid)
        self.started.put(rid)
        assert self.release[rid].wait(20.0)
        return RenderedFrame(png=b"png" + str(rid).encode(), width=1, height=1,
                             latency_ms=1.0, hole_fraction=0.0, channel="color")


def test_session_latest_wins_supersedes_queued():
    srv, cli = socket.socketpair()
    stub = _StubRenderer()
    _Session(srv, stub, "t").start()
    try:
        write_message(cli, {"type": "pose", "position": [0, 0, 0], "id": 1})
        assert stub.started.get(timeout=20) == 1
        # worker is blocked inside request 1; these two park in the one-deep
        # slot and the health reply proves the reader consumed both
        write_message(cli, {"type": "pose", "position": [0, 0, 0], "id": 2})
        write_message(cli, {"type": "pose", "position": [0, 0, 0], "id": 3})
        write_message(cli, {"type": "health"})
        assert read_message(cli)["type"] == "health"
        stub.release[1].set()
        frame1 = read_message(cli)
        assert frame1["type"] == "frame"
        assert frame1["seq"] == 1 and frame1["request_id"] == 1
        assert base64.b64decode(frame1["image_b64"]) == b"png1"
        assert stub.started.get(timeout=20) == 3
        stub.release[3].set()
        frame3 = read_message(cli)
        assert frame3["seq"] == 2 and frame3["request_id"] == 3
        assert stub.rendered == [1, 3]
    finally:
        cli.close()


def test_session_survives_malformed_and_failed_requests():
    srv, cli = socket.socketpair()
    stub = _StubRenderer()
    _Session(srv, stub, "m").start()
    try:
        cli.sendall(struct.pack(">I", 7) + b"not-js{")
        err = read_message(cli)
        assert err["type"] == "error" and "malformed" in err["message"]
        write_message(cli, {"type": "bogus"})
        err = read_message(cli)
        assert err["type"] == "error" and "bogus" in err["message"]
        write_message(cli, {"type": "pose", "position": [0, 0, 0], "id": "boom"})
        err = read_message(cli)
        assert err["type"] == "error" and "render failed" in err["message"]
        assert err["request_id"] == "boom"
        stub.release[9].set()
        write_message(cli, {"type": "pose", "position": [0, 0, 0], "id": 9})
        frame = read_message(cli)
        assert frame["type"] == "frame" and frame["seq"] == 1
        assert frame["request_id"] == 9
    finally:
        cli.close()


def test_tcp_health(service_stack):
    renderer, tcp, _, _, _ = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "health"})
        health = read_message(cli)
        assert health["type"] == "health"
        assert health["frames"] == 9
        assert health["width"] == 64 and health["height"] == 32
        expected_mem = sum(f.rgb.nbytes + f.refined.nbytes for f in renderer.frames)
        assert health["memory_bytes"] == expected_mem
        assert health["tiers"]["native"] == [64, 32]
        assert health["tiers"]["low"] == [512, 256]
        assert health["tiers"]["medium"] == [1024, 512]
        assert health["tiers"]["high"] == [2048, 1024]
    finally:
        cli.close()


def test_tcp_frame_matches_offline_synthesis(service_stack):
    _, tcp, _, expected_png, _ = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "pose", "position": [0.0, 0.0, 0.0],
                            "quality": "native", "id": "cap"})
        frame = read_message(cli)
        assert frame["type"] == "frame"
        assert frame["seq"] == 1 and frame["request_id"] == "cap"
        assert frame["width"] == 64 and frame["height"] == 32
        assert frame["channel"] == "color"
        assert frame["latency_ms"] > 0
        assert frame["hole_fraction"] == 0.0
        assert base64.b64decode(frame["image_b64"]) == expected_png
    finally:
        cli.close()


def test_tcp_depth_channel(service_stack):
    _, tcp, _, _, expected_depth_png = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "pose", "position": [0.0, 0.0, 0.0],
                            "channel": "depth", "id": 2})
        frame = read_message(cli)
        data = base64.b64decode(frame["image_b64"])
        assert data == expected_depth_png
        img = _png_image(data)
        assert img.mode == "L"
        assert img.size == (64, 32)
    finally:
        cli.close()


def test_tcp_perspective_output(service_stack):
    _, tcp, _, _, _ = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "pose", "position": [0.0, 0.0, 0.0],
                            "output": "perspective", "fov_deg": 90.0,
                            "width": 48, "height": 27, "id": 3})
        frame = read_message(cli)
        assert frame["width"] == 48 and frame["height"] == 27
        img = _png_image(base64.b64decode(frame["image_b64"]))
        assert img.size == (48, 27)
        assert img.mode == "RGB"
    finally:
        cli.close()


def test_tcp_quality_tier_resizes(service_stack):
    _, tcp, _, _, _ = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "pose", "position": [0.0, 0.0, 0.0],
                            "quality": "low", "id": 4})
        frame = read_message(cli)
        assert frame["width"] == 512 and frame["height"] == 256
        img = _png_image(base64.b64decode(frame["image_b64"]))
        assert img.size == (512, 256)
    finally:
        cli.close()


def test_tcp_error_reply_keeps_session_open(service_stack):
    _, tcp, _, _, _ = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "pose", "position": [0.0, 0.0, 0.0],
                            "quality": "ultra", "id": 5})
        err = read_message(cli)
        assert err["type"] == "error"
        assert "quality" in err["message"] and err["request_id"] == 5
        write_message(cli, {"type": "pose", "position": [0.0, "x", 0.0], "id": 6})
        err = read_message(cli)
        assert err["type"] == "error" and "position" in err["message"]
        write_message(cli, {"type": "health"})
        assert read_message(cli)["type"] == "health"
    finally:
        cli.close()


def test_tcp_out_of_bounds_pose_served_with_high_holes(service_stack):
    _, tcp, _, _, _ = service_stack
    cli = _connect(tcp)
    try:
        write_message(cli, {"type": "pose", "position": [50.0, 0.0, 0.0], "id": 7})
        frame = read_message(cli)
        assert frame["type"] == "frame"
        assert frame["hole_fraction"] > 0.9
    finally:
        cli.close()


def test_tcp_burst_delivers_final_request_last(service_stack):
    _, tcp, _, _, _ = service_stack
    cli = _connect(tcp)
    try:
        for n in range(1, 7):
            write_message(cli, {"type": "pose",
                                "position": [0.05 * n, 0.0, 0.0], "id": n})
        seqs, last_rid = [], None
        while last_rid != 6:
            frame = read_message(cli)
            assert frame["type"] == "frame"
            seqs.append(frame["seq"])
            last_rid = frame["request_id"]
        assert len(seqs) <= 6
        assert all(a < b for a, b in zip(seqs, seqs[1:]))
    finally:
        cli.close()


def test_renderer_request_validation(service_stack):
    renderer = service_stack[0]
    bad = [
        ({"position": [0, 0]}, "position"),
        ({"position": "origin"}, "position"),
        ({"position": [0, 0, float("nan")]}, "position"),
        ({"position": [0, 0, 0], "yaw": "n"}, "yaw"),
        ({"position": [0, 0, 0], "pitch": float("inf")}, "pitch"),
        ({"position": [0, 0, 0], "quality": "ultra"}, "quality tier"),
        ({"position": [0, 0, 0], "output": "cube"}, "output"),
        ({"position": [0, 0, 0], "channel": "alpha"}, "channel"),
        ({"position": [0, 0, 0], "output": "perspective", "fov_deg": 0}, "fov"),
        ({"position": [0, 0, 0], "output": "perspective", "width": 0}, "width"),
        ({"position": [0, 0, 0], "output": "perspective", "height": 9999}, "height"),
    ]
    for req, needle in bad:
        with pytest.raises(RequestError, match=needle):
            renderer.render(req)


def test_renderer_requires_refined_depth(service_stack):
    renderer = service_stack[0]
    with pytest.raises(ValueError, match="refined"):
        Renderer([])
    bare = [replace(f, refined=None) for f in renderer.frames]
    with pytest.raises(ValueError, match="refined"):
        Renderer(bare)


def test_http_health_and_frame(service_stack):
    _, _, http_srv, expected_png, _ = service_stack
    status, _, body = _http(http_srv.port, "/health")
    assert status == 200
    health = json.loads(body)
    assert health["frames"] == 9 and health["tiers"]["high"] == [2048, 1024]

    req = json.dumps({"position": [0.0, 0.0, 0.0], "quality": "native",
                      "id": "req7"}).encode()
    status, headers, body = _http(http_srv.port, "/frame", body=req)
    assert status == 200
    assert headers["Content-Type"] == "image/png"
    assert body == expected_png
    assert headers["X-Request-Id"] == "req7"
    assert float(headers["X-Latency-Ms"]) > 0
    assert float(headers["X-Hole-Fraction"]) == 0.0
    first_seq = int(headers["X-Sequence"])

    status, headers, body = _http(http_srv.port, "/frame", body=req)
    assert status == 200 and body == expected_png
    assert int(headers["X-Sequence"]) > first_seq


def test_http_errors_and_placeholder(service_stack):
    _, _, http_srv, _, _ = service_stack
    status, _, body = _http(http_srv.port, "/frame", body=b"{not json")
    assert status == 400 and b"error" in body
    status, _, body = _http(http_srv.port, "/frame",
                            body=json.dumps({"position": [1, 2]}).encode())
    assert status == 400 and b"position" in body
    status, _, _ = _http(http_srv.port, "/elsewhere", body=b"{}")
    assert status == 404
    status, _, _ = _http(http_srv.port, "/missing.js")
    assert status == 404
    status, _, body = _http(http_srv.port, "/")
    assert status == 200 and b"panosynth" in body


def test_http_static_dir(service_stack, tmp_path):
    renderer = service_stack[0]
    (tmp_path / "index.html").write_text("<html>viewer shell</html>")
    (tmp_path / "app.js").write_text("console.log('hi')")
    (tmp_path / "notes.txt").write_text("not served")
    srv = HttpServer(renderer, static_dir=tmp_path)
    srv.start()
    try:
        status, headers, body = _http(srv.port, "/")
        assert status == 200 and b"viewer shell" in body
        assert headers["Content-Type"].startswith("text/html")
        status, headers, body = _http(srv.port, "/app.js")
        assert status == 200 and b"console" in body
        assert headers["Content-Type"].startswith("text/javascript")
        status, _, _ = _http(srv.port, "/notes.txt")
        assert status == 404
        status, _, _ = _http(srv.port, "/../secret")
        assert status == 404
    finally:
        srv.stop()


def test_serve_wiring(tiny_fixture, service_stack):
    expected_png = service_stack[3]
    tcp, http_srv = serve(tiny_fixture, bind="127.0.0.1:0",
                          http_bind="127.0.0.1:0", threads=2, block=False)
    try:
        cli = _connect(tcp)
        try:
            write_message(cli, {"type": "health"})
            assert read_message(cli)["frames"] == 9
            write_message(cli, {"type": "pose", "position": [0.0, 0.0, 0.0],
                                "id": 1})
            frame = read_message(cli)
            # two render threads must still be byte-identical to one
            assert base64.b64decode(frame["image_b64"]) == expected_png
        finally:
            cli.close()
        status, _, body = _http(http_srv.port, "/health")
        assert status == 200 and json.loads(body)["frames"] == 9
    finally:
        tcp.stop()
        http_srv.stop()
