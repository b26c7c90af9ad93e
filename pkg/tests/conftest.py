from __future__ import annotations

import random
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from camharvest.label_store import LabelStore
from camharvest.records import CameraSource, Detection, FrameRecord, VideoSegment


class FixtureOrigin:
    """Tiny HTTP origin serving a segment playlist, with deterministic
    injected request failures for robustness tests."""

    def __init__(self, n_segments: int = 6, frames_per_segment: int = 10,
                 failure_rate: float = 0.0, seed: int = 0):
        self.n_segments = n_segments
        self.frames_per_segment = frames_per_segment
        self.failure_rate = failure_rate
        self.rng = random.Random(seed)
        self.requests_seen = 0
        origin = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_GET(self):
                origin.requests_seen += 1
                if self.path == "/always500":
                    self.send_error(500)
                    return
                if origin.failure_rate > 0 and origin.rng.random() < origin.failure_rate:
                    # Alternate failure loci so the classifier sees both.
                    self.send_error(500 if origin.rng.random() < 0.5 else 404)
                    return
                if self.path == "/playlist.txt":
                    body = "\n".join(f"seg/{i:04d}.seg"
                                     for i in range(origin.n_segments)).encode()
                elif self.path.startswith("/seg/"):
                    idx = int(self.path.split("/")[-1].split(".")[0])
                    body = "\n".join(
                        f"frame-{idx:04d}-{j:04d}"
                        for j in range(origin.frames_per_segment)).encode()
                else:
                    self.send_error(404)
                    return
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/playlist.txt"

    @property
    def base(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}"

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def origin_factory():
    origins = []

    def make(**kwargs) -> FixtureOrigin:
        origin = FixtureOrigin(**kwargs)
        origins.append(origin)
        return origin

    yield make
    for origin in origins:
        origin.close()


@pytest.fixture
def store(tmp_path):
    s = LabelStore(tmp_path / "store.db")
    yield s
    s.close()


def seed_store_frames(store: LabelStore, n_frames: int, camera_id: str = "cam1",
                      partition: str | None = None,
                      width: int = 640, height: int = 480) -> list[FrameRecord]:
    """Insert a camera, one segment, and n frames; returns the frames."""
    from camharvest.records import SplitAssignment

    store.put_records([CameraSource(camera_id=camera_id, url="file:///dev/null")])
    seg = VideoSegment(segment_id=f"{camera_id}-seg0", camera_id=camera_id,
                       started_at=0.0, duration=60.0, path="/tmp/none",
                       frame_count=n_frames)
    store.put_records([seg])
    frames = [FrameRecord(frame_id=f"{seg.segment_id}:{i:05d}",
                          segment_id=seg.segment_id, camera_id=camera_id,
                          index_in_segment=i, global_index=i, sampled=True,
                          image_path=f"/tmp/none#{i:05d}",
                          width=width, height=height)
              for i in range(n_frames)]
    store.put_records(frames)
    if partition is not None:
        store.put_records([SplitAssignment(frame_id=f.frame_id, partition=partition,
                                           split_seed=0, test_fraction=0.0)
                           for f in frames])
    return frames
