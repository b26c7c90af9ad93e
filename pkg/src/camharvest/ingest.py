"""Robust harvesting of segmented video from registered camera sources.

The source is abstracted to "a sequence of fetchable segments": an HTTP
playlist (plain text, one segment URL per line) or a local directory whose
file sort order is segment order.  Transient failures are retried with
capped exponential backoff and classified by locus:

    4xx response     -> client
    5xx response     -> server
    connect/timeout  -> network

Harvesting of distinct cameras may run concurrently; one camera's loop is
sequential.
"""
from __future__ import annotations

import json
import logging
import random
import shutil
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import urljoin, urlparse

import requests

from .records import CameraSource, VideoSegment
from .sampler import IMAGE_EXTENSIONS

log = logging.getLogger(__name__)

FAILURE_KINDS = ("client", "server", "network")


class IngestError(RuntimeError):
    pass


class DuplicateCameraError(IngestError):
    pass


@dataclass(frozen=True)
class HarvestPolicy:
    max_retries: int = 5
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    segment_target: float = 10.0  # desired seconds per segment
    total_budget: Optional[float] = None  # wall-clock limit for the run

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base <= 0 or self.backoff_cap < self.backoff_base:
            raise ValueError("need 0 < backoff_base <= backoff_cap")
        if self.segment_target <= 0:
            raise ValueError("segment_target must be > 0")

    def backoff_delay(self, attempt: int, rng: random.Random) -> float:
        """Jittered exponential delay for retry number ``attempt`` (1-based).
        The pre-jitter schedule is non-decreasing and capped."""
        base = min(self.backoff_cap, self.backoff_base * (2 ** (attempt - 1)))
        return base * rng.uniform(0.5, 1.0)


@dataclass(frozen=True)
class HarvestFailure:
    kind: str  # client | server | network
    attempt: int
    detail: str

    def __post_init__(self):
        if self.kind not in FAILURE_KINDS:
            raise ValueError(f"unknown failure kind: {self.kind}")


@dataclass(frozen=True)
class StreamStatus:
    reachable: bool
    kind: Optional[str] = None  # failure locus when unreachable
    detail: str = ""


@dataclass
class HarvestResult:
    segments: list[VideoSegment] = field(default_factory=list)
    failures: list[HarvestFailure] = field(default_factory=list)
    terminal_error: Optional[str] = None


class CameraRegistry:
    """In-memory registry of camera sources, optionally mirrored to a store."""

    def __init__(self, store=None):
        self._cameras: dict[str, CameraSource] = {}
        self._store = store
        if store is not None:
            for cam in store.query(CameraSource):
                self._cameras[cam.camera_id] = cam

    def __len__(self) -> int:
        return len(self._cameras)

    def get(self, camera_id: str) -> CameraSource:
        try:
            return self._cameras[camera_id]
        except KeyError:
            raise IngestError(f"unknown camera: {camera_id}") from None

    def register(self, source: CameraSource) -> str:
        if source.camera_id in self._cameras:
            raise DuplicateCameraError(f"camera already registered: {source.camera_id}")
        _validate_url(source.url)
        self._cameras[source.camera_id] = source
        if self._store is not None:
            self._store.put_records([source])
        return source.camera_id


def register_camera(registry: CameraRegistry, source: CameraSource) -> str:
    return registry.register(source)


def _validate_url(url: str) -> None:
    if not url or not url.strip():
        raise IngestError("camera url must be non-empty")
    scheme = urlparse(url).scheme
    if scheme not in ("http", "https", "file", "synthetic", ""):
        raise IngestError(f"unsupported camera url scheme: {scheme!r}")


def classify_failure(exc: Exception) -> tuple[str, str]:
    """Map an exception from one fetch attempt to a failure locus."""
    if isinstance(exc, requests.HTTPError) and exc.response is not None:
        code = exc.response.status_code
        if 400 <= code < 500:
            return "client", f"HTTP {code}"
        return "server", f"HTTP {code}"
    if isinstance(exc, (requests.ConnectionError, requests.Timeout, OSError)):
        return "network", str(exc)
    return "client", str(exc)


def probe(source: CameraSource, timeout: float = 5.0) -> StreamStatus:
    """One connection attempt; failures are encoded in the status."""
    url = source.url
    parsed = urlparse(url)
    if parsed.scheme == "synthetic":
        return StreamStatus(reachable=True)
    if parsed.scheme in ("", "file"):
        path = Path(parsed.path if parsed.scheme == "file" else url)
        if path.is_dir():
            return StreamStatus(reachable=True)
        return StreamStatus(reachable=False, kind="client",
                            detail=f"no such directory: {path}")
    try:
        resp = requests.get(url, timeout=timeout)
        resp.raise_for_status()
    except Exception as exc:  # noqa: BLE001 - classified below
        kind, detail = classify_failure(exc)
        return StreamStatus(reachable=False, kind=kind, detail=detail)
    return StreamStatus(reachable=True)


# ---------------------------------------------------------------------------
# Fetching


def _fetch_url(url: str, timeout: float) -> bytes:
    resp = requests.get(url, timeout=timeout)
    resp.raise_for_status()
    return resp.content


class _Origin:
    """Enumerates and fetches a source's segments."""

    def __init__(self, source: CameraSource, timeout: float = 10.0,
                 fetch: Callable[[str, float], bytes] = _fetch_url):
        self.source = source
        self.timeout = timeout
        self.fetch = fetch
        self.parsed = urlparse(source.url)

    def list_segments(self) -> list[str]:
        if self.parsed.scheme in ("http", "https"):
            playlist = self.fetch(self.source.url, self.timeout).decode("utf-8")
            entries = [ln.strip() for ln in playlist.splitlines()
                       if ln.strip() and not ln.startswith("#")]
            return [urljoin(self.source.url, entry) for entry in entries]
        path = Path(self.parsed.path if self.parsed.scheme == "file" else self.source.url)
        if not path.is_dir():
            raise FileNotFoundError(f"no such directory: {path}")
        return [str(p) for p in sorted(path.iterdir()) if not p.name.startswith(".")]

    def fetch_segment(self, ref: str) -> bytes | Path:
        if urlparse(ref).scheme in ("http", "https"):
            return self.fetch(ref, self.timeout)
        return Path(ref)


def _count_frames(path: Path) -> int:
    """Frames in a stored segment.

    Directory segments hold one image per frame.  File segments follow the
    fixture convention of one frame token per text line; binary payloads
    report zero frames (real decoding is out of scope at desk scale).
    """
    if path.is_dir():
        return sum(1 for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    try:
        text = path.read_text(encoding="utf-8")
    except (UnicodeDecodeError, OSError):
        return 0
    return sum(1 for ln in text.splitlines() if ln.strip())


def _dir_size(path: Path) -> int:
    if path.is_dir():
        return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())
    return path.stat().st_size


def harvest(source: CameraSource, duration: float, policy: HarvestPolicy,
            out_dir: Path, store=None, run_id: Optional[str] = None,
            sleep: Callable[[float], None] = time.sleep,
            clock: Callable[[], float] = time.time,
            fetch: Callable[[str, float], bytes] = _fetch_url,
            rng: Optional[random.Random] = None) -> HarvestResult:
    """Harvest segments covering ``duration`` seconds from one source.

    Every fetch is retried up to ``policy.max_retries`` times with capped,
    jittered exponential backoff; every failed attempt is recorded.  Segment
    bytes and metadata are persisted before returning, and segments already
    written stay intact when retries are exhausted mid-run (the result then
    carries a terminal error).  Segments are immutable: a re-harvest writes
    new segment ids, but contents are byte-identical for a deterministic
    fixture.
    """
    if duration <= 0:
        raise IngestError(f"duration must be positive, got {duration}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = rng or random.Random()
    run_id = run_id or uuid.uuid4().hex[:12]
    result = HarvestResult()
    origin = _Origin(source, fetch=fetch)
    started = clock()
    failure_log = out_dir / f"failures-{source.camera_id}-{run_id}.jsonl"

    def attempt_with_retry(what: str, fn):
        for attempt in range(policy.max_retries + 1):
            try:
                return fn()
            except Exception as exc:  # noqa: BLE001 - classified and logged
                kind, detail = classify_failure(exc)
                failure = HarvestFailure(kind=kind, attempt=attempt + 1,
                                         detail=f"{what}: {detail}")
                result.failures.append(failure)
                with failure_log.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(failure.__dict__) + "\n")
                if attempt < policy.max_retries:
                    sleep(policy.backoff_delay(attempt + 1, rng))
        raise IngestError(f"retries exhausted: {what}")

    needed = max(1, int(-(-duration // policy.segment_target)))  # ceil
    try:
        refs = attempt_with_retry("playlist", origin.list_segments)
    except IngestError as exc:
        result.terminal_error = str(exc)
        return result

    covered = 0.0
    for seq, ref in enumerate(refs[:needed]):
        if policy.total_budget is not None and clock() - started > policy.total_budget:
            result.terminal_error = "total budget exhausted"
            break
        try:
            payload = attempt_with_retry(f"segment {ref}", lambda: origin.fetch_segment(ref))
        except IngestError as exc:
            result.terminal_error = str(exc)
            break
        segment_id = f"{source.camera_id}-{run_id}-{seq:04d}"
        seg_duration = min(policy.segment_target, duration - covered)
        if isinstance(payload, Path):
            dest = out_dir / f"{segment_id}{''.join(payload.suffixes)}"
            if payload.is_dir():
                shutil.copytree(payload, dest)
            else:
                shutil.copy2(payload, dest)
        else:
            dest = out_dir / f"{segment_id}.seg"
            dest.write_bytes(payload)
        segment = VideoSegment(
            segment_id=segment_id, camera_id=source.camera_id,
            started_at=started + covered, duration=seg_duration,
            path=str(dest), frame_count=_count_frames(dest),
            byte_size=_dir_size(dest))
        _write_segment_meta(dest, segment)
        if store is not None:
            store.put_records([segment])
        result.segments.append(segment)
        covered += seg_duration
        if covered >= duration:
            break
    return result


def _write_segment_meta(dest: Path, segment: VideoSegment) -> None:
    meta = dict(segment.__dict__)
    meta["format"] = "segment-meta/v1"
    meta_path = dest.parent / f"{segment.segment_id}.meta.json"
    meta_path.write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_segments(out_dir: Path) -> list[VideoSegment]:
    """Read back segment metadata rows written by ``harvest``."""
    segments = []
    for meta_path in sorted(Path(out_dir).glob("*.meta.json")):
        doc = json.loads(meta_path.read_text())
        doc.pop("format", None)
        segments.append(VideoSegment(**doc))
    return segments
