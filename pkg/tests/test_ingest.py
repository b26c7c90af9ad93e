import json
import random
from pathlib import Path

import pytest
import requests

from camharvest import ingest
from camharvest.ingest import (CameraRegistry, DuplicateCameraError,
                               HarvestFailure, HarvestPolicy, IngestError,
                               classify_failure, harvest, load_segments, probe,
                               register_camera)
from camharvest.records import CameraSource

UNROUTABLE = "http://127.0.0.1:9/x"  # discard port, nothing listens there


def cam(cid="cam1", url="http://example.invalid/playlist.txt"):
    return CameraSource(camera_id=cid, url=url)


def fast_policy(**kwargs) -> HarvestPolicy:
    kwargs.setdefault("backoff_base", 0.001)
    kwargs.setdefault("backoff_cap", 0.002)
    return HarvestPolicy(**kwargs)


class TestRegistry:
    def test_register_and_get(self):
        reg = CameraRegistry()
        register_camera(reg, cam())
        assert reg.get("cam1").url.endswith("playlist.txt")

    def test_duplicate_rejected(self):
        reg = CameraRegistry()
        register_camera(reg, cam())
        with pytest.raises(DuplicateCameraError):
            register_camera(reg, cam())

    def test_fleet_sizes(self):
        reg = CameraRegistry()
        for i in range(24):
            register_camera(reg, cam(f"v1-{i:02d}"))
        assert len(reg) == 24
        reg2 = CameraRegistry()
        for i in range(14):
            register_camera(reg2, cam(f"v2-{i:02d}"))
        assert len(reg2) == 14

    def test_unknown_camera(self):
        with pytest.raises(IngestError, match="unknown camera"):
            CameraRegistry().get("nope")

    def test_bad_url_rejected(self):
        reg = CameraRegistry()
        with pytest.raises(IngestError, match="scheme"):
            register_camera(reg, cam(url="gopher://old"))
        with pytest.raises(IngestError, match="non-empty"):
            register_camera(reg, cam(url="  "))

    def test_store_mirroring(self, store):
        reg = CameraRegistry(store=store)
        register_camera(reg, cam())
        reg2 = CameraRegistry(store=store)
        assert len(reg2) == 1
        with pytest.raises(DuplicateCameraError):
            register_camera(reg2, cam())


class TestClassifyFailure:
    def _http_error(self, code):
        resp = requests.Response()
        resp.status_code = code
        return requests.HTTPError(response=resp)

    def test_4xx_is_client(self):
        assert classify_failure(self._http_error(404))[0] == "client"
        assert classify_failure(self._http_error(403)) == ("client", "HTTP 403")

    def test_5xx_is_server(self):
        assert classify_failure(self._http_error(500)) == ("server", "HTTP 500")
        assert classify_failure(self._http_error(503))[0] == "server"

    def test_connection_issues_are_network(self):
        assert classify_failure(requests.ConnectionError("refused"))[0] == "network"
        assert classify_failure(requests.Timeout("slow"))[0] == "network"
        assert classify_failure(OSError("reset"))[0] == "network"

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            HarvestFailure(kind="weird", attempt=1, detail="")


class TestProbe:
    def test_reachable(self, origin_factory):
        origin = origin_factory()
        assert probe(cam(url=origin.url)).reachable

    def test_server_error(self, origin_factory):
        origin = origin_factory()
        status = probe(cam(url=origin.base + "/always500"))
        assert not status.reachable and status.kind == "server"

    def test_client_error(self, origin_factory):
        origin = origin_factory()
        status = probe(cam(url=origin.base + "/missing"))
        assert not status.reachable and status.kind == "client"

    def test_network_error(self):
        status = probe(cam(url=UNROUTABLE), timeout=0.3)
        assert not status.reachable and status.kind == "network"

    def test_local_directory(self, tmp_path):
        assert probe(cam(url=str(tmp_path))).reachable
        status = probe(cam(url=str(tmp_path / "gone")))
        assert not status.reachable and status.kind == "client"


class TestBackoff:
    def test_schedule_monotone_and_capped(self):
        policy = HarvestPolicy(backoff_base=0.5, backoff_cap=4.0)

        class Max:
            def uniform(self, a, b):
                return b

        delays = [policy.backoff_delay(a, Max()) for a in range(1, 8)]
        assert delays == sorted(delays)
        assert delays[0] == 0.5
        assert max(delays) == 4.0

    def test_jitter_range(self):
        policy = HarvestPolicy(backoff_base=1.0, backoff_cap=1.0)
        rng = random.Random(0)
        for _ in range(100):
            d = policy.backoff_delay(3, rng)
            assert 0.5 <= d <= 1.0

    def test_invalid_policy(self):
        with pytest.raises(ValueError):
            HarvestPolicy(max_retries=-1)
        with pytest.raises(ValueError):
            HarvestPolicy(backoff_base=2.0, backoff_cap=1.0)


class TestHarvest:
    def test_happy_path(self, origin_factory, tmp_path):
        origin = origin_factory(n_segments=6, frames_per_segment=10)
        result = harvest(cam(url=origin.url), duration=60.0,
                         policy=fast_policy(segment_target=10.0),
                         out_dir=tmp_path, run_id="r1", sleep=lambda s: None)
        assert result.terminal_error is None
        assert len(result.segments) == 6
        assert result.failures == []
        ids = [s.segment_id for s in result.segments]
        assert len(set(ids)) == 6
        assert all(s.frame_count == 10 for s in result.segments)
        assert sum(s.duration for s in result.segments) == pytest.approx(60.0)

    def test_partial_duration_rounds_up(self, origin_factory, tmp_path):
        origin = origin_factory(n_segments=6)
        result = harvest(cam(url=origin.url), duration=25.0,
                         policy=fast_policy(segment_target=10.0),
                         out_dir=tmp_path, sleep=lambda s: None)
        assert len(result.segments) == 3
        assert result.segments[-1].duration == pytest.approx(5.0)

    def test_retries_then_succeeds(self, origin_factory, tmp_path):
        origin = origin_factory(n_segments=4, failure_rate=0.3, seed=1)
        result = harvest(cam(url=origin.url), duration=40.0,
                         policy=fast_policy(max_retries=8, segment_target=10.0),
                         out_dir=tmp_path, run_id="r2", sleep=lambda s: None)
        assert result.terminal_error is None
        assert len(result.segments) == 4
        assert len(result.failures) > 0
        assert {f.kind for f in result.failures} <= {"client", "server"}
        logged = [json.loads(ln) for ln in
                  (tmp_path / "failures-cam1-r2.jsonl").read_text().splitlines()]
        assert len(logged) == len(result.failures)

    def test_exact_attempt_count_when_exhausted(self, tmp_path):
        calls = []

        def failing_fetch(url, timeout):
            calls.append(url)
            raise requests.ConnectionError("refused")

        result = harvest(cam(), duration=10.0,
                         policy=fast_policy(max_retries=2),
                         out_dir=tmp_path, fetch=failing_fetch,
                         sleep=lambda s: None)
        # max_retries=2 means exactly 3 attempts on the playlist
        assert len(calls) == 3
        assert result.terminal_error and "retries exhausted" in result.terminal_error
        assert [f.attempt for f in result.failures] == [1, 2, 3]
        assert all(f.kind == "network" for f in result.failures)

    def test_segments_survive_midrun_failure(self, origin_factory, tmp_path):
        origin = origin_factory(n_segments=6)
        seen = []
        real = ingest._fetch_url

        def fetch(url, timeout):
            seen.append(url)
            if "/seg/0003" in url:
                raise requests.ConnectionError("cut")
            return real(url, timeout)

        result = harvest(cam(url=origin.url), duration=60.0,
                         policy=fast_policy(max_retries=1, segment_target=10.0),
                         out_dir=tmp_path, fetch=fetch, sleep=lambda s: None)
        assert result.terminal_error
        assert len(result.segments) == 3
        for seg in result.segments:
            assert Path(seg.path).exists()

    def test_idempotent_contents(self, origin_factory, tmp_path):
        origin = origin_factory(n_segments=3)
        a = harvest(cam(url=origin.url), duration=30.0, policy=fast_policy(),
                    out_dir=tmp_path / "a", run_id="runA", sleep=lambda s: None)
        b = harvest(cam(url=origin.url), duration=30.0, policy=fast_policy(),
                    out_dir=tmp_path / "b", run_id="runB", sleep=lambda s: None)
        for sa, sb in zip(a.segments, b.segments):
            assert sa.segment_id != sb.segment_id
            assert Path(sa.path).read_bytes() == Path(sb.path).read_bytes()

    def test_store_and_filesystem_agree(self, origin_factory, tmp_path, store):
        origin = origin_factory(n_segments=4)
        store.put_records([cam(url=origin.url)])
        result = harvest(cam(url=origin.url), duration=40.0,
                         policy=fast_policy(), out_dir=tmp_path,
                         store=store, sleep=lambda s: None)
        from camharvest.records import VideoSegment
        stored = store.query(VideoSegment)
        assert {s.segment_id for s in stored} == \
            {s.segment_id for s in result.segments}
        reloaded = load_segments(tmp_path)
        assert {s.segment_id for s in reloaded} == \
            {s.segment_id for s in result.segments}
        assert all(Path(s.path).exists() for s in reloaded)

    def test_directory_origin(self, tmp_path):
        src = tmp_path / "origin"
        for i in range(3):
            d = src / f"seg{i:02d}"
            d.mkdir(parents=True)
            for j in range(4):
                (d / f"{j:02d}.png").write_bytes(b"img")
        result = harvest(cam(url=str(src)), duration=30.0,
                         policy=fast_policy(segment_target=10.0),
                         out_dir=tmp_path / "out", sleep=lambda s: None)
        assert result.terminal_error is None
        assert [s.frame_count for s in result.segments] == [4, 4, 4]

    def test_bad_duration(self, tmp_path):
        with pytest.raises(IngestError):
            harvest(cam(), duration=0.0, policy=fast_policy(), out_dir=tmp_path)
