import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camharvest.records import FrameRecord, VideoSegment
from camharvest.sampler import (SplitError, assignments, sample_frames, split,
                                write_manifest)


def seg(seg_id, camera, n, started=0.0):
    return VideoSegment(segment_id=seg_id, camera_id=camera, started_at=started,
                        duration=10.0, path=f"/tmp/{seg_id}.seg", frame_count=n)


def frames(n, camera="c"):
    return [FrameRecord(frame_id=f"{camera}:{i:06d}", segment_id="s",
                        camera_id=camera, index_in_segment=i, global_index=i,
                        sampled=True, image_path=f"/tmp/{i}.png")
            for i in range(n)]


class TestSampleFrames:
    def test_rate_one_keeps_all(self):
        out = sample_frames([seg("a", "c", 7)], 1)
        assert len(out) == 7
        assert [f.index_in_segment for f in out] == list(range(7))

    def test_every_twentieth(self):
        out = sample_frames([seg("a", "c", 100)], 20)
        assert len(out) == 5
        assert [f.global_index for f in out] == [0, 20, 40, 60, 80]

    def test_offset(self):
        out = sample_frames([seg("a", "c", 100)], 20, offset=7)
        assert [f.global_index for f in out] == [7, 27, 47, 67, 87]

    def test_index_continues_across_segments(self):
        out = sample_frames([seg("a", "c", 15), seg("b", "c", 15)], 10)
        assert [(f.segment_id, f.index_in_segment) for f in out] == \
            [("a", 0), ("a", 10), ("b", 5)]

    def test_cameras_are_independent(self):
        out = sample_frames([seg("a", "c1", 15), seg("b", "c2", 15)], 10)
        assert [(f.camera_id, f.global_index) for f in out] == \
            [("c1", 0), ("c1", 10), ("c2", 0), ("c2", 10)]

    def test_directory_segment(self, tmp_path):
        d = tmp_path / "segdir"
        d.mkdir()
        for i in range(5):
            (d / f"{i:03d}.png").write_bytes(b"x")
        (d / "notes.json").write_text("{}")
        s = VideoSegment(segment_id="d", camera_id="c", started_at=0.0,
                         duration=1.0, path=str(d), frame_count=5)
        out = sample_frames([s], 2)
        assert len(out) == 3
        assert all(f.image_path.endswith(".png") for f in out)

    def test_frame_ids_unique(self):
        out = sample_frames([seg("a", "c", 50), seg("b", "c", 50)], 3)
        ids = [f.frame_id for f in out]
        assert len(set(ids)) == len(ids)

    @pytest.mark.parametrize("rate,offset", [(0, 0), (-1, 0), (5, 5), (5, -1)])
    def test_invalid_params(self, rate, offset):
        with pytest.raises(ValueError):
            sample_frames([seg("a", "c", 10)], rate, offset)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 30), st.data())
    def test_count_matches_enumeration_oracle(self, total, rate, data):
        offset = data.draw(st.integers(0, rate - 1))
        out = sample_frames([seg("a", "c", total)], rate, offset)
        oracle = [i for i in range(total) if i % rate == offset]
        assert [f.global_index for f in out] == oracle
        assert len(out) == max(0, math.ceil((total - offset) / rate))


class TestSplit:
    def test_disjoint_and_exhaustive(self):
        frs = frames(100)
        train, test = split(frs, test_fraction=0.3, seed=1)
        assert train | test == {f.frame_id for f in frs}
        assert train & test == set()
        assert len(test) == 30

    def test_deterministic_and_order_free(self):
        frs = frames(50)
        a = split(frs, test_fraction=0.2, seed=7)
        b = split(list(reversed(frs)), test_fraction=0.2, seed=7)
        assert a == b
        c = split(frs, test_fraction=0.2, seed=8)
        assert a != c

    def test_round_half_up(self):
        # 0.5 * 5 = 2.5 -> 3
        _, test = split(frames(5), test_fraction=0.5, seed=0)
        assert len(test) == 3
        # 0.25 * 6 = 1.5 -> 2
        _, test = split(frames(6), test_fraction=0.25, seed=0)
        assert len(test) == 2

    def test_published_large_split(self):
        frs = frames(358_036)
        train, test = split(frs, test_count=58_036, seed=0)
        assert (len(train), len(test)) == (300_000, 58_036)

    def test_published_small_split(self):
        frs = frames(7_011)
        train, test = split(frs, test_count=1_011, seed=0)
        assert (len(train), len(test)) == (6_000, 1_011)

    def test_stratified(self):
        frs = frames(40, "cam1") + frames(60, "cam2")
        train, test = split(frs, test_fraction=0.25, seed=3,
                            stratify_by_camera=True)
        test_by_cam = {"cam1": 0, "cam2": 0}
        for fid in test:
            test_by_cam[fid.split(":")[0]] += 1
        assert test_by_cam == {"cam1": 10, "cam2": 15}

    @pytest.mark.parametrize("kwargs", [dict(), dict(test_fraction=0.0),
                                        dict(test_fraction=1.0),
                                        dict(test_fraction=-0.2),
                                        dict(test_count=11)])
    def test_invalid(self, kwargs):
        with pytest.raises(SplitError):
            split(frames(10), **kwargs)

    def test_empty(self):
        with pytest.raises(SplitError, match="empty"):
            split([], test_fraction=0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 10 ** 6))
    def test_size_property(self, n, fraction, seed):
        frs = frames(n)
        train, test = split(frs, test_fraction=fraction, seed=seed)
        assert len(test) == int(math.floor(fraction * n + 0.5))
        assert len(train) + len(test) == n


class TestAssignmentsAndManifest:
    def test_assignments(self):
        frs = frames(10)
        train, test = split(frs, test_fraction=0.2, seed=4)
        rows = assignments(frs, train, test, seed=4, test_fraction=0.2)
        assert len(rows) == 10
        assert sum(r.partition == "test" for r in rows) == 2
        assert all(r.split_seed == 4 for r in rows)

    def test_manifest_format(self, tmp_path):
        frs = frames(4)
        path = tmp_path / "manifest.tsv"
        write_manifest(path, frs, test={frs[2].frame_id})
        lines = path.read_text().splitlines()
        assert len(lines) == 4
        cols = lines[2].split("\t")
        assert cols == [frs[2].frame_id, "c", "2", "test"]
        assert all(ln.endswith(("train", "test")) for ln in lines)
