import json
import random
from pathlib import Path

import pytest

from camharvest.label_store import (IntegrityError, LabelStore, QcSessionRow,
                                    StoreError, export_finetune_dataset,
                                    parse_annotation)
from camharvest.records import (CameraSource, Detection, FnMark, FrameRecord,
                                SplitAssignment, Verdict, VideoSegment)
from tests.conftest import seed_store_frames


def det(i, frame_id, detector="weak", score=0.5, bbox=(1.0, 2.0, 3.0, 4.0)):
    return Detection(detection_id=f"{detector}:{i:04d}", frame_id=frame_id,
                     class_label="car", bbox=bbox, score=score,
                     detector_id=detector)


class TestBatches:
    def test_revision_advances_per_batch(self, store):
        assert store.revision == 0
        seed_store_frames(store, 2)
        r = store.revision
        store.put_records([det(0, "cam1-seg0:00000")])
        assert store.revision == r + 1

    def test_heterogeneous_batch_in_one_commit(self, store):
        cam = CameraSource(camera_id="c", url="file:///x")
        seg = VideoSegment(segment_id="s", camera_id="c", started_at=0.0,
                           duration=1.0, path="/x", frame_count=1)
        frame = FrameRecord(frame_id="f", segment_id="s", camera_id="c",
                            index_in_segment=0, global_index=0, sampled=True,
                            image_path="/x#0")
        # dependency order inside the batch should not matter
        store.put_records([frame, seg, cam])
        assert store.count(FrameRecord) == 1

    def test_dangling_reference_rejects_whole_batch(self, store):
        seed_store_frames(store, 1)
        r = store.revision
        good = det(0, "cam1-seg0:00000")
        bad = det(1, "no-such-frame")
        with pytest.raises(IntegrityError) as err:
            store.put_records([good, bad])
        assert "no-such-frame" in str(err.value)
        assert store.count(Detection) == 0
        assert store.revision == r

    def test_duplicate_pk_rejected_with_offender(self, store):
        seed_store_frames(store, 1)
        store.put_records([det(0, "cam1-seg0:00000")])
        with pytest.raises(IntegrityError, match="weak:0000"):
            store.put_records([det(0, "cam1-seg0:00000")])
        with pytest.raises(IntegrityError, match="duplicate"):
            store.put_records([det(7, "cam1-seg0:00000"),
                               det(7, "cam1-seg0:00000")])

    def test_multiple_offenders_listed(self, store):
        seed_store_frames(store, 1)
        with pytest.raises(IntegrityError) as err:
            store.put_records([det(0, "ghost-a"), det(1, "ghost-b")])
        assert "ghost-a" in str(err.value) and "ghost-b" in str(err.value)

    def test_append_only_detections(self, store):
        seed_store_frames(store, 1)
        store.put_records([det(0, "cam1-seg0:00000", score=0.5)])
        with pytest.raises(IntegrityError):
            store.put_records([det(0, "cam1-seg0:00000", score=0.9)])
        assert store.query(Detection)[0].score == 0.5

    def test_qc_session_upsert(self, store):
        row = QcSessionRow(session_id="s1", detector_id="weak",
                           plan={"required_n": 3}, sample=("a", "b", "c"),
                           frame_sample=("f",), cursor=0, state="open",
                           annotator="me")
        store.put_records([row])
        import dataclasses
        store.put_records([dataclasses.replace(row, cursor=2)])
        rows = store.query(QcSessionRow)
        assert len(rows) == 1
        assert rows[0].cursor == 2
        assert rows[0].sample == ("a", "b", "c")


class TestQueries:
    def test_query_after_put(self, store):
        frames = seed_store_frames(store, 3)
        got = store.query(FrameRecord)
        assert [f.frame_id for f in got] == [f.frame_id for f in frames]

    def test_field_filter_and_predicate(self, store):
        seed_store_frames(store, 4)
        store.put_records([det(i, f"cam1-seg0:{i:05d}",
                               detector="weak" if i < 2 else "strong")
                           for i in range(4)])
        assert store.count(Detection, detector_id="weak") == 2
        highs = store.query(Detection, predicate=lambda d: d.score > 0.4)
        assert len(highs) == 4

    def test_unknown_column_rejected(self, store):
        with pytest.raises(StoreError, match="no column"):
            store.query(Detection, flavor="spicy")

    def test_partition_joins(self, store):
        frames = seed_store_frames(store, 6)
        store.put_records([SplitAssignment(frame_id=f.frame_id,
                                           partition="test" if i < 2 else "train",
                                           split_seed=0, test_fraction=0.3)
                           for i, f in enumerate(frames)])
        store.put_records([det(i, frames[i].frame_id) for i in range(6)])
        assert len(store.frames_in_partition("test")) == 2
        assert len(store.detections_in_partition("train", "weak")) == 4

    def test_effective_verdicts_supersede(self, store):
        seed_store_frames(store, 1)
        store.put_records([det(0, "cam1-seg0:00000")])
        store.put_records([Verdict(verdict_id="v1", detection_id="weak:0000",
                                   session_id="s", judgement="TP", annotator="a")])
        store.put_records([Verdict(verdict_id="v2", detection_id="weak:0000",
                                   session_id="s", judgement="FP", annotator="a")])
        effective = store.effective_verdicts("s")
        assert effective["weak:0000"].judgement == "FP"

    def test_integrity_audit_clean(self, store):
        seed_store_frames(store, 2)
        assert store.integrity_check() == []


class TestDurability:
    def test_reopen_sees_everything(self, tmp_path):
        path = tmp_path / "db.sqlite"
        s1 = LabelStore(path)
        seed_store_frames(s1, 3)
        s1.put_records([det(0, "cam1-seg0:00000")])
        rev = s1.revision
        s1.close()
        s2 = LabelStore(path)
        assert s2.revision == rev
        assert s2.count(FrameRecord) == 3
        assert s2.count(Detection) == 1
        s2.close()

    def test_failed_batch_leaves_no_trace_after_reopen(self, tmp_path):
        path = tmp_path / "db.sqlite"
        s1 = LabelStore(path)
        seed_store_frames(s1, 1)
        with pytest.raises(IntegrityError):
            s1.put_records([det(0, "cam1-seg0:00000"), det(1, "ghost")])
        s1.close()
        s2 = LabelStore(path)
        assert s2.count(Detection) == 0
        assert s2.integrity_check() == []
        s2.close()


class TestExport:
    def _populate(self, store, n_frames=4, per_frame=3, detector="weak", seed=0):
        rng = random.Random(seed)
        frames = seed_store_frames(store, n_frames, partition="train")
        dets = []
        for i, frame in enumerate(frames):
            for j in range(per_frame):
                dets.append(Detection(
                    detection_id=f"{detector}:{i:03d}:{j:03d}",
                    frame_id=frame.frame_id, class_label="car",
                    bbox=(rng.uniform(0, 600), rng.uniform(0, 440),
                          rng.uniform(4, 40), rng.uniform(4, 40)),
                    score=rng.random(), detector_id=detector))
        store.put_records(dets)
        return frames, dets

    def test_layout_and_counts(self, store, tmp_path):
        frames, dets = self._populate(store)
        manifest = export_finetune_dataset(store, "train", "weak", tmp_path / "ds")
        assert manifest.frame_count == 4
        assert manifest.box_count == 12
        index = (tmp_path / "ds" / "index.tsv").read_text().splitlines()
        assert len(index) == 4
        for line in index:
            frame_id, rel, n = line.split("\t")
            assert (tmp_path / "ds" / rel).exists()
            assert int(n) == 3
        assert json.loads((tmp_path / "ds" / "manifest.json").read_text())["box_count"] == 12

    def test_round_trip_zero_loss(self, store, tmp_path):
        # every exported coordinate must parse back to the stored float
        frames, dets = self._populate(store, n_frames=5, per_frame=4, seed=9)
        export_finetune_dataset(store, "train", "weak", tmp_path / "ds")
        stored = {d.detection_id: d for d in dets}
        by_frame = {}
        for d in dets:
            by_frame.setdefault(d.frame_id, []).append(d)
        for frame in frames:
            safe = frame.frame_id.replace(":", "_")
            doc = parse_annotation(tmp_path / "ds" / "annotations" / f"{safe}.json")
            assert doc["frame_id"] == frame.frame_id
            expect = sorted(by_frame[frame.frame_id], key=lambda d: d.detection_id)
            assert len(doc["objects"]) == len(expect)
            for obj, d in zip(doc["objects"], expect):
                x, y, w, h = d.bbox
                assert (obj["xmin"], obj["ymin"]) == (x, y)
                assert (obj["xmax"], obj["ymax"]) == (x + w, y + h)
                assert obj["score"] == float("%.9g" % d.score)

    def test_frames_without_detections_still_exported(self, store, tmp_path):
        seed_store_frames(store, 3, partition="train")
        store.put_records([det(0, "cam1-seg0:00000")])
        manifest = export_finetune_dataset(store, "train", "weak", tmp_path / "ds")
        assert manifest.frame_count == 3
        assert manifest.box_count == 1

    def test_extra_boxes_appended(self, store, tmp_path):
        frames, _ = self._populate(store, n_frames=1, per_frame=1)
        marks = [FnMark(mark_id="m1", frame_id=frames[0].frame_id,
                        session_id="s", bbox=(5.0, 6.0, 7.0, 8.0), annotator="a")]
        manifest = export_finetune_dataset(store, "train", "weak",
                                           tmp_path / "ds", extra_boxes=marks)
        assert manifest.box_count == 2
        safe = frames[0].frame_id.replace(":", "_")
        doc = parse_annotation(tmp_path / "ds" / "annotations" / f"{safe}.json")
        assert doc["objects"][-1]["xmin"] == 5.0
        assert doc["objects"][-1]["score"] == 1.0

    def test_empty_partition_rejected(self, store, tmp_path):
        seed_store_frames(store, 2, partition="train")
        with pytest.raises(StoreError, match="'test' has no frames"):
            export_finetune_dataset(store, "test", "weak", tmp_path / "ds")

    def test_unknown_format_rejected(self, store, tmp_path):
        seed_store_frames(store, 1, partition="train")
        with pytest.raises(StoreError, match="format"):
            export_finetune_dataset(store, "train", "weak", tmp_path / "ds",
                                    format="voc-xml")

    def test_bad_annotation_file_rejected(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text(json.dumps({"format": "other"}))
        with pytest.raises(StoreError):
            parse_annotation(p)
