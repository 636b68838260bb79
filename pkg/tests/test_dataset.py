import json
from pathlib import Path

import numpy as np
import pytest

from scenvad.dataset import (
    DatasetSplit,
    Manifest,
    SplitSpec,
    VideoRecord,
    load_manifest,
    protocol_split,
    read_annotation,
    save_frames,
    slide_blocks,
    write_annotation,
)
from scenvad.errors import (
    DuplicateId,
    InsufficientVideos,
    MissingFile,
    SchemaError,
    SupervisionError,
    VideoTooShort,
)


def _write_video(root: Path, vid: str, n: int, labels=None, scenario="s0", view="v0", abnormal=False):
    frames = np.linspace(0, 1, n)[:, None, None] * np.ones((n, 4, 4))
    save_frames(frames, root / vid)
    entry = {
        "video_id": vid,
        "scenario_id": scenario,
        "view_id": view,
        "frame_count": n,
        "fps": 30,
        "label": "abnormal" if abnormal else "normal",
        "anomaly_type": "intruder" if abnormal else None,
        "frames_path": vid,
        "annotation_path": None,
    }
    if labels is not None:
        write_annotation(labels, root / f"{vid}.txt")
        entry["annotation_path"] = f"{vid}.txt"
    return entry


def _manifest_file(root, entries):
    path = root / "manifest.json"
    path.write_text(json.dumps(entries))
    return path


def test_load_manifest_two_records(tmp_path):
    entries = [_write_video(tmp_path, "a", 5, [0] * 5), _write_video(tmp_path, "b", 6)]
    m = load_manifest(_manifest_file(tmp_path, entries))
    assert len(m) == 2
    assert m.scenario_index == {"s0": {"v0": ("a", "b")}}


def test_duplicate_id(tmp_path):
    e = _write_video(tmp_path, "v1", 5)
    with pytest.raises(DuplicateId):
        load_manifest(_manifest_file(tmp_path, [e, dict(e)]))


def test_annotation_length_mismatch(tmp_path):
    e = _write_video(tmp_path, "v1", 5, [0, 0, 0])
    with pytest.raises(SchemaError):
        load_manifest(_manifest_file(tmp_path, [e]))


def test_missing_frames_dir(tmp_path):
    e = _write_video(tmp_path, "v1", 5)
    e["frames_path"] = "nowhere"
    with pytest.raises(MissingFile):
        load_manifest(_manifest_file(tmp_path, [e]))


@pytest.mark.parametrize("mutate", [
    lambda e: e.pop("fps"),
    lambda e: e.update(extra=1),
    lambda e: e.update(label="weird"),
    lambda e: e.update(anomaly_type="fall"),  # normal video with an anomaly type
    lambda e: e.update(frame_count=0),
])
def test_schema_errors(tmp_path, mutate):
    e = _write_video(tmp_path, "v1", 5)
    mutate(e)
    with pytest.raises(SchemaError):
        load_manifest(_manifest_file(tmp_path, [e]))


def test_annotation_roundtrip(tmp_path):
    write_annotation([0, 1, 1, 0], tmp_path / "a.txt")
    assert (tmp_path / "a.txt").read_text() == "0\n1\n1\n0\n"
    assert read_annotation(tmp_path / "a.txt").tolist() == [0, 1, 1, 0]


def _fake_manifest(n_normal, n_abnormal, n_scenarios):
    recs = []
    for i in range(n_normal):
        recs.append(VideoRecord(f"n{i:04d}", f"s{i % n_scenarios:02d}", "v0", 10, 30.0, "normal", None, Path("x")))
    for i in range(n_abnormal):
        recs.append(VideoRecord(f"a{i:04d}", f"s{i % n_scenarios:02d}", "v0", 10, 30.0, "abnormal", "fall", Path("x")))
    return Manifest(tuple(recs))


def test_protocol_i_counts():
    m = _fake_manifest(480, 240, 14)
    s = protocol_split(m, "protocol_i", seed=0)
    train = [m.get(v) for v in s.train_ids]
    test = [m.get(v) for v in s.test_ids]
    assert len(train) == 360 and all(not r.is_abnormal for r in train)
    assert sum(not r.is_abnormal for r in test) == 120
    assert sum(r.is_abnormal for r in test) == 240
    assert s.supervision == "normal_only"


def test_protocol_ii_counts():
    m = _fake_manifest(480, 240, 14)
    s = protocol_split(m, "protocol_ii", seed=0)
    train = [m.get(v) for v in s.train_ids]
    test = [m.get(v) for v in s.test_ids]
    assert sum(not r.is_abnormal for r in train) == 360
    assert sum(r.is_abnormal for r in train) == 120
    assert sum(not r.is_abnormal for r in test) == 120
    assert sum(r.is_abnormal for r in test) == 120
    assert s.supervision == "video_level"


def test_protocol_ii_insufficient():
    with pytest.raises(InsufficientVideos):
        protocol_split(_fake_manifest(4, 0, 1), "protocol_ii")


def test_split_stratified_largest_remainder():
    # 5 scenarios x 3 normals = 15; 0.75 * 15 = 11.25 -> 11 in train, each stratum gets 2 or 3
    m = _fake_manifest(15, 0, 5)
    s = protocol_split(m, "protocol_i", seed=4)
    per = {}
    for v in s.train_ids:
        per[m.get(v).scenario_id] = per.get(m.get(v).scenario_id, 0) + 1
    assert sum(per.values()) == 11
    assert sorted(per.values()) == [2, 2, 2, 2, 3]


@pytest.mark.parametrize("protocol", ["protocol_i", "protocol_ii"])
def test_split_deterministic_and_covering(protocol):
    m = _fake_manifest(40, 20, 3)
    a = protocol_split(m, protocol, seed=9)
    b = protocol_split(m, protocol, seed=9)
    assert a == b
    assert a.train_ids | a.test_ids == {r.video_id for r in m}
    assert not a.train_ids & a.test_ids
    c = protocol_split(m, protocol, seed=10)
    assert c.train_ids != a.train_ids


def test_split_file_roundtrip(tmp_path):
    s = protocol_split(_fake_manifest(8, 4, 2), "protocol_ii", seed=2)
    s.save(tmp_path / "split.json")
    assert set(json.loads((tmp_path / "split.json").read_text())) == {"protocol", "seed", "train_ids", "test_ids"}
    assert SplitSpec.load(tmp_path / "split.json") == s


def test_protocol_ii_hides_train_frame_labels(tiny_dataset):
    split = protocol_split(tiny_dataset, "protocol_ii", seed=0)
    view = DatasetSplit(tiny_dataset, split)
    for vid in split.train_ids:
        with pytest.raises(SupervisionError):
            view.frame_labels(vid)
        assert view.video_label(vid) in ("normal", "abnormal")
    for vid in split.test_ids:
        assert len(view.frame_labels(vid)) == tiny_dataset.get(vid).frame_count


def test_protocol_i_train_is_normal_only(tiny_dataset):
    split = protocol_split(tiny_dataset, "protocol_i", seed=0)
    assert all(not tiny_dataset.get(v).is_abnormal for v in split.train_ids)


def _rec(n):
    return VideoRecord("v", "s", "w", n, 30.0, "normal", None, Path("x"))


@pytest.mark.parametrize("n,window,expected", [(5, 3, [1, 2, 3]), (3, 3, [1]), (10, 2, list(range(1, 10)))])
def test_slide_blocks(n, window, expected):
    frames = np.arange(n, dtype=float)[:, None, None] * np.ones((n, 2, 2))
    blocks = slide_blocks(_rec(n), window, frames)
    assert [b.start_index for b in blocks] == expected
    for b in blocks:
        assert b.input_frames.shape == (window - 1, 2, 2)
        # frame i (1-based) holds the value i-1
        assert b.input_frames[:, 0, 0].tolist() == list(range(b.start_index - 1, b.start_index + window - 2))
        assert b.target_frame[0, 0] == b.start_index + window - 2


def test_slide_blocks_too_short():
    with pytest.raises(VideoTooShort):
        slide_blocks(_rec(2), 3, np.zeros((2, 2, 2)))
