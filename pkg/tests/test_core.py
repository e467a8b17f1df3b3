from __future__ import annotations

import json
import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_dataset
from ssodr.core import (
    Box,
    Dataset,
    FrameRecord,
    GroundTruth,
    RegionRecord,
    iou,
    iou_matrix,
    read_dataset,
    read_embeddings,
    read_groundtruth,
    sidecar_path,
    write_dataset,
    write_embeddings,
    write_groundtruth,
)
from ssodr.errors import FormatError, InvalidInputError, ValidationError

coord = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
extent = st.floats(0.5, 500, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw):
    x, y, w, h = draw(coord), draw(coord), draw(extent), draw(extent)
    return Box(x, y, x + w, y + h)


def brute_iou(a: Box, b: Box) -> float:
    """Area arithmetic written out independently of the library."""
    left, right = max(a.x1, b.x1), min(a.x2, b.x2)
    top, bottom = max(a.y1, b.y1), min(a.y2, b.y2)
    inter = max(0.0, right - left) * max(0.0, bottom - top)
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


# boxes and iou --------------------------------------------------------------


def test_iou_examples():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
    assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3, rel=1e-12)


def test_touching_boxes_do_not_overlap():
    assert iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0


@pytest.mark.parametrize("bad", [[0, 0, 0, 5], [5, 0, 1, 5], [0, 0, 1, float("nan")], [0, 0, 1]])
def test_invalid_box_rejected(bad):
    with pytest.raises(InvalidInputError):
        Box.of(bad)


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(boxes())
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0, rel=1e-12)


@given(boxes(), boxes(), st.floats(-100, 100), st.floats(-100, 100))
def test_iou_translation_invariant(a, b, dx, dy):
    assert iou(a.shifted(dx, dy), b.shifted(dx, dy)) == pytest.approx(iou(a, b), abs=1e-9)


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_iou_matrix_matches_scalar_oracle(aa, bb):
    m = iou_matrix([a.as_list() for a in aa], [b.as_list() for b in bb])
    expected = np.array([[brute_iou(a, b) for b in bb] for a in aa])
    np.testing.assert_allclose(m, expected, rtol=1e-12, atol=1e-15)


# dataset format -------------------------------------------------------------


def test_round_trip_counts_and_equality(tmp_path):
    ds = tiny_dataset()
    path = tmp_path / "d.jsonl"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert len(back.frames) == 2 and back.n_regions == 3 and back.dim == 4
    assert back == ds
    assert back.embeddings.tobytes() == ds.embeddings.tobytes()


def test_two_writes_are_byte_identical(tmp_path):
    ds = tiny_dataset()
    write_dataset(ds, tmp_path / "a.jsonl")
    write_dataset(ds, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.emb").read_bytes() == (tmp_path / "b.emb").read_bytes()


def test_sidecar_layout(tmp_path):
    m = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_embeddings(tmp_path / "x.emb", m)
    raw = (tmp_path / "x.emb").read_bytes()
    assert raw[:4] == b"SSOR"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
    assert np.frombuffer(raw[16:], "<f4").tolist() == m.ravel().tolist()


def test_altered_magic_is_format_error(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(tiny_dataset(), path)
    raw = bytearray(sidecar_path(path).read_bytes())
    raw[0:4] = b"XXXX"
    sidecar_path(path).write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        read_dataset(path)


def test_payload_length_mismatch_is_format_error(tmp_path):
    path = tmp_path / "d.jsonl"
    ds = tiny_dataset(dim=4)
    write_dataset(ds, path)
    # header keeps d=4 but the payload holds only 3 floats per row
    raw = sidecar_path(path).read_bytes()
    sidecar_path(path).write_bytes(raw[:16] + raw[16:16 + 4 * 3 * ds.n_regions])
    with pytest.raises(FormatError, match="payload"):
        read_dataset(path)


def test_sidecar_dim_disagreeing_with_header(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(tiny_dataset(dim=4), path)
    write_embeddings(sidecar_path(path), np.zeros((3, 3), np.float32))
    with pytest.raises(FormatError, match="dim"):
        read_dataset(path)


def test_unknown_frame_reference_is_validation_error(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(tiny_dataset(), path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[-1])
    rec["frame_id"] = "nope"
    lines[-1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="unknown frame"):
        read_dataset(path)


def test_record_count_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(tiny_dataset(), path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(FormatError):
        read_dataset(path)


def test_weak_label_must_match_frame_label():
    frames = [FrameRecord("a", "v0", 1), FrameRecord("b", "v1", 0)]
    z = np.zeros(2, np.float32)
    regions = [RegionRecord(0, "a", Box(0, 0, 1, 1), z, 0), RegionRecord(1, "b", Box(0, 0, 1, 1), z, 0)]
    with pytest.raises(ValidationError, match="weak label"):
        Dataset.from_records("x", 2, frames, regions)


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_path_chmod(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            write_dataset(tiny_dataset(), d / "x.jsonl")
    finally:
        d.chmod(0o700)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        write_dataset(tiny_dataset(), tmp_path / "missing_dir" / "x.jsonl")


@st.composite
def datasets(draw):
    dim = draw(st.integers(1, 5))
    n_frames = draw(st.integers(2, 4))
    labels = [1, 0] + draw(st.lists(st.integers(0, 1), min_size=n_frames - 2, max_size=n_frames - 2))
    frames = [FrameRecord(f"f{i}", f"v{i % 2}", labels[i]) for i in range(n_frames)]
    regions, rid = [], 0
    for f in frames:
        for _ in range(draw(st.integers(1, 3))):
            emb = np.array(draw(st.lists(st.floats(-1e6, 1e6, width=32), min_size=dim, max_size=dim)), np.float32)
            regions.append(RegionRecord(rid, f.frame_id, draw(boxes()), emb, f.frame_label))
            rid += 1
    return Dataset.from_records("obj", dim, frames, regions)


@given(datasets())
def test_round_trip_property(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_dataset(ds, path)
    back = read_dataset(path)
    assert back == ds
    assert np.array_equal(back.weak_labels, back.frame_labels[back.region_frames])


def test_subset_keeps_order():
    ds = tiny_dataset()
    sub = ds.subset(["b", "a"])
    assert [f.frame_id for f in sub.frames] == ["a", "b"]
    assert sub.region_ids.tolist() == [10, 11, 12]
    with pytest.raises(ValidationError):
        ds.subset(["a"])  # no negative frame left
    with pytest.raises(ValidationError):
        ds.subset(["zzz"])


def test_dataset_arrays_read_only():
    ds = tiny_dataset()
    with pytest.raises(ValueError):
        ds.embeddings[0, 0] = 1.0


# ground truth -----------------------------------------------------------------


def test_groundtruth_single_box(tmp_path):
    p = tmp_path / "gt.jsonl"
    p.write_text('{"frame_id": "a", "boxes": [[0, 0, 5, 5]]}\n')
    gt = read_groundtruth(p)
    assert dict(gt) == {"a": (Box(0, 0, 5, 5),)}


def test_groundtruth_empty_list(tmp_path):
    p = tmp_path / "gt.jsonl"
    p.write_text('{"frame_id": "a", "boxes": []}\n')
    gt = read_groundtruth(p)
    assert gt["a"] == () and gt.n_boxes == 0


def test_groundtruth_malformed_box(tmp_path):
    p = tmp_path / "gt.jsonl"
    p.write_text('{"frame_id": "a", "boxes": [[5, 0, 5, 5]]}\n')
    with pytest.raises(ValidationError):
        read_groundtruth(p)


def test_groundtruth_bad_json(tmp_path):
    p = tmp_path / "gt.jsonl"
    p.write_text("{not json\n")
    with pytest.raises(FormatError):
        read_groundtruth(p)


def test_groundtruth_round_trip_and_bind(tmp_path):
    gt = GroundTruth({"a": [[0, 0, 1, 1], [2, 2, 3, 4]], "b": []})
    write_groundtruth(gt, tmp_path / "gt.jsonl")
    back = read_groundtruth(tmp_path / "gt.jsonl")
    assert dict(back) == dict(gt)
    back.bind(tiny_dataset())
    with pytest.raises(ValidationError):
        GroundTruth({"zzz": []}).bind(tiny_dataset())


def test_read_embeddings_missing_file(tmp_path):
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "none.emb")
