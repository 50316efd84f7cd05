"""Synthetic sequence generator, triplet sampler, and dataset directory I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamfuse.crops import template_crop
from siamfuse.data_synth import (
    ATTRIBUTES,
    DataError,
    SequenceSpec,
    TripletConfig,
    benchmark_specs,
    generate_sequence,
    load_ground_truth,
    load_sequence_dir,
    sample_triplet,
    write_sequence_dir,
)
from siamfuse.rpn_head import xywh_to_cxcywh
from siamfuse.tensor import ContractError


def rect_intersection(a, b):
    x0 = max(a[0], b[0])
    y0 = max(a[1], b[1])
    x1 = min(a[0] + a[2], b[0] + b[2])
    y1 = min(a[1] + a[3], b[1] + b[3])
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def test_generation_is_deterministic():
    spec = SequenceSpec(length=12, seed=7, attributes=("occlusion", "scale_variation"))
    a = generate_sequence(spec)
    b = generate_sequence(spec)
    assert np.array_equal(a.boxes, b.boxes)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa, fb)
    c = generate_sequence(SequenceSpec(length=12, seed=8, attributes=("occlusion", "scale_variation")))
    assert not all(np.array_equal(x, y) for x, y in zip(a.frames, c.frames))


def test_flat_background_mask_bbox_equals_ground_truth():
    spec = SequenceSpec(length=10, seed=3, background="flat")
    rec = generate_sequence(spec)
    for t, frame in enumerate(rec.frames):
        mask = np.any(np.abs(frame - 0.5) > 1e-9, axis=2)
        ys, xs = np.nonzero(mask)
        x, y, w, h = rec.boxes[t]
        assert xs.min() == x and ys.min() == y
        assert xs.max() == x + w - 1 and ys.max() == y + h - 1


@given(
    seed=st.integers(0, 10_000),
    attrs=st.sets(st.sampled_from(ATTRIBUTES), max_size=3),
)
@settings(max_examples=25)
def test_target_always_inside_frame_and_frames_in_range(seed, attrs):
    spec = SequenceSpec(length=8, seed=seed, attributes=tuple(sorted(attrs)))
    rec = generate_sequence(spec)
    assert rec.boxes.shape == (8, 4)
    assert np.array_equal(rec.boxes, np.round(rec.boxes))
    for t in range(8):
        x, y, w, h = rec.boxes[t]
        assert x >= 0 and y >= 0 and w > 0 and h > 0
        assert x + w <= spec.width and y + h <= spec.height
        f = rec.frames[t]
        assert f.dtype == np.float64 and f.shape == (spec.height, spec.width, 3)
        assert f.min() >= 0.0 and f.max() <= 1.0


def test_occluder_crosses_target_center_at_midpoint():
    spec = SequenceSpec(length=60, seed=11, attributes=("occlusion",))
    rec = generate_sequence(spec)
    assert rec.occluder_boxes is not None
    mid = spec.length // 2
    gt = rec.boxes[mid]
    cover_mid = rect_intersection(gt, rec.occluder_boxes[mid]) / (gt[2] * gt[3])
    assert cover_mid >= 0.5
    for t in (0, spec.length - 1):
        cov = rect_intersection(rec.boxes[t], rec.occluder_boxes[t]) / (
            rec.boxes[t, 2] * rec.boxes[t, 3]
        )
        assert cov < 0.5


def test_occluder_pixels_actually_cover_the_target():
    spec = SequenceSpec(length=30, seed=4, attributes=("occlusion",))
    rec = generate_sequence(spec)
    clean = generate_sequence(SequenceSpec(length=30, seed=4))
    mid = 15
    x, y, w, h = (int(v) for v in rec.boxes[mid])
    target_region = rec.frames[mid][y : y + h, x : x + w]
    clean_region = clean.frames[mid][y : y + h, x : x + w]
    changed = np.any(np.abs(target_region - clean_region) > 1e-12, axis=2)
    assert changed.mean() >= 0.5


def test_unknown_attribute_rejected():
    with pytest.raises(ContractError):
        SequenceSpec(attributes=("teleportation",)).validate()
    with pytest.raises(ContractError):
        SequenceSpec(length=1).validate()


def test_benchmark_specs_cover_all_attributes():
    specs = benchmark_specs()
    assert len(specs) == 8
    assert len({s.resolved_name() for s in specs}) == 8
    covered = set()
    for s in specs:
        s.validate()
        covered.update(s.attributes)
    assert covered == set(ATTRIBUTES)


# -- directory round trip ------------------------------------------------------


def test_write_then_load_roundtrip(tmp_path):
    rec = generate_sequence(SequenceSpec(length=6, seed=2, attributes=("deformation",), name="seqA"))
    seq_dir = write_sequence_dir(rec, tmp_path)
    assert (seq_dir / "img" / "000001.png").is_file()
    assert (seq_dir / "img" / "000006.png").is_file()
    loaded = load_sequence_dir(seq_dir)
    assert loaded.name == "seqA"
    assert loaded.attributes == ("deformation",)
    assert np.array_equal(loaded.boxes, rec.boxes)
    assert len(loaded.frames) == 6
    for orig, back in zip(rec.frames, loaded.frames):
        assert np.max(np.abs(orig - back)) <= 0.5 / 255.0 + 1e-12


def test_ground_truth_parser_accepts_tabs_and_spaces(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("1,2,3,4\n5\t6\t7\t8\n9 10 11 12\n")
    boxes = load_ground_truth(p)
    assert np.array_equal(boxes, [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12]])


def test_ground_truth_parser_reports_line_numbers(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("1,2,3,4\n\n5,6,7\n")
    with pytest.raises(DataError, match=r"gt\.txt:3: expected 4 values, got 3"):
        load_ground_truth(p)
    p.write_text("1,2,x,4\n")
    with pytest.raises(DataError, match=r"gt\.txt:1"):
        load_ground_truth(p)


def test_loader_rejects_inconsistent_directories(tmp_path):
    with pytest.raises(DataError, match="no img"):
        load_sequence_dir(tmp_path / "nothing")
    rec = generate_sequence(SequenceSpec(length=4, seed=1, name="bad"))
    seq_dir = write_sequence_dir(rec, tmp_path)
    (seq_dir / "img" / "000004.png").unlink()
    with pytest.raises(DataError, match="3 frames but 4 ground-truth rows"):
        load_sequence_dir(seq_dir)
    with pytest.raises(DataError, match="missing ground-truth"):
        load_ground_truth(tmp_path / "absent.txt")


# -- triplet sampling ----------------------------------------------------------


TEMPLATE, SEARCH = 47, 111


def test_triplet_index_constraints():
    rec = generate_sequence(SequenceSpec(length=80, seed=5))
    rng = np.random.default_rng(0)
    cfg = TripletConfig(window=20)
    for _ in range(200):
        trip = sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng)
        t_init, t_acc, t_cur, t_search = trip.indices
        assert t_cur == t_acc + 1
        assert t_search == t_cur + 1
        span = max(t_init, t_search) - min(t_init, t_acc)
        assert span < cfg.window
        assert 0 <= min(trip.indices) and max(trip.indices) < rec.length
        assert trip.initial_crop.shape == (3, TEMPLATE, TEMPLATE)
        assert trip.search_image.shape == (3, SEARCH, SEARCH)


def test_triplet_same_frame_search_option():
    rec = generate_sequence(SequenceSpec(length=10, seed=5))
    rng = np.random.default_rng(1)
    cfg = TripletConfig(window=10, search_from_successor=False)
    for _ in range(50):
        trip = sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng)
        assert trip.indices[3] == trip.indices[2]


def test_triplet_ground_truth_lands_centered_for_static_target():
    rec = generate_sequence(SequenceSpec(length=8, seed=9, speed=0.0))
    rng = np.random.default_rng(2)
    cfg = TripletConfig(window=8, noise_prob=0.0, center_jitter=0.0)
    trip = sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng)
    gx, gy, gw, gh = trip.search_gt_xywh
    assert abs(gx + gw / 2.0 - SEARCH / 2.0) < 1e-9
    assert abs(gy + gh / 2.0 - SEARCH / 2.0) < 1e-9
    assert gw > 0 and gh > 0


def test_triplet_noise_controls():
    rec = generate_sequence(SequenceSpec(length=12, seed=6))
    rng = np.random.default_rng(3)
    cfg = TripletConfig(window=12, noise_prob=0.0)
    trip = sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng)
    assert trip.noise_applied == (False, False)
    t_acc = trip.indices[1]
    expected = template_crop(rec.frames[t_acc], xywh_to_cxcywh(rec.boxes[t_acc]), TEMPLATE)
    assert np.array_equal(trip.accumulated_crop, expected)

    cfg = TripletConfig(window=12, noise_prob=1.0, noise_sigma=0.05)
    trip = sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng)
    assert trip.noise_applied == (True, True)
    assert trip.accumulated_crop.min() >= 0.0 and trip.accumulated_crop.max() <= 1.0

    hits = 0
    n = 2000
    cfg = TripletConfig(window=12, noise_prob=0.3)
    for _ in range(n):
        trip = sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng)
        hits += sum(trip.noise_applied)
    frac = hits / (2 * n)
    assert abs(frac - 0.3) < 0.03


def test_triplet_rejects_too_short_sequences():
    rec = generate_sequence(SequenceSpec(length=2, seed=1))
    rng = np.random.default_rng(0)
    with pytest.raises(DataError, match="need at least 3"):
        sample_triplet(rec, TEMPLATE, SEARCH, TripletConfig(), rng)
    with pytest.raises(ContractError):
        TripletConfig(window=2).validate()


def test_initial_template_index_spans_the_window():
    rec = generate_sequence(SequenceSpec(length=10, seed=5))
    rng = np.random.default_rng(4)
    cfg = TripletConfig(window=10)
    seen = set()
    for _ in range(400):
        seen.add(sample_triplet(rec, TEMPLATE, SEARCH, cfg, rng).indices[0])
    assert seen == set(range(10))
