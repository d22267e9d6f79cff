import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import textured_raster
from qprobe import probe
from qprobe.errors import ArgumentError
from qprobe.model import BenchmarkItem, DefectRecord, Region
from qprobe.probe import CropStrategy, TrajectoryKind
from qprobe.rewards import format_reward

IMAGE = (4000, 3000)


def _d(x, y, w, h, imp=1.0, kind="blur"):
    return DefectRecord(Region(x, y, w, h), kind, 0.6, imp)


def _item(item_id, defects=(), w=4000, h=3000, mos=None):
    mos = mos if mos is not None else (5.0 if not defects else 2.5)
    return BenchmarkItem(id=item_id, image_path=f"{item_id}.png", width=w, height=h, defects=tuple(defects), mos=mos)


def test_degradation_only_examples():
    assert probe.crop_degradation_only([_d(450, 450, 100, 100)], 768, IMAGE).as_tuple() == (116, 116, 768, 768)
    assert probe.crop_degradation_only([_d(50, 50, 100, 100)], 768, IMAGE).as_tuple() == (0, 0, 768, 768)
    with pytest.raises(ArgumentError):
        probe.crop_degradation_only([], 768, IMAGE)


def test_degradation_only_targets_most_important():
    ds = [_d(100, 100, 50, 50, 0.3), _d(2000, 1500, 50, 50, 0.9)]
    r = probe.crop_degradation_only(ds, 768, IMAGE)
    assert r.center == (2025.0, 1525.0)


def test_all_plus_context_examples():
    d = [_d(1000, 1000, 100, 100)]
    r = probe.crop_all_plus_context(d, 768, image=IMAGE)
    assert (r.w, r.h) == (768, 768)
    cov, ctx = probe.coverage(r, d)
    assert cov == 1.0
    assert ctx == pytest.approx(1 - 100 ** 2 / 768 ** 2, abs=1e-12)

    far = [_d(100, 100, 50, 50), _d(3000, 2000, 50, 50)]
    r = probe.crop_all_plus_context(far, 768, image=IMAGE)
    box_w, box_h = 2950, 1950
    assert r.x <= 100 - 0.3 * box_w + 1 or r.x == 0
    assert r.x1 >= min(4000, 3050 + 0.3 * box_w - 1)
    assert probe.coverage(r, far)[0] == 1.0

    big = [_d(1000, 1000, 900, 900)]
    r = probe.crop_all_plus_context(big, 768, image=IMAGE)
    assert r.as_tuple() == (730, 730, 1440, 1440)


def test_partial_examples():
    d = [_d(1000, 1000, 200, 200)]
    r = probe.crop_partial(d, 768, IMAGE, seed=4)
    cov, ctx = probe.coverage(r, d)
    assert 0.0 < cov < 1.0 and ctx >= 0.25
    assert probe.crop_partial(d, 768, IMAGE, seed=4) == r
    with pytest.raises(ArgumentError):
        probe.crop_partial([_d(0, 0, 800, 800)], 768, (800, 800), seed=0)


def test_coverage_examples():
    d = [_d(50, 0, 100, 100)]
    assert probe.coverage(Region(0, 0, 100, 100), d) == (0.5, 0.5)
    assert probe.coverage(Region(0, 0, 200, 200), d)[0] == 1.0
    assert probe.coverage(Region(500, 500, 10, 10), d) == (0.0, 1.0)
    assert probe.coverage(Region(0, 0, 10, 10), [])[0] == 1.0


def test_trajectory_kinds():
    pristine = _item("p")
    t = probe.generate_trajectory(pristine, kind=TrajectoryKind.CLARITY_LOCALIZATION, seed=1)
    assert len(t.crops) == 1 and t.final_score == 5.0
    assert [s["op"] for s in t.steps] == ["global_look", "crop", "observe", "verify", "score"]

    bad = _item("d", [_d(1000, 1000, 100, 100)])
    t = probe.generate_trajectory(bad, CropStrategy.ALL_PLUS_CONTEXT, TrajectoryKind.DEGRADATION_CAPTURE)
    assert t.coverage == 1.0 and t.final_score == 2.5
    assert [s["op"] for s in t.steps] == ["global_look", "crop", "observe", "score"]

    for it in (pristine, bad):
        t = probe.generate_trajectory(it, kind=TrajectoryKind.DISTANT_VIEW)
        assert t.crops == [] and format_reward(t.trace_text) == 1.0

    with pytest.raises(ArgumentError):
        probe.generate_trajectory(pristine, kind=TrajectoryKind.DEGRADATION_CAPTURE)


def test_clarity_crop_uses_texture_when_raster_given():
    r = textured_raster(256, 320)
    item = _item("t", w=320, h=256)
    t = probe.generate_trajectory(item, kind=TrajectoryKind.CLARITY_LOCALIZATION, crop=64, raster=r)
    assert t.crops[0].x >= 120 - 32  # texture lives right of the flat band


def _balanced_manifest():
    ds = [[_d(200, 200, 150, 150)], [_d(3000, 2000, 200, 100, kind="noise")], [_d(1000, 400, 120, 120)]]
    return [_item(f"p{i}") for i in range(3)] + [_item(f"d{i}", d) for i, d in enumerate(ds)]


def test_corpus_quota_and_mix():
    corpus = probe.build_sft_corpus(_balanced_manifest(), seed=3)
    crop_bearing = [t for t in corpus if t.crops]
    pristine_crops = [t for t in crop_bearing if t.kind is TrajectoryKind.CLARITY_LOCALIZATION]
    assert len(pristine_crops) / len(crop_bearing) >= 0.3
    distant = [t for t in corpus if t.kind is TrajectoryKind.DISTANT_VIEW]
    assert len(distant) == 2 * len(crop_bearing)
    assert probe.validate_corpus(corpus) == []


def test_corpus_errors_and_determinism(tmp_path):
    with pytest.raises(ArgumentError, match="quota"):
        probe.build_sft_corpus([_item("d", [_d(0, 0, 10, 10)])])
    with pytest.raises(ArgumentError):
        probe.build_sft_corpus([])
    a = probe.build_sft_corpus(_balanced_manifest(), seed=9)
    b = probe.build_sft_corpus(_balanced_manifest(), seed=9)
    assert [t.to_dict() for t in a] == [t.to_dict() for t in b]
    probe.write_corpus(a, tmp_path / "c.jsonl")
    assert [t.to_dict() for t in probe.read_corpus(tmp_path / "c.jsonl")] == [t.to_dict() for t in a]


def test_anti_bias_correlation_on_balanced_manifest():
    corpus = probe.build_sft_corpus(_balanced_manifest(), seed=0)
    assert abs(probe.crop_score_correlation(corpus)) <= 0.5


@st.composite
def defect_sets(draw):
    n = draw(st.integers(1, 3))
    out = []
    for i in range(n):
        w, h = draw(st.integers(20, 300)), draw(st.integers(20, 300))
        x = draw(st.integers(0, 1200 - w)) + 1300 * i
        y = draw(st.integers(0, 3000 - h))
        out.append(_d(x, y, w, h, imp=draw(st.floats(0.1, 1.0))))
    return out


@settings(max_examples=80, deadline=None)
@given(defect_sets(), st.integers(64, 1000))
def test_all_plus_context_always_covers(ds, crop):
    r = probe.crop_all_plus_context(ds, crop, image=IMAGE)
    cov, ctx = probe.coverage(r, ds)
    assert cov == 1.0 and ctx > 0.0
    assert r.fits(*IMAGE)


@settings(max_examples=80, deadline=None)
@given(defect_sets(), st.integers(64, 1000))
def test_degradation_only_is_focused_on_top_defect(ds, crop):
    r = probe.crop_degradation_only(ds, crop, IMAGE)
    top = max(ds, key=lambda d: d.importance)
    cov_all, _ = probe.coverage(probe.crop_all_plus_context(ds, crop, image=IMAGE), ds)
    assert probe.coverage(r, ds)[0] <= cov_all
    if top.region.w <= crop and top.region.h <= crop:
        assert r.intersection_area(top.region) == top.region.area


@settings(max_examples=30, deadline=None)
@given(st.lists(defect_sets(), min_size=1, max_size=4), st.integers(1, 4), st.integers(0, 1000),
       st.sampled_from(list(CropStrategy)))
def test_every_trace_is_well_formed(sets, n_pristine, seed, strategy):
    manifest = [_item(f"p{i}") for i in range(n_pristine)] + [_item(f"d{i}", d) for i, d in enumerate(sets)]
    try:
        corpus = probe.build_sft_corpus(manifest, strategy=strategy, seed=seed)
    except ArgumentError:
        return  # partial placement can legitimately fail for huge defects
    for t in corpus:
        assert format_reward(t.trace_text) == 1.0
        assert t.steps[0]["op"] == "global_look" and t.steps[-1]["op"] == "score"
        assert sum(s["op"] == "global_look" for s in t.steps) == 1
        assert all(c.fits(4000, 3000) for c in t.crops)
