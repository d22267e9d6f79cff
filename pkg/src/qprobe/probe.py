"""Crop placement strategies and probing-trajectory synthesis for cloning corpora."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from . import wavelet
from .errors import ArgumentError, RegionError
from .model import BenchmarkItem, Raster, Region, atomic_write_text, union_box
from .rewards import format_reward

DEFAULT_CROP = 768
DEFAULT_CONTEXT_MARGIN = 0.3
DEFAULT_MIX = (2, 1)
PRISTINE_CROP_QUOTA = 0.3
PARTIAL_MIN_CONTEXT = 0.25
PLACEMENT_ATTEMPTS = 100


class CropStrategy(str, Enum):
    DEGRADATION_ONLY = "degradation_only"
    PARTIAL = "partial"
    ALL_PLUS_CONTEXT = "all_plus_context"


class TrajectoryKind(str, Enum):
    DEGRADATION_CAPTURE = "degradation_capture"
    CLARITY_LOCALIZATION = "clarity_localization"
    DISTANT_VIEW = "distant_view"


@dataclass(frozen=True)
class Trajectory:
    item_id: str
    kind: TrajectoryKind
    steps: tuple[dict, ...]
    trace_text: str
    coverage: float
    context_ratio: float

    @property
    def crops(self) -> list[Region]:
        return [Region(*s["region"]) for s in self.steps if s["op"] == "crop"]

    @property
    def final_score(self) -> float:
        return self.steps[-1]["value"]

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "kind": self.kind.value, "steps": [dict(s) for s in self.steps],
                "trace_text": self.trace_text, "coverage": self.coverage, "context_ratio": self.context_ratio}

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        return cls(item_id=d["item_id"], kind=TrajectoryKind(d["kind"]), steps=tuple(d["steps"]),
                   trace_text=d["trace_text"], coverage=d["coverage"], context_ratio=d["context_ratio"])


def _check_crop(crop: int, image):
    w, h = image
    if crop <= 0 or crop > min(w, h):
        raise ArgumentError(f"crop {crop} does not fit a {w}x{h} image")


def _clamped_window(cx: float, cy: float, side_w: int, side_h: int, image) -> Region:
    w, h = image
    x = int(math.floor(cx - side_w / 2.0 + 0.5))
    y = int(math.floor(cy - side_h / 2.0 + 0.5))
    x = min(max(x, 0), w - side_w)
    y = min(max(y, 0), h - side_h)
    return Region(x, y, side_w, side_h)


def crop_degradation_only(defects, crop: int = DEFAULT_CROP, image=(4000, 3000)) -> Region:
    """Crop-sized window centred on the most important defect (first one on ties)."""
    defects = list(defects)
    if not defects:
        raise ArgumentError("degradation-only crop needs at least one defect")
    _check_crop(crop, image)
    top = max(defects, key=lambda d: d.importance)
    cx, cy = top.region.center
    return _clamped_window(cx, cy, crop, crop, image)


def crop_all_plus_context(defects, crop: int = DEFAULT_CROP, context_margin: float = DEFAULT_CONTEXT_MARGIN,
                          image=(4000, 3000)) -> Region:
    """Window around every defect, padded by ``context_margin`` of the union size, at least crop x crop."""
    defects = list(defects)
    if not defects:
        raise ArgumentError("all-plus-context crop needs at least one defect")
    _check_crop(crop, image)
    w, h = image
    box = union_box(d.region for d in defects)
    if not box.fits(w, h):
        raise RegionError(f"defect union {box.as_tuple()} exceeds the {w}x{h} image")
    mx, my = context_margin * box.w, context_margin * box.h
    x0 = max(0, int(math.floor(box.x - mx)))
    y0 = max(0, int(math.floor(box.y - my)))
    x1 = min(w, int(math.ceil(box.x1 + mx)))
    y1 = min(h, int(math.ceil(box.y1 + my)))
    side_w = max(x1 - x0, crop)
    side_h = max(y1 - y0, crop)
    return _clamped_window((x0 + x1) / 2.0, (y0 + y1) / 2.0, side_w, side_h, image)


def coverage(region: Region, defects) -> tuple[float, float]:
    """(fraction of total defect area inside the region, non-defect share of the region)."""
    defects = list(defects)
    inside = sum(region.intersection_area(d.region) for d in defects)
    total = sum(d.region.area for d in defects)
    cov = 1.0 if total == 0 else inside / total
    return cov, 1.0 - inside / region.area


def crop_partial(defects, crop: int = DEFAULT_CROP, image=(4000, 3000), seed: int = 0) -> Region:
    """Crop that cuts through a defect: coverage strictly inside (0, 1), at least 25% clean context."""
    defects = list(defects)
    if not defects:
        raise ArgumentError("partial crop needs at least one defect")
    _check_crop(crop, image)
    w, h = image
    rng = np.random.default_rng(seed)
    for _ in range(PLACEMENT_ATTEMPTS):
        d = defects[int(rng.integers(len(defects)))].region
        xs = (max(0, d.x - crop + 1), min(w - crop, d.x1 - 1))
        ys = (max(0, d.y - crop + 1), min(h - crop, d.y1 - 1))
        if xs[0] > xs[1] or ys[0] > ys[1]:
            continue
        region = Region(int(rng.integers(xs[0], xs[1] + 1)), int(rng.integers(ys[0], ys[1] + 1)), crop, crop)
        own = region.intersection_area(d) / d.area
        cov, ctx = coverage(region, defects)
        if 0.0 < own < 1.0 and 0.0 < cov < 1.0 and ctx >= PARTIAL_MIN_CONTEXT:
            return region
    raise ArgumentError(f"no partial crop placement found in {PLACEMENT_ATTEMPTS} attempts")


def strategy_crop(strategy, defects, crop, image, seed=0, context_margin=DEFAULT_CONTEXT_MARGIN) -> Region:
    strategy = CropStrategy(strategy)
    if strategy is CropStrategy.DEGRADATION_ONLY:
        return crop_degradation_only(defects, crop, image)
    if strategy is CropStrategy.PARTIAL:
        return crop_partial(defects, crop, image, seed)
    return crop_all_plus_context(defects, crop, context_margin, image)


def clean_crop(item: BenchmarkItem, crop: int, raster: Raster | None = None, seed: int = 0) -> Region:
    """Crop over the most textured area that avoids every defect.

    With a raster, candidates come from the Haar texture-energy ranking;
    otherwise (or if no textured candidate is clean) windows are drawn from a
    seeded generator.
    """
    image = (item.width, item.height)
    _check_crop(crop, image)

    def clean(r):
        return not any(r.overlaps(d.region) for d in item.defects)

    if raster is not None and min(raster.width, raster.height) >= 2:
        cell = max(1, crop // 8)
        energy = wavelet.texture_energy(wavelet.dwt2(raster, 1), cell)
        for cand in wavelet.select_texture_regions(energy, PLACEMENT_ATTEMPTS, crop, 0.0):
            if clean(cand):
                return cand
    rng = np.random.default_rng(seed)
    for _ in range(PLACEMENT_ATTEMPTS):
        cand = Region(int(rng.integers(0, item.width - crop + 1)), int(rng.integers(0, item.height - crop + 1)),
                      crop, crop)
        if clean(cand):
            return cand
    raise ArgumentError(f"item {item.id}: no defect-free crop placement in {PLACEMENT_ATTEMPTS} attempts")


def _fmt_score(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".")


def render_trace(steps, image=None) -> str:
    """Serialise trajectory steps into the tagged trace grammar checked by ``format_reward``."""
    parts = []
    size = f" {image[0]}x{image[1]}" if image else ""
    for s in steps:
        op = s["op"]
        if op == "global_look":
            parts.append(f"<think>Global look over the full{size} view. {s.get('note', '')}".rstrip() + "</think>")
        elif op == "crop":
            x, y, w, h = s["region"]
            parts.append(f"<crop x={x} y={y} w={w} h={h}/>")
        elif op == "observe":
            parts.append("<observe/>" + s.get("note", ""))
        elif op == "verify":
            x, y, w, h = s["region"]
            parts.append(f" Verified region {x},{y},{w},{h} against its surrounding context.")
        elif op == "score":
            parts.append(f"<score>{_fmt_score(s['value'])}</score>")
        else:
            raise ArgumentError(f"unknown step {op!r}")
    return "".join(parts)


def generate_trajectory(item: BenchmarkItem, strategy=CropStrategy.ALL_PLUS_CONTEXT,
                        kind=TrajectoryKind.DEGRADATION_CAPTURE, seed: int = 0, crop: int = DEFAULT_CROP,
                        raster: Raster | None = None) -> Trajectory:
    kind = TrajectoryKind(kind)
    image = (item.width, item.height)
    side = min(crop, item.width, item.height)
    steps: list[dict] = [{"op": "global_look"}]
    region = None
    if kind is TrajectoryKind.DEGRADATION_CAPTURE:
        if item.is_pristine:
            raise ArgumentError(f"item {item.id}: degradation capture needs a defective item")
        region = strategy_crop(strategy, item.defects, side, image, seed)
        cov, _ = coverage(region, item.defects)
        kinds = ", ".join(sorted({d.kind.value for d in item.defects}))
        steps[0]["note"] = "Some areas may hide local artifacts; zooming in."
        steps += [{"op": "crop", "region": list(region.as_tuple())},
                  {"op": "observe", "note": f" Zoomed view shows {kinds} artifacts; {cov:.0%} of the degraded area is in view."}]
    elif kind is TrajectoryKind.CLARITY_LOCALIZATION:
        region = clean_crop(item, side, raster, seed)
        steps[0]["note"] = "Checking whether the detailed foreground is genuinely sharp."
        steps += [{"op": "crop", "region": list(region.as_tuple())},
                  {"op": "observe", "note": " Zoomed view is clean with natural detail."},
                  {"op": "verify", "region": list(region.as_tuple())}]
    else:
        steps[0]["note"] = "The overview is sufficient; no zoom needed."
    steps.append({"op": "score", "value": float(item.mos)})
    if region is None:
        cov, ctx = (1.0 if item.is_pristine else 0.0), 1.0
    else:
        cov, ctx = coverage(region, item.defects)
    return Trajectory(item_id=item.id, kind=kind, steps=tuple(steps), trace_text=render_trace(steps, image),
                      coverage=cov, context_ratio=ctx)


def build_sft_corpus(manifest, mix=DEFAULT_MIX, strategy=CropStrategy.ALL_PLUS_CONTEXT, seed: int = 0,
                     crop: int = DEFAULT_CROP, rasters: dict | None = None) -> list[Trajectory]:
    """Mixed-resolution cloning corpus with a pristine-crop quota.

    Crop-bearing trajectories come from every pristine item (clarity checks)
    plus as many defective items (degradation capture with ``strategy``) as
    the 30% pristine-crop quota allows. Low-resolution distant-view
    trajectories are added at ``mix[0]:mix[1]`` relative to the crop-bearing
    count, cycling through a seeded permutation of all items.
    """
    items = list(manifest)
    if not items:
        raise ArgumentError("manifest is empty")
    low, high = mix
    if low < 0 or high <= 0:
        raise ArgumentError(f"mix must be (low >= 0, high > 0), got {mix}")
    rasters = rasters or {}
    rng = np.random.default_rng(seed)
    pristine = [it for it in items if it.is_pristine]
    defective = [it for it in items if not it.is_pristine]
    if defective and not pristine:
        raise ArgumentError("pristine-crop quota unreachable: manifest has no pristine items")
    max_defective = math.floor(len(pristine) * (1 - PRISTINE_CROP_QUOTA) / PRISTINE_CROP_QUOTA + 1e-9)
    order = rng.permutation(len(defective))
    chosen_defective = [defective[i] for i in sorted(order[:max_defective])]

    def sub_seed(i):
        return int(rng.integers(2 ** 31)) ^ i

    corpus = []
    for i, it in enumerate(pristine):
        corpus.append(generate_trajectory(it, strategy, TrajectoryKind.CLARITY_LOCALIZATION, sub_seed(i), crop,
                                          rasters.get(it.id)))
    for i, it in enumerate(chosen_defective):
        corpus.append(generate_trajectory(it, strategy, TrajectoryKind.DEGRADATION_CAPTURE, sub_seed(i), crop))
    n_low = int(round(len(corpus) * low / high))
    perm = rng.permutation(len(items))
    for i in range(n_low):
        it = items[perm[i % len(items)]]
        corpus.append(generate_trajectory(it, strategy, TrajectoryKind.DISTANT_VIEW, 0, crop))
    return [corpus[i] for i in rng.permutation(len(corpus))]


def crop_score_correlation(corpus, threshold: float = 3.0) -> float:
    """Pearson correlation between 'has a crop' and 'final score < threshold' (0 if either is constant)."""
    has_crop = np.array([bool(t.crops) for t in corpus], dtype=float)
    low = np.array([t.final_score < threshold for t in corpus], dtype=float)
    if has_crop.std() == 0 or low.std() == 0:
        return 0.0
    return float(np.corrcoef(has_crop, low)[0, 1])


def write_corpus(corpus, path) -> None:
    atomic_write_text(path, "".join(json.dumps(t.to_dict()) + "\n" for t in corpus))


def read_corpus(path) -> list[Trajectory]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [Trajectory.from_dict(json.loads(line)) for line in lines if line.strip()]


def validate_corpus(corpus) -> list[str]:
    """Item ids whose trace text fails the format grammar."""
    return [t.item_id for t in corpus if format_reward(t.trace_text) != 1.0]
