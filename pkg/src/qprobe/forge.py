"""Localized degradation synthesis and importance-weighted MOS ground truth.

Each injector touches only the pixels of its region; ``forge_item`` places
defects on texture-rich cells found by the Haar energy map, feathers them
into the source, and scores the result with :func:`synthesize_mos`.
"""
from __future__ import annotations

import json
import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import wavelet
from .errors import ArgumentError, ForgeError, ShapeError
from .model import (BenchmarkItem, DefectKind, DefectRecord, Raster, Region, atomic_write_text,
                    save_raster, write_manifest)

log = logging.getLogger(__name__)

MOS_AREA_SATURATION = 0.05
PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class ForgeConfig:
    defect_count_range: tuple[int, int] = (1, 3)
    kinds_enabled: tuple[str, ...] = ("blur", "compression", "mosaic", "noise")
    severity_range: tuple[float, float] = (0.3, 1.0)
    region_size_range: tuple[int, int] = (48, 128)
    feather: int = 4
    pristine_fraction: float = 0.2
    seed: int = 0
    source_tag: str = "vista"
    energy_cell: int = 8  # level-1 coefficients per energy-map cell

    def __post_init__(self):
        lo, hi = self.defect_count_range
        if not (1 <= lo <= hi):
            raise ArgumentError(f"defect_count_range must satisfy 1 <= min <= max, got {self.defect_count_range}")
        slo, shi = self.severity_range
        if not (0.0 < slo <= shi <= 1.0):
            raise ArgumentError(f"severity_range must lie in (0,1] and be ordered, got {self.severity_range}")
        rlo, rhi = self.region_size_range
        if not (1 <= rlo <= rhi):
            raise ArgumentError(f"region_size_range must be ordered and positive, got {self.region_size_range}")
        if not self.kinds_enabled:
            raise ArgumentError("kinds_enabled must not be empty")
        kinds = tuple(sorted({DefectKind(k).value for k in self.kinds_enabled}))
        object.__setattr__(self, "kinds_enabled", kinds)
        if not (0.0 <= self.pristine_fraction <= 1.0):
            raise ArgumentError(f"pristine_fraction must lie in [0,1], got {self.pristine_fraction}")
        if self.feather < 0 or self.energy_cell <= 0:
            raise ArgumentError("feather must be >= 0 and energy_cell > 0")

    @classmethod
    def from_dict(cls, d: dict) -> ForgeConfig:
        d = dict(d)
        for key in ("defect_count_range", "severity_range", "region_size_range", "kinds_enabled"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _check_severity(severity):
    if not (0.0 < severity <= 1.0):
        raise ArgumentError(f"severity must lie in (0,1], got {severity}")


def _check_region(raster: Raster, region: Region):
    if not raster.contains(region):
        raise ArgumentError(f"region {region.as_tuple()} outside {raster.width}x{raster.height} raster")


def _replace_region(raster: Raster, region: Region, patch: np.ndarray) -> Raster:
    out = np.array(raster.data)
    out[region.y:region.y1, region.x:region.x1] = np.clip(patch, 0.0, 1.0)
    return Raster(out)


def blur_sigma(severity: float) -> float:
    return 0.5 + 5.5 * severity


def mosaic_block(severity: float) -> int:
    return int(math.floor(2 + 30 * severity + 0.5))


def dct_keep_index(severity: float) -> int:
    """Highest zigzag index that survives quantisation."""
    return int(math.floor(63 * (1.0 - severity) + 0.5))


def inject_blur(raster: Raster, region: Region, severity: float) -> Raster:
    """Gaussian blur (sigma = 0.5 + 5.5*severity) of the region, using its surroundings as context."""
    _check_severity(severity)
    _check_region(raster, region)
    sigma = blur_sigma(severity)
    m = int(math.ceil(4 * sigma)) + 1
    x0, y0 = max(region.x - m, 0), max(region.y - m, 0)
    x1, y1 = min(region.x1 + m, raster.width), min(region.y1 + m, raster.height)
    window = raster.data[y0:y1, x0:x1]
    blurred = ndimage.gaussian_filter(window, sigma=(sigma, sigma, 0), mode="reflect", truncate=4.0)
    patch = blurred[region.y - y0:region.y1 - y0, region.x - x0:region.x1 - x0]
    return _replace_region(raster, region, patch)


def inject_mosaic(raster: Raster, region: Region, severity: float) -> Raster:
    """Block-average pixelation anchored at the region's top-left corner.

    A leftover strip narrower than the block side is merged into the last
    block rather than averaged on its own, so coarser severities never
    produce finer edge blocks.
    """
    _check_severity(severity)
    _check_region(raster, region)
    side = mosaic_block(severity)
    patch = np.array(raster.data[region.y:region.y1, region.x:region.x1])
    for y0, y1 in _block_spans(region.h, side):
        for x0, x1 in _block_spans(region.w, side):
            block = patch[y0:y1, x0:x1]
            block[...] = block.mean(axis=(0, 1))
    return _replace_region(raster, region, patch)


def _block_spans(n: int, side: int) -> list[tuple[int, int]]:
    edges = [i * side for i in range(max(1, n // side))] + [n]
    return list(zip(edges[:-1], edges[1:]))


def zigzag_order(n: int = 8) -> np.ndarray:
    """(n, n) array giving each coefficient's JPEG zigzag index."""
    coords = sorted(((i, j) for i in range(n) for j in range(n)),
                    key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else ij[1]))
    order = np.empty((n, n), dtype=int)
    for idx, (i, j) in enumerate(coords):
        order[i, j] = idx
    return order


_ZIGZAG = zigzag_order(8)


def inject_block_compression(raster: Raster, region: Region, severity: float) -> Raster:
    """JPEG-style 8x8 DCT truncation inside the region.

    Coefficients with zigzag index above ``round(63 * (1 - severity))`` are
    zeroed. Partial blocks on the region's right/bottom edge are edge-padded
    to 8x8 before the transform and cropped afterwards.
    """
    _check_severity(severity)
    _check_region(raster, region)
    keep = _ZIGZAG <= dct_keep_index(severity)
    patch = np.array(raster.data[region.y:region.y1, region.x:region.x1])
    ph = -region.h % 8
    pw = -region.w % 8
    padded = np.pad(patch, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W, C = padded.shape
    blocks = padded.reshape(H // 8, 8, W // 8, 8, C).transpose(0, 2, 4, 1, 3)
    coeffs = sfft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coeffs *= keep
    rec = sfft.idctn(coeffs, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, C)
    return _replace_region(raster, region, rec[: region.h, : region.w])


def inject_noise(raster: Raster, region: Region, severity: float, seed: int) -> Raster:
    _check_severity(severity)
    _check_region(raster, region)
    rng = np.random.default_rng(seed)
    patch = raster.data[region.y:region.y1, region.x:region.x1]
    noisy = patch + rng.normal(0.0, 0.25 * severity, size=patch.shape)
    return _replace_region(raster, region, noisy)


def feather_mask(shape: tuple[int, int], region: Region, feather: int) -> np.ndarray:
    """Separable blend mask: 1 on the region shrunk by ``feather``, 0 beyond the region grown by it."""
    h, w = shape

    def axis(n, lo, hi):
        u = np.arange(n) + 0.5
        if feather == 0:
            return ((u > lo) & (u < hi)).astype(np.float64)
        inner = np.minimum(u - (lo - feather), (hi + feather) - u)
        return np.clip(inner / (2.0 * feather), 0.0, 1.0)

    return np.outer(axis(h, region.y, region.y1), axis(w, region.x, region.x1))


def feathered_composite(base: Raster, degraded: Raster, region: Region, feather: int) -> Raster:
    if base.data.shape != degraded.data.shape:
        raise ShapeError(f"composite inputs differ in shape: {base.data.shape} vs {degraded.data.shape}")
    if feather < 0:
        raise ArgumentError(f"feather must be >= 0, got {feather}")
    mask = feather_mask((base.height, base.width), region, feather)[:, :, None]
    out = base.data + mask * (degraded.data - base.data)
    # exact copies where the mask is 0 or 1, so untouched pixels stay bit-identical
    out = np.where(mask == 0.0, base.data, np.where(mask == 1.0, degraded.data, out))
    return Raster.clipped(out)


def synthesize_mos(defects, image_area: float) -> float:
    """Importance-weighted MOS surrogate on the [1, 5] scale.

    Each defect's penalty is importance * severity, scaled by its area
    relative to 5% of the image (capped at 1). The summed penalty is capped
    at 1 and mapped linearly onto [5, 1].
    """
    if image_area <= 0:
        raise ArgumentError("image_area must be positive")
    penalty = 0.0
    for d in defects:
        penalty += d.importance * d.severity * min(1.0, d.region.area / (MOS_AREA_SATURATION * image_area))
    return 5.0 - 4.0 * min(1.0, penalty)


def item_seed(seed: int, item_id: str) -> int:
    """Per-item seed derived from (config seed, id) so processing order never matters."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(item_id.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def inject(raster: Raster, region: Region, kind, severity: float, seed: int) -> Raster:
    kind = DefectKind(kind)
    if kind is DefectKind.BLUR:
        return inject_blur(raster, region, severity)
    if kind is DefectKind.MOSAIC:
        return inject_mosaic(raster, region, severity)
    if kind is DefectKind.COMPRESSION:
        return inject_block_compression(raster, region, severity)
    return inject_noise(raster, region, severity, seed)


def _place_regions(source: Raster, config: ForgeConfig, n: int, size: int, rng) -> list[Region]:
    pyr = wavelet.dwt2(source, levels=1)
    energy = wavelet.texture_energy(pyr, config.energy_cell)
    candidates = wavelet.select_texture_regions(energy, k=PLACEMENT_ATTEMPTS, region_size=size,
                                                min_separation=size)
    placed: list[Region] = []
    attempts = 0
    for cand in candidates:
        if len(placed) == n or attempts >= PLACEMENT_ATTEMPTS:
            break
        attempts += 1
        if not any(cand.overlaps(p) for p in placed):
            placed.append(cand)
    # texture-free sources (or too few textured cells): seeded uniform placement
    while len(placed) < n and attempts < PLACEMENT_ATTEMPTS:
        attempts += 1
        cand = Region(int(rng.integers(0, source.width - size + 1)),
                      int(rng.integers(0, source.height - size + 1)), size, size)
        if not any(cand.overlaps(p) for p in placed):
            placed.append(cand)
    if len(placed) < n:
        raise ForgeError(f"no non-overlapping placement for {n} defects of size {size} "
                         f"after {PLACEMENT_ATTEMPTS} attempts")
    return placed


def forge_item(source: Raster, config: ForgeConfig, item_id: str) -> tuple[Raster, BenchmarkItem]:
    seed = item_seed(config.seed, item_id)
    rng = np.random.default_rng(seed)
    image_path = f"{item_id}.png"
    pristine = rng.random() < config.pristine_fraction
    if pristine:
        item = BenchmarkItem(id=item_id, image_path=image_path, width=source.width, height=source.height,
                             defects=(), mos=5.0, seed=seed, source_tag=config.source_tag)
        return source, item

    n = int(rng.integers(config.defect_count_range[0], config.defect_count_range[1] + 1))
    size = int(rng.integers(config.region_size_range[0], config.region_size_range[1] + 1))
    if size > min(source.width, source.height):
        raise ForgeError(f"source {source.width}x{source.height} too small for {size}px defects")
    regions = _place_regions(source, config, n, size, rng)

    image = source
    defects = []
    for rank, region in enumerate(regions):
        kind = config.kinds_enabled[int(rng.integers(len(config.kinds_enabled)))]
        severity = float(rng.uniform(*config.severity_range))
        importance = 1.0 if n == 1 else 1.0 - 0.8 * rank / (n - 1)
        noise_seed = int(rng.integers(2 ** 31))
        degraded = inject(image, region, kind, severity, noise_seed)
        image = feathered_composite(image, degraded, region, config.feather)
        defects.append(DefectRecord(region=region, kind=kind, severity=severity, importance=importance))
    mos = synthesize_mos(defects, source.width * source.height)
    item = BenchmarkItem(id=item_id, image_path=image_path, width=source.width, height=source.height,
                         defects=tuple(defects), mos=mos, seed=seed, source_tag=config.source_tag)
    return image, item


@dataclass
class BuildResult:
    items: list[BenchmarkItem]
    manifest_path: Path
    failures: dict[str, str] = field(default_factory=dict)


def build_benchmark(sources: dict[str, Raster] | list, config: ForgeConfig, out_dir, jobs: int = 1) -> BuildResult:
    """Forge every source, writing ``<id>.png``, ``manifest.json`` and ``provenance.json``.

    ``sources`` maps item ids to rasters (or is a list of ``(id, loader)``
    pairs where ``loader()`` returns a raster). Items come out in id order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = sorted(sources.items() if isinstance(sources, dict) else sources, key=lambda p: p[0])

    def work(pair):
        item_id, src = pair
        raster = src() if callable(src) else src
        image, item = forge_item(raster, config, item_id)
        save_raster(image, out_dir / item.image_path)
        return item

    items, failures = [], {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = [(pid, pool.submit(work, (pid, src))) for pid, src in pairs]
        for pid, fut in futures:
            try:
                items.append(fut.result())
            except (ForgeError, ArgumentError, OSError) as exc:
                failures[pid] = str(exc)
    manifest_path = out_dir / "manifest.json"
    write_manifest(items, manifest_path)
    provenance = {"config": asdict(config), "items": len(items), "failures": failures}
    atomic_write_text(out_dir / "provenance.json", json.dumps(provenance, indent=2, sort_keys=True) + "\n")
    return BuildResult(items=items, manifest_path=manifest_path, failures=failures)
