"""Orthonormal 2-D Haar analysis/synthesis and texture-energy region picking.

Subband naming: the first letter is the vertical (row-pair) filter, the second
the horizontal (column-pair) filter. So ``LH`` responds to vertical edges,
``HL`` to horizontal edges, ``HH`` to diagonal/checkerboard structure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError
from .model import Raster, Region


@dataclass(frozen=True, eq=False)
class Subbands:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    shape: tuple[int, int]  # (height, width) of the plane this level analysed, before padding


@dataclass(frozen=True, eq=False)
class SubbandPyramid:
    bands: tuple[Subbands, ...]  # index 0 is level 1 (finest)
    width: int
    height: int

    @property
    def levels(self) -> int:
        return len(self.bands)

    def coefficients(self):
        """Every coefficient plane needed for synthesis: deepest LL plus all details."""
        yield self.bands[-1].ll
        for b in self.bands:
            yield b.lh
            yield b.hl
            yield b.hh


def _analyse(x: np.ndarray) -> Subbands:
    h, w = x.shape
    # symmetric edge padding to even size; the original shape is kept for cropping back
    xp = np.pad(x, ((0, h % 2), (0, w % 2)), mode="symmetric")
    a = xp[0::2, 0::2]
    b = xp[0::2, 1::2]
    c = xp[1::2, 0::2]
    d = xp[1::2, 1::2]
    return Subbands(
        ll=(a + b + c + d) / 2.0,
        lh=(a - b + c - d) / 2.0,
        hl=(a + b - c - d) / 2.0,
        hh=(a - b - c + d) / 2.0,
        shape=(h, w),
    )


def _synthesise(ll, lh, hl, hh, shape) -> np.ndarray:
    a = (ll + lh + hl + hh) / 2.0
    b = (ll - lh + hl - hh) / 2.0
    c = (ll + lh - hl - hh) / 2.0
    d = (ll - lh - hl + hh) / 2.0
    ph, pw = ll.shape
    out = np.empty((2 * ph, 2 * pw))
    out[0::2, 0::2] = a
    out[0::2, 1::2] = b
    out[1::2, 0::2] = c
    out[1::2, 1::2] = d
    return out[: shape[0], : shape[1]]


def dwt2(raster, levels: int = 1) -> SubbandPyramid:
    """Multi-level Haar decomposition of the raster's luma plane.

    Accepts a :class:`Raster` or a 2-D array. Odd plane sizes are padded by
    edge symmetry at each level, so plane sizes at level l are
    ceil(H / 2**l) x ceil(W / 2**l).
    """
    plane = raster.gray() if isinstance(raster, Raster) else np.asarray(raster, dtype=np.float64)
    if plane.ndim != 2:
        raise ArgumentError(f"dwt2 needs a single plane, got shape {plane.shape}")
    if levels < 1:
        raise ArgumentError(f"levels must be >= 1, got {levels}")
    h, w = plane.shape
    if 2 ** levels > min(h, w):
        raise ArgumentError(f"{levels} levels too deep for a {w}x{h} raster")
    bands = []
    current = plane
    for _ in range(levels):
        sb = _analyse(current)
        bands.append(sb)
        current = sb.ll
    return SubbandPyramid(bands=tuple(bands), width=w, height=h)


def idwt2_array(pyramid: SubbandPyramid) -> np.ndarray:
    """Inverse transform returning the raw reconstructed plane (not clipped)."""
    for lvl, sb in enumerate(pyramid.bands, start=1):
        expected = (math.ceil(sb.shape[0] / 2), math.ceil(sb.shape[1] / 2))
        for name in ("ll", "lh", "hl", "hh"):
            if getattr(sb, name).shape != expected:
                raise ShapeError(
                    f"level {lvl} {name.upper()} plane is {getattr(sb, name).shape}, expected {expected}")
        if lvl > 1 and pyramid.bands[lvl - 2].ll.shape != sb.shape:
            raise ShapeError(f"level {lvl} analysed shape {sb.shape} does not match level {lvl - 1} LL")
    if pyramid.bands[0].shape != (pyramid.height, pyramid.width):
        raise ShapeError("level 1 shape does not match the pyramid's source size")

    current = pyramid.bands[-1].ll
    for sb in reversed(pyramid.bands):
        current = _synthesise(current, sb.lh, sb.hl, sb.hh, sb.shape)
    return current


def idwt2(pyramid: SubbandPyramid) -> Raster:
    """Inverse transform back to a single-channel raster.

    Floating-point round-off can push reconstructed samples a hair outside
    [0, 1]; those are clipped.
    """
    return Raster.clipped(idwt2_array(pyramid))


def pyramid_energy(pyramid: SubbandPyramid) -> float:
    return float(sum(np.sum(p ** 2) for p in pyramid.coefficients()))


@dataclass(frozen=True, eq=False)
class EnergyMap:
    values: np.ndarray   # (rows, cols), non-negative
    factor: int          # source pixels per map cell along each axis
    width: int           # source raster size
    height: int

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        f = self.factor
        cx = (col * f + min((col + 1) * f, self.width)) / 2.0
        cy = (row * f + min((row + 1) * f, self.height)) / 2.0
        return cx, cy


def texture_energy(pyramid: SubbandPyramid, cell: int) -> EnergyMap:
    """Mean squared level-1 detail energy (LH + HL + HH) per block of coefficients.

    ``cell`` is measured in level-1 coefficients, so each map entry covers
    ``2 * cell`` source pixels per side. Partial blocks at the right/bottom
    edges average over the coefficients they do contain.
    """
    if cell <= 0:
        raise ArgumentError(f"cell must be positive, got {cell}")
    sb = pyramid.bands[0]
    e = sb.lh ** 2 + sb.hl ** 2 + sb.hh ** 2
    ph, pw = e.shape
    rows, cols = math.ceil(ph / cell), math.ceil(pw / cell)
    padded = np.zeros((rows * cell, cols * cell))
    counts = np.zeros_like(padded)
    padded[:ph, :pw] = e
    counts[:ph, :pw] = 1.0
    sums = padded.reshape(rows, cell, cols, cell).sum(axis=(1, 3))
    ns = counts.reshape(rows, cell, cols, cell).sum(axis=(1, 3))
    return EnergyMap(values=sums / ns, factor=2 * cell, width=pyramid.width, height=pyramid.height)


def _centered_region(cx: float, cy: float, size: int, width: int, height: int) -> Region:
    x = int(round(cx - size / 2.0))
    y = int(round(cy - size / 2.0))
    x = min(max(x, 0), width - size)
    y = min(max(y, 0), height - size)
    return Region(x, y, size, size)


def select_texture_regions(energy: EnergyMap, k: int, region_size: int, min_separation: float) -> list[Region]:
    """Greedy pick of up to ``k`` square regions over the most textured cells.

    Cells are visited in decreasing energy (row-major index breaks ties); a
    candidate is skipped when its region centre lies closer than
    ``min_separation`` to an already chosen one. Zero-energy cells are never
    chosen.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if region_size <= 0 or region_size > min(energy.width, energy.height):
        raise ArgumentError(f"region_size {region_size} does not fit a {energy.width}x{energy.height} raster")
    flat = energy.values.ravel()
    order = np.argsort(-flat, kind="stable")
    chosen: list[Region] = []
    for idx in order:
        if len(chosen) == k or flat[idx] <= 0.0:
            break
        row, col = divmod(int(idx), energy.values.shape[1])
        cx, cy = energy.cell_center(row, col)
        region = _centered_region(cx, cy, region_size, energy.width, energy.height)
        rc = region.center
        if all(math.dist(rc, c.center) >= min_separation for c in chosen):
            chosen.append(region)
    return chosen
