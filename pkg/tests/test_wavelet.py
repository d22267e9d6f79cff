import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qprobe import wavelet
from qprobe.errors import ArgumentError, ShapeError
from qprobe.model import Raster
from qprobe.wavelet import EnergyMap, SubbandPyramid, Subbands

HAAR = np.array([[1.0, 1.0], [1.0, -1.0]]) / math.sqrt(2.0)


def block_detail_energy(x):
    """Oracle: per 2x2 block, detail energy = block energy minus the squared LL coefficient."""
    h, w = x.shape
    b = x.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3)
    total = (b ** 2).sum(axis=(2, 3))
    ll = b.sum(axis=(2, 3)) / 2.0
    return total - ll ** 2


def test_constant_has_no_detail():
    pyr = wavelet.dwt2(Raster(np.full((8, 8), 0.5)))
    sb = pyr.bands[0]
    for plane in (sb.lh, sb.hl, sb.hh):
        assert not plane.any()


def test_two_by_two_butterfly_matches_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.random((2, 2))
        y = HAAR @ x @ HAAR.T  # separable orthonormal Haar
        sb = wavelet.dwt2(x).bands[0]
        assert sb.ll[0, 0] == pytest.approx(x.sum() / 2, abs=1e-12)
        assert sb.ll[0, 0] == pytest.approx(y[0, 0], abs=1e-12)
        assert sb.lh[0, 0] == pytest.approx(y[0, 1], abs=1e-12)
        assert sb.hl[0, 0] == pytest.approx(y[1, 0], abs=1e-12)
        assert sb.hh[0, 0] == pytest.approx(y[1, 1], abs=1e-12)


def test_too_many_levels():
    with pytest.raises(ArgumentError):
        wavelet.dwt2(np.zeros((4, 4)), levels=3)


def test_plane_sizes_follow_ceil_rule():
    pyr = wavelet.dwt2(np.random.default_rng(1).random((37, 23)), levels=3)
    for lvl, sb in enumerate(pyr.bands, start=1):
        assert sb.ll.shape == (math.ceil(37 / 2 ** lvl), math.ceil(23 / 2 ** lvl))


def test_random_64_reconstructs():
    x = np.random.default_rng(2).random((64, 64))
    rec = wavelet.idwt2(wavelet.dwt2(x, levels=4))
    assert np.max(np.abs(rec.data[:, :, 0] - x)) <= 1e-6


def test_wrong_plane_size_is_shape_error():
    pyr = wavelet.dwt2(np.zeros((8, 8)))
    sb = pyr.bands[0]
    bad = SubbandPyramid((Subbands(sb.ll, np.zeros((3, 4)), sb.hl, sb.hh, sb.shape),), 8, 8)
    with pytest.raises(ShapeError):
        wavelet.idwt2(bad)


def test_all_zero_pyramid():
    z = np.zeros((4, 4))
    pyr = SubbandPyramid((Subbands(z, z, z, z, (8, 8)),), 8, 8)
    assert not wavelet.idwt2(pyr).samples().any()


def test_flat_raster_energy_is_zero():
    e = wavelet.texture_energy(wavelet.dwt2(np.full((32, 32), 0.3)), 4)
    assert not e.values.any()


def test_checkerboard_half_has_more_energy_than_flat_half():
    x = np.full((32, 32), 0.5)
    x[:, 16:] = (np.indices((32, 16)).sum(axis=0) % 2).astype(float)
    e = wavelet.texture_energy(wavelet.dwt2(x), 4)
    oracle = block_detail_energy(x).reshape(4, 4, 4, 4).mean(axis=(1, 3))
    np.testing.assert_allclose(e.values, oracle, atol=1e-12)
    assert e.values[:, 2:].min() > e.values[:, :2].max()


def test_nonpositive_cell():
    with pytest.raises(ArgumentError):
        wavelet.texture_energy(wavelet.dwt2(np.zeros((8, 8))), 0)


def _map(values, factor=8):
    values = np.asarray(values, dtype=float)
    return EnergyMap(values, factor, values.shape[1] * factor, values.shape[0] * factor)


def test_single_nonzero_cell():
    v = np.zeros((4, 4))
    v[2, 1] = 3.0
    regions = wavelet.select_texture_regions(_map(v), 3, 8, 0)
    assert len(regions) == 1
    assert regions[0].center == _map(v).cell_center(2, 1)


def test_tie_prefers_row_major_first():
    v = np.zeros((4, 4))
    v[3, 0] = v[1, 2] = 1.0
    (r,) = wavelet.select_texture_regions(_map(v), 1, 8, 0)
    assert r.center == _map(v).cell_center(1, 2)


def test_uniform_map_with_huge_separation_gives_one_region():
    m = _map(np.ones((4, 4)))
    # greedy oracle: the first cell is always taken, every later one is within the image diagonal
    assert len(wavelet.select_texture_regions(m, 2, 8, min_separation=1e9)) == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_perfect_reconstruction_any_size(h, w, levels, seed):
    levels = min(levels, int(math.log2(min(h, w)))) if min(h, w) >= 2 else 0
    if levels < 1:
        return
    x = np.random.default_rng(seed).random((h, w))
    rec = wavelet.idwt2_array(wavelet.dwt2(x, levels))
    assert np.max(np.abs(rec - x)) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_parseval_on_compatible_sizes(hb, wb, levels, seed):
    x = np.random.default_rng(seed).random((hb * 2 ** levels, wb * 2 ** levels))
    pyr = wavelet.dwt2(x, levels)
    assert wavelet.pyramid_energy(pyr) == pytest.approx(float(np.sum(x ** 2)), rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (32, 32), elements=st.floats(0, 1)), st.integers(0, 3), st.integers(0, 3))
def test_energy_is_translation_equivariant_by_whole_cells(x, dr, dc):
    cell = 2  # level-1 coefficients, i.e. 4 source pixels
    e0 = wavelet.texture_energy(wavelet.dwt2(x), cell).values
    shifted = np.roll(x, (4 * dr, 4 * dc), axis=(0, 1))
    e1 = wavelet.texture_energy(wavelet.dwt2(shifted), cell).values
    np.testing.assert_allclose(e1, np.roll(e0, (dr, dc), axis=(0, 1)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.integers(1, 10), st.integers(4, 40),
       st.floats(0, 60))
def test_selected_regions_are_separated_and_inside(values, k, size, sep):
    m = _map(values)
    regions = wavelet.select_texture_regions(m, k, size, sep)
    assert len(regions) <= k
    for i, a in enumerate(regions):
        assert a.fits(m.width, m.height)
        for b in regions[i + 1:]:
            assert math.dist(a.center, b.center) >= sep
