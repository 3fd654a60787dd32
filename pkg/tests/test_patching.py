import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reve.eeg_data import EegRecording
from reve.patching import PatchConfig, TooShortError, overlap_average, patch_count, segment, unfold


def brute_force_count(T, w, o):
    s = w - o
    return sum(1 for start in range(0, T, s) if start + w <= T)


@pytest.mark.parametrize("T,w,o,expected", [(2000, 200, 20, 11), (200, 200, 20, 1), (2010, 200, 20, 11), (2180, 200, 20, 12)])
def test_patch_count_examples(T, w, o, expected):
    assert patch_count(T, w, o) == expected == brute_force_count(T, w, o)


def test_ceiling_form_disagrees():
    # the ceiling-plus-indicator expression undercounts at T=2000
    T, w, o = 2000, 200, 20
    s = w - o
    ceil_form = -(-(T - w) // s) + int((T - w) % s != 0)
    assert ceil_form == 10 and patch_count(T, w, o) == 11


@given(st.integers(1, 500).flatmap(lambda w: st.tuples(st.just(w), st.integers(0, w - 1), st.integers(w, 5000))))
def test_patch_count_matches_brute_force(args):
    w, o, T = args
    assert patch_count(T, w, o) == brute_force_count(T, w, o)


def test_too_short_and_bad_config():
    with pytest.raises(TooShortError):
        patch_count(199, 200, 20)
    with pytest.raises(ValueError):
        patch_count(1000, 200, 200)
    with pytest.raises(ValueError):
        PatchConfig(200, 200)
    with pytest.raises(TooShortError):
        segment(np.zeros((2, 100)))


def test_ramp_patch_starts():
    grid = segment(np.arange(2000, dtype=float)[None])
    assert grid.patches.shape == (1, 11, 200)
    np.testing.assert_array_equal(grid.patches[0, :, 0], 180 * np.arange(11))


@given(
    st.integers(1, 60).flatmap(lambda w: st.tuples(st.just(w), st.integers(0, w - 1), st.integers(w, 400), st.integers(1, 3)))
)
def test_segment_index_identity(args):
    w, o, T, C = args
    x = np.random.default_rng(T).standard_normal((C, T))
    cfg = PatchConfig(w, o)
    pt = unfold(x, cfg)
    p = patch_count(T, w, o)
    assert pt.shape == (C, p, w)
    k, j = np.meshgrid(np.arange(p), np.arange(w), indexing="ij")
    np.testing.assert_array_equal(pt, x[:, k * cfg.stride + j])
    assert (p - 1) * cfg.stride + w <= T < p * cfg.stride + w


def test_no_overlap_windows_are_contiguous_and_roundtrip():
    x = np.random.default_rng(0).standard_normal((3, 1050))
    grid = segment(x, PatchConfig(100, 0))
    np.testing.assert_array_equal(grid.patches.reshape(3, -1), x[:, :1000])
    np.testing.assert_array_equal(overlap_average(grid), x[:, :1000])


def test_overlap_average_recovers_prefix_with_overlap():
    x = np.random.default_rng(1).standard_normal((2, 2000))
    grid = segment(x, PatchConfig(200, 20))
    np.testing.assert_allclose(overlap_average(grid), x, atol=1e-12)


def test_segment_accepts_recording_and_copies():
    x = np.arange(400, dtype=float).reshape(1, 400)
    rec = EegRecording(x, 200.0, ["Cz"], "s", "u")
    grid = segment(rec, PatchConfig(200, 20))
    assert grid.source_T == 400 and grid.n_patches == 2 and grid.n_channels == 1
    grid.patches[0, 0, 0] = -1
    assert x[0, 0] == 0
