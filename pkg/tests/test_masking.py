import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import mannwhitneyu

from reve.eeg_data import PREFERRED_CHANNELS
from reve.masking import (
    Mask,
    MaskParams,
    block_mask,
    make_mask,
    n_masked_target,
    nearest_masked_distance,
    partition,
    random_mask,
)
from reve.montage import resolve_positions

P20 = resolve_positions(PREFERRED_CHANNELS[:20])
P64 = resolve_positions(PREFERRED_CHANNELS[:64])


def test_half_up_rounding():
    assert n_masked_target(0.55, 220) == 121
    assert n_masked_target(0.5, 3) == 2
    assert n_masked_target(0.25, 220) == 55
    assert n_masked_target(1.0, 7) == 7


@pytest.mark.parametrize("mode", ["block", "random"])
def test_extreme_ratios(mode):
    params = MaskParams(ratio=0.0, mode=mode)
    assert make_mask(P20, 11, params, seed=0).visible.all()
    params = MaskParams(ratio=1.0, mode=mode)
    assert not make_mask(P20, 11, params, seed=0).visible.any()


def test_block_count_example():
    m = block_mask(P20, 11, MaskParams(), seed=0)
    assert m.n_masked == 121 and m.n_visible == 99
    assert m.B.shape == (20, 11) and set(np.unique(m.B)) <= {0, 1}


def test_random_count_example():
    assert random_mask(20, 11, 0.25, seed=1).n_masked == 55


@pytest.mark.parametrize("mode", ["block", "random"])
def test_deterministic_under_seed(mode):
    params = MaskParams(mode=mode)
    a = make_mask(P20, 11, params, seed=5).visible
    b = make_mask(P20, 11, params, seed=5).visible
    c = make_mask(P20, 11, params, seed=6).visible
    assert np.array_equal(a, b) and not np.array_equal(a, c)


@given(
    st.integers(1, 64),
    st.integers(1, 31),
    st.sampled_from([0.0, 0.1, 0.25, 0.55, 0.75, 0.9, 1.0]),
    st.sampled_from(["block", "random"]),
    st.integers(0, 2**32 - 1),
)
def test_exact_count_property(C, p, ratio, mode, seed):
    m = make_mask(P64[:C], p, MaskParams(ratio=ratio, mode=mode), seed=seed)
    assert m.n_masked == n_masked_target(ratio, C * p)
    assert m.n_masked + m.n_visible == C * p


def test_dropout_branch_masks_whole_channels():
    params = MaskParams(ratio=4 / 20, dropout_ratio=1.0, dropout_radius=0.0)
    for seed in range(20):
        m = block_mask(P20, 11, params, seed=seed)
        rows = m.visible.all(1) | (~m.visible).all(1)
        assert rows.all() and (~m.visible).all(1).sum() == 4


def test_temporal_block_is_contiguous():
    # single channel neighbourhood, radius of one patch on either side
    params = MaskParams(ratio=3 / 110, spatial_radius=0.0, temporal_radius=0.9, dropout_ratio=0.0)
    # an interior seed fills the target in one round with a contiguous
    # triple; a uniform draw of 3 of 110 tokens does so with p < 1e-3
    triples = 0
    for seed in range(40):
        m = block_mask(P20[:10], 11, params, seed=seed)
        c, t = np.nonzero(~m.visible)
        triples += len(set(c)) == 1 and t.max() - t.min() == 2
    assert triples >= 20


def test_random_mode_adjacency_matches_independence():
    # count temporally adjacent masked pairs; under a uniform exact-size
    # subset the pair probability is N_m (N_m - 1) / (n (n - 1))
    C, p, ratio = 20, 11, 0.55
    n = C * p
    k = n_masked_target(ratio, n)
    n_pairs = C * (p - 1)
    expected = n_pairs * k * (k - 1) / (n * (n - 1))
    counts = []
    for seed in range(1000):
        masked = ~random_mask(C, p, ratio, seed=seed).visible
        counts.append((masked[:, 1:] & masked[:, :-1]).sum())
    counts = np.array(counts)
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    assert abs(counts.mean() - expected) < 3 * se


def test_block_mode_is_more_clustered():
    block, rand = [], []
    params = MaskParams()
    for seed in range(200):
        block.append(nearest_masked_distance(block_mask(P20, 11, params, seed=seed), P20))
        rand.append(nearest_masked_distance(random_mask(20, 11, 0.55, seed=seed), P20))
    assert np.mean(block) < np.mean(rand)
    assert mannwhitneyu(block, rand, alternative="less").pvalue < 0.01


def test_invalid_params():
    for kw in (dict(ratio=1.5), dict(dropout_ratio=-0.1), dict(spatial_radius=-1), dict(mode="grid")):
        with pytest.raises(ValueError):
            MaskParams(**kw)
    with pytest.raises(ValueError):
        block_mask(np.zeros((0, 3)), 11, MaskParams(), seed=0)
    with pytest.raises(ValueError):
        random_mask(0, 11, 0.5)


# -- partition ---------------------------------------------------------------------


def test_all_visible_partition():
    E = np.random.default_rng(0).standard_normal((4, 5, 3))
    part = partition(E, Mask(np.ones((4, 5), bool)))
    np.testing.assert_array_equal(part.visible_tokens, E.reshape(20, 3))
    assert part.masked_index.size == 0


def test_checkerboard_partition_counts():
    vis = (np.add.outer(np.arange(5), np.arange(7)) % 2 == 0)
    part = partition(np.zeros((5, 7, 2)), Mask(vis))
    assert len(part.visible_index) == 18 and len(part.masked_index) == 17


@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_partition_reassemble_roundtrip(C, p, seed):
    rng = np.random.default_rng(seed)
    E = rng.standard_normal((C, p, 4))
    m = random_mask(C, p, 0.5, seed=seed)
    part = partition(E, m)
    # row-major channel-then-patch order
    assert np.all(np.diff(part.visible_index) > 0)
    np.testing.assert_array_equal(part.visible_coords(), np.argwhere(m.visible))
    np.testing.assert_array_equal(part.masked_coords(), np.argwhere(~m.visible))
    masked_tokens = E.reshape(C * p, 4)[part.masked_index]
    np.testing.assert_array_equal(part.reassemble(masked_tokens), E)


def test_partition_shape_mismatch():
    with pytest.raises(ValueError):
        partition(np.zeros((3, 4, 2)), Mask(np.ones((4, 3), bool)))
