import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from slotrecon.errors import ConfigError
from slotrecon.masks import (
    BoundingBox,
    ModelOutput,
    block_columns,
    block_pattern,
    boxes_from_masks,
    check_simplex,
    default_mask_source,
    extract_masks,
    hard_masks,
    resize_masks,
)


def test_resize_identity(rng):
    m = rng.random((3, 4, 5))
    np.testing.assert_array_equal(resize_masks(m, 4, 5), m)


@pytest.mark.parametrize("size", [(1, 1), (3, 7), (16, 16), (64, 48)])
def test_resize_keeps_constants(size):
    out = resize_masks(np.full((2, 5, 5), 0.3), *size)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


def test_resize_half_pixel_bilinear():
    m = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    out = resize_masks(m, 2, 4)
    np.testing.assert_allclose(out[0, 0], [0, 0.25, 0.75, 1])
    np.testing.assert_allclose(out[0, 1], [0, 0.25, 0.75, 1])


def test_resize_preserves_simplex(rng):
    logits = rng.normal(size=(5, 4, 4))
    m = np.exp(logits) / np.exp(logits).sum(0)
    assert check_simplex(resize_masks(m, 64, 64))


def test_resize_rejects_empty():
    with pytest.raises(ValueError):
        resize_masks(np.ones((1, 2, 2)), 0, 3)


def test_hard_masks_majority_and_ties():
    assert hard_masks(np.array([0.6, 0.4])[:, None, None])[0, 0] == 0
    assert hard_masks(np.array([0.5, 0.5])[:, None, None])[0, 0] == 0
    assert hard_masks(np.array([0.2, 0.4, 0.4])[:, None, None])[0, 0] == 1


def test_hard_masks_matches_scan(rng):
    m = rng.random((5, 7, 9))
    labels = hard_masks(m)
    for y in range(7):
        for x in range(9):
            best = 0
            for k in range(1, 5):
                if m[k, y, x] > m[best, y, x]:
                    best = k
            assert labels[y, x] == best


class TestBoxes:
    def test_single_pixel(self):
        labels = np.zeros((8, 8), int)
        labels[3, 5] = 1
        assert dict(boxes_from_masks(labels))[1] == BoundingBox(5, 3, 6, 4)

    def test_full_image(self):
        assert boxes_from_masks(np.zeros((6, 10), int)) == [(0, BoundingBox(0, 0, 10, 6))]

    def test_l_shape(self):
        labels = np.full((4, 4), 9)
        for y, x in [(0, 0), (1, 0), (1, 1)]:
            labels[y, x] = 2
        assert dict(boxes_from_masks(labels))[2] == BoundingBox(0, 0, 2, 2)


class TestBlockPattern:
    @pytest.mark.parametrize("n,cols", [(4, 2), (8, 2), (9, 3), (11, 3), (15, 3), (16, 4), (24, 4)])
    def test_columns(self, n, cols):
        assert block_columns(n) == cols
        labels = block_pattern(n, 64, 64)
        assert len(np.unique(labels)) == n
        # count distinct column spans
        starts = {int(np.nonzero(labels == k)[1].min()) for k in range(n)}
        assert len(starts) == cols

    def test_four_blocks_are_quadrants(self):
        labels = block_pattern(4, 64, 64)
        for k in range(4):
            ys, xs = np.nonzero(labels == k)
            assert (ys.max() - ys.min() + 1, xs.max() - xs.min() + 1) == (32, 32)
        assert labels[0, 0] == 0 and labels[63, 0] == 1 and labels[0, 63] == 2

    def test_uneven_counts_fill_left_columns(self):
        labels = block_pattern(11, 60, 60)
        per_col = [len(np.unique(labels[:, x])) for x in (0, 30, 59)]
        assert per_col == [4, 4, 3]

    def test_blocks_are_rectangles(self):
        labels = block_pattern(13, 50, 37)
        for k in range(13):
            ys, xs = np.nonzero(labels == k)
            assert len(ys) == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)

    def test_single_mask(self):
        assert np.all(block_pattern(1, 5, 5) == 0)


def _output(decoder, k=3, n=4, pixel=False):
    g = torch.Generator().manual_seed(0)
    dec_masks = torch.rand(1, k, 8, 8, generator=g) if pixel else torch.rand(1, k, n, generator=g)
    dec_masks = dec_masks / dec_masks.sum(1, keepdim=True)
    attn = torch.rand(1, k, n, generator=g)
    attn = attn / attn.sum(1, keepdim=True)
    return ModelOutput(decoder, torch.zeros(1, n, 2), dec_masks, attn, torch.zeros(1, k, 5), (2, 2))


def test_extract_pass_through():
    out = _output("mlp")
    np.testing.assert_array_equal(extract_masks(out, "mlp-alpha"), out.decoder_masks.numpy().reshape(1, 3, 2, 2))
    out = _output("transformer")
    np.testing.assert_array_equal(extract_masks(out, "slot-attention"),
                                  out.slot_attention.numpy().reshape(1, 3, 2, 2))
    assert extract_masks(_output("pixel", pixel=True), "mlp-alpha").shape == (1, 3, 8, 8)


def test_extract_rejects_unavailable_source():
    with pytest.raises(ConfigError, match="decoder-attention"):
        extract_masks(_output("transformer"), "mlp-alpha")
    with pytest.raises(ConfigError):
        extract_masks(_output("mlp"), "decoder-attention")


def test_default_sources():
    assert default_mask_source("transformer") == "decoder-attention"
    assert default_mask_source("mlp") == "mlp-alpha"


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30), st.integers(8, 70), st.integers(8, 70))
def test_block_pattern_partitions_into_rectangles(n, h, w):
    labels = block_pattern(n, h, w)
    assert sorted(np.unique(labels).tolist()) == list(range(n))
    for k in range(n):
        ys, xs = np.nonzero(labels == k)
        assert len(ys) == (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 20), st.integers(1, 20), st.integers(0, 99))
def test_resize_keeps_simplex_and_range(k, h, w, oh, ow, seed):
    logits = np.random.default_rng(seed).normal(size=(k, h, w))
    m = np.exp(logits) / np.exp(logits).sum(0)
    out = resize_masks(m, oh, ow)
    assert out.shape == (k, oh, ow)
    assert check_simplex(out, atol=1e-9)
    assert out.min() >= m.min() - 1e-12 and out.max() <= m.max() + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 99), st.permutations(range(4)))
def test_hard_masks_follow_slot_permutation(seed, perm):
    m = np.random.default_rng(seed).random((4, 5, 5))
    perm = np.array(perm)
    np.testing.assert_array_equal(hard_masks(m[perm]), np.argsort(perm)[hard_masks(m)])
