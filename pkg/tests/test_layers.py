import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthgan import tensor as T
from depthgan.layers import (
    MASK_NEG,
    MlpParams,
    SemanticLayout,
    TokenGrid,
    conv2d,
    label_conv2d,
    label_patch_embed,
    mlp,
    one_hot,
    patch_embed,
    pixel_shuffle,
    pixel_unshuffle,
    resample_labels,
    token_to_map,
    upsample_nearest,
    window_partition,
    window_reverse,
)
from depthgan.tensor import ShapeError, Tensor

from conftest import check_grads, random_layout
from oracles import conv2d_loops, shift_mask_provenance


class TestLabels:
    def test_one_hot_single_pixel(self):
        oh = one_hot(SemanticLayout(np.array([[2]]), 3))
        assert oh.data[:, 0, 0].tolist() == [0, 0, 1]

    def test_one_hot_partition_and_roundtrip(self):
        m = random_layout(5, 7, 4)
        oh = one_hot(m).data
        assert np.array_equal(oh.sum(axis=0), np.ones((5, 7)))
        assert np.array_equal(oh.argmax(axis=0), m.labels)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            SemanticLayout(np.array([[3]]), 3)
        with pytest.raises(ValueError):
            SemanticLayout(np.array([[-1]]), 3)

    def test_resample_identity_and_constant(self):
        m = random_layout(4, 6, 3)
        assert resample_labels(m, 4, 6) is m
        c = SemanticLayout(np.full((4, 4), 2), 3)
        assert np.all(resample_labels(c, 7, 3).labels == 2)

    def test_resample_checkerboard_centre_sampling(self):
        lab = np.add.outer(np.arange(4), np.arange(4)) % 2 + 2 * (np.arange(4)[:, None] >= 2)
        m = SemanticLayout(lab, 4)
        # floor((j + 0.5) * 2) -> source rows/cols 1 and 3
        expected = lab[np.ix_([1, 3], [1, 3])]
        assert np.array_equal(resample_labels(m, 2, 2).labels, expected)

    def test_resample_upsampling_indices(self):
        m = SemanticLayout(np.array([[0, 1], [2, 3]]), 4)
        assert np.array_equal(resample_labels(m, 4, 4).labels, np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]))

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3)])
    def test_label_conv_matches_one_hot_conv(self, stride, pad, k):
        m = random_layout(6, 6, 4, seed=3)
        w = np.random.default_rng(0).normal(size=(5, 4, k, k))
        b = np.random.default_rng(1).normal(size=5)
        got = label_conv2d(m, Tensor(w), Tensor(b), stride, pad).data
        ref = conv2d_loops(one_hot(m).data, w, b, stride, pad)
        assert np.max(np.abs(got - ref)) < 1e-12

    def test_label_patch_embed_matches_one_hot_embed(self):
        m = random_layout(4, 6, 3, seed=5)
        w = np.random.default_rng(0).normal(size=(3, 2, 2, 5))
        got = label_patch_embed(m, Tensor(w), None, 2)
        # same weight in channel-major [L p p, E] layout for the dense path
        ref = patch_embed(one_hot(m), 2, Tensor(w.reshape(12, 5)))
        assert np.max(np.abs(got.tokens.data - ref.tokens.data)) < 1e-12


class TestPatchTokens:
    def test_identity_embedding_p1(self):
        x = np.random.default_rng(0).normal(size=(3, 2, 4))
        g = patch_embed(Tensor(x), 1, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(g.tokens.data, x.reshape(3, -1).T)
        assert np.array_equal(token_to_map(g).data, x)

    def test_grid_shape(self):
        g = patch_embed(Tensor(np.ones((2, 4, 4))), 2, Tensor(np.ones((8, 5))))
        assert (g.n_tok, g.grid_h, g.grid_w, g.patch) == (4, 2, 2, 2)

    def test_hand_dot_product(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        g = patch_embed(x, 2, Tensor(np.array([[1.0], [10.0], [100.0], [1000.0]])))
        assert g.tokens.data.item() == 4321.0

    def test_channel_major_flattening(self):
        x = np.arange(8.0).reshape(2, 2, 2)
        g = patch_embed(Tensor(x), 2, Tensor(np.eye(8)))
        assert g.tokens.data[0].tolist() == list(range(8))

    def test_divisibility_error_mentions_sizes(self):
        with pytest.raises(ShapeError, match="5x4.*2"):
            patch_embed(Tensor(np.ones((1, 5, 4))), 2, Tensor(np.ones((4, 1))))

    def test_token_to_map_layout(self):
        g = TokenGrid(Tensor(np.array([[1.0], [2.0], [3.0], [4.0]])), 2, 2)
        assert token_to_map(g).data.tolist() == [[[1, 2], [3, 4]]]
        g = TokenGrid(Tensor(np.zeros((12, 5))), 3, 4)
        assert token_to_map(g).shape == (5, 3, 4)


class TestPixelShuffle:
    def test_r1_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2, 2)))
        assert np.array_equal(pixel_shuffle(x, 1).data, x.data)

    def test_four_channels_to_block(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1, 1))
        assert pixel_shuffle(x, 2).data.tolist() == [[[1, 2], [3, 4]]]

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
    @settings(max_examples=60, deadline=None)
    def test_index_formula_and_inverse(self, c, r, h, w):
        x = np.random.default_rng(c * 100 + r * 10 + h + w).normal(size=(c * r * r, h, w))
        out = pixel_shuffle(Tensor(x), r).data
        for ci in range(c):
            for hi in range(h):
                for wi in range(w):
                    for i in range(r):
                        for j in range(r):
                            assert out[ci, hi * r + i, wi * r + j] == x[ci * r * r + i * r + j, hi, wi]
        assert np.array_equal(np.sort(out.ravel()), np.sort(x.ravel()))
        assert np.array_equal(pixel_unshuffle(Tensor(out), r).data, x)

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            pixel_shuffle(Tensor(np.ones((3, 1, 1))), 2)


class TestWindows:
    def test_unshifted_mask_zero(self):
        g = TokenGrid(Tensor(np.zeros((16, 3))), 4, 4)
        wins, mask = window_partition(g, 2, 0)
        assert wins.shape == (4, 4, 3)
        assert not mask.any()

    def test_single_window_is_reshape(self):
        x = np.random.default_rng(0).normal(size=(16, 2))
        wins, _ = window_partition(TokenGrid(Tensor(x), 4, 4), 4, 0)
        assert np.array_equal(wins.data[0], x)

    def test_roundtrip_8x8_w4_s2(self):
        x = np.random.default_rng(1).normal(size=(64, 3))
        g = TokenGrid(Tensor(x), 8, 8)
        wins, _ = window_partition(g, 4, 2)
        assert np.array_equal(window_reverse(wins, 4, 2, 8, 8).tokens.data, x)

    @given(
        st.sampled_from([2, 4]),
        st.integers(1, 4),
        st.integers(1, 4),
        st.booleans(),
    )
    @settings(max_examples=100, deadline=None)
    def test_roundtrip_and_mask_provenance(self, w, nh, nw, shifted):
        gh, gw = nh * w, nw * w
        if gh > 16 or gw > 16:
            return
        shift = w // 2 if shifted else 0
        x = np.random.default_rng(gh * 31 + gw).normal(size=(gh * gw, 2))
        wins, mask = window_partition(TokenGrid(Tensor(x), gh, gw), w, shift)
        assert np.array_equal(window_reverse(wins, w, shift, gh, gw).tokens.data, x)
        allowed = shift_mask_provenance(gh, gw, w, shift)
        assert np.array_equal(mask == 0, allowed)
        assert np.all(mask[~allowed] == MASK_NEG)

    def test_4x4_w2_s1_boundary_windows(self):
        _, mask = window_partition(TokenGrid(Tensor(np.zeros((16, 1))), 4, 4), 2, 1)
        # interior window: all four tokens come from one region
        assert not mask[0].any()
        # bottom-right window mixes four regions: only self attention allowed
        assert np.array_equal(mask[3] == 0, np.eye(4, dtype=bool))
        assert np.array_equal(mask == 0, shift_mask_provenance(4, 4, 2, 1))

    def test_bad_shift_and_size(self):
        g = TokenGrid(Tensor(np.zeros((16, 1))), 4, 4)
        with pytest.raises(ShapeError):
            window_partition(g, 3, 0)
        with pytest.raises(ShapeError):
            window_partition(g, 2, 2)


class TestConvUpsampleMlp:
    def test_identity_1x1(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 4)))
        assert np.array_equal(conv2d(x, Tensor(np.eye(3).reshape(3, 3, 1, 1))).data, x.data)

    def test_ones_kernel_centre(self):
        out = conv2d(Tensor(np.full((1, 3, 3), 2.0)), Tensor(np.ones((1, 1, 3, 3))), pad=1)
        assert out.data[0, 1, 1] == 18.0

    def test_vs_loops_2x5x5(self):
        r = np.random.default_rng(3)
        x, w, b = r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)
        assert np.max(np.abs(conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data - conv2d_loops(x, w, b, 1, 1))) < 1e-12

    @given(st.integers(1, 4), st.integers(3, 8), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1))
    @settings(max_examples=40, deadline=None)
    def test_vs_loops_random(self, cin, hw, k, stride, pad):
        r = np.random.default_rng(cin * 1000 + hw * 10 + k)
        x, w, b = r.normal(size=(cin, hw, hw)), r.normal(size=(2, cin, k, k)), r.normal(size=2)
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        assert got.shape == (2, (hw + 2 * pad - k) // stride + 1, (hw + 2 * pad - k) // stride + 1)
        assert np.max(np.abs(got - conv2d_loops(x, w, b, stride, pad))) < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((1, 3, 1, 1))))

    def test_upsample(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        up = upsample_nearest(x).data
        assert up[0].tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        assert np.array_equal(up[:, ::2, ::2], x.data)
        assert np.all(upsample_nearest(Tensor(np.full((2, 3, 3), 7.0))).data == 7.0)

    def test_mlp_zero_weights(self):
        E = 3
        b2 = np.array([0.5, -1.0, 2.0])
        p = MlpParams(Tensor(np.zeros((E, 4 * E))), Tensor(np.zeros(4 * E)), Tensor(np.zeros((4 * E, E))), Tensor(b2))
        out = mlp(TokenGrid(Tensor(np.random.default_rng(0).normal(size=(4, E))), 2, 2), p)
        assert np.array_equal(out.tokens.data, np.tile(b2, (4, 1)))

    def test_mlp_identity_like_hand(self):
        E = 2
        w1 = np.zeros((E, 4 * E))
        w1[:, :E] = np.eye(E)
        w2 = np.zeros((4 * E, E))
        w2[:E] = np.eye(E)
        p = MlpParams(Tensor(w1), Tensor(np.zeros(4 * E)), Tensor(w2), Tensor(np.zeros(E)))
        x = np.array([[0.01, -0.02]])
        out = mlp(TokenGrid(Tensor(x), 1, 1), p).tokens.data
        c = 0.7978845608028654
        ref = [0.5 * v * (1 + np.tanh(c * (v + 0.044715 * v**3))) for v in x[0]]
        assert np.max(np.abs(out[0] - ref)) < 1e-12
        # near zero gelu is close to x / 2
        assert np.allclose(out[0], x[0] / 2, atol=1e-3)

    def test_mlp_shape(self):
        p = MlpParams(Tensor(np.ones((5, 20))), Tensor(np.zeros(20)), Tensor(np.ones((20, 5))), Tensor(np.zeros(5)))
        assert mlp(TokenGrid(Tensor(np.ones((6, 5))), 2, 3), p).tokens.shape == (6, 5)


@pytest.mark.parametrize(
    "name,build,shapes",
    [
        ("patch_embed", lambda x, w, b: patch_embed(x, 2, w, b).tokens, [(2, 4, 4), (8, 3), (3,)]),
        ("token_to_map", lambda x: token_to_map(TokenGrid(x, 2, 3)), [(6, 2)]),
        ("pixel_shuffle", lambda x: pixel_shuffle(x, 2), [(8, 2, 2)]),
        ("window_shifted", lambda x: window_partition(TokenGrid(x, 4, 4), 2, 1)[0], [(16, 2)]),
        ("window_reverse", lambda x: window_reverse(x, 2, 1, 4, 4).tokens, [(4, 4, 2)]),
        ("upsample", lambda x: upsample_nearest(x), [(2, 2, 3)]),
        ("mlp", lambda x, a, b, c, d: mlp(TokenGrid(x, 1, 2), MlpParams(a, b, c, d)).tokens, [(2, 2), (2, 8), (8,), (8, 2), (2,)]),
        ("label_conv", lambda w, b: label_conv2d(random_layout(5, 5, 3), w, b, 2, 1), [(2, 3, 3, 3), (2,)]),
        ("label_patch", lambda w, b: label_patch_embed(random_layout(4, 4, 3), w, b, 2).tokens, [(3, 2, 2, 4), (4,)]),
    ],
)
def test_layer_grads(name, build, shapes):
    assert check_grads(build, shapes, seed=5) < 1e-6
