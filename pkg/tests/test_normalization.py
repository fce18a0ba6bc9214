import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthgan import tensor as T
from depthgan.layers import SemanticLayout, TokenGrid, label_patch_embed, one_hot, patch_embed
from depthgan.normalization import (
    CtnParams,
    channel_normalize,
    ctn_forward,
    init_ctn,
    init_layout_tokenizer,
    init_spade,
    spade_modulation,
    spade_shortcut,
    tokenize_layout,
    zero_modulation,
)
from depthgan.tensor import EPS_VAR, ParamStore, Rng, ShapeError, Tensor

from conftest import check_grads, random_layout


def identity_ctn(E, E_m):
    """gamma == 1 and beta == 0 regardless of the layout tokens."""
    z = lambda *s: Tensor(np.zeros(s))
    return CtnParams(z(E_m, 2 * E_m), z(2 * E_m), z(2 * E_m, E), Tensor(np.ones(E)), z(2 * E_m, E), z(E))


def grids(x, m, gh, gw):
    return TokenGrid(Tensor(x), gh, gw), TokenGrid(Tensor(m), gh, gw)


class TestTokenizeLayout:
    def test_matches_dense_patch_embed(self):
        m = random_layout(8, 8, 5, seed=2)
        store, rng = ParamStore(), Rng(0)
        w, b = init_layout_tokenizer(store, "m", 5, 2, 3, rng)
        got = tokenize_layout(m, 4, 4, 2, w, b)
        dense = patch_embed(one_hot(m), 2, Tensor(w.data.reshape(5 * 4, 3)), b)
        assert (got.grid_h, got.grid_w) == (4, 4)
        assert np.max(np.abs(got.tokens.data - dense.tokens.data)) < 1e-12

    def test_resamples_to_grid_geometry(self):
        m = random_layout(16, 16, 3)
        store = ParamStore()
        w, b = init_layout_tokenizer(store, "m", 3, 1, 2, Rng(0))
        assert tokenize_layout(m, 4, 4, 1, w, b).tokens.shape == (16, 2)

    def test_constant_layout_gives_identical_tokens(self):
        m = SemanticLayout(np.full((4, 4), 1), 3)
        w, b = init_layout_tokenizer(ParamStore(), "m", 3, 2, 4, Rng(0))
        tok = tokenize_layout(m, 2, 2, 2, w, b).tokens.data
        assert np.all(tok == tok[0])


class TestCtn:
    def test_hand_2x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        ft, mt = grids(x, np.zeros((2, 1)), 1, 2)
        out = ctn_forward(ft, mt, identity_ctn(2, 1)).tokens.data
        expected = (x - 2.5) / np.sqrt(1.25 + EPS_VAR)
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_equals_joint_stats_normalization(self):
        x = np.random.default_rng(0).normal(3.0, 2.0, (16, 6))
        ft, mt = grids(x, np.random.default_rng(1).normal(size=(16, 2)), 4, 4)
        out = ctn_forward(ft, mt, identity_ctn(6, 2)).tokens.data
        mu, sigma = T.joint_stats(Tensor(x), (0, 1))
        assert np.array_equal(out, (x - mu.data) / sigma.data)

    @given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(2, 16), st.integers(1, 8))
    @settings(max_examples=50, deadline=None)
    def test_joint_moments(self, seed, sigma, mu, n, E):
        x = np.random.default_rng(seed).normal(mu, sigma, (n, E))
        ft, mt = grids(x, np.zeros((n, 1)), 1, n)
        out = ctn_forward(ft, mt, identity_ctn(E, 1)).tokens.data
        assert abs(out.mean()) < 1e-10
        sample_sigma = x.std()
        if sample_sigma >= 0.1:
            assert abs(out.std() - 1.0) < 1e-3

    def test_shift_and_scale_invariance(self):
        x = np.random.default_rng(3).normal(size=(4, 3))
        m = np.random.default_rng(4).normal(size=(4, 2))
        p = init_ctn(ParamStore(), "c", 3, 2, Rng(0))
        base = ctn_forward(*grids(x, m, 2, 2), p).tokens.data
        shifted = ctn_forward(*grids(x + 7.0, m, 2, 2), p).tokens.data
        assert np.max(np.abs(base - shifted)) < 1e-10
        # eps inside the root breaks exact scale invariance, but only slightly at this variance
        scaled = ctn_forward(*grids(x * 10.0, m, 2, 2), p).tokens.data
        assert np.max(np.abs(base - scaled)) < 1e-4

    def test_per_token_stats(self):
        x = np.random.default_rng(5).normal(size=(4, 6))
        out = ctn_forward(*grids(x, np.zeros((4, 1)), 2, 2), identity_ctn(6, 1), stats="per_token").tokens.data
        assert np.max(np.abs(out.mean(axis=1))) < 1e-12

    def test_modulation_depends_on_layout(self):
        p = init_ctn(ParamStore(), "c", 3, 2, Rng(0))
        x = np.random.default_rng(0).normal(size=(4, 3))
        a = ctn_forward(*grids(x, np.zeros((4, 2)), 2, 2), p).tokens.data
        b = ctn_forward(*grids(x, np.ones((4, 2)), 2, 2), p).tokens.data
        assert not np.array_equal(a, b)

    def test_init_is_near_plain_normalization(self):
        p = init_ctn(ParamStore(), "c", 4, 3, Rng(0))
        assert np.all(p.b_gamma.data == 1.0) and np.all(p.b_beta.data == 0.0)

    def test_token_count_mismatch(self):
        ft = TokenGrid(Tensor(np.zeros((4, 2))), 2, 2)
        mt = TokenGrid(Tensor(np.zeros((2, 1))), 1, 2)
        with pytest.raises(ShapeError, match="4.*2"):
            ctn_forward(ft, mt, identity_ctn(2, 1))

    def test_unknown_stats(self):
        ft, mt = grids(np.zeros((1, 1)), np.zeros((1, 1)), 1, 1)
        with pytest.raises(ValueError):
            ctn_forward(ft, mt, identity_ctn(1, 1), stats="batch")

    def test_grads(self):
        def build(x, m, wh, bh, wg, bg, wb, bb):
            return ctn_forward(TokenGrid(x, 2, 2), TokenGrid(m, 2, 2), CtnParams(wh, bh, wg, bg, wb, bb)).tokens

        shapes = [(4, 3), (4, 2), (2, 4), (4,), (4, 3), (3,), (4, 3), (3,)]
        assert check_grads(build, shapes, seed=2) < 1e-6


class TestSpade:
    def setup_method(self):
        self.store = ParamStore()
        self.p = init_spade(self.store, "s", 3, 4, 2, 5, Rng(0))
        self.x = Tensor(np.random.default_rng(0).normal(1.0, 2.0, (4, 6, 6)))
        self.m = random_layout(12, 12, 3)

    def test_channel_normalize(self):
        out = channel_normalize(self.x).data
        assert np.max(np.abs(out.mean(axis=(1, 2)))) < 1e-12

    def test_modulation_off_is_projection_of_normalized(self):
        zero_modulation(self.p)
        out = spade_shortcut(self.x, self.m, self.p).data
        ref = T.conv2d(channel_normalize(self.x), self.p.w_proj).data
        assert np.array_equal(out, ref)

    def test_formula(self):
        out = spade_shortcut(self.x, self.m, self.p).data
        proj = T.conv2d(channel_normalize(self.x), self.p.w_proj).data
        g, b = spade_modulation(self.m, 6, 6, self.p)
        assert np.max(np.abs(out - (proj * (1 + g.data) + b.data))) < 1e-12

    def test_shape_and_c_out_check(self):
        assert spade_shortcut(self.x, self.m, self.p, c_out=2).shape == (2, 6, 6)
        with pytest.raises(ShapeError):
            spade_shortcut(self.x, self.m, self.p, c_out=3)

    def test_constant_layout_gives_spatially_uniform_interior_modulation(self):
        m = SemanticLayout(np.full((6, 6), 2), 3)
        g, _ = spade_modulation(m, 6, 6, self.p)
        inner = g.data[:, 2:4, 2:4]
        assert np.max(np.abs(inner - inner[:, :1, :1])) < 1e-12

    def test_grads(self):
        m = random_layout(4, 4, 3)

        def build(x, wp, ws, bs, wg, bg, wb, bb):
            from depthgan.normalization import SpadeParams

            return spade_shortcut(x, m, SpadeParams(wp, ws, bs, wg, bg, wb, bb))

        shapes = [(2, 4, 4), (3, 2, 1, 1), (2, 3, 3, 3), (2,), (3, 2, 3, 3), (3,), (3, 2, 3, 3), (3,)]
        assert check_grads(build, shapes, seed=4) < 1e-6
