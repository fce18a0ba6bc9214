"""Finite-difference gradient checks for each layer family and the tiny generator."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .adversarial import (
    discriminate,
    feature_matching_loss,
    hinge_d_loss,
    hinge_g_loss,
    init_discriminator,
    init_sn_state,
    logit_shapes,
    power_iterate,
    refresh_spectral_state,
    spectral_normalize,
    ssim,
    to_unit_range,
)
from .attention import cross_attention, init_cross_attn, init_msa, wmsa
from .caf import ALPHA_INIT, caf_fuse, init_caf
from .generator import generate, generator_stage, init_generator, tiny_config
from .layers import SemanticLayout, TokenGrid, init_conv, init_mlp, mlp, patch_embed, pixel_shuffle, token_to_map
from .normalization import ctn_forward, init_ctn, init_layout_tokenizer, init_spade, spade_shortcut, tokenize_layout
from .tensor import Param, ParamStore, Rng, Tensor, grad_check

H_STEP = 1e-5
LAYER_TOL = 1e-6
MODEL_TOL = 1e-5


@dataclass
class CheckResult:
    module: str
    max_rel_err: float
    tolerance: float
    n_entries: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def condition(store: ParamStore, rng: Rng) -> None:
    """Redraw parameters at unit-scale so no gradient entry is vanishingly small.

    Matrices get N(0, 1/fan_in); vectors and scalars keep their value plus
    N(0, 0.3) noise, which breaks exact symmetries (e.g. zero biases).
    """
    for p in store:
        d = p.value.data
        if d.ndim >= 2:
            fan = d.size // (d.shape[0] if d.ndim == 4 else d.shape[-1])
            p.value.data = rng.normal(0.0, 1.0 / math.sqrt(max(fan, 1)), d.shape)
        else:
            p.value.data = np.asarray(d + rng.normal(0.0, 0.3, d.shape), dtype=float)


def _projection(shape, rng: Rng) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0, shape))


def _project(out: Tensor, r: Tensor) -> Tensor:
    return T.sum_(T.mul(out, r))


def _layout(h: int, w: int, num_labels: int, rng: Rng) -> SemanticLayout:
    lab = rng.integers(0, num_labels, (h, w))
    lab.flat[:num_labels] = np.arange(num_labels)  # every label present
    return SemanticLayout(lab, num_labels)


def _input(store: ParamStore, name: str, shape, rng: Rng) -> Tensor:
    return store.add(name, rng.normal(0.0, 1.0, shape))


# each builder returns (loss closure, params to probe)
Builder = Callable[[Rng], tuple[Callable[[], Tensor], list[Param]]]


def _ctn(rng: Rng):
    s = ParamStore()
    E, gh, gw, L, p = 4, 2, 3, 3, 2
    cp = init_ctn(s, "ctn", E, E, rng)
    lw, lb = init_layout_tokenizer(s, "tok", L, p, E, rng)
    x = _input(s, "x", (gh * gw, E), rng)
    condition(s, rng)
    layout = _layout(gh * p, gw * p, L, rng)
    r = _projection((gh * gw, E), rng)

    def fn():
        mt = tokenize_layout(layout, gh, gw, p, lw, lb)
        return _project(ctn_forward(TokenGrid(x, gh, gw, p), mt, cp).tokens, r)

    return fn, list(s)


def _msa(shifted: bool):
    def build(rng: Rng):
        s = ParamStore()
        E, heads, w, g = 4, 2, 2, 4
        mp = init_msa(s, "msa", E, heads, w, rng)
        x = _input(s, "x", (g * g, E), rng)
        condition(s, rng)
        r = _projection((g * g, E), rng)

        def fn():
            return _project(wmsa(TokenGrid(x, g, g), w, shifted, mp).tokens, r)

        return fn, list(s)

    return build


def _xattn(rng: Rng):
    s = ParamStore()
    E, d, n = 4, 3, 5
    cp = init_cross_attn(s, "xattn", E, d, rng)
    xd = _input(s, "fd", (n, E), rng)
    xr = _input(s, "fr", (n, E), rng)
    condition(s, rng)
    r1, r2 = _projection((n, E), rng), _projection((n, E), rng)

    def fn():
        od, orr = cross_attention(TokenGrid(xd, 1, n), TokenGrid(xr, 1, n), cp)
        return T.add(_project(od.tokens, r1), _project(orr.tokens, r2))

    return fn, list(s)


def _caf(rng: Rng):
    s = ParamStore()
    C, L, H = 2, 3, 4
    cp = init_caf(s, "caf", L, C, H, 4, rng)
    fd = _input(s, "fd", (C, H, H), rng)
    fr = _input(s, "fr", (C, H, H), rng)
    condition(s, rng)
    # gates near 0.5 so the attention branch is not damped by sigmoid(alpha) = 0.1
    cp.alpha_d.data = cp.alpha_d.data - ALPHA_INIT
    cp.alpha_r.data = cp.alpha_r.data - ALPHA_INIT
    layout = _layout(H, H, L, rng)
    r1, r2 = _projection((C, H, H), rng), _projection((C, H, H), rng)

    def fn():
        od, orr = caf_fuse(fd, fr, layout, cp)
        return T.add(_project(od, r1), _project(orr, r2))

    return fn, list(s)


def _mlp(rng: Rng):
    s = ParamStore()
    E, n = 3, 4
    mp = init_mlp(s, "mlp", E, rng)
    x = _input(s, "x", (n, E), rng)
    condition(s, rng)
    r = _projection((n, E), rng)

    def fn():
        return _project(mlp(TokenGrid(x, 2, 2), mp).tokens, r)

    return fn, list(s)


def _pixelshuffle(rng: Rng):
    # patch embed -> token_to_map -> pixel shuffle, the stage's map path
    s = ParamStore()
    C, H, p = 2, 4, 2
    w = s.add("embed.w", rng.normal(0.0, 0.5, (C * p * p, C * p * p)))
    b = s.add("embed.b", rng.normal(0.0, 0.5, (C * p * p,)))
    x = _input(s, "x", (C, H, H), rng)
    r = _projection((C, H, H), rng)

    def fn():
        return _project(pixel_shuffle(token_to_map(patch_embed(x, p, w, b)), p), r)

    return fn, list(s)


def _spade(rng: Rng):
    s = ParamStore()
    cin, cout, L, H = 2, 3, 3, 4
    sp = init_spade(s, "spade", L, cin, cout, 3, rng)
    x = _input(s, "x", (cin, H, H), rng)
    condition(s, rng)
    layout = _layout(H, H, L, rng)
    r = _projection((cout, H, H), rng)

    def fn():
        return _project(spade_shortcut(x, layout, sp, cout), r)

    return fn, list(s)


def _conv(rng: Rng):
    s = ParamStore()
    w, b = init_conv(s, "conv", 2, 3, 3, rng)
    w2, b2 = init_conv(s, "conv_s2", 3, 2, 4, rng)
    x = _input(s, "x", (2, 6, 6), rng)
    condition(s, rng)
    r = _projection((2, 2, 2), rng)

    def fn():
        h = T.conv2d(x, w, b, pad=1)
        return _project(T.conv2d(T.avg_pool2x(h), w2, b2, stride=2, pad=2), r)

    return fn, list(s)


def _losses(rng: Rng):
    s = ParamStore()
    real = [_input(s, f"real{i}", (1, 3, 3), rng) for i in range(2)]
    fake = [_input(s, f"fake{i}", (1, 3, 3), rng) for i in range(2)]
    fr = [[_input(s, f"feat_r{i}{j}", (2, 2, 2), rng) for j in range(2)] for i in range(2)]
    ff = [[_input(s, f"feat_f{i}{j}", (2, 2, 2), rng) for j in range(2)] for i in range(2)]
    # small maps shrink the ssim window; with 11x11 the corner pixels carry
    # Gaussian-tail weights whose gradients drown in rounding noise
    x = s.add("x", rng.uniform(-0.9, 0.9, (1, 6, 6)))
    y = s.add("y", rng.uniform(-0.9, 0.9, (1, 6, 6)))

    def fn():
        total = T.add(hinge_d_loss(real, fake), T.scale(hinge_g_loss(fake), 0.7))
        total = T.add(total, T.scale(feature_matching_loss(fr, ff), 1.3))
        return T.add(total, T.sub(1.0, ssim(to_unit_range(x), to_unit_range(y))))

    # real features enter detached, so only the fake side is probed
    params = [p for p in s if not p.name.startswith("feat_r")]
    return fn, params


def _spectral_norm(rng: Rng):
    # spectral normalization followed by a strided, padded conv and LeakyReLU
    s = ParamStore()
    w = s.add("w", rng.normal(0.0, 0.5, (3, 2, 4, 4)))
    b = s.add("b", rng.normal(0.0, 0.3, (3,)))
    x = _input(s, "x", (2, 6, 6), rng)
    state = init_sn_state(w.data, rng)
    power_iterate(w.data.reshape(3, -1), state, 50)
    r = _projection((3, 4, 4), rng)

    def fn():
        wn = spectral_normalize(w, state, training=False)
        return _project(T.leaky_relu(T.conv2d(x, wn, b, stride=2, pad=2), 0.2), r)

    return fn, list(s)


def discriminator_probe(rng: Rng, ndf: int = 2):
    """Eval-mode discriminator on 16x16 input; used by the unit tests."""
    L = 3
    dp = init_discriminator(L, 1, rng, ndf=ndf)
    dp.training = False
    s = dp.store
    x = _input(s, "image", (1, 16, 16), rng)
    condition(s, rng)
    refresh_spectral_state(dp)
    layout = _layout(16, 16, L, rng)
    rs = [_projection(shape, rng) for shape in logit_shapes(dp, 16, 16)]

    def fn():
        logits = [o[0] for o in discriminate(x, layout, dp)]
        return _sum([_project(lg, r) for lg, r in zip(logits, rs)])

    return fn, list(s)


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


def gradcheck_config():
    """The 8x8 two-stage generator used for the end-to-end check (~3.7k entries)."""
    return tiny_config(8, num_labels=3, width=3, z_dim=4, hidden=2)


def _stage(rng: Rng):
    cfg = gradcheck_config()
    gp = init_generator(cfg, rng)
    st = cfg.stages[0]
    sp = gp.branches["depth"][0]
    names = {id(t) for t in _stage_tensors(sp)}
    probe = ParamStore()
    for p in gp.store:
        if id(p.value) in names:
            probe.params[p.name] = p
    x = _input(probe, "x", (st.channels, st.resolution, st.resolution), rng)
    condition(probe, rng)
    layout = _layout(cfg.output_resolution, cfg.output_resolution, cfg.num_labels, rng)
    r = _projection((st.out_channels, 2 * st.resolution, 2 * st.resolution), rng)

    def fn():
        return _project(generator_stage(x, layout, sp, st, cfg, final=False), r)

    return fn, list(probe)


def _stage_tensors(sp):
    out = [sp.embed_w, sp.embed_b, sp.layout_w, sp.layout_b]
    for blk in sp.blocks:
        for c in (blk.ctn_attn, blk.ctn_mlp):
            out += [c.w_hidden, c.b_hidden, c.w_gamma, c.b_gamma, c.w_beta, c.b_beta]
        m = blk.msa
        out += [m.wq, m.bq, m.wk, m.wv, m.bv, m.wo, m.bo]
        if m.rel_bias is not None:
            out.append(m.rel_bias)
        out += [blk.mlp.w1, blk.mlp.b1, blk.mlp.w2, blk.mlp.b2]
    s = sp.spade
    return out + [s.w_proj, s.w_shared, s.b_shared, s.w_gamma, s.b_gamma, s.w_beta, s.b_beta]


def _full(rng: Rng):
    cfg = gradcheck_config()
    gp = init_generator(cfg, rng)
    condition(gp.store, rng)
    layout = _layout(8, 8, cfg.num_labels, rng)
    r1, r2 = _projection((1, 8, 8), rng), _projection((3, 8, 8), rng)

    def fn():
        d, c = generate(layout, gp, cfg)
        return T.add(_project(d, r1), _project(c, r2))

    return fn, list(gp.store)


CHECKS: dict[str, tuple[Builder, float]] = {
    "ctn": (_ctn, LAYER_TOL),
    "wmsa": (_msa(False), LAYER_TOL),
    "swmsa": (_msa(True), LAYER_TOL),
    "xattn": (_xattn, LAYER_TOL),
    "caf": (_caf, LAYER_TOL),
    "mlp": (_mlp, LAYER_TOL),
    "pixelshuffle": (_pixelshuffle, LAYER_TOL),
    "spade": (_spade, LAYER_TOL),
    "conv": (_conv, LAYER_TOL),
    "losses": (_losses, LAYER_TOL),
    "spectral_norm": (_spectral_norm, LAYER_TOL),
    "stage": (_stage, MODEL_TOL),
    "full": (_full, MODEL_TOL),
}


def run_check(module: str, seed: int = 0, h: float = H_STEP) -> CheckResult:
    if module not in CHECKS:
        raise KeyError(f"unknown gradcheck module {module!r}; choose from {sorted(CHECKS)}")
    builder, tol = CHECKS[module]
    t0 = time.perf_counter()
    fn, params = builder(Rng(seed))
    err = grad_check(fn, params, h)
    n = sum(p.value.size for p in params)
    return CheckResult(module, err, tol, n, time.perf_counter() - t0)


def run_all(modules: list[str] | None = None, seed: int = 0, h: float = H_STEP) -> list[CheckResult]:
    return [run_check(m, seed, h) for m in (modules or list(CHECKS))]
