"""Conditional normalizers: token-level CTN and the SPADE learned shortcut."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import (
    SemanticLayout,
    TokenGrid,
    init_conv,
    init_label_embed,
    init_linear,
    label_conv2d,
    label_patch_embed,
    linear,
    resample_labels,
)
from .tensor import ParamStore, Rng, ShapeError, Tensor

CTN_STATS = ("joint", "per_token")


@dataclass
class CtnParams:
    w_hidden: Tensor  # [E_m, 2 E_m]
    b_hidden: Tensor
    w_gamma: Tensor  # [2 E_m, E]
    b_gamma: Tensor
    w_beta: Tensor  # [2 E_m, E]
    b_beta: Tensor


@dataclass
class SpadeParams:
    w_proj: Tensor  # [C_out, C_in, 1, 1]
    w_shared: Tensor  # [hidden, L, 3, 3], label-facing
    b_shared: Tensor
    w_gamma: Tensor  # [C_out, hidden, 3, 3]
    b_gamma: Tensor
    w_beta: Tensor
    b_beta: Tensor


def init_ctn(store: ParamStore, name: str, E: int, E_m: int, rng: Rng) -> CtnParams:
    wh, bh = init_linear(store, f"{name}.hidden", E_m, 2 * E_m, rng)
    # gamma starts near 1 and beta near 0, i.e. close to plain normalization
    wg, bg = init_linear(store, f"{name}.gamma", 2 * E_m, E, rng, bias=1.0)
    wb, bb = init_linear(store, f"{name}.beta", 2 * E_m, E, rng, bias=0.0)
    return CtnParams(wh, bh, wg, bg, wb, bb)


def init_spade(store: ParamStore, name: str, num_labels: int, c_in: int, c_out: int, hidden: int, rng: Rng) -> SpadeParams:
    (w_proj, _) = init_conv(store, f"{name}.proj", c_in, c_out, 1, rng, bias=False)
    ws, bs = init_conv(store, f"{name}.shared", num_labels, hidden, 3, rng, label_input=True)
    wg, bg = init_conv(store, f"{name}.gamma", hidden, c_out, 3, rng)
    wb, bb = init_conv(store, f"{name}.beta", hidden, c_out, 3, rng)
    return SpadeParams(w_proj, ws, bs, wg, bg, wb, bb)


def init_layout_tokenizer(store: ParamStore, name: str, num_labels: int, p: int, E_m: int, rng: Rng):
    return init_label_embed(store, name, num_labels, p, E_m, rng)


def tokenize_layout(layout: SemanticLayout, grid_h: int, grid_w: int, p: int, weight: Tensor, bias: Tensor | None) -> TokenGrid:
    """Layout tokens M^T aligned with a feature token grid of the same geometry."""
    resized = resample_labels(layout, grid_h * p, grid_w * p)
    return label_patch_embed(resized, weight, bias, p)


def ctn_forward(ft: TokenGrid, mt: TokenGrid, params: CtnParams, stats: str = "joint") -> TokenGrid:
    """Conditional token normalization.

    With ``stats="joint"`` the mean and std are single scalars over all
    tokens and channels; ``"per_token"`` reduces over channels only, like
    layer norm. gamma and beta are per-token, per-channel.
    """
    if ft.n_tok != mt.n_tok:
        raise ShapeError(f"feature tokens ({ft.n_tok}) and layout tokens ({mt.n_tok}) differ in count")
    if stats not in CTN_STATS:
        raise ValueError(f"ctn stats must be one of {CTN_STATS}")
    hidden = T.gelu(linear(mt.tokens, params.w_hidden, params.b_hidden))
    gamma = linear(hidden, params.w_gamma, params.b_gamma)
    beta = linear(hidden, params.w_beta, params.b_beta)
    axes = (0, 1) if stats == "joint" else (1,)
    mu, sigma = T.joint_stats(ft.tokens, axes)
    normed = T.div(T.sub(ft.tokens, mu), sigma)
    return ft.with_tokens(T.add(T.mul(gamma, normed), beta))


def channel_normalize(fmap: Tensor) -> Tensor:
    """Parameter-free per-channel normalization over spatial dims."""
    mu, sigma = T.joint_stats(fmap, (1, 2))
    return T.div(T.sub(fmap, mu), sigma)


def spade_modulation(layout: SemanticLayout, h: int, w: int, params: SpadeParams) -> tuple[Tensor, Tensor]:
    resized = resample_labels(layout, h, w)
    hidden = T.relu(label_conv2d(resized, params.w_shared, params.b_shared, pad=1))
    gamma = T.conv2d(hidden, params.w_gamma, params.b_gamma, pad=1)
    beta = T.conv2d(hidden, params.w_beta, params.b_beta, pad=1)
    return gamma, beta


def spade_shortcut(fmap: Tensor, layout: SemanticLayout, params: SpadeParams, c_out: int | None = None) -> Tensor:
    """Learned shortcut: normalize, 1x1 project to C_out, modulate by (1 + gamma), beta."""
    C, H, W = fmap.shape
    if c_out is not None and params.w_proj.shape[0] != c_out:
        raise ShapeError(f"shortcut projects to {params.w_proj.shape[0]} channels, expected {c_out}")
    proj = T.conv2d(channel_normalize(fmap), params.w_proj)
    gamma, beta = spade_modulation(layout, H, W, params)
    return T.add(T.mul(proj, T.add(gamma, 1.0)), beta)


def zero_modulation(params: SpadeParams) -> None:
    for t in (params.w_gamma, params.b_gamma, params.w_beta, params.b_beta):
        t.data = np.zeros(t.shape)
