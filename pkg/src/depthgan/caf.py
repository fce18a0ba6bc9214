"""Cross attention fusion between the depth and RGB branches."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .attention import CrossAttnParams, cross_attention, init_cross_attn
from .layers import (
    SemanticLayout,
    init_conv,
    init_linear,
    label_conv2d,
    patch_embed,
    pixel_shuffle,
    resample_labels,
    token_to_map,
)
from .tensor import ParamStore, Rng, ShapeError, Tensor

ALPHA_INIT = math.log(0.1 / 0.9)  # sigmoid(alpha) == 0.1


def caf_patch_size(resolution: int) -> int:
    return max(1, resolution // 8)


@dataclass
class CafParams:
    patch: int
    embed_w: Tensor  # [C, L, 1, 1], label-facing
    embed_b: Tensor
    patch_w_d: Tensor  # [C p^2, E_tok]
    patch_b_d: Tensor
    patch_w_r: Tensor
    patch_b_r: Tensor
    cross: CrossAttnParams
    alpha_d: Tensor  # scalar, blend weight is sigmoid(alpha)
    alpha_r: Tensor

    def mirrored(self) -> CafParams:
        return CafParams(
            self.patch, self.embed_w, self.embed_b,
            self.patch_w_r, self.patch_b_r, self.patch_w_d, self.patch_b_d,
            self.cross.mirrored(), self.alpha_r, self.alpha_d,
        )


def init_caf(store: ParamStore, name: str, num_labels: int, C: int, resolution: int, dim: int, rng: Rng) -> CafParams:
    p = caf_patch_size(resolution)
    fan = C * p * p
    ew, eb = init_conv(store, f"{name}.layout_embed", num_labels, C, 1, rng, label_input=True)
    wd, bd = init_linear(store, f"{name}.patch_d", fan, dim, rng, std=1.0 / math.sqrt(fan))
    wr, br = init_linear(store, f"{name}.patch_r", fan, dim, rng, std=1.0 / math.sqrt(fan))
    # tokens attend at width ``dim``; the output projection restores C p^2 for the pixel shuffle
    cross = init_cross_attn(store, f"{name}.xattn", dim, dim, rng, e_out=fan)
    ad = store.add(f"{name}.alpha_d", ALPHA_INIT)
    ar = store.add(f"{name}.alpha_r", ALPHA_INIT)
    return CafParams(p, ew, eb, wd, bd, wr, br, cross, ad, ar)


def semantic_alignment(layout: SemanticLayout, h: int, w: int, params: CafParams) -> Tensor:
    """Layout resampled to (h, w) and embedded to C channels by a 1x1 conv."""
    return label_conv2d(resample_labels(layout, h, w), params.embed_w, params.embed_b)


def caf_fuse(
    fd: Tensor,
    fr: Tensor,
    layout: SemanticLayout,
    params: CafParams,
    value_source: str = "self",
    gate: tuple[float, float] | None = None,
    return_parts: bool = False,
):
    """Fuse depth and RGB feature maps [C, H, W].

    ``gate`` overrides (sigmoid(alpha_d), sigmoid(alpha_r)) with fixed blend
    weights; used to isolate either end of the convex blend.
    """
    if fd.shape != fr.shape:
        raise ShapeError(f"branch feature maps differ: {fd.shape} vs {fr.shape}")
    C, H, W = fd.shape
    p = params.patch
    if H % p or W % p:
        raise ShapeError(f"CAF patch {p} does not divide {H}x{W}")
    emb = semantic_alignment(layout, H, W, params)
    td = patch_embed(T.mul(fd, emb), p, params.patch_w_d, params.patch_b_d)
    tr = patch_embed(T.mul(fr, emb), p, params.patch_w_r, params.patch_b_r)
    hd, hr = cross_attention(td, tr, params.cross, value_source)
    rd = pixel_shuffle(token_to_map(hd), p)
    rr = pixel_shuffle(token_to_map(hr), p)
    if gate is None:
        sd, sr = T.sigmoid(params.alpha_d), T.sigmoid(params.alpha_r)
    else:
        sd, sr = Tensor(gate[0]), Tensor(gate[1])
    out_d = T.add(T.mul(T.sub(1.0, sd), fd), T.mul(sd, rd))
    out_r = T.add(T.mul(T.sub(1.0, sr), fr), T.mul(sr, rr))
    if return_parts:
        return (out_d, out_r), (rd, rr, emb)
    return out_d, out_r
