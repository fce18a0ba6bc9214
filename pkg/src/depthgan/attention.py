"""Window self-attention (regular and shifted) and the two-branch cross attention."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import TokenGrid, init_linear, linear, window_partition, window_reverse
from .tensor import ParamStore, Rng, ShapeError, Tensor

VALUE_SOURCES = ("self", "other")


def default_heads(E: int) -> int:
    h = max(1, E // 32)
    while E % h:
        h -= 1
    return h


@functools.lru_cache(maxsize=32)
def relative_position_index(w: int) -> np.ndarray:
    """[w*w, w*w] index into a (2w-1)^2 bias table, keyed by (dy, dx)."""
    ys, xs = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    coords = np.stack([ys.ravel(), xs.ravel()])  # [2, n]
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    idx = rel[0] * (2 * w - 1) + rel[1]
    idx.flags.writeable = False
    return idx


@dataclass
class MsaParams:
    heads: int
    window: int
    wq: Tensor  # [E, E]
    bq: Tensor
    wk: Tensor  # no key bias: it would add a per-row constant to the logits
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    rel_bias: Tensor | None  # [(2w-1)^2, heads]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads


@dataclass
class BranchProj:
    wq: Tensor  # [E, d]
    bq: Tensor
    wk: Tensor  # [E, d]
    wv: Tensor  # [E, d]
    bv: Tensor
    wo: Tensor  # [d, E]
    bo: Tensor


@dataclass
class CrossAttnParams:
    depth: BranchProj
    rgb: BranchProj

    @property
    def dim(self) -> int:
        return self.depth.wq.shape[1]

    def mirrored(self) -> CrossAttnParams:
        return CrossAttnParams(self.rgb, self.depth)


def init_msa(store: ParamStore, name: str, E: int, heads: int, w: int, rng: Rng, rel_bias: bool = True) -> MsaParams:
    if E % heads:
        raise ShapeError(f"embedding {E} not divisible by {heads} heads")
    wq, bq = init_linear(store, f"{name}.q", E, E, rng)
    wk, _ = init_linear(store, f"{name}.k", E, E, rng, bias=None)
    wv, bv = init_linear(store, f"{name}.v", E, E, rng)
    wo, bo = init_linear(store, f"{name}.proj", E, E, rng)
    table = store.add(f"{name}.rel_bias", rng.truncated_normal(0.02, ((2 * w - 1) ** 2, heads))) if rel_bias else None
    return MsaParams(heads, w, wq, bq, wk, wv, bv, wo, bo, table)


def init_branch_proj(store: ParamStore, name: str, E: int, d: int, rng: Rng, e_out: int | None = None) -> BranchProj:
    wq, bq = init_linear(store, f"{name}.q", E, d, rng)
    wk, _ = init_linear(store, f"{name}.k", E, d, rng, bias=None)
    wv, bv = init_linear(store, f"{name}.v", E, d, rng)
    wo, bo = init_linear(store, f"{name}.proj", d, e_out or E, rng)
    return BranchProj(wq, bq, wk, wv, bv, wo, bo)


def init_cross_attn(store: ParamStore, name: str, E: int, d: int, rng: Rng, e_out: int | None = None) -> CrossAttnParams:
    return CrossAttnParams(
        init_branch_proj(store, f"{name}.depth", E, d, rng, e_out),
        init_branch_proj(store, f"{name}.rgb", E, d, rng, e_out),
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    nW, n, E = x.shape
    return T.permute(T.reshape(x, (nW, n, heads, E // heads)), (0, 2, 1, 3))


def wmsa(grid: TokenGrid, w: int, shifted: bool, params: MsaParams, return_attn: bool = False):
    """Window multi-head self-attention; ``shifted`` rolls the grid by w/2 first.

    Returns the attended TokenGrid, plus the [nW, heads, w*w, w*w]
    probabilities when ``return_attn`` is set.
    """
    if shifted and w < 2:
        raise ShapeError("shifted windows need w >= 2")
    if params.window != w:
        raise ShapeError(f"params built for window {params.window}, called with {w}")
    shift = w // 2 if shifted else 0
    windows, mask = window_partition(grid, w, shift)
    h = params.heads
    d = params.head_dim
    q = T.scale(_split_heads(linear(windows, params.wq, params.bq), h), 1.0 / math.sqrt(d))
    k = _split_heads(T.matmul(windows, params.wk), h)
    v = _split_heads(linear(windows, params.wv, params.bv), h)
    logits = T.matmul(q, T.permute(k, (0, 1, 3, 2)))  # [nW, h, n, n]
    if params.rel_bias is not None:
        bias = T.take(params.rel_bias, relative_position_index(w), axis=0)  # [n, n, h]
        logits = T.add(logits, T.permute(bias, (2, 0, 1)))
    if shift:
        logits = T.add(logits, Tensor(mask[:, None]))
    attn = T.softmax(logits, axis=-1)
    out = T.matmul(attn, v)  # [nW, h, n, d]
    nW, _, n, _ = out.shape
    out = T.reshape(T.permute(out, (0, 2, 1, 3)), (nW, n, h * d))
    out = linear(out, params.wo, params.bo)
    result = window_reverse(out, w, shift, grid.grid_h, grid.grid_w, grid.patch)
    if return_attn:
        return result, attn.data
    return result


def msa_pair(grid: TokenGrid, w: int, params1: MsaParams, params2: MsaParams) -> TokenGrid:
    """Regular-window attention followed by shifted-window attention."""
    return wmsa(wmsa(grid, w, False, params1), w, True, params2)


def _attend(own: Tensor, other: Tensor, p_own: BranchProj, p_other: BranchProj, value_source: str, return_attn: bool):
    d = p_own.wq.shape[1]
    q = T.scale(linear(own, p_own.wq, p_own.bq), 1.0 / math.sqrt(d))
    k = T.matmul(other, p_other.wk)
    if value_source == "self":
        v = linear(own, p_own.wv, p_own.bv)
    else:
        v = linear(other, p_other.wv, p_other.bv)
    attn = T.softmax(T.matmul(q, T.permute(k, (1, 0))), axis=-1)
    out = linear(T.matmul(attn, v), p_own.wo, p_own.bo)
    return out, attn.data


def cross_attention(fd: TokenGrid, fr: TokenGrid, params: CrossAttnParams, value_source: str = "self", return_attn: bool = False):
    """Global single-head cross attention between depth and RGB tokens.

    Each branch queries with its own tokens against the other branch's keys.
    With ``value_source="self"`` the values come from the querying branch.
    """
    if (fd.grid_h, fd.grid_w, fd.embed_dim) != (fr.grid_h, fr.grid_w, fr.embed_dim):
        raise ShapeError(f"branch token grids differ: {fd.tokens.shape} vs {fr.tokens.shape}")
    if value_source not in VALUE_SOURCES:
        raise ValueError(f"value_source must be one of {VALUE_SOURCES}")
    out_d, attn_d = _attend(fd.tokens, fr.tokens, params.depth, params.rgb, value_source, return_attn)
    out_r, attn_r = _attend(fr.tokens, fd.tokens, params.rgb, params.depth, value_source, return_attn)
    result = fd.with_tokens(out_d), fr.with_tokens(out_r)
    if return_attn:
        return result, (attn_d, attn_r)
    return result
