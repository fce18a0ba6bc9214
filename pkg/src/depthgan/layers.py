"""Structural primitives: label handling, patch/token reshapes, windows, convs, MLP."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Rng, ShapeError, Tensor

MASK_NEG = -1e9


@dataclass(frozen=True)
class SemanticLayout:
    labels: np.ndarray  # int [H, W]
    num_labels: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise ShapeError(f"layout must be a non-empty 2-d grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError("layout labels must be integers")
        if labels.min() < 0 or labels.max() >= self.num_labels:
            raise ValueError(f"labels must lie in [0, {self.num_labels}), got [{labels.min()}, {labels.max()}]")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class TokenGrid:
    tokens: Tensor  # [N_tok, E]
    grid_h: int
    grid_w: int
    patch: int = 1

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ShapeError(f"tokens {self.tokens.shape} do not fit a {self.grid_h}x{self.grid_w} grid")
        if self.patch < 1:
            raise ShapeError("patch size must be >= 1")

    @property
    def n_tok(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def embed_dim(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> TokenGrid:
        return TokenGrid(tokens, self.grid_h, self.grid_w, self.patch)


# ---------------------------------------------------------------------------
# labels


def one_hot(layout: SemanticLayout) -> Tensor:
    lab = layout.labels
    out = np.zeros((layout.num_labels,) + lab.shape)
    np.put_along_axis(out, lab[None], 1.0, axis=0)
    return Tensor(out)


def resample_labels(layout: SemanticLayout, h: int, w: int) -> SemanticLayout:
    """Nearest-neighbour resampling with pixel-centre alignment."""
    if h < 1 or w < 1:
        raise ShapeError(f"target size must be positive, got {h}x{w}")
    H, W = layout.shape
    if (H, W) == (h, w):
        return layout
    rows = np.minimum(np.floor((np.arange(h) + 0.5) * (H / h)).astype(np.int64), H - 1)
    cols = np.minimum(np.floor((np.arange(w) + 0.5) * (W / w)).astype(np.int64), W - 1)
    return SemanticLayout(layout.labels[np.ix_(rows, cols)], layout.num_labels)


def label_conv2d(layout: SemanticLayout, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """conv2d(one_hot(layout), weight) computed as a weight gather.

    weight is [C_out, L, k, k]. Each output sums one weight column per kernel
    tap in a fixed tap order, so relabeling the layout together with the
    label axis of ``weight`` reproduces the output bit for bit.
    """
    cout, L, kh, kw = weight.shape
    if L != layout.num_labels:
        raise ShapeError(f"weight expects {L} labels, layout has {layout.num_labels}")
    H, W = layout.shape
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    pad_id = L * kh * kw
    lab = np.pad(layout.labels, pad, constant_values=-1) if pad else layout.labels
    idx = np.empty((ho, wo, kh * kw), dtype=np.int64)
    for i in range(kh):
        for j in range(kw):
            tap = lab[i : i + stride * ho : stride, j : j + stride * wo : stride]
            idx[:, :, i * kw + j] = np.where(tap < 0, pad_id, tap * kh * kw + i * kw + j)
    # rows of flat: label-major, then tap; one trailing zero row for padding
    flat = T.reshape(T.permute(weight, (1, 2, 3, 0)), (L * kh * kw, cout))
    flat = T.concat([flat, Tensor(np.zeros((1, cout)))], axis=0)
    gathered = T.take(flat, idx.reshape(ho * wo, kh * kw), axis=0)  # [HW, taps, C_out]
    out = T.sum_(gathered, axis=1)
    if bias is not None:
        out = T.add(out, bias)
    return T.permute(T.reshape(out, (ho, wo, cout)), (2, 0, 1))


def label_patch_embed(layout: SemanticLayout, weight: Tensor, bias: Tensor | None, p: int) -> TokenGrid:
    """patch_embed(one_hot(layout), ...) as a gather; weight is [L, p, p, E]."""
    L, p1, p2, E = weight.shape
    if L != layout.num_labels or p1 != p or p2 != p:
        raise ShapeError(f"label embed weight {weight.shape} does not match L={layout.num_labels}, p={p}")
    H, W = layout.shape
    if H % p or W % p:
        raise ShapeError(f"layout {H}x{W} not divisible by patch {p}")
    gh, gw = H // p, W // p
    lab = layout.labels.reshape(gh, p, gw, p).transpose(0, 2, 1, 3).reshape(gh * gw, p * p)
    offs = np.arange(p * p)
    idx = lab * (p * p) + offs
    flat = T.reshape(weight, (L * p * p, E))
    out = T.sum_(T.take(flat, idx, axis=0), axis=1)
    if bias is not None:
        out = T.add(out, bias)
    return TokenGrid(out, gh, gw, p)


# ---------------------------------------------------------------------------
# token <-> map


def patch_embed(fmap: Tensor, p: int, weight: Tensor, bias: Tensor | None = None) -> TokenGrid:
    """Project non-overlapping p x p patches to tokens.

    Patches flatten channel-major, then row-major in space, so ``weight`` is
    [C * p * p, E]. Tokens are ordered row-major over the patch grid.
    """
    C, H, W = fmap.shape
    if H % p or W % p:
        raise ShapeError(f"feature map {H}x{W} not divisible by patch size {p}")
    if weight.shape[0] != C * p * p:
        raise ShapeError(f"patch weight {weight.shape} expects {weight.shape[0]} inputs, patches have {C * p * p}")
    gh, gw = H // p, W // p
    x = T.reshape(fmap, (C, gh, p, gw, p))
    x = T.permute(x, (1, 3, 0, 2, 4))
    x = T.reshape(x, (gh * gw, C * p * p))
    tok = T.matmul(x, weight)
    if bias is not None:
        tok = T.add(tok, bias)
    return TokenGrid(tok, gh, gw, p)


def token_to_map(grid: TokenGrid) -> Tensor:
    """[N_tok, E] tokens -> [E, grid_h, grid_w] map."""
    E = grid.embed_dim
    x = T.reshape(grid.tokens, (grid.grid_h, grid.grid_w, E))
    return T.permute(x, (2, 0, 1))


def pixel_shuffle(fmap: Tensor, r: int) -> Tensor:
    """out[c, h*r + i, w*r + j] = in[c*r*r + i*r + j, h, w]."""
    C, H, W = fmap.shape
    if C % (r * r):
        raise ShapeError(f"pixel_shuffle needs channels divisible by {r * r}, got {C}")
    if r == 1:
        return fmap
    c = C // (r * r)
    x = T.reshape(fmap, (c, r, r, H, W))
    x = T.permute(x, (0, 3, 1, 4, 2))
    return T.reshape(x, (c, H * r, W * r))


def pixel_unshuffle(fmap: Tensor, r: int) -> Tensor:
    """Inverse index map of :func:`pixel_shuffle`."""
    c, H, W = fmap.shape
    if H % r or W % r:
        raise ShapeError(f"pixel_unshuffle needs spatial dims divisible by {r}")
    x = T.reshape(fmap, (c, H // r, r, W // r, r))
    x = T.permute(x, (0, 2, 4, 1, 3))
    return T.reshape(x, (c * r * r, H // r, W // r))


def upsample_nearest(fmap: Tensor) -> Tensor:
    return T.upsample_nearest2x(fmap)


def conv2d(fmap: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    return T.conv2d(fmap, weight, bias, stride, pad)


# ---------------------------------------------------------------------------
# windows


@functools.lru_cache(maxsize=64)
def _shift_mask(grid_h: int, grid_w: int, w: int, shift: int) -> np.ndarray:
    if shift == 0:
        out = np.zeros(((grid_h // w) * (grid_w // w), w * w, w * w))
    else:
        region = np.zeros((grid_h, grid_w), dtype=np.int64)
        cnt = 0
        for hs in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
            for ws in (slice(0, -w), slice(-w, -shift), slice(-shift, None)):
                region[hs, ws] = cnt
                cnt += 1
        win = region.reshape(grid_h // w, w, grid_w // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
        out = np.where(win[:, :, None] == win[:, None, :], 0.0, MASK_NEG)
    out.flags.writeable = False
    return out


def _check_window(grid_h: int, grid_w: int, w: int, shift: int) -> None:
    if w < 1 or grid_h % w or grid_w % w:
        raise ShapeError(f"token grid {grid_h}x{grid_w} not divisible by window {w}")
    if shift not in (0, w // 2) or (shift and w < 2):
        raise ShapeError(f"shift must be 0 or w/2 (w={w}), got {shift}")


def window_partition(grid: TokenGrid, w: int, shift: int = 0) -> tuple[Tensor, np.ndarray]:
    """Split tokens into w x w windows after a cyclic roll by (-shift, -shift).

    Returns windows [nW, w*w, E] and an additive mask [nW, w*w, w*w] that is
    -1e9 between tokens from different pre-roll regions.
    """
    gh, gw = grid.grid_h, grid.grid_w
    _check_window(gh, gw, w, shift)
    E = grid.embed_dim
    x = T.reshape(grid.tokens, (gh, gw, E))
    if shift:
        x = T.roll(x, (-shift, -shift), (0, 1))
    x = T.reshape(x, (gh // w, w, gw // w, w, E))
    x = T.permute(x, (0, 2, 1, 3, 4))
    windows = T.reshape(x, ((gh // w) * (gw // w), w * w, E))
    return windows, _shift_mask(gh, gw, w, shift)


def window_reverse(windows: Tensor, w: int, shift: int, grid_h: int, grid_w: int, patch: int = 1) -> TokenGrid:
    _check_window(grid_h, grid_w, w, shift)
    nW, n, E = windows.shape
    if nW != (grid_h // w) * (grid_w // w) or n != w * w:
        raise ShapeError(f"windows {windows.shape} do not tile a {grid_h}x{grid_w} grid with w={w}")
    x = T.reshape(windows, (grid_h // w, grid_w // w, w, w, E))
    x = T.permute(x, (0, 2, 1, 3, 4))
    x = T.reshape(x, (grid_h, grid_w, E))
    if shift:
        x = T.roll(x, (shift, shift), (0, 1))
    return TokenGrid(T.reshape(x, (grid_h * grid_w, E)), grid_h, grid_w, patch)


# ---------------------------------------------------------------------------
# dense layers and parameter helpers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = T.matmul(x, weight)
    return T.add(y, bias) if bias is not None else y


@dataclass
class MlpParams:
    w1: Tensor  # [E, 4E]
    b1: Tensor
    w2: Tensor  # [4E, E]
    b2: Tensor


def mlp(grid: TokenGrid, params: MlpParams) -> TokenGrid:
    E = grid.embed_dim
    if params.w1.shape[0] != E or params.w2.shape[1] != E:
        raise ShapeError(f"MLP weights {params.w1.shape}/{params.w2.shape} do not match embedding {E}")
    h = T.gelu(linear(grid.tokens, params.w1, params.b1))
    return grid.with_tokens(linear(h, params.w2, params.b2))


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: Rng, std: float = 0.02, bias: float | None = 0.0):
    w = store.add(f"{name}.w", rng.truncated_normal(std, (fan_in, fan_out)))
    b = store.add(f"{name}.b", np.full(fan_out, bias)) if bias is not None else None
    return w, b


def init_conv(store: ParamStore, name: str, cin: int, cout: int, k: int, rng: Rng, bias: bool = True, label_input: bool = False):
    bound = 1.0 / math.sqrt(cin * k * k)
    w = store.add(f"{name}.w", rng.uniform(-bound, bound, (cout, cin, k, k)), label_axis=1 if label_input else None)
    b = store.add(f"{name}.b", np.zeros(cout)) if bias else None
    return w, b


def init_mlp(store: ParamStore, name: str, E: int, rng: Rng, hidden_ratio: int = 4) -> MlpParams:
    w1, b1 = init_linear(store, f"{name}.fc1", E, hidden_ratio * E, rng)
    w2, b2 = init_linear(store, f"{name}.fc2", hidden_ratio * E, E, rng)
    return MlpParams(w1, b1, w2, b2)


def init_label_embed(store: ParamStore, name: str, num_labels: int, p: int, E: int, rng: Rng):
    w = store.add(f"{name}.w", rng.truncated_normal(0.2, (num_labels, p, p, E)), label_axis=0)
    b = store.add(f"{name}.b", np.zeros(E))
    return w, b
