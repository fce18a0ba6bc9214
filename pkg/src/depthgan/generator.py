"""Two-branch layout-to-depth/RGB generator built from swin-style stages."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import MsaParams, default_heads, init_msa, wmsa
from .caf import CafParams, caf_fuse, init_caf
from .layers import (
    MlpParams,
    SemanticLayout,
    TokenGrid,
    init_conv,
    init_linear,
    init_mlp,
    label_conv2d,
    linear,
    mlp,
    patch_embed,
    pixel_shuffle,
    token_to_map,
    upsample_nearest,
)
from .normalization import (
    CTN_STATS,
    CtnParams,
    SpadeParams,
    ctn_forward,
    init_ctn,
    init_layout_tokenizer,
    init_spade,
    spade_shortcut,
    tokenize_layout,
)
from .tensor import ParamStore, Rng, ShapeError, Tensor

BRANCHES = ("depth", "rgb")
SUPPORTED_RESOLUTIONS = (32, 64, 128, 256)


class ConfigError(ValueError):
    pass


@dataclass
class StageConfig:
    resolution: int
    channels: int
    embedding: int
    patch: int
    window: int
    pair_count: int

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def out_channels(self) -> int:
        return self.embedding // (self.patch * self.patch)

    @property
    def heads(self) -> int:
        return default_heads(self.embedding)


@dataclass
class GeneratorConfig:
    output_resolution: int
    stages: list[StageConfig]
    z_dim: int = 256
    num_labels: int = 16
    fuse_enabled: bool = True
    ctn_stats: str = "joint"
    caf_value_source: str = "self"
    literal_eq1: bool = False
    rel_pos_bias: bool = True
    enc_channels: int = 64
    spade_hidden: int = 64
    caf_dim: int = 64
    noise_dim: int = 0

    def validate(self) -> GeneratorConfig:
        s = self.stages
        if not s:
            raise ConfigError("at least one stage is required")
        if s[-1].resolution != self.output_resolution:
            raise ConfigError("last stage resolution must equal the output resolution")
        if self.fuse_enabled and len(s) < 2:
            raise ConfigError("fusion needs at least two stages")
        if self.output_resolution < 8 or self.output_resolution & (self.output_resolution - 1):
            raise ConfigError("output resolution must be a power of two >= 8")
        if s[0].resolution < 1 or s[0].resolution > self.output_resolution:
            raise ConfigError("bad first-stage resolution")
        if self.num_labels < 1:
            raise ConfigError("num_labels must be positive")
        if self.ctn_stats not in CTN_STATS:
            raise ConfigError(f"ctn_stats must be one of {CTN_STATS}")
        if self.caf_value_source not in ("self", "other"):
            raise ConfigError("caf_value_source must be 'self' or 'other'")
        for i, st in enumerate(s):
            if i and st.resolution != 2 * s[i - 1].resolution:
                raise ConfigError("stage resolutions must double")
            if st.pair_count < 1 or st.patch < 1 or st.window < 1:
                raise ConfigError(f"stage {i}: patch, window, pair_count must be >= 1")
            if st.resolution % st.patch or st.grid % st.window:
                raise ConfigError(f"stage {i}: resolution {st.resolution} not divisible by patch*window")
            if st.window < 2:
                raise ConfigError(f"stage {i}: shifted windows need window >= 2")
            if st.embedding % (st.patch * st.patch):
                raise ConfigError(f"stage {i}: embedding must be divisible by patch^2")
            if i + 1 < len(s) and st.out_channels != s[i + 1].channels:
                raise ConfigError(f"stage {i}: output channels {st.out_channels} != next stage channels {s[i + 1].channels}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> GeneratorConfig:
        if not isinstance(doc, dict):
            raise ConfigError("generator config must be an object")
        _reject_unknown(doc, cls, "generator")
        stages = []
        for j, sd in enumerate(doc.get("stages", [])):
            if not isinstance(sd, dict):
                raise ConfigError(f"stages[{j}] must be an object")
            _reject_unknown(sd, StageConfig, f"stages[{j}]")
            missing = {f.name for f in dataclasses.fields(StageConfig)} - set(sd)
            if missing:
                raise ConfigError(f"stages[{j}] missing {sorted(missing)}")
            stages.append(StageConfig(**{k: _int(v, f"stages[{j}].{k}") for k, v in sd.items()}))
        kwargs = {k: v for k, v in doc.items() if k != "stages"}
        if "output_resolution" not in kwargs:
            raise ConfigError("generator config missing output_resolution")
        for f in dataclasses.fields(cls):
            if f.name in kwargs and f.type in ("int", int):
                kwargs[f.name] = _int(kwargs[f.name], f.name)
            if f.name in kwargs and f.type in ("bool", bool) and not isinstance(kwargs[f.name], bool):
                raise ConfigError(f"{f.name} must be a boolean")
        return cls(stages=stages, **kwargs).validate()

    @classmethod
    def from_json(cls, text: str) -> GeneratorConfig:
        return cls.from_dict(json.loads(text))


def _reject_unknown(doc: dict, cls, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _int(v, name: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer")
    return v


def stage_patch_size(stage_resolution: int, output_resolution: int) -> int:
    divisor = 64 if output_resolution >= 256 else 32
    return max(1, stage_resolution // divisor)


def default_config(resolution: int, num_labels: int = 16) -> GeneratorConfig:
    """Desk-scale default schedule for a square output of ``resolution``."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ConfigError(f"unsupported resolution {resolution}; choose from {SUPPORTED_RESOLUTIONS}")
    res_list = []
    r = 8
    while r <= resolution:
        res_list.append(r)
        r *= 2
    channels = [max(64, 256 >> i) for i in range(len(res_list))]
    stages = []
    for i, r in enumerate(res_list):
        p = stage_patch_size(r, resolution)
        c_out = channels[i + 1] if i + 1 < len(res_list) else channels[i]
        grid = r // p
        window = min(grid, 4 if r <= 8 else 8)
        stages.append(StageConfig(r, channels[i], c_out * p * p, p, window, 1 if r <= 32 else 2))
    return GeneratorConfig(resolution, stages, z_dim=256, num_labels=num_labels).validate()


def tiny_config(resolution: int = 16, num_labels: int = 4, width: int = 8, z_dim: int | None = None, hidden: int | None = None) -> GeneratorConfig:
    """Two-stage, narrow configuration for gradient checks and smoke training."""
    if resolution not in (8, 16, 32):
        raise ConfigError("tiny configs support resolutions 8, 16 and 32")
    r0 = resolution // 2
    window = 2 if resolution == 8 else 4
    hidden = hidden or width
    stages = [StageConfig(r0, width, width, 1, window, 1), StageConfig(resolution, width, width, 1, window, 1)]
    return GeneratorConfig(
        resolution, stages, z_dim=z_dim or 4 * width, num_labels=num_labels,
        enc_channels=hidden, spade_hidden=hidden, caf_dim=width,
    ).validate()


# ---------------------------------------------------------------------------
# parameters


@dataclass
class BlockParams:
    ctn_attn: CtnParams
    msa: MsaParams
    ctn_mlp: CtnParams
    mlp: MlpParams


@dataclass
class StageParams:
    embed_w: Tensor
    embed_b: Tensor
    layout_w: Tensor
    layout_b: Tensor
    blocks: list[BlockParams]  # alternating regular / shifted windows
    spade: SpadeParams


@dataclass
class GeneratorParams:
    enc: list[tuple[Tensor, Tensor]]
    z_w: Tensor
    z_b: Tensor
    latent_w: Tensor
    latent_b: Tensor
    stem_w: Tensor
    stem_b: Tensor
    branches: dict[str, list[StageParams]]
    caf: CafParams | None
    head_w: dict[str, Tensor]
    head_b: dict[str, Tensor]
    store: ParamStore = field(repr=False, default_factory=ParamStore)


def _init_stage(store: ParamStore, name: str, cfg: GeneratorConfig, st: StageConfig, rng: Rng) -> StageParams:
    E, p = st.embedding, st.patch
    fan = st.channels * p * p
    ew, eb = init_linear(store, f"{name}.embed", fan, E, rng, std=1.0 / math.sqrt(fan))
    lw, lb = init_layout_tokenizer(store, f"{name}.layout", cfg.num_labels, p, E, rng)
    blocks = []
    for j in range(2 * st.pair_count):
        blocks.append(
            BlockParams(
                init_ctn(store, f"{name}.block{j}.ctn_attn", E, E, rng),
                init_msa(store, f"{name}.block{j}.msa", E, st.heads, st.window, rng, cfg.rel_pos_bias),
                init_ctn(store, f"{name}.block{j}.ctn_mlp", E, E, rng),
                init_mlp(store, f"{name}.block{j}.mlp", E, rng),
            )
        )
    spade = init_spade(store, f"{name}.spade", cfg.num_labels, st.channels, st.out_channels, cfg.spade_hidden, rng)
    return StageParams(ew, eb, lw, lb, blocks, spade)


def init_generator(cfg: GeneratorConfig, rng: Rng, prefix: str = "g") -> GeneratorParams:
    cfg.validate()
    store = ParamStore()
    res = cfg.output_resolution
    n_enc = int(round(math.log2(res // 4)))
    ce = cfg.enc_channels
    enc = [init_conv(store, f"{prefix}.enc.conv0", cfg.num_labels, ce, 3, rng, label_input=True)]
    for i in range(1, n_enc):
        enc.append(init_conv(store, f"{prefix}.enc.conv{i}", ce, ce, 3, rng))
    flat = ce * 16
    z_w, z_b = init_linear(store, f"{prefix}.z", flat, cfg.z_dim, rng, std=1.0 / math.sqrt(flat))
    s0 = cfg.stages[0]
    zin = cfg.z_dim + cfg.noise_dim
    lat_w, lat_b = init_linear(store, f"{prefix}.latent", zin, s0.channels * s0.resolution**2, rng, std=1.0 / math.sqrt(zin))
    stem_w, stem_b = init_conv(store, f"{prefix}.stem", s0.channels, s0.channels, 3, rng)
    branches = {b: [_init_stage(store, f"{prefix}.{b}.stage{i}", cfg, st, rng) for i, st in enumerate(cfg.stages)] for b in BRANCHES}
    caf = None
    if cfg.fuse_enabled:
        pen = cfg.stages[-2]
        caf = init_caf(store, f"{prefix}.caf", cfg.num_labels, pen.out_channels, 2 * pen.resolution, cfg.caf_dim, rng)
    c_last = cfg.stages[-1].out_channels
    head_w, head_b = {}, {}
    for b, n_out in (("depth", 1), ("rgb", 3)):
        head_w[b], head_b[b] = init_conv(store, f"{prefix}.head.{b}", c_last, n_out, 1, rng)
    return GeneratorParams(enc, z_w, z_b, lat_w, lat_b, stem_w, stem_b, branches, caf, head_w, head_b, store)


# ---------------------------------------------------------------------------
# forward


def encode_layout(layout: SemanticLayout, gp: GeneratorParams, cfg: GeneratorConfig, noise: np.ndarray | None = None) -> Tensor:
    """Layout -> latent z -> conjoint feature map F0 [C0, s0, s0]."""
    if layout.shape != (cfg.output_resolution, cfg.output_resolution):
        raise ShapeError(f"layout {layout.shape} does not match output resolution {cfg.output_resolution}")
    w0, b0 = gp.enc[0]
    x = T.relu(label_conv2d(layout, w0, b0, stride=2, pad=1))
    for w, b in gp.enc[1:]:
        x = T.relu(T.conv2d(x, w, b, stride=2, pad=1))
    z = linear(T.reshape(x, (1, x.size)), gp.z_w, gp.z_b)
    if cfg.noise_dim:
        if noise is None:
            raise ValueError("config has noise_dim > 0 but no noise was given")
        z = T.concat([z, Tensor(np.asarray(noise, dtype=float).reshape(1, cfg.noise_dim))], axis=1)
    s0 = cfg.stages[0]
    h = linear(T.relu(z), gp.latent_w, gp.latent_b)
    h = T.reshape(h, (s0.channels, s0.resolution, s0.resolution))
    return T.conv2d(h, gp.stem_w, gp.stem_b, pad=1)


def swin_blocks(x: TokenGrid, mt: TokenGrid, sp: StageParams, st: StageConfig, cfg: GeneratorConfig) -> TokenGrid:
    for j, blk in enumerate(sp.blocks):
        shifted = j % 2 == 1
        if cfg.literal_eq1:
            a = wmsa(ctn_forward(x, mt, blk.ctn_attn, cfg.ctn_stats), st.window, shifted, blk.msa)
            x = mlp(ctn_forward(a, mt, blk.ctn_mlp, cfg.ctn_stats), blk.mlp)
        else:
            a = wmsa(ctn_forward(x, mt, blk.ctn_attn, cfg.ctn_stats), st.window, shifted, blk.msa)
            x = x.with_tokens(T.add(x.tokens, a.tokens))
            m = mlp(ctn_forward(x, mt, blk.ctn_mlp, cfg.ctn_stats), blk.mlp)
            x = x.with_tokens(T.add(x.tokens, m.tokens))
    return x


def generator_stage(fmap: Tensor, layout: SemanticLayout, sp: StageParams, st: StageConfig, cfg: GeneratorConfig, final: bool) -> Tensor:
    """One stage: tokens -> swin blocks -> map -> pixel shuffle, plus the SPADE shortcut."""
    C, H, W = fmap.shape
    if (C, H, W) != (st.channels, st.resolution, st.resolution):
        raise ShapeError(f"stage expects [{st.channels}, {st.resolution}, {st.resolution}], got {list(fmap.shape)}")
    x = patch_embed(fmap, st.patch, sp.embed_w, sp.embed_b)
    mt = tokenize_layout(layout, x.grid_h, x.grid_w, st.patch, sp.layout_w, sp.layout_b)
    x = swin_blocks(x, mt, sp, st, cfg)
    fhat = pixel_shuffle(token_to_map(x), st.patch)
    out = T.add(fhat, spade_shortcut(fmap, layout, sp.spade, st.out_channels))
    return out if final else upsample_nearest(out)


def generate(layout: SemanticLayout, gp: GeneratorParams, cfg: GeneratorConfig, noise: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Returns (depth [1, H, W], rgb [3, H, W]), both in [-1, 1]."""
    if layout.num_labels != cfg.num_labels:
        raise ShapeError(f"layout has {layout.num_labels} labels, config expects {cfg.num_labels}")
    f0 = encode_layout(layout, gp, cfg, noise)
    feats = {b: f0 for b in BRANCHES}
    n = len(cfg.stages)
    for i, st in enumerate(cfg.stages):
        final = i == n - 1
        for b in BRANCHES:
            feats[b] = generator_stage(feats[b], layout, gp.branches[b][i], st, cfg, final)
        if cfg.fuse_enabled and i == n - 2:
            feats["depth"], feats["rgb"] = caf_fuse(feats["depth"], feats["rgb"], layout, gp.caf, cfg.caf_value_source)
    depth = T.tanh(T.conv2d(feats["depth"], gp.head_w["depth"], gp.head_b["depth"]))
    rgb = T.tanh(T.conv2d(feats["rgb"], gp.head_w["rgb"], gp.head_b["rgb"]))
    return depth, rgb


# ---------------------------------------------------------------------------
# debugging helpers


def token_path_tensors(gp: GeneratorParams) -> list[Tensor]:
    """Weights feeding the token path of every stage (embedding, CTN heads, attention, MLP)."""
    out = []
    for stages in gp.branches.values():
        for sp in stages:
            out += [sp.embed_w, sp.embed_b]
            for blk in sp.blocks:
                for c in (blk.ctn_attn, blk.ctn_mlp):
                    out += [c.w_gamma, c.b_gamma, c.w_beta, c.b_beta]
                m = blk.msa
                out += [m.wq, m.bq, m.wk, m.wv, m.bv, m.wo, m.bo]
                if m.rel_bias is not None:
                    out.append(m.rel_bias)
                out += [blk.mlp.w1, blk.mlp.b1, blk.mlp.w2, blk.mlp.b2]
    return out


def isolate_residual(gp: GeneratorParams) -> None:
    """Zero the token path so every stage reduces to its SPADE shortcut."""
    for t in token_path_tensors(gp):
        t.data = np.zeros(t.shape)


def shortcut_path(layout: SemanticLayout, gp: GeneratorParams, cfg: GeneratorConfig) -> tuple[Tensor, Tensor]:
    """The generator with the token path removed, composed by hand."""
    f0 = encode_layout(layout, gp, cfg)
    feats = {b: f0 for b in BRANCHES}
    n = len(cfg.stages)
    for i, st in enumerate(cfg.stages):
        for b in BRANCHES:
            out = spade_shortcut(feats[b], layout, gp.branches[b][i].spade, st.out_channels)
            feats[b] = out if i == n - 1 else upsample_nearest(out)
        if cfg.fuse_enabled and i == n - 2:
            feats["depth"], feats["rgb"] = caf_fuse(feats["depth"], feats["rgb"], layout, gp.caf, cfg.caf_value_source)
    depth = T.tanh(T.conv2d(feats["depth"], gp.head_w["depth"], gp.head_b["depth"]))
    rgb = T.tanh(T.conv2d(feats["rgb"], gp.head_w["rgb"], gp.head_b["rgb"]))
    return depth, rgb


def permute_labels(gp: GeneratorParams, perm: np.ndarray) -> None:
    """Relabel every label-facing weight so that layout ``perm[M]`` reproduces layout ``M``."""
    inv = np.argsort(perm)
    for p in gp.store:
        if p.label_axis is not None:
            p.value.data = np.take(p.value.data, inv, axis=p.label_axis)
