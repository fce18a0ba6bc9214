"""Multi-scale spectral-norm discriminators, GAN/SSIM losses, Adam and a smoke trainer."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .generator import GeneratorConfig, GeneratorParams, generate, init_generator
from .layers import SemanticLayout, one_hot
from .tensor import NonFiniteError, Param, ParamStore, Rng, ShapeError, Tensor, backward, no_grad

LR_G = 1e-4
LR_D = 4e-4
BETA1 = 0.0
BETA2 = 0.999
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
REPORT_COLUMNS = ("step", "loss_d_depth", "loss_d_rgb", "loss_g_adv", "loss_fm", "loss_ssim")


@dataclass
class LossWeights:
    w_ssim: float = 20.0
    w_fm: float = 10.0
    w_adv: float = 1.0

    def __post_init__(self):
        for k in ("w_ssim", "w_fm", "w_adv"):
            v = getattr(self, k)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
                raise ValueError(f"{k} must be a non-negative number")


# ---------------------------------------------------------------------------
# spectral norm


@dataclass
class SnState:
    u: np.ndarray
    v: np.ndarray


def _unit(x: np.ndarray) -> np.ndarray:
    return x / max(np.linalg.norm(x), 1e-12)


def init_sn_state(weight: np.ndarray, rng: Rng) -> SnState:
    mat = weight.reshape(weight.shape[0], -1)
    u = _unit(rng.normal(0.0, 1.0, mat.shape[0]))
    return SnState(u, _unit(mat.T @ u))


def power_iterate(mat: np.ndarray, state: SnState, n_iter: int = 1) -> None:
    for _ in range(n_iter):
        state.v = _unit(mat.T @ state.u)
        state.u = _unit(mat @ state.v)


def spectral_normalize(weight: Tensor, state: SnState, training: bool = True, n_iter: int = 1) -> Tensor:
    """weight / sigma, sigma = u^T W v with u, v held constant for the gradient."""
    co = weight.shape[0]
    if training:
        power_iterate(weight.data.reshape(co, -1), state, n_iter)
    mat = T.reshape(weight, (co, -1))
    sigma = T.sum_(T.mul(Tensor(state.u[:, None]), T.matmul(mat, Tensor(state.v[:, None]))))
    return T.div(weight, sigma)


# ---------------------------------------------------------------------------
# discriminator


@dataclass
class SnConv:
    w: Tensor
    b: Tensor
    sn: SnState
    stride: int
    pad: int


@dataclass
class DiscriminatorParams:
    scales: list[list[SnConv]]  # per scale: 4 feature convs, then the 1x1 logit head
    store: ParamStore = field(repr=False, default_factory=ParamStore)
    training: bool = True


def init_discriminator(num_labels: int, image_channels: int, rng: Rng, ndf: int = 16, n_scales: int = 2, n_layers: int = 4, prefix: str = "d") -> DiscriminatorParams:
    store = ParamStore()
    scales = []
    for s in range(n_scales):
        layers = []
        cin = num_labels + image_channels
        for i in range(n_layers):
            cout = min(ndf * 2**i, 512)
            bound = 1.0 / math.sqrt(cin * 16)
            w = store.add(f"{prefix}.scale{s}.conv{i}.w", rng.uniform(-bound, bound, (cout, cin, 4, 4)), label_axis=1 if i == 0 else None)
            b = store.add(f"{prefix}.scale{s}.conv{i}.b", np.zeros(cout))
            layers.append(SnConv(w, b, init_sn_state(w.data, rng), 2, 2))
            cin = cout
        bound = 1.0 / math.sqrt(cin)
        w = store.add(f"{prefix}.scale{s}.logit.w", rng.uniform(-bound, bound, (1, cin, 1, 1)))
        b = store.add(f"{prefix}.scale{s}.logit.b", np.zeros(1))
        layers.append(SnConv(w, b, init_sn_state(w.data, rng), 1, 0))
        scales.append(layers)
    return DiscriminatorParams(scales, store)


def refresh_spectral_state(params: DiscriminatorParams, n_iter: int = 50) -> None:
    """Re-converge every u, v pair, e.g. after weights were overwritten."""
    for layers in params.scales:
        for conv in layers:
            power_iterate(conv.w.data.reshape(conv.w.shape[0], -1), conv.sn, n_iter)


def discriminate(image: Tensor, layout: SemanticLayout, params: DiscriminatorParams) -> list[tuple[Tensor, list[Tensor]]]:
    """Per scale: (logit map [1, h, w], intermediate LeakyReLU features)."""
    c, H, W = image.shape
    if c not in (1, 3):
        raise ShapeError(f"image must have 1 or 3 channels, got {c}")
    if min(H, W) < 16:
        raise ShapeError(f"discriminator needs spatial dims >= 16, got {H}x{W}")
    if layout.shape != (H, W):
        raise ShapeError(f"layout {layout.shape} does not match image {H}x{W}")
    x = T.concat([one_hot(layout), image], axis=0)
    out = []
    for s, layers in enumerate(params.scales):
        if s:
            x = T.avg_pool2x(x)
        h = x
        feats = []
        for conv in layers[:-1]:
            w = spectral_normalize(conv.w, conv.sn, params.training)
            h = T.leaky_relu(T.conv2d(h, w, conv.b, conv.stride, conv.pad), 0.2)
            feats.append(h)
        head = layers[-1]
        logits = T.conv2d(h, spectral_normalize(head.w, head.sn, params.training), head.b)
        out.append((logits, feats))
    return out


def logit_shapes(params: DiscriminatorParams, H: int, W: int) -> list[tuple[int, int, int]]:
    shapes = []
    for s, layers in enumerate(params.scales):
        h, w = H >> s, W >> s
        for conv in layers[:-1]:
            h = (h + 2 * conv.pad - 4) // conv.stride + 1
            w = (w + 2 * conv.pad - 4) // conv.stride + 1
        shapes.append((1, h, w))
    return shapes


# ---------------------------------------------------------------------------
# losses


def hinge_d_loss(real_logits: list[Tensor], fake_logits: list[Tensor]) -> Tensor:
    if len(real_logits) != len(fake_logits):
        raise ShapeError("real and fake logits come from different discriminator topologies")
    terms = [
        T.add(T.mean(T.max0_shift(T.neg(r), 1.0)), T.mean(T.max0_shift(f, 1.0)))
        for r, f in zip(real_logits, fake_logits)
    ]
    return T.scale(_sum(terms), 1.0 / len(terms))


def hinge_g_loss(fake_logits: list[Tensor]) -> Tensor:
    terms = [T.mean(T.neg(f)) for f in fake_logits]
    return T.scale(_sum(terms), 1.0 / len(terms))


def feature_matching_loss(real_feats: list[list[Tensor]], fake_feats: list[list[Tensor]]) -> Tensor:
    """Mean over (scale, layer) of the mean absolute feature difference."""
    if len(real_feats) != len(fake_feats) or any(len(a) != len(b) for a, b in zip(real_feats, fake_feats)):
        raise ShapeError("feature sets come from different discriminator topologies")
    terms = []
    for rs, fs in zip(real_feats, fake_feats):
        for r, f in zip(rs, fs):
            if r.shape != f.shape:
                raise ShapeError(f"feature shape mismatch {r.shape} vs {f.shape}")
            terms.append(T.mean(T.abs_(T.sub(f, r.detach()))))
    return T.scale(_sum(terms), 1.0 / len(terms))


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM of two single-channel maps with values in [0, 1].

    Gaussian 11x11 window (sigma 1.5), valid filtering; maps smaller than the
    window use the largest odd window that fits.
    """
    if x.shape != y.shape:
        raise ShapeError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = T.reshape(x, (1,) + x.shape), T.reshape(y, (1,) + y.shape)
    if x.ndim != 3 or x.shape[0] != 1:
        raise ShapeError(f"ssim expects a single-channel map, got {x.shape}")
    size = min(SSIM_WINDOW, x.shape[1], x.shape[2])
    size -= 1 - size % 2
    win = Tensor(gaussian_window(size)[None, None])

    def filt(t):
        return T.conv2d(t, win)

    mu_x, mu_y = filt(x), filt(y)
    mu_xy = T.mul(mu_x, mu_y)
    mu_xx = T.mul(mu_x, mu_x)
    mu_yy = T.mul(mu_y, mu_y)
    var_x = T.sub(filt(T.mul(x, x)), mu_xx)
    var_y = T.sub(filt(T.mul(y, y)), mu_yy)
    cov = T.sub(filt(T.mul(x, y)), mu_xy)
    num = T.mul(T.add(T.scale(mu_xy, 2.0), SSIM_C1), T.add(T.scale(cov, 2.0), SSIM_C2))
    den = T.mul(T.add(T.add(mu_xx, mu_yy), SSIM_C1), T.add(T.add(var_x, var_y), SSIM_C2))
    return T.mean(T.div(num, den))


def to_unit_range(x: Tensor) -> Tensor:
    """Affine map [-1, 1] -> [0, 1]."""
    return T.scale(T.add(x, 1.0), 0.5)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[Param], state: AdamState, lr: float, beta1: float = BETA1, beta2: float = BETA2, eps: float = 1e-8) -> None:
    """Bias-corrected Adam; rejects the whole step if any gradient is non-finite."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"{p.name} has no gradient")
        if p.grad.shape != p.value.shape:
            raise ShapeError(f"{p.name}: grad shape {p.grad.shape} != value shape {p.value.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in {p.name}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        p.value.data = p.value.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# smoke training


@dataclass
class Sample:
    layout: SemanticLayout
    depth: Tensor  # [1, H, W] in [-1, 1]
    rgb: Tensor  # [3, H, W] in [-1, 1]


def synthetic_dataset(n: int, resolution: int, num_labels: int, seed: int) -> list[Sample]:
    """Rectangular rooms: a wall ramp plus labelled boxes at nearer, planar depths."""
    rng = Rng(seed)
    palette = rng.uniform(-0.8, 0.8, (num_labels, 3))
    samples = []
    ys, xs = np.mgrid[0:resolution, 0:resolution] / max(resolution - 1, 1)
    for _ in range(n):
        lab = np.zeros((resolution, resolution), dtype=np.int64)
        depth = 0.6 - 0.4 * ys + 0.1 * rng.uniform(-1, 1, ()) * xs
        for _ in range(int(rng.integers(1, 4, ()))):
            y0, x0 = rng.integers(0, resolution - 2, 2)
            hh, ww = rng.integers(2, max(3, resolution // 2), 2)
            lbl = int(rng.integers(1, num_labels, ()))
            sl = (slice(y0, y0 + hh), slice(x0, x0 + ww))
            lab[sl] = lbl
            base = rng.uniform(-0.6, 0.2, ())
            depth[sl] = base + 0.1 * (ys[sl] - ys[sl].mean())
        rgb = palette[lab].transpose(2, 0, 1) * (0.75 + 0.25 * depth[None])
        samples.append(Sample(SemanticLayout(lab, num_labels), Tensor(np.clip(depth, -1, 1)[None]), Tensor(np.clip(rgb, -1, 1))))
    return samples


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    g_delta_norms: list[float] = field(default_factory=list)  # ||theta_t - theta_0|| after each step

    @property
    def final_delta_norm(self) -> float:
        return self.g_delta_norms[-1] if self.g_delta_norms else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in REPORT_COLUMNS[1:]])
        return buf.getvalue()


def _delta_norm(store: ParamStore, init: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum((p.value.data - init[p.name]) ** 2)) for p in store))


def _batch_mean(terms: list[Tensor]) -> Tensor:
    return T.scale(_sum(terms), 1.0 / len(terms))


def train_smoke(
    dataset: list[Sample],
    cfg: GeneratorConfig,
    steps: int,
    seed: int = 1,
    batch_size: int = 2,
    weights: LossWeights | None = None,
    ndf: int = 16,
    lr_g: float = LR_G,
    lr_d: float = LR_D,
    models: tuple | None = None,
) -> TrainReport:
    """Alternating discriminator / generator updates on a tiny configuration."""
    if cfg.output_resolution > 32 or len(cfg.stages) > 2:
        raise ValueError("smoke training is limited to <= 32x32 and <= 2 stages")
    if not 0 <= steps <= 500:
        raise ValueError("steps must lie in [0, 500]")
    weights = weights or LossWeights()
    rng = Rng(seed)
    if models is None:
        gp = init_generator(cfg, rng)
        d_depth = init_discriminator(cfg.num_labels, 1, rng, ndf, prefix="d_depth")
        d_rgb = init_discriminator(cfg.num_labels, 3, rng, ndf, prefix="d_rgb")
    else:
        gp, d_depth, d_rgb = models
    g_params = list(gp.store)
    d_params = list(d_depth.store) + list(d_rgb.store)
    g_init = gp.store.state()
    opt_g, opt_dd, opt_dr = AdamState(), AdamState(), AdamState()
    report = TrainReport()
    order = rng.permutation(len(dataset))
    cursor = 0
    for step in range(steps):
        batch = []
        for _ in range(batch_size):
            batch.append(dataset[int(order[cursor % len(dataset)])])
            cursor += 1
        fakes = [generate(s.layout, gp, cfg) for s in batch]

        ld_depth = _batch_mean([
            hinge_d_loss(
                [o[0] for o in discriminate(s.depth, s.layout, d_depth)],
                [o[0] for o in discriminate(f[0].detach(), s.layout, d_depth)],
            )
            for s, f in zip(batch, fakes)
        ])
        ld_rgb = _batch_mean([
            hinge_d_loss(
                [o[0] for o in discriminate(s.rgb, s.layout, d_rgb)],
                [o[0] for o in discriminate(f[1].detach(), s.layout, d_rgb)],
            )
            for s, f in zip(batch, fakes)
        ])
        _check_finite(step, ld_depth, ld_rgb)
        backward(T.add(ld_depth, ld_rgb), d_params)
        adam_step(list(d_depth.store), opt_dd, lr_d)
        adam_step(list(d_rgb.store), opt_dr, lr_d)

        adv_terms, fm_terms, ssim_terms = [], [], []
        for s, (fd, fr) in zip(batch, fakes):
            out_d = discriminate(fd, s.layout, d_depth)
            out_r = discriminate(fr, s.layout, d_rgb)
            adv_terms.append(T.add(hinge_g_loss([o[0] for o in out_d]), hinge_g_loss([o[0] for o in out_r])))
            with no_grad():
                real_r = discriminate(s.rgb, s.layout, d_rgb)
            fm_terms.append(feature_matching_loss([o[1] for o in real_r], [o[1] for o in out_r]))
            ssim_terms.append(T.sub(1.0, ssim(to_unit_range(fd), to_unit_range(s.depth))))
        adv, fm, ssim_loss = _batch_mean(adv_terms), _batch_mean(fm_terms), _batch_mean(ssim_terms)
        _check_finite(step, adv, fm, ssim_loss)
        g_loss = T.add(T.add(T.scale(adv, weights.w_adv), T.scale(fm, weights.w_fm)), T.scale(ssim_loss, weights.w_ssim))
        backward(g_loss, g_params)
        adam_step(g_params, opt_g, lr_g)

        report.rows.append({
            "step": step,
            "loss_d_depth": ld_depth.item(),
            "loss_d_rgb": ld_rgb.item(),
            "loss_g_adv": adv.item(),
            "loss_fm": fm.item(),
            "loss_ssim": ssim_loss.item(),
        })
        report.g_delta_norms.append(_delta_norm(gp.store, g_init))
    return report


def _check_finite(step: int, *losses: Tensor) -> None:
    for l in losses:
        if not np.isfinite(l.data):
            raise NonFiniteError(f"non-finite loss at step {step}")
