"""Command-line entry point: ``depthgan <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import LR_D, LR_G, LossWeights, synthetic_dataset, train_smoke
from .dataprep import labels_csv, prepare_scene
from .generator import ConfigError, GeneratorConfig, generate, init_generator, tiny_config
from .gradcheck import CHECKS, run_check
from .imageio import ImageFormatError, read_pfm, read_pgm, to_u8, write_pfm, write_ppm
from .layers import SemanticLayout
from .metrics import depth_metrics, report_csv
from .tensor import Rng, no_grad, read_checkpoint, save_checkpoint
from .turbo import turbo_colorize

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or schema violations (exit code 2)."""


@dataclass
class RunConfig:
    generator: GeneratorConfig
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 1
    batch_size: int = 2
    dataset_size: int = 8
    ndf: int = 16
    lr_g: float = LR_G
    lr_d: float = LR_D

    @classmethod
    def from_dict(cls, doc) -> RunConfig:
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown keys in run config: {sorted(unknown)}")
        if "generator" not in doc:
            raise ConfigError("run config missing 'generator'")
        kw = {"generator": GeneratorConfig.from_dict(doc["generator"])}
        lw = doc.get("loss_weights", {})
        if not isinstance(lw, dict):
            raise ConfigError("loss_weights must be an object")
        lw_known = {f.name for f in dataclasses.fields(LossWeights)}
        if set(lw) - lw_known:
            raise ConfigError(f"unknown keys in loss_weights: {sorted(set(lw) - lw_known)}")
        try:
            kw["loss_weights"] = LossWeights(**lw)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for k in ("seed", "batch_size", "dataset_size", "ndf"):
            if k in doc:
                v = doc[k]
                if isinstance(v, bool) or not isinstance(v, int) or v < (0 if k == "seed" else 1):
                    raise ConfigError(f"{k} must be a {'non-negative' if k == 'seed' else 'positive'} integer")
                kw[k] = v
        for k in ("lr_g", "lr_d"):
            if k in doc:
                v = doc[k]
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                    raise ConfigError(f"{k} must be a positive number")
                kw[k] = float(v)
        return cls(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_run_config() -> RunConfig:
    return RunConfig(tiny_config(16, num_labels=4, width=8))


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return default_run_config()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from e
    try:
        return RunConfig.from_dict(doc)
    except (ConfigError, TypeError) as e:
        raise UsageError(f"{path}: {e}") from e


def thread_count() -> int:
    raw = os.environ.get("DEPTHGEN_THREADS", "0")
    try:
        n = int(raw)
    except ValueError as e:
        raise UsageError(f"DEPTHGEN_THREADS must be an integer, got {raw!r}") from e
    if n < 0:
        raise UsageError("DEPTHGEN_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


class Outputs:
    """Tracks files a command creates so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []
        self.dirs: list[Path] = []

    def file(self, p) -> Path:
        p = Path(p)
        self.paths.append(p)
        return p

    def mkdir(self, d) -> Path:
        d = Path(d)
        missing = []
        cur = d
        while not cur.exists():
            missing.append(cur)
            cur = cur.parent
        d.mkdir(parents=True, exist_ok=True)
        self.dirs += reversed(missing)
        return d

    def cleanup(self) -> None:
        for p in self.paths:
            for q in (p, p.with_name(p.name + ".tmp")):
                if q.exists():
                    q.unlink()
        for d in reversed(self.dirs):
            try:
                d.rmdir()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare_data(args, out: Outputs) -> int:
    pano_dir = Path(args.pano_dir)
    if not pano_dir.is_dir():
        raise UsageError(f"panorama directory not found: {pano_dir}")
    if args.size < 2:
        raise UsageError("--size must be >= 2")
    if not 2 <= args.num_labels <= 256:
        raise UsageError("--num-labels must lie in [2, 256]")
    if args.scenes:
        names = [ln.strip() for ln in Path(args.scenes).read_text().splitlines() if ln.strip()]
    else:
        names = sorted(p.name for p in pano_dir.iterdir() if p.is_dir())
    if not names:
        raise UsageError("no scenes to convert")
    dst = out.mkdir(args.out)
    for n in names:
        out.mkdir(dst / n)
        for f in ("front", "right", "back", "left"):
            for ext in ("rgb.ppm", "sem.pgm", "depth.pfm"):
                out.file(dst / n / f"{f}.{ext}")

    def work(name):
        return prepare_scene(pano_dir / name, dst, args.size, args.num_labels)

    with ThreadPoolExecutor(max_workers=thread_count()) as ex:
        results = list(ex.map(work, names))
    (out.file(dst / "labels.csv")).write_text(labels_csv(args.num_labels))
    print(f"converted {len(names)} scenes into {sum(len(r) for r in results)} files")
    return EXIT_OK


def _load_layout(path: str, num_labels: int) -> SemanticLayout:
    try:
        labels, _ = read_pgm(path)
    except FileNotFoundError as e:
        raise UsageError(f"layout not found: {path}") from e
    except ImageFormatError as e:
        raise UsageError(f"{path}: {e}") from e
    if labels.max(initial=0) >= num_labels:
        raise UsageError(f"{path}: label {labels.max()} exceeds num_labels {num_labels}")
    return SemanticLayout(labels.astype(np.int64), num_labels)


def _build_generator(rc: RunConfig, checkpoint: str | None):
    gp = init_generator(rc.generator, Rng(rc.seed))
    if checkpoint:
        try:
            gp.store.load_state(read_checkpoint(checkpoint))
        except FileNotFoundError as e:
            raise UsageError(f"checkpoint not found: {checkpoint}") from e
        except (KeyError, ValueError) as e:
            raise UsageError(f"{checkpoint}: {e}") from e
    return gp


def cmd_forward(args, out: Outputs) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    cfg = rc.generator
    layout = _load_layout(args.layout, cfg.num_labels)
    if layout.shape != (cfg.output_resolution, cfg.output_resolution):
        raise UsageError(f"layout is {layout.shape}, config expects {cfg.output_resolution}x{cfg.output_resolution}")
    gp = _build_generator(rc, args.checkpoint)
    noise = Rng(rc.seed + 1).normal(0.0, 1.0, cfg.noise_dim) if cfg.noise_dim else None
    with no_grad():
        depth, rgb = generate(layout, gp, cfg, noise)
    d = depth.data[0]
    d255 = ((d + 1.0) * 127.5).astype(np.float32)
    od = out.mkdir(args.out_dir)
    write_pfm(out.file(od / "depth.pfm"), d255)
    write_ppm(out.file(od / "rgb.ppm"), to_u8(rgb.data.transpose(1, 2, 0)))
    write_ppm(out.file(od / "depth_turbo.ppm"), turbo_colorize(d255, 0.0, 255.0))
    if args.save_checkpoint:
        save_checkpoint(out.file(args.save_checkpoint), gp.store)
    print(f"wrote depth.pfm, rgb.ppm, depth_turbo.ppm to {od}")
    return EXIT_OK


def _list_pfms(root: Path, listing: str | None) -> list[str]:
    if listing:
        return sorted(ln.strip() for ln in Path(listing).read_text().splitlines() if ln.strip())
    return sorted(str(p.relative_to(root)) for p in root.rglob("*.pfm"))


def cmd_evaluate(args, out: Outputs) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise UsageError(f"directory not found: {d}")
    names = _list_pfms(gt_dir, args.list)
    if not names:
        raise UsageError(f"no .pfm files under {gt_dir}")
    missing = [n for n in names if not (pred_dir / n).exists()]
    if missing:
        raise UsageError(f"predictions missing for {missing[:5]}")

    def work(name):
        pred = read_pfm(pred_dir / name).astype(np.float64)
        gt = read_pfm(gt_dir / name).astype(np.float64)
        return name, depth_metrics(pred, gt, align=args.align)

    with ThreadPoolExecutor(max_workers=thread_count()) as ex:
        rows = list(ex.map(work, names))
    text = report_csv(rows)
    dst = out.file(args.out)
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text(text)
    print(text.splitlines()[-1])
    return EXIT_OK


def cmd_gradcheck(args, out: Outputs) -> int:
    modules = list(CHECKS) if args.module == "all" else [args.module]
    t0 = time.perf_counter()
    ok = True
    for m in modules:
        r = run_check(m, seed=args.seed or 0)
        ok &= r.passed
        status = "PASS" if r.passed else "FAIL"
        print(f"{m:<14} max_rel_err={r.max_rel_err:.3e} tol={r.tolerance:g} entries={r.n_entries} {r.seconds:.1f}s {status}", flush=True)
    print(f"total {time.perf_counter() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_train_smoke(args, out: Outputs) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    if not 0 <= args.steps <= 500:
        raise UsageError("--steps must lie in [0, 500]")
    cfg = rc.generator
    if cfg.output_resolution > 32 or len(cfg.stages) > 2:
        raise UsageError("train-smoke needs a config of at most 32x32 and 2 stages")
    data = synthetic_dataset(rc.dataset_size, cfg.output_resolution, cfg.num_labels, rc.seed)
    t0 = time.perf_counter()
    report = train_smoke(
        data, cfg, args.steps, seed=rc.seed, batch_size=rc.batch_size,
        weights=rc.loss_weights, ndf=rc.ndf, lr_g=rc.lr_g, lr_d=rc.lr_d,
    )
    dst = out.file(args.report)
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text(report.to_csv())
    print(f"{args.steps} steps in {time.perf_counter() - t0:.1f}s; generator param delta norm {report.final_delta_norm!r}")
    return EXIT_OK


def cmd_colorize(args, out: Outputs) -> int:
    try:
        depth = read_pfm(args.pfm)
    except FileNotFoundError as e:
        raise UsageError(f"file not found: {args.pfm}") from e
    if not args.max > args.min:
        raise UsageError("--max must exceed --min")
    write_ppm(out.file(args.out), turbo_colorize(depth, args.min, args.max))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthgan", description="Layout-to-depth GAN toolkit.")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="overrides the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", parents=[common], help="panoramas -> four cubemap side faces")
    s.add_argument("--pano-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--num-labels", type=int, default=41)
    s.add_argument("--scenes", help="file with one scene id per line")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("forward", parents=[common], help="generate depth and RGB from a layout")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--layout", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--save-checkpoint", help="also write the parameters used")
    s.set_defaults(func=cmd_forward)

    s = sub.add_parser("evaluate", parents=[common], help="depth metrics over matching .pfm files")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--gt-dir", required=True)
    s.add_argument("--align", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--list", help="file with relative .pfm paths to evaluate")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--module", default="all", choices=["all"] + list(CHECKS))
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("train-smoke", parents=[common], help="short adversarial training run on synthetic rooms")
    s.add_argument("--config")
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_train_smoke)

    s = sub.add_parser("colorize", parents=[common], help="turbo-colour a depth .pfm")
    s.add_argument("--pfm", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min", type=float, default=0.0)
    s.add_argument("--max", type=float, default=255.0)
    s.set_defaults(func=cmd_colorize)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0) and EXIT_USAGE
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    out = Outputs()
    try:
        return args.func(args, out)
    except UsageError as e:
        out.cleanup()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit 1
        out.cleanup()
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
