"""Command-line entry point.

One verb per workflow: ``pretrain``, ``train``, ``cka``, ``select``,
``bench``, ``dump-features``.  Exit codes: 0 success, 1 usage error,
2 runtime error.  Every flag may also be supplied through ``--config FILE``
(lines of ``key = value``; command-line flags win).  All randomness derives
from ``--seed``, so outputs are reproducible byte-for-byte.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from . import vspt
from .adapter import uniform_select
from .cka import cka_matrix_from_features, partition_layers
from .data import make_toy_dataset
from .figures import plot_benchmark, plot_heatmap, plot_loss_curve
from .output import write_csv_matrix, write_json, write_pgm, write_ppm
from .rng import Rng, derive_seed
from .train import (
    TrainConfig,
    adapter_state,
    benchmark_step_time,
    pretrain_backbone,
    train_model,
)
from .vit import ViTConfig, forward_collect, init_backbone, load_checkpoint, save_checkpoint


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


_REGIMES = {
    "vitsplit": "vitsplit",
    "full-ft": "full_ft",
    "full_ft": "full_ft",
    "linear-probe": "linear_probe",
    "linear_probe": "linear_probe",
}
_SELECTIONS = {"uniform": "uniform", "gate": "sparse_gate", "sparse_gate": "sparse_gate"}
_COMPONENTS = {
    "full": "full",
    "task-only": "task_only",
    "task_only": "task_only",
    "task-prior-add": "task_prior_add",
    "task_prior_add": "task_prior_add",
}

_REQUIRED = object()


def _canon(value: str, table: dict[str, str], flag: str) -> str:
    try:
        return table[value]
    except KeyError:
        raise UsageError(f"invalid value {value!r} for {flag} (choose from {sorted(set(table))})")


def _as_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _load_config(path: str) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _resolve(args: argparse.Namespace, schema: list[tuple[str, type, object]]) -> argparse.Namespace:
    """Merge command-line flags over config-file values over defaults."""
    file_vals = _load_config(args.config) if getattr(args, "config", None) else {}
    known = {dest for dest, _, _ in schema}
    unknown = set(file_vals) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = argparse.Namespace()
    for dest, typ, default in schema:
        value = getattr(args, dest, None)
        if value is None and dest in file_vals:
            try:
                value = typ(file_vals[dest])
            except ValueError:
                raise UsageError(
                    f"config value for {dest!r} is not a valid {typ.__name__}: {file_vals[dest]!r}"
                )
        if value is None:
            value = default
        if value is _REQUIRED:
            raise UsageError(f"missing required flag --{dest.replace('_', '-')}")
        setattr(out, dest, value)
    return out


def _vit_config(ns: argparse.Namespace) -> ViTConfig:
    try:
        return ViTConfig(L=ns.layers, D=ns.dim, heads=ns.heads, patch=ns.patch,
                         H=ns.image, W=ns.image, mlp_ratio=ns.mlp_ratio)
    except ValueError as exc:
        raise UsageError(str(exc))


_VIT_FLAGS: list[tuple[str, type, object]] = [
    ("layers", int, 12),
    ("dim", int, 64),
    ("heads", int, 4),
    ("patch", int, 8),
    ("image", int, 64),
    ("mlp_ratio", int, 4),
]


def _add_vit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, help="number of transformer blocks")
    p.add_argument("--dim", type=int, help="embedding width")
    p.add_argument("--heads", type=int, help="attention heads")
    p.add_argument("--patch", type=int, help="patch size in pixels")
    p.add_argument("--image", type=int, help="square image side in pixels")
    p.add_argument("--mlp-ratio", dest="mlp_ratio", type=int, help="MLP expansion factor")


# -- verbs ---------------------------------------------------------------------


_PRETRAIN_SCHEMA = _VIT_FLAGS + [
    ("out", str, _REQUIRED),
    ("steps", int, 300),
    ("seed", int, 0),
    ("batch", int, 2),
    ("mask_ratio", float, 0.5),
    ("lr", float, 1e-3),
    ("data_n", int, 32),
]


def cmd_pretrain(args: argparse.Namespace) -> int:
    ns = _resolve(args, _PRETRAIN_SCHEMA)
    cfg = _vit_config(ns)
    if not 0.0 < ns.mask_ratio < 1.0:
        raise UsageError("mask-ratio must lie strictly between 0 and 1")
    losses: list[float] = []
    backbone = pretrain_backbone(cfg, ns.steps, ns.seed, batch=ns.batch,
                                 mask_ratio=ns.mask_ratio, lr=ns.lr,
                                 data_n=ns.data_n, record=losses)
    save_checkpoint(backbone, ns.out)
    print(f"pretext loss {losses[0]:.4f} -> {losses[-1]:.4f} over {ns.steps} steps")
    print(f"checkpoint -> {ns.out}")
    return 0


_TRAIN_SCHEMA = [
    ("backbone", str, _REQUIRED),
    ("out", str, _REQUIRED),
    ("regime", str, "vitsplit"),
    ("kt", int, 3),
    ("kp", int, 4),
    ("b", int, 2),
    ("selection", str, "uniform"),
    ("components", str, "full"),
    ("steps", int, 100),
    ("batch", int, 2),
    ("seed", int, 0),
    ("lr", float, 2e-4),
    ("weight_decay", float, 1e-2),
    ("head_lr_mult", float, 0.1),
    ("classes", int, 5),
    ("data_n", int, 24),
    ("loss_figure", str, None),
    ("save_adapter", str, None),
    ("save_backbone", str, None),
    ("timing", _as_bool, False),
]


def cmd_train(args: argparse.Namespace) -> int:
    ns = _resolve(args, _TRAIN_SCHEMA)
    regime = _canon(ns.regime, _REGIMES, "--regime")
    selection = _canon(ns.selection, _SELECTIONS, "--selection")
    components = _canon(ns.components, _COMPONENTS, "--components")
    backbone = load_checkpoint(ns.backbone)
    cfg = TrainConfig(regime=regime, base_lr=ns.lr, weight_decay=ns.weight_decay,
                      task_head_lr_mult=ns.head_lr_mult, batch=ns.batch,
                      steps=ns.steps, K_t=ns.kt, K_p=ns.kp, b=ns.b, seed=ns.seed,
                      selection=selection, components=components,
                      num_classes=ns.classes)
    try:
        cfg.validate(backbone.cfg)
        if ns.data_n < 5:
            raise ValueError("data-n must be at least 5 (20% is held out)")
        if ns.save_adapter and regime != "vitsplit":
            raise ValueError("--save-adapter requires --regime vitsplit")
    except ValueError as exc:
        raise UsageError(str(exc))

    dataset = make_toy_dataset(ns.data_n, backbone.cfg.H, backbone.cfg.W,
                               ns.classes, derive_seed(ns.seed, 5))
    model, report = train_model(cfg, backbone, dataset)

    write_json(ns.out, report.to_dict(include_timing=ns.timing))
    figure = ns.loss_figure or str(Path(ns.out).with_suffix(".loss.png"))
    plot_loss_curve(figure, report.loss_curve, title=f"{regime} training loss")
    if ns.save_adapter:
        vspt.save_tensors(ns.save_adapter, adapter_state(model))
        print(f"adapter -> {ns.save_adapter}")
    if ns.save_backbone:
        save_checkpoint(model.backbone, ns.save_backbone)
        print(f"backbone -> {ns.save_backbone}")
    print(f"{regime}: loss {report.loss_curve[0]:.4f} -> {report.loss_curve[-1]:.4f}, "
          f"held-out mIoU {report.final_miou:.4f}, "
          f"{report.trainable_params} trainable parameters")
    print(f"report -> {ns.out}")
    print(f"figure -> {figure}")
    return 0


_CKA_SCHEMA = [
    ("dump", str, _REQUIRED),
    ("out", str, _REQUIRED),
    ("heatmap", str, None),
    ("figure", str, None),
]

_FEAT_NAME = re.compile(r"^feat\.img(\d{3})\.layer(\d{2})$")


def _load_feature_dump(path: str) -> list[np.ndarray]:
    tensors = vspt.load_tensors(path)
    grid: dict[int, dict[int, np.ndarray]] = {}
    for name, arr in tensors.items():
        m = _FEAT_NAME.match(name)
        if not m:
            raise vspt.VsptError(f"unrecognized tensor name in feature dump: {name!r}")
        grid.setdefault(int(m.group(2)), {})[int(m.group(1))] = arr
    layers = sorted(grid)
    if layers != list(range(len(layers))):
        raise vspt.VsptError("feature dump is missing layer entries")
    images = sorted(grid[0])
    for i in layers:
        if sorted(grid[i]) != images:
            raise vspt.VsptError(f"feature dump has an incomplete image set for layer {i}")
    return [np.concatenate([grid[i][k] for k in images], axis=0) for i in layers]


def cmd_cka(args: argparse.Namespace) -> int:
    ns = _resolve(args, _CKA_SCHEMA)
    feats = _load_feature_dump(ns.dump)
    result = cka_matrix_from_features(feats)
    split = partition_layers(result)

    write_csv_matrix(ns.out, result.M)
    heatmap = ns.heatmap or str(Path(ns.out).with_suffix(".pgm"))
    ext = Path(heatmap).suffix.lower()
    if ext == ".ppm":
        write_ppm(heatmap, result.M)
    elif ext == ".pgm":
        write_pgm(heatmap, result.M)
    else:
        raise UsageError(f"heatmap path must end in .pgm or .ppm, got {heatmap!r}")
    figure = ns.figure or str(Path(ns.out).with_suffix(".png"))
    plot_heatmap(figure, result.M, split=split)

    if result.degenerate_pairs:
        print(f"warning: {result.degenerate_pairs} degenerate pairs scored as 0",
              file=sys.stderr)
    print(split)
    return 0


_SELECT_SCHEMA = [
    ("layers", int, _REQUIRED),
    ("b", int, _REQUIRED),
    ("kp", int, _REQUIRED),
]


def cmd_select(args: argparse.Namespace) -> int:
    ns = _resolve(args, _SELECT_SCHEMA)
    try:
        plan = uniform_select(ns.layers, ns.b, ns.kp)
    except ValueError as exc:
        raise UsageError(str(exc))
    print(",".join(str(i) for i in plan.indices))
    return 0


_BENCH_SCHEMA = _VIT_FLAGS + [
    ("backbone", str, None),
    ("regimes", str, "vitsplit,full-ft,linear-probe"),
    ("steps", int, 200),
    ("warmup", int, 50),
    ("seed", int, 0),
    ("kt", int, 3),
    ("kp", int, 4),
    ("b", int, 2),
    ("selection", str, "uniform"),
    ("batch", int, 2),
    ("classes", int, 5),
    ("data_n", int, 24),
    ("out", str, None),
    ("figure", str, None),
]


def cmd_bench(args: argparse.Namespace) -> int:
    ns = _resolve(args, _BENCH_SCHEMA)
    regimes = [_canon(r.strip(), _REGIMES, "--regimes")
               for r in ns.regimes.split(",") if r.strip()]
    if not regimes:
        raise UsageError("--regimes lists no regimes")
    selection = _canon(ns.selection, _SELECTIONS, "--selection")
    if ns.backbone:
        backbone = load_checkpoint(ns.backbone)
    else:
        backbone = init_backbone(_vit_config(ns), Rng(derive_seed(ns.seed, 3))).freeze()
    dataset = make_toy_dataset(ns.data_n, backbone.cfg.H, backbone.cfg.W,
                               ns.classes, derive_seed(ns.seed, 5))
    try:
        results = benchmark_step_time(backbone, dataset, regimes, steps=ns.steps,
                                      warmup=ns.warmup, seed=ns.seed, K_t=ns.kt,
                                      K_p=ns.kp, b=ns.b, selection=selection,
                                      batch=ns.batch, num_classes=ns.classes)
    except ValueError as exc:
        raise UsageError(str(exc))

    for regime in regimes:
        r = results[regime]
        print(f"{regime}: {r['mean_ms']:.2f} ms/step (std {r['std_ms']:.2f})")
    if "vitsplit" in results and "full_ft" in results:
        ratio = results["vitsplit"]["mean_ms"] / results["full_ft"]["mean_ms"]
        print(f"vitsplit/full_ft mean ratio: {ratio:.3f}")
    if ns.out:
        write_json(ns.out, {"steps": ns.steps, "warmup": ns.warmup, "results": results})
        print(f"report -> {ns.out}")
        figure = ns.figure or str(Path(ns.out).with_suffix(".png"))
    else:
        figure = ns.figure
    if figure:
        plot_benchmark(figure, results)
        print(f"figure -> {figure}")
    return 0


_DUMP_SCHEMA = _VIT_FLAGS + [
    ("backbone", str, None),
    ("out", str, _REQUIRED),
    ("images", int, 8),
    ("seed", int, 0),
    ("classes", int, 5),
]


def cmd_dump_features(args: argparse.Namespace) -> int:
    ns = _resolve(args, _DUMP_SCHEMA)
    if ns.images < 1:
        raise UsageError("need at least one image")
    if ns.backbone:
        backbone = load_checkpoint(ns.backbone)
    else:
        backbone = init_backbone(_vit_config(ns), Rng(derive_seed(ns.seed, 3))).freeze()
    cfg = backbone.cfg
    dataset = make_toy_dataset(ns.images, cfg.H, cfg.W, ns.classes, derive_seed(ns.seed, 5))
    entries: dict[str, np.ndarray] = {}
    for k, sample in enumerate(dataset):
        stack = forward_collect(sample.image, backbone, cfg)
        for i, layer in enumerate(stack):
            entries[f"feat.img{k:03d}.layer{i:02d}"] = layer.data[1:]  # patch tokens only
    vspt.save_tensors(ns.out, entries)
    print(f"wrote {len(entries)} feature matrices ({cfg.L} layers x {ns.images} images)")
    print(f"dump -> {ns.out}")
    return 0


# -- parser / dispatch ------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="splitkit", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--seed", type=int, help="master seed for all randomness")

    p = sub.add_parser("pretrain", help="pretext-pretrain a backbone and save it")
    common(p)
    _add_vit_flags(p)
    p.add_argument("--out", help="checkpoint path to write")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--data-n", dest="data_n", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a segmentation model in one regime")
    common(p)
    p.add_argument("--backbone", help="frozen backbone checkpoint")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--regime", help="vitsplit | full-ft | linear-probe")
    p.add_argument("--kt", type=int, help="trainable copies of the last kt blocks")
    p.add_argument("--kp", type=int, help="frozen layers feeding the prior head")
    p.add_argument("--b", type=int, help="first layer eligible for selection")
    p.add_argument("--selection", help="uniform | gate")
    p.add_argument("--components", help="full | task-only | task-prior-add")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--head-lr-mult", dest="head_lr_mult", type=float)
    p.add_argument("--classes", type=int)
    p.add_argument("--data-n", dest="data_n", type=int)
    p.add_argument("--loss-figure", dest="loss_figure", help="loss curve PNG path")
    p.add_argument("--save-adapter", dest="save_adapter", help="adapter tensor container path")
    p.add_argument("--save-backbone", dest="save_backbone", help="re-save the model's backbone")
    p.add_argument("--timing", action="store_const", const=True, dest="timing",
                   help="include wall-clock timing in the JSON report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cka", help="layer-similarity matrix from a feature dump")
    common(p)
    p.add_argument("--dump", help="feature container from dump-features")
    p.add_argument("--out", help="CSV path for the similarity matrix")
    p.add_argument("--heatmap", help=".pgm or .ppm heatmap path")
    p.add_argument("--figure", help="PNG heatmap path")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("select", help="print the uniform layer-selection indices")
    common(p)
    p.add_argument("--layers", type=int, help="total layer count")
    p.add_argument("--b", type=int, help="first eligible layer")
    p.add_argument("--kp", type=int, help="number of layers to pick")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("bench", help="wall-clock step-time comparison across regimes")
    common(p)
    _add_vit_flags(p)
    p.add_argument("--backbone", help="checkpoint (omit for a random frozen backbone)")
    p.add_argument("--regimes", help="comma-separated regime list")
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--kt", type=int)
    p.add_argument("--kp", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--selection")
    p.add_argument("--batch", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--data-n", dest="data_n", type=int)
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--figure", help="bar chart PNG path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-features", help="save per-layer features for analysis")
    common(p)
    _add_vit_flags(p)
    p.add_argument("--backbone", help="checkpoint (omit for a random frozen backbone)")
    p.add_argument("--out", help="feature container path")
    p.add_argument("--images", type=int, help="number of images to run")
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_dump_features)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"splitkit: error: {exc}", file=sys.stderr)
        return 1
    except vspt.VsptError as exc:
        print(f"splitkit: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"splitkit: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"splitkit: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
