"""Command-line front end: ``uts <command> [flags]``.

Every command writes its artifacts into ``--out`` (default: a timestamped
directory under ``runs/``) together with ``run_config.txt``, the fully
resolved configuration.  Flags can also come from a config file of
``key = value`` lines (``#`` starts a comment); keys are flag names with
dashes or underscores, optionally grouped under ``[command]`` headers.
Precedence is defaults < config file < command line.  The config file is
``--config`` or, failing that, the path in ``$UTS_CONFIG``.

Exit codes: 0 success, 2 missing or malformed inputs or config, 1 anything else.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .classes import CLASS_NAMES, DEFAULT_PALETTE
from .imageio import read_image, write_image
from .lvit import AblationConfig, load_checkpoint, predict_proba, save_checkpoint
from .metrics import (complexity_report, confusion, format_ratios, macro_metrics,
                      tissue_ratios, variance_reduction_trial, binomial_tail)
from .refine import ColorMask, refine_pipeline
from .synth import generate_dataset, read_dataset
from .tiling import (assemble_mask, export_tiles, extract_tiles, partition, read_manifest,
                     write_manifest)
from .train import TrainConfig, comparison_table, evaluate, kfold_split, run_ablation, train_epochs

log = logging.getLogger("uts")

PROG = "uts"
CONFIG_ENV = "UTS_CONFIG"
HELP_WIDTH = 88
COMMANDS = ("synth", "tile", "train", "infer", "refine", "eval", "tsr", "complexity",
            "variance-trial", "ablation")


class InputError(Exception):
    """Missing or malformed user input; maps to exit code 2."""


def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=HELP_WIDTH)


def _common(p: argparse.ArgumentParser, outputs: bool = True) -> None:
    g = p.add_argument_group("run options")
    g.add_argument("--config", default=None,
                   help=f"key = value config file (falls back to ${CONFIG_ENV})")
    if outputs:
        g.add_argument("--out", default=None,
                       help="output directory; a timestamped directory under runs/ when omitted")
    g.add_argument("--threads", type=int, default=0,
                   help="cap on numeric worker threads, 0 = all cores; 1 gives bitwise-repeatable runs")
    g.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="stderr logging level")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory holding dataset.csv")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=64, help="mini-batch size")
    p.add_argument("--lr", type=float, default=0.05, help="SGD learning rate")
    p.add_argument("--seed", type=int, default=0, help="initialisation and shuffle seed")
    p.add_argument("--linear-attention", action="store_true",
                   help="use low-rank linear attention in the transformer blocks")
    p.add_argument("--folds", type=int, default=3, help="patient-level fold count")
    p.add_argument("--holdout-fold", type=int, default=0,
                   help="fold left out of training, -1 trains on every ROI")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the patient shuffle")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG, formatter_class=_formatter,
        description="Unit-based tile segmentation: synthesize, tile, train, infer, refine, report.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name, help_text, outputs=True):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_formatter)
        _common(p, outputs)
        return p

    p = add("synth", "Generate a synthetic three-class ROI dataset.")
    p.add_argument("--n-per-class", type=int, default=30, help="ROIs per tissue class")
    p.add_argument("--width", type=int, default=96, help="ROI width in pixels (multiple of 32)")
    p.add_argument("--height", type=int, default=96, help="ROI height in pixels (multiple of 32)")
    p.add_argument("--noise", type=float, default=8.0, help="Gaussian pixel noise (0-255 scale)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")

    p = add("tile", "Partition an image into 32x32 tiles and write the tile manifest.")
    p.add_argument("--image", required=True, help="input RGB image (PNG or PPM)")
    p.add_argument("--tile-size", type=int, default=32, help="tile side in pixels")
    p.add_argument("--blank-threshold", type=float, default=None,
                   help="exclude tiles whose mean luminance (0-255) exceeds this")
    p.add_argument("--export-tiles", action="store_true", help="also write every tile as a PNG")

    p = add("train", "Train one L-ViT configuration and write a checkpoint.")
    _training_flags(p)
    p.add_argument("--ablation", default="all", choices=list(AblationConfig.PRESETS),
                   help="model configuration")

    p = add("infer", "Classify every tile of an image; write the labelled manifest and raw mask.")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--image", required=True, help="input RGB image")
    p.add_argument("--manifest", default=None, help="tile manifest to reuse instead of re-tiling")
    p.add_argument("--blank-threshold", type=float, default=None,
                   help="exclude tiles whose mean luminance (0-255) exceeds this")

    p = add("refine", "Smooth and discretize a raw mask, then overlay it on the image.")
    p.add_argument("--mask", required=True, help="raw colour mask (mask_raw.png)")
    p.add_argument("--image", required=True, help="image the mask belongs to")
    p.add_argument("--window", type=int, default=48, help="smoothing window width in pixels")
    p.add_argument("--alpha", type=float, default=0.5, help="mask weight in the overlay")
    p.add_argument("--null-class", action="store_true",
                   help="treat black as an extra discretization target")
    p.add_argument("--freeze-excluded", action="store_true",
                   help="keep pixels that are black in the raw mask black")

    p = add("eval", "Score predicted tile labels against ground truth.")
    p.add_argument("--pred", nargs="*", default=[], help="predicted tile manifests")
    p.add_argument("--truth", nargs="*", default=[], help="ground-truth tile manifests, same order")
    p.add_argument("--checkpoint", default=None,
                   help="score this checkpoint on a held-out fold of --data instead")
    p.add_argument("--data", default=None, help="dataset directory for checkpoint scoring")
    p.add_argument("--folds", type=int, default=3, help="patient-level fold count")
    p.add_argument("--holdout-fold", type=int, default=0, help="fold to score")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the patient shuffle")

    p = add("tsr", "Print tissue composition percentages from a labelled tile manifest.",
            outputs=False)
    p.add_argument("--manifest", required=True, help="labelled tile manifest")

    p = add("complexity", "Compare pixel-level and tile-level operation counts.", outputs=False)
    p.add_argument("--width", type=int, default=512, help="image width")
    p.add_argument("--height", type=int, default=512, help="image height")
    p.add_argument("--tile", type=int, default=32, help="tile side k")
    p.add_argument("--tokens", type=int, default=16, help="token count M")
    p.add_argument("--embed-dim", type=int, default=64, help="embedding width D")

    p = add("variance-trial", "Simulate majority-vote tile labels from noisy pixel labels.",
            outputs=False)
    p.add_argument("--k", type=int, default=3, help="tile side in pixels")
    p.add_argument("--p", type=float, default=0.3, help="pixel label flip probability")
    p.add_argument("--trials", type=int, default=100000, help="simulated tiles")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = add("ablation", "Train every ablation configuration on one split and tabulate results.")
    _training_flags(p)
    p.add_argument("--presets", nargs="+", default=list(AblationConfig.PRESETS),
                   choices=list(AblationConfig.PRESETS), help="configurations to train")
    return parser


# -- config file ----------------------------------------------------------------


class ConfigError(InputError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str | None, dict[str, tuple[int, str]]]:
    """Map section (``None`` for top level) to ``{key: (line, value)}``."""
    sections: dict[str | None, dict[str, tuple[int, str]]] = {None: {}}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in COMMANDS:
                raise ConfigError(f"{source}: line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value'")
        sections[current][key] = (lineno, value.strip())
    return sections


def _dests(sub: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    return {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}


def _convert(action: argparse.Action, value: str, where: str):
    if isinstance(action, argparse._StoreTrueAction):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: {action.dest} expects true/false, got {value!r}")
    items = value.split() if action.nargs in ("*", "+") else [value]
    out = []
    for item in items:
        try:
            v = action.type(item) if action.type else item
        except (TypeError, ValueError):
            raise ConfigError(f"{where}: bad value {item!r} for {action.dest}") from None
        if action.choices is not None and v not in action.choices:
            raise ConfigError(f"{where}: {action.dest} must be one of {list(action.choices)}")
        out.append(v)
    return out if action.nargs in ("*", "+") else out[0]


def apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    """Install config-file values as defaults of ``command``'s sub-parser."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    sections = parse_config(p.read_text(), str(p))
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    known_anywhere = set().union(*(_dests(s) for s in subs.values()))
    for section, entries in sections.items():
        for key, (lineno, _) in entries.items():
            scope = known_anywhere if section is None else _dests(subs[section])
            if key not in scope:
                raise ConfigError(f"{p}: line {lineno}: unknown key {key!r}")
    sub = subs[command]
    actions = _dests(sub)
    defaults = {}
    for section in (None, command):
        for key, (lineno, value) in sections.get(section, {}).items():
            if key in actions:
                defaults[key] = _convert(actions[key], value, f"{p}: line {lineno}")
    for key in defaults:
        # a config value satisfies a required flag
        actions[key].required = False
    sub.set_defaults(**defaults)


def resolve_args(argv) -> argparse.Namespace:
    argv = list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    path = pre.parse_known_args(argv)[0].config or os.environ.get(CONFIG_ENV)
    parser = build_parser()
    if path and argv and argv[0] in COMMANDS:
        apply_config(parser, argv[0], path)
    args = parser.parse_args(argv)
    args.config = path
    return args


def format_config(args: argparse.Namespace) -> str:
    lines = [f"# {PROG} {args.command}"]
    for key, value in sorted(vars(args).items()):
        if key == "command":
            continue
        if isinstance(value, list):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# -- commands ---------------------------------------------------------------------


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} {path} not found")
    return p


def _load_image(path) -> np.ndarray:
    p = _need_file(path, "image")
    try:
        return read_image(p)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from None


def _load_manifest(path):
    p = _need_file(path, "manifest")
    try:
        return read_manifest(p)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _load_dataset(path):
    p = Path(path)
    if not (p / "dataset.csv").is_file() and not p.is_file():
        raise InputError(f"dataset {path} not found")
    try:
        return read_dataset(p)
    except (ValueError, FileNotFoundError) as exc:
        raise InputError(str(exc)) from None


def _load_checkpoint(path):
    p = _need_file(path, "checkpoint")
    try:
        return load_checkpoint(p)
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_synth(args, out: Path) -> None:
    ds = generate_dataset(args.n_per_class, args.width, args.height, args.noise, args.seed, out)
    n_tiles = sum(g.n_tiles for g in ds.grids)
    patients = len(set(ds.patient_ids))
    print(f"wrote {len(ds.records)} ROIs ({n_tiles} tiles, {patients} patients) to {out}")


def cmd_tile(args, out: Path) -> None:
    image = _load_image(args.image)
    grid = partition(image, args.tile_size, args.blank_threshold)
    write_manifest(grid, out / "manifest.csv")
    if args.export_tiles:
        export_tiles(image, grid, out / "tiles")
    print(f"{grid.n_tiles} tiles ({grid.cols}x{grid.rows}), {int(grid.excluded.sum())} excluded")


def _split(ds, args):
    plan = kfold_split(ds.patient_ids, args.folds, args.split_seed)
    if args.holdout_fold == -1:
        return plan, np.arange(len(ds.records)), np.array([], dtype=np.int64)
    if not 0 <= args.holdout_fold < args.folds:
        raise InputError(f"holdout fold {args.holdout_fold} outside [0, {args.folds})")
    return plan, plan.train_indices(args.holdout_fold), plan.test_indices(args.holdout_fold)


def _train_config(args, ablation: str) -> TrainConfig:
    try:
        return TrainConfig(args.batch_size, args.epochs, args.lr, args.seed, ablation,
                           args.linear_attention)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _write_split(path: Path, ds, plan) -> None:
    folds = plan.roi_folds
    rows = ["roi_id,patient_id,fold"] + [f"{r.roi_id},{r.patient_id},{int(f)}"
                                         for r, f in zip(ds.records, folds)]
    path.write_text("\n".join(rows) + "\n")


def cmd_train(args, out: Path) -> None:
    cfg = _train_config(args, args.ablation)
    ds = _load_dataset(args.data)
    try:
        plan, train_idx, test_idx = _split(ds, args)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    _write_split(out / "split.csv", ds, plan)
    xtr, ytr = ds.tiles_and_labels(train_idx)
    val = ds.tiles_and_labels(test_idx) if len(test_idx) else None
    with (out / "train_log.csv").open("w") as fh:
        fh.write("epoch,mean_loss,val_accuracy\n")

        def on_epoch(epoch, loss, acc):
            fh.write(f"{epoch},{loss:.6f},{acc:.6f}\n")
            fh.flush()

        result = train_epochs(xtr, ytr, cfg, val=val, on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint.bin", result.params, result.config)
    print(f"trained {cfg.ablation} on {len(xtr)} tiles; final loss {result.loss_curve[-1]:.6f}")
    if val is not None:
        print(f"held-out fold {args.holdout_fold} accuracy {result.val_accuracy[-1]:.4f}")


def cmd_infer(args, out: Path) -> None:
    params, config = _load_checkpoint(args.checkpoint)
    image = _load_image(args.image)
    if args.manifest:
        grid = _load_manifest(args.manifest)
        if (grid.width, grid.height) != image.shape[1::-1]:
            raise InputError(f"manifest is for a {grid.width}x{grid.height} image, "
                             f"got {image.shape[1]}x{image.shape[0]}")
    else:
        grid = partition(image, params.arch.tile_size, args.blank_threshold)
    probs = predict_proba(extract_tiles(image, grid), params, config)
    labelled = grid.with_labels(probs.argmax(axis=1), probs)
    write_manifest(labelled, out / "manifest.csv")
    write_image(out / "mask_raw.png", assemble_mask(labelled).to_uint8())
    counts = np.bincount(labelled.labels[~labelled.excluded], minlength=len(CLASS_NAMES))
    print(", ".join(f"{n}: {c}" for n, c in zip(CLASS_NAMES, counts)) + " tiles")


def cmd_refine(args, out: Path) -> None:
    mask = _load_image(args.mask)
    image = _load_image(args.image)
    if mask.shape != image.shape:
        raise InputError(f"mask {mask.shape[1]}x{mask.shape[0]} and image "
                         f"{image.shape[1]}x{image.shape[0]} differ in size")
    try:
        res = refine_pipeline(ColorMask(mask), image, DEFAULT_PALETTE, args.window, args.alpha,
                              args.freeze_excluded, args.null_class)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    write_image(out / "mask_refined.png", res.discrete.to_uint8())
    write_image(out / "overlay.png", res.overlay)
    ops = res.ops
    print(f"window {ops['window']}: separable <= {ops['separable_max_per_pixel']:g} "
          f"multiply-adds per pixel vs direct <= {ops['direct_max_per_pixel']:g} "
          f"({ops['reduction']:.1f}x fewer)")


def cmd_eval(args, out: Path) -> None:
    if args.checkpoint:
        if not args.data:
            raise InputError("--checkpoint needs --data")
        params, config = _load_checkpoint(args.checkpoint)
        ds = _load_dataset(args.data)
        try:
            _, _, test_idx = _split(ds, args)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if not len(test_idx):
            raise InputError("held-out fold is empty")
        report = evaluate(params, config, *ds.tiles_and_labels(test_idx))
    else:
        if not args.pred or len(args.pred) != len(args.truth):
            raise InputError("give matching --pred and --truth manifests (or --checkpoint)")
        y_true, y_pred = [], []
        for pred_path, truth_path in zip(args.pred, args.truth):
            pred, truth = _load_manifest(pred_path), _load_manifest(truth_path)
            if pred.labels is None or truth.labels is None:
                raise InputError(f"{pred_path} and {truth_path} must both carry labels")
            if pred.n_tiles != truth.n_tiles:
                raise InputError(f"{pred_path} and {truth_path} differ in tile count")
            keep = ~(pred.excluded | truth.excluded)
            y_true.append(truth.labels[keep])
            y_pred.append(pred.labels[keep])
        try:
            report = macro_metrics(confusion(np.concatenate(y_true), np.concatenate(y_pred)))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.summary())


def cmd_tsr(args, out) -> None:
    grid = _load_manifest(args.manifest)
    try:
        print(format_ratios(tissue_ratios(grid)))
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_complexity(args, out) -> None:
    try:
        print(complexity_report(args.width, args.height, args.tile, args.tokens,
                                args.embed_dim).text())
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_variance_trial(args, out) -> None:
    try:
        r = variance_reduction_trial(args.k, args.p, args.trials, args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    n = args.k * args.k
    print(f"k={r.k} p={r.p:g} trials={r.trials}")
    print(f"pixel_error_rate: {r.pixel_error_rate:.6f}")
    print(f"tile_majority_error_rate: {r.tile_majority_error_rate:.6f} "
          f"(binomial tail {binomial_tail(n, r.p, (n + 1) // 2):.6f})")
    print(f"pixel_variance: {r.pixel_variance:.6f}")
    print(f"averaged_variance: {r.averaged_variance:.6f} "
          f"(bound {r.pixel_variance / n:.6f} + 3 x {r.averaged_variance_se:.2e}: "
          f"{'holds' if r.bound_holds else 'violated'})")


def cmd_ablation(args, out: Path) -> None:
    cfg = _train_config(args, "all")
    ds = _load_dataset(args.data)
    if args.holdout_fold < 0:
        raise InputError("ablation needs a held-out fold")
    try:
        results = run_ablation(ds, cfg, args.presets, args.holdout_fold, args.folds,
                               args.split_seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    table = comparison_table(results)
    (out / "ablation.csv").write_text(table)
    print(table, end="")


HANDLERS = {
    "synth": cmd_synth, "tile": cmd_tile, "train": cmd_train, "infer": cmd_infer,
    "refine": cmd_refine, "eval": cmd_eval, "tsr": cmd_tsr, "complexity": cmd_complexity,
    "variance-trial": cmd_variance_trial, "ablation": cmd_ablation,
}


def _out_dir(args) -> Path | None:
    if not hasattr(args, "out"):
        return None
    if args.out is None:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        args.out = str(Path("runs") / f"{args.command}-{stamp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = resolve_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except InputError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format="%(name)s: %(message)s", stream=sys.stderr,
                        force=True)
    try:
        out = _out_dir(args)
        resolved = format_config(args)
        log.info("resolved config:\n%s", resolved.rstrip())
        if out is not None:
            (out / "run_config.txt").write_text(resolved)
        threads = args.threads if args.threads > 0 else os.cpu_count() or 1
        with threadpool_limits(limits=threads):
            HANDLERS[args.command](args, out)
    except InputError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort diagnostic
        print(f"{PROG}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
