"""Command line entry point: ``flamegaze <command> [options]``.

Exit codes: 0 success, 1 validation error (arguments, config file or
dataset), 2 runtime failure (diverged training, failed check, I/O).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import DatasetError, SplitSpec, export_records, load_records, split_cross_subject, synth_generate
from .model import VARIANTS, ConfigError, check_model_gradients, load_checkpoint
from .trainer import (
    Splits,
    TrainConfig,
    TrainingError,
    ablate,
    evaluate,
    read_history,
    read_predictions,
    read_report,
    resolution_sweep,
    train,
)

log = logging.getLogger("flamegaze")

EXTRA_KEYS = {"split_seed": 0, "split_ratios": (8, 1, 1)}
CONFIG_KEYS = {f.name: f.default for f in dataclasses.fields(TrainConfig)} | EXTRA_KEYS
GRADCHECK_TOL = 1e-4


EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation errors and exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _coerce(key: str, raw: str):
    default = CONFIG_KEYS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return out


def resolve_config(args) -> tuple[TrainConfig, SplitSpec]:
    """Defaults < FLAME_SEED < config file < --set < explicit flags."""
    values = dict(CONFIG_KEYS)
    env_seed = os.environ.get("FLAME_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"FLAME_SEED must be an integer, got {env_seed!r}") from None
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for item in getattr(args, "set", None) or []:
        values.update(parse_config_text(item, "--set"))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    split = SplitSpec(tuple(values.pop("split_ratios")), int(values.pop("split_seed")))
    if len(split.ratios) != 3 or min(split.ratios) < 0 or sum(split.ratios) <= 0:
        raise ConfigError("split_ratios needs three non-negative numbers")
    cfg = TrainConfig(**values).validated()
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    return cfg, split


def _load_splits(data_dir, split: SplitSpec) -> Splits:
    stats = {}
    records = load_records(data_dir, stats)
    if stats.get("excluded"):
        print(f"excluded {stats['excluded']} records with invalid landmarks", file=sys.stderr)
    if not records:
        raise DatasetError(f"{data_dir}: no usable records")
    tr, va, te = split_cross_subject(records, split)
    return Splits(tr, va, te)


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset directory containing manifest.tsv")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--resolution", type=int, choices=(120, 60, 30))
    p.add_argument("--preset", choices=("paper", "tiny"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", dest="initial_lr", type=float)
    p.add_argument("--seed", type=int, help="run seed (falls back to FLAME_SEED, then 0)")
    p.add_argument("--eval-eye", dest="eval_eye", choices=("both", "left", "right", "random"))
    p.add_argument("--precision", choices=("float32", "float64"))
    p.add_argument("--loss", choices=("vector", "angular"))
    p.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="single-threaded BLAS and serial batch preparation (default on)",
    )


def cmd_synth(args) -> int:
    records = synth_generate(args.n, seed=args.seed, noise_level=args.noise, n_subjects=args.subjects)
    export_records(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, split = resolve_config(args)
    splits = _load_splits(args.data, split)
    print(f"train/val/test records: {len(splits.train)}/{len(splits.val)}/{len(splits.test)}")
    out = Path(args.out)

    def show(row, _model):
        print(
            f"epoch {row['epoch']:4d}  lr {row['lr']:.3g}  loss {row['train_loss']:.6f}  "
            f"val {row['val_mean_deg']:.3f} deg  {row['wall_seconds']:.1f}s",
            flush=True,
        )

    result = train(cfg, splits, out, callback=None if args.quiet else show)
    if splits.test:
        rep = evaluate(result.best.build(), splits.test, cfg.eval_eye, cfg.seed)
        rep.write_tsv(out / "predictions.tsv")
        print(f"test mean {rep.mean:.3f} deg  std {rep.std:.3f} deg  (n={len(rep.errors)})")
    print(f"checkpoints and history written to {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_records(args.data)
    if args.split != "all":
        tr, va, te = split_cross_subject(records, SplitSpec(tuple(args.split_ratios), args.split_seed))
        records = {"train": tr, "val": va, "test": te}[args.split]
    if not records:
        raise DatasetError("selected split is empty")
    rep = evaluate(ckpt.build(), records, args.eval_eye, ckpt.seed)
    print(f"{rep.variant}: mean {rep.mean:.4f} deg  std {rep.std:.4f} deg  (n={len(rep.errors)})")
    for subject, err in rep.per_subject.items():
        print(f"  {subject}\t{err:.4f}")
    if rep.flagged:
        print(f"flagged {len(rep.flagged)} degenerate predictions", file=sys.stderr)
    if args.out:
        rep.write_tsv(args.out)
    return 0


def _print_rows(rows):
    for r in rows:
        mean = f"{r.report.mean:.3f}" if r.report else "nan"
        print(f"{r.variant:13s} {r.resolution:4d}  {r.status:8s} mean {mean}")


def cmd_ablate(args) -> int:
    cfg, split = resolve_config(args)
    splits = _load_splits(args.data, split)
    variants = tuple(args.variants.split(",")) if args.variants else ("F_B", "F_AF", "F_AO", "FLAME")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}")
    rows = ablate(cfg, splits, variants, args.out)
    _print_rows(rows)
    print(f"report: {Path(args.out) / 'ablation.tsv'}")
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_resolution(args) -> int:
    cfg, split = resolve_config(args)
    splits = _load_splits(args.data, split)
    rows = resolution_sweep(cfg, splits, tuple(args.resolutions), args.out)
    _print_rows(rows)
    print(f"report: {Path(args.out) / 'resolution.tsv'}")
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_gradcheck(args) -> int:
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    worst = 0.0
    for v in variants:
        r = check_model_gradients(v, args.preset, args.resolution, args.batch, args.seed, args.samples)
        worst = max(worst, r.max_rel_error)
        print(f"{v:13s} max rel error {r.max_rel_error:.3e}  probes {r.checked}  kinks skipped {r.kinks}")
    ok = worst < GRADCHECK_TOL
    print(f"max rel error {worst:.3e}  {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _collect_plot_inputs(paths):
    preds, hists, reports = [], [], []
    for raw in paths:
        path = Path(raw)
        if not path.exists():
            raise DatasetError(f"{path}: no such file or directory")
        files = sorted(path.rglob("*.tsv")) if path.is_dir() else [path]
        for f in files:
            with open(f) as fh:
                first = fh.readline()
            if first.startswith("# variant="):
                preds.append(f)
            elif first.startswith("epoch\t"):
                hists.append(f)
            elif first.startswith("variant\t"):
                reports.append(f)
            elif not path.is_dir():
                raise DatasetError(f"{f}:1: not a predictions, history or report file")
    # a report points at the per-variant predictions written next to it
    for rep in reports:
        for row in read_report(rep):
            tag = row["variant"] if "ablation" in rep.name else f"res{row['resolution']}"
            cand = rep.parent / tag / "predictions.tsv"
            if cand.exists() and cand not in preds:
                preds.append(cand)
    return preds, hists


def _plot_tag(path: Path) -> str:
    return path.parent.name or path.stem


def cmd_plot(args) -> int:
    try:
        return _plot(args)
    except ValueError as exc:  # parse errors already carry file:line
        raise DatasetError(str(exc)) from None


def _plot(args) -> int:
    from . import plotting

    preds, hists = _collect_plot_inputs(args.inputs)
    if not preds and not hists:
        raise DatasetError("no predictions, history or report files among the inputs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    errors = {}
    made = 0
    for pred in preds:
        tag = _plot_tag(pred)
        truth, guess, err = read_predictions(pred)
        errors[tag] = err
        plotting.plot_pred_vs_truth(truth, guess, out / f"pred_vs_truth_{tag}.png", tag)
        made += 1
    if errors:
        plotting.plot_error_boxes(errors, out / "error_boxes.png")
        plotting.plot_error_histogram(errors, out / "error_histogram.png")
        made += 2
    for hist in hists:
        tag = _plot_tag(hist)
        plotting.plot_history(read_history(hist), out / f"history_{tag}.png", tag)
        made += 1
    print(f"wrote {made} figures to {out}")
    return EXIT_OK


def _keys_help(keys) -> str:
    lines = []
    for k in keys:
        v = CONFIG_KEYS[k]
        lines.append(f"  {k} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "config file keys (key = value, one per line; flags override):\n" + "\n".join(lines)


CONFIG_HELP = _keys_help(CONFIG_KEYS)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="flamegaze",
        description="Gaze estimation from eye patches and landmark heatmaps.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"{CONFIG_HELP}\n\nseed precedence: --seed > --set/config file > FLAME_SEED > 0\n"
        "FLAME_NUMBA=0 selects the pure-numpy kernels.",
    )
    p.add_argument("--version", action="version", version=f"flamegaze {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--n", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0, help="landmark jitter (px) and pixel noise level")
    s.add_argument("--subjects", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    train_kw = dict(epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    t = sub.add_parser("train", help="train one variant", **train_kw)
    _add_train_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser(
        "eval",
        help="evaluate a checkpoint",
        epilog=_keys_help(("split_seed", "split_ratios", "eval_eye")).replace("config file keys", "honoured keys (as flags)"),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--split-seed", dest="split_seed", type=int, default=0)
    e.add_argument("--split-ratios", dest="split_ratios", type=int, nargs=3, default=(8, 1, 1))
    e.add_argument("--eval-eye", dest="eval_eye", choices=("both", "left", "right", "random"), default="both")
    e.add_argument("--out", help="write per-record predictions TSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and compare the fusion variants", **train_kw)
    _add_train_flags(a)
    a.add_argument("--variants", help="comma separated, default F_B,F_AF,F_AO,FLAME")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("resolution", help="train one variant at several input resolutions", **train_kw)
    _add_train_flags(r)
    r.add_argument("--resolutions", type=int, nargs="+", default=[120, 60, 30])
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_resolution)

    g = sub.add_parser("gradcheck", help="finite-difference check of whole networks")
    g.add_argument("--preset", choices=("paper", "tiny"), default="tiny")
    g.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    g.add_argument("--resolution", type=int, default=30)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--samples", type=int, default=4, help="probes per array")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", help="figures from predictions, history or report files")
    pl.add_argument("inputs", nargs="+", help="files or directories (searched for *.tsv)")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, FloatingPointError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
