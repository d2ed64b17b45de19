"""Command-line entry point.

    saliency-distill gendata   --out DIR [generator keys]
    saliency-distill train     --manifest M --run DIR [train keys]
    saliency-distill pseudo    --manifest M --run DIR
    saliency-distill retrain   --manifest M --run DIR
    saliency-distill eval      --manifest M (--checkpoint C | --labels DIR) --out FILE
    saliency-distill landscape --out FILE

Settings resolve as defaults < ``run/config.txt`` (pseudo, retrain) <
``--config FILE`` < flags. Exit codes: 2 config error, 3 I/O error, 4
non-finite loss.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import MISSING, fields
from pathlib import Path

from .data import FormatError, SyntheticSpec, gen_synthetic, load_dataset
from .losses import LANDSCAPE_LOSSES, landscape_rows, write_landscape
from .metrics import evaluate_dataset
from .pipeline import (ConfigError, NumericalAbort, TrainConfig, config_to_text, generate_pseudo_labels,
                       load_checkpoint, read_labels, save_checkpoint, train_stage1, train_stage2, write_labels)

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4

SPEC_FIELDS = {f.name: f for f in fields(SyntheticSpec)}
TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _default(f):
    return f.default if f.default is not MISSING else f.default_factory()


def _convert(f, raw: str):
    """Parse ``raw`` according to the type of the field's default."""
    d = _default(f)
    try:
        if isinstance(d, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) for s in items) if f.name == "ref_sides" else tuple(items)
        if isinstance(d, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(d)(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {f.name}") from None


def _fmt(v):
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"config file {path}: {e.strerror or e}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in SPEC_FIELDS and k not in TRAIN_FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = v
    return out


def _build(cls, field_map, args, run_config: Path | None = None):
    """Instantiate ``cls`` from the layered settings relevant to it."""
    layers = []
    if run_config is not None and run_config.exists():
        layers.append(read_config_file(run_config))
    if getattr(args, "config", None):
        layers.append(read_config_file(args.config))
    layers.append(vars(args))
    raw = {}
    for layer in layers:
        raw.update({k: v for k, v in layer.items() if k in field_map})
    kwargs = {k: _convert(field_map[k], v) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _add_keys(p: argparse.ArgumentParser, field_map):
    for name, f in field_map.items():
        # SUPPRESS keeps unset flags out of the namespace so lower layers show through
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=argparse.SUPPRESS, metavar="V",
                       help=f"(default: {_fmt(_default(f))})")


def _load(manifest, cfg: TrainConfig):
    return load_dataset(manifest, cfg.side, cfg.modalities)


def _write_config(run: Path, cfg: TrainConfig):
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(config_to_text(cfg))


def _checkpoint(path: Path):
    if not path.exists():
        raise ConfigError(f"checkpoint {path} not found; run the previous stage first")
    return load_checkpoint(path)


# -- subcommands ----------------------------------------------------------------------


def cmd_gendata(args) -> int:
    spec = _build(SyntheticSpec, SPEC_FIELDS, args)
    manifest = gen_synthetic(spec, args.out)
    (Path(args.out) / "config.txt").write_text(config_to_text(spec))
    print(f"wrote {spec.count} samples (seed {spec.seed}, side {spec.side}) to {manifest}")
    return 0


def cmd_train(args) -> int:
    run = Path(args.run)
    cfg = _build(TrainConfig, TRAIN_FIELDS, args)
    dataset = _load(args.manifest, cfg)
    net, log = train_stage1(cfg, dataset)
    _write_config(run, cfg)
    save_checkpoint(net, run / "stage1.ckpt")
    log.write(run / "runlog.csv")
    print(f"stage 1: {len(log.steps)} steps, final total loss {log.steps[-1][3].total:.6f}")
    return 0


def cmd_pseudo(args) -> int:
    run = Path(args.run)
    cfg = _build(TrainConfig, TRAIN_FIELDS, args, run / "config.txt")
    net = _checkpoint(run / "stage1.ckpt")
    dataset = _load(args.manifest, cfg)
    labels = generate_pseudo_labels(net, dataset, "stage1.ckpt")
    write_labels(labels, run / "labels")
    print(f"wrote {len(labels)} pseudo labels to {run / 'labels'}")
    return 0


def cmd_retrain(args) -> int:
    run = Path(args.run)
    cfg = _build(TrainConfig, TRAIN_FIELDS, args, run / "config.txt")
    if not (run / "labels" / "labels.tsv").exists():
        raise ConfigError(f"no pseudo labels under {run / 'labels'}; run pseudo first")
    labels = read_labels(run / "labels")
    dataset = _load(args.manifest, cfg)
    net, losses = train_stage2(cfg, dataset, labels)
    save_checkpoint(net, run / "stage2.ckpt")
    print(f"stage 2: {len(losses)} steps, final IOU loss {losses[-1]:.6f}")
    return 0


def cmd_eval(args) -> int:
    if (args.checkpoint is None) == (args.labels is None):
        raise ConfigError("give exactly one of --checkpoint or --labels")
    run_cfg = Path(args.checkpoint).parent / "config.txt" if args.checkpoint else None
    cfg = _build(TrainConfig, TRAIN_FIELDS, args, run_cfg)
    dataset = _load(args.manifest, cfg)
    source = _checkpoint(Path(args.checkpoint)) if args.checkpoint else read_labels(args.labels)
    report = evaluate_dataset(source, dataset)
    report.write(args.out)
    print(f"F_beta {report.mean_fbeta:.4f}  MAE {report.mean_mae:.4f}  E {report.mean_emeasure:.4f}")
    return 0


def cmd_landscape(args) -> int:
    losses = tuple(s for s in args.losses.split(",") if s)
    bad = set(losses) - set(LANDSCAPE_LOSSES)
    if bad:
        raise ConfigError(f"unknown losses {sorted(bad)}")
    try:
        rhos = tuple(float(s) for s in args.rhos.split(","))
    except ValueError:
        raise ConfigError(f"bad rho list {args.rhos!r}") from None
    rows = landscape_rows(losses, rhos)
    write_landscape(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="saliency-distill", description="Label-free saliency distillation.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, keys=None):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        if keys is not None:
            p.add_argument("--config", help="key=value settings file")
            _add_keys(p, keys)
        return p

    p = add("gendata", cmd_gendata, "generate a synthetic dataset", SPEC_FIELDS)
    p.add_argument("--out", required=True, help="output directory")
    p = add("train", cmd_train, "stage 1: self-distillation", TRAIN_FIELDS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", required=True, help="run directory")
    p = add("pseudo", cmd_pseudo, "export pseudo labels from stage1.ckpt", TRAIN_FIELDS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", required=True)
    p = add("retrain", cmd_retrain, "stage 2: fit a fresh detector to the pseudo labels", TRAIN_FIELDS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", required=True)
    p = add("eval", cmd_eval, "score a checkpoint or a label directory", TRAIN_FIELDS)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--labels")
    p.add_argument("--out", required=True, help="report path")
    p = add("landscape", cmd_landscape, "export per-pixel loss and gradient curves")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--losses", default=",".join(LANDSCAPE_LOSSES))
    p.add_argument("--rhos", default="0,0.25,0.5,0.75,1")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
