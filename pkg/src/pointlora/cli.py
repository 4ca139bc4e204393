"""Command-line entry point: finetune, eval, merge, audit, inspect-tokens.

Exit codes: 0 success, 2 usage or config error, 3 data or I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .checkpoint import CheckpointFormatError, load_backbone, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import ParseError, SchemaError, generate_synthetic_dataset, load_manifest, \
    load_point_cloud_file, read_dataset
from .model import audit_parameters, build_model, merge_adapters
from .training import evaluate, fit

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, f"invalid config: {exc}") from None
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.optim.epochs = args.epochs
        cfg.optim.warmup_epochs = min(cfg.optim.warmup_epochs, args.epochs - 1)
    return cfg


def _datasets(source: str, cfg: RunConfig, test_source: str | None = None):
    """Return (train, test) clouds from ``synthetic`` or a manifest path."""
    try:
        if source == "synthetic":
            return generate_synthetic_dataset(cfg.data)
        train = read_dataset(load_manifest(source))
        test = read_dataset(load_manifest(test_source)) if test_source else []
        return train, test
    except (OSError, ParseError, SchemaError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"data error: {exc}") from None


def _load(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointFormatError) as exc:
        raise CliError(EXIT_DATA, f"cannot read checkpoint: {exc}") from None
    except (SchemaError, ConfigError) as exc:
        raise CliError(EXIT_USAGE, f"checkpoint schema mismatch: {exc}") from None


def cmd_finetune(args) -> int:
    cfg = _config(args)
    if cfg.model.num_classes < 2:
        raise CliError(EXIT_USAGE, "num_classes must be >= 2")
    train, test = _datasets(args.data, cfg, args.test_data)
    labels = {c.label for c in train} | {c.label for c in test}
    if labels and max(labels) >= cfg.model.num_classes:
        raise CliError(EXIT_USAGE, f"labels up to {max(labels)} exceed num_classes={cfg.model.num_classes}")

    model = build_model(cfg.model, cfg.backbone_seed, cfg.seed + 1)
    if args.backbone != "random":
        try:
            load_backbone(model, args.backbone)
        except (OSError, CheckpointFormatError) as exc:
            raise CliError(EXIT_DATA, f"cannot read backbone: {exc}") from None
        except SchemaError as exc:
            raise CliError(EXIT_USAGE, f"backbone does not fit the config: {exc}") from None

    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as fh:
        def log(line: str) -> None:
            print(line, flush=True)
            fh.write(line + "\n")

        try:
            fit(model, train, test, cfg.loss, cfg.optim, seed=cfg.seed,
                augment=cfg.data.augment, log=log)
        except ValueError as exc:
            raise CliError(EXIT_DATA, f"training failed: {exc}") from None
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, None, out)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _load(args.checkpoint)
    cfg = _config(args)
    if args.data == "synthetic":
        _, test = _datasets("synthetic", cfg)
    else:
        test, _ = _datasets(args.data, cfg)
    if any(c.label >= model.cfg.num_classes for c in test):
        raise CliError(EXIT_USAGE, "dataset labels exceed the checkpoint's class count")
    try:
        acc = evaluate(model, test)
    except ValueError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    print(f"OA: {100.0 * acc:.2f}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model, registry = _load(args.input)
    try:
        merge_adapters(model)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    registry = {n: registry[n] for n, _ in model.named_parameters()}
    save_checkpoint(model, registry, args.output)
    return EXIT_OK


def cmd_audit(args) -> int:
    cfg = _config(args).model
    peft = cfg.peft
    if args.method:
        peft.method = args.method
    if args.rank is not None:
        peft.rank = args.rank
    if args.prompt_dim is not None:
        peft.prompt_dim = args.prompt_dim
    if args.no_token_selection:
        peft.token_selection = False
    report = audit_parameters(build_model(cfg))
    if args.json:
        print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    print(f"total:   {report.total:>12,d}")
    print(f"tunable: {report.tunable:>12,d}  ({report.tunable / 1e6:.3f} M)")
    print(f"ratio:   {100.0 * report.ratio:>11.2f}%")
    print()
    print(f"{'component':<18}{'total':>12}{'tunable':>12}")
    for name, row in report.breakdown.items():
        print(f"{name:<18}{row['total']:>12,d}{row['tunable']:>12,d}")
    return EXIT_OK


def cmd_inspect_tokens(args) -> int:
    model, _ = _load(args.checkpoint)
    if not model.selection_enabled:
        raise CliError(EXIT_USAGE, "checkpoint has no token selection")
    try:
        cloud = load_point_cloud_file(args.cloud)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_DATA, f"cannot read cloud: {exc}") from None
    need = max(max(g, k) for g, k in model.cfg.peft.multiscale.scales)
    if len(cloud.points) < need:
        raise CliError(EXIT_DATA, f"cloud has {len(cloud.points)} points, need at least {need}")
    report = model.inspect_tokens(cloud.points)
    lines = []
    for r in report:
        print(f"scale {r['scale']} (g={r['num_groups']}, k={r['group_size']}): "
              f"{int(r['selected'].sum())} selected")
        for c, s, sel in zip(r["centers"], r["scores"], r["selected"]):
            print(f"  {c[0]: .6f} {c[1]: .6f} {c[2]: .6f}  score={s:.6f}  {'*' if sel else '-'}")
            lines.append(f"{c[0]:.6f} {c[1]:.6f} {c[2]:.6f} {r['scale']} {s:.6f} {int(sel)}\n")
    print(f"selected total: {sum(int(r['selected'].sum()) for r in report)}")
    if args.out:
        Path(args.out).write_text("# x y z scale score selected\n" + "".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointlora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("finetune", help="fine-tune a frozen backbone with PointLoRA")
    p.add_argument("--config", help="TOML run config (defaults if omitted)")
    p.add_argument("--backbone", default="random", help="backbone checkpoint, or 'random'")
    p.add_argument("--data", default="synthetic", help="'synthetic' or a training manifest")
    p.add_argument("--test-data", help="test manifest (manifest mode only)")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="metrics log path (default: <out>.log)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="print overall accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", default="synthetic", help="'synthetic' (test split) or a manifest")
    p.add_argument("--config", help="run config supplying the synthetic data settings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="fold LoRA updates into the frozen weights")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("audit", help="count total and tunable parameters")
    p.add_argument("--config")
    p.add_argument("--method", choices=["pointlora", "linear_probe", "full"])
    p.add_argument("--rank", type=int)
    p.add_argument("--prompt-dim", type=int)
    p.add_argument("--no-token-selection", action="store_true")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("inspect-tokens", help="dump per-scale token scores and selections")
    p.add_argument("checkpoint")
    p.add_argument("cloud", help="XYZ text file")
    p.add_argument("--out", help="write 'x y z scale score selected' lines here")
    p.set_defaults(func=cmd_inspect_tokens)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
