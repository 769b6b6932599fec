"""Command-line entry point: ``gatera <subcommand> [flags]``.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import experiments, verify
from .adapters import AdapterKind
from .analysis import gate_dump, gate_stats
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import parse_config
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    DiagnosticError,
    FrozenInvariantError,
    InputError,
)
from .model import parse_targets
from .trainer import RunConfig, finetune, finetune_data, load_finetuned, pretrain, write_metrics

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SUITES = ("grad", "theorem", "suppression", "equivalence")
ADAPTERS = tuple(k.value for k in AdapterKind)
SEED_ENV = "GATERA_SEED"

log = logging.getLogger("gatera_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route usage errors through main's exit-code table instead
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _adapter(text: str) -> str:
    try:
        return AdapterKind.parse(text).value
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _targets(text: str) -> tuple[str, ...]:
    try:
        return parse_targets(text)
    except ConfigurationError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run config with [model], [task], [train] sections")
    common.add_argument(
        "--seed", type=int, metavar="N",
        help=f"fine-tuning seed; falls back to the config file, then ${SEED_ENV}, then 0",
    )
    common.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")

    train = _Parser(add_help=False)
    train.add_argument("--lr", type=float, metavar="F", help="fine-tuning peak learning rate")
    train.add_argument("--epochs", type=int, metavar="N", help="fine-tuning epochs")
    train.add_argument("--rank", type=int, metavar="R", help="adapter rank (default 4)")
    train.add_argument("--targets", type=_targets, metavar="LIST", help="injection targets, subset of q,k,v,fc")
    train.add_argument("--lambda-ent", type=float, metavar="F", help="entropy regulariser weight (0 disables)")

    base_flag = _Parser(add_help=False)
    base_flag.add_argument(
        "--base", metavar="CKPT",
        help="pretrained backbone checkpoint (default: DIR/base.grk, pretrained on demand if missing)",
    )

    parser = _Parser(prog="gatera", description="Token-gated Hadamard low-rank adaptation lab.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    sub.add_parser("pretrain", parents=[common], help="train the backbone on the base task",
                   description="Pretrain the backbone; writes DIR/base.grk and DIR/pretrain_metrics.csv.")

    p = sub.add_parser("finetune", parents=[common, train], help="fine-tune one adapter on the shifted task",
                       description="Fine-tune one adapter against a frozen backbone; writes the adapter "
                                   "checkpoint and a per-epoch metrics CSV.")
    p.add_argument("--adapter", type=_adapter, required=True, metavar="KIND",
                   help=f"adapter kind: {', '.join(ADAPTERS)}")
    p.add_argument("--base", metavar="CKPT", help="pretrained backbone checkpoint (default: DIR/base.grk)")

    p = sub.add_parser("verify", parents=[common], help="run property suites",
                       description="Run verification suites and write DIR/verify_report.csv.")
    p.add_argument("--suite", choices=SUITES + ("all",), default="all", help="suite to run (default: all)")

    p = sub.add_parser("gates", parents=[common], help="export per-token gate activations",
                       description="Dump every gate activation on the held-out shifted set to DIR/gates.csv "
                                   "and print ID/OOD summary statistics.")
    p.add_argument("--base", metavar="CKPT", help="pretrained backbone checkpoint (default: DIR/base.grk)")
    p.add_argument("--adapter-ckpt", metavar="CKPT", required=True, help="fine-tuned gatera adapter checkpoint")

    p = sub.add_parser("compare", parents=[common, train, base_flag], help="compare adapters across seeds",
                       description="Fine-tune each adapter once per seed and write DIR/compare.csv.")
    p.add_argument("--adapters", type=_str_list, metavar="LIST", default=list(experiments.DEFAULT_ADAPTERS),
                   help="comma-separated adapter kinds (default: all five)")
    p.add_argument("--seeds", type=_int_list, metavar="LIST", default=[0, 1, 2],
                   help="comma-separated seeds (default: 0,1,2)")

    p = sub.add_parser("ablate", parents=[common, train, base_flag], help="run an ablation sweep",
                       description="Sweep one ablation axis with gatera and write DIR/ablate_AXIS.csv.")
    p.add_argument("--axis", choices=experiments.AXES, required=True, help="ablation axis")
    p.add_argument("--ranks", type=_int_list, metavar="LIST",
                   help="ranks for the rank axis (default: 16,32)")
    p.add_argument("--seeds", type=_int_list, metavar="LIST",
                   help="comma-separated seeds (default: the resolved --seed)")
    return parser


# -- config resolution ----------------------------------------------------


def _config_sets_seed(text: str) -> bool:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error:
        return False
    return cp.has_option("train", "seed")


def resolve_config(args) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text)
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    elif not _config_sets_seed(text) and os.environ.get(SEED_ENV):
        try:
            d["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"${SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    for flag, key in (("lr", "lr"), ("epochs", "epochs"), ("lambda_ent", "lambda_ent")):
        value = getattr(args, flag, None)
        if value is not None:
            d[key] = value
    for flag, key in (("rank", "rank"), ("targets", "injection_targets")):
        value = getattr(args, flag, None)
        if value is not None:
            d["model"][key] = value
    return RunConfig.from_dict(d)


def _base_config(cfg: RunConfig) -> RunConfig:
    return cfg.with_adapter("none")


def _load_or_pretrain(cfg: RunConfig, base: Optional[str], out: Path) -> Checkpoint:
    if base:
        return load_checkpoint(base)
    default = out / "base.grk"
    if default.exists():
        return load_checkpoint(default)
    log.info("no base checkpoint at %s; pretraining", default)
    res = pretrain(_base_config(cfg))
    save_checkpoint(res.checkpoint, default)
    write_metrics(res.metrics, out / "pretrain_metrics.csv")
    return res.checkpoint


def _require_base(base: Optional[str], out: Path) -> Checkpoint:
    path = Path(base) if base else out / "base.grk"
    return load_checkpoint(path)


# -- subcommands ----------------------------------------------------------


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> int:
    res = pretrain(_base_config(cfg))
    ckpt = save_checkpoint(res.checkpoint, out / "base.grk")
    write_metrics(res.metrics, out / "pretrain_metrics.csv")
    print(f"pretrain: eval_acc={res.final.acc:.4f} epochs={len(res.metrics)} params={res.base_params}")
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig, out: Path) -> int:
    base = _require_base(args.base, out)
    run_cfg = cfg.with_adapter(args.adapter)
    res = finetune(run_cfg, base)
    stem = f"finetune_{args.adapter}_s{run_cfg.seed}"
    ckpt = save_checkpoint(res.checkpoint, out / f"{stem}.grk")
    write_metrics(res.metrics, out / f"{stem}_metrics.csv")
    f = res.final
    print(f"finetune[{args.adapter}] seed={run_cfg.seed}: eval_acc={f.acc:.4f} id_acc={f.id_acc:.4f} ood_acc={f.ood_acc:.4f}")
    print(f"trainable params: {res.trainable_params} ({res.params_pct:.4f}% of {res.base_params})")
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_verify(args, cfg: RunConfig, out: Path) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    t0 = time.perf_counter()
    checks = verify.run_suites(names, out_dir=out)
    report = out / "verify_report.csv"
    report.write_text(verify.checks_csv(checks))
    width = max(len(f"{c.suite}:{c.check}") for c in checks)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status}  {f'{c.suite}:{c.check}':<{width}}  value={c.value:.3e}  threshold={c.threshold:.3e}")
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s; report {report}")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_gates(args, cfg: RunConfig, out: Path) -> int:
    base = _require_base(args.base, out)
    adapter = load_checkpoint(args.adapter_ckpt)
    if not adapter.config:
        raise CheckpointFormatError(f"{args.adapter_ckpt} has no config sidecar")
    run_cfg = RunConfig.from_dict(adapter.config)
    if run_cfg.model.adapter_kind is not AdapterKind.GATERA:
        raise ConfigurationError(f"gate export needs a gatera checkpoint, got {run_cfg.model.adapter_kind.value}")
    model = load_finetuned(run_cfg, base, adapter)
    _, evals = finetune_data(run_cfg)
    path = gate_dump(model, evals, out / "gates.csv")
    st = gate_stats(path)
    print(f"gates: n={st.n_gates} id_mean={st.id_mean:.4f} ood_mean={st.ood_mean:.4f} "
          f"gap={st.gap:.4f} binariness={st.binariness:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def _emit_table(rows, path: Path) -> None:
    path.write_text(experiments.table_csv(rows))
    print(experiments.format_table(rows))
    print(f"wrote {path}")


def cmd_compare(args, cfg: RunConfig, out: Path) -> int:
    adapters = [AdapterKind.parse(a).value for a in args.adapters]
    base = _load_or_pretrain(cfg, args.base, out)
    rows = experiments.compare(cfg, base, adapters, args.seeds)
    _emit_table(rows, out / "compare.csv")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig, out: Path) -> int:
    base = _load_or_pretrain(cfg, args.base, out)
    seeds = args.seeds or [cfg.seed]
    rows = experiments.ablate(cfg, base, args.axis, seeds, ranks=args.ranks)
    _emit_table(rows, out / f"ablate_{args.axis}.csv")
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "verify": cmd_verify,
    "gates": cmd_gates,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (ConfigurationError, InputError) as exc:
        print(f"gatera {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointFormatError) as exc:
        print(f"gatera {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DiagnosticError, FrozenInvariantError) as exc:
        print(f"gatera {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
