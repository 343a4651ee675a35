"""``petal`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 invariant breach
(including a failing gradient check), 4 I/O or checkpoint error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import budget as B
from .checkpoint import load_adapter
from .config import RunConfig, load_config
from .data import gen_dataset
from .errors import ConfigError, InvariantBreach, PetalError
from .former import atomic_write, dump_attention
from .gradcheck import run_suite
from .model import ABLATIONS, METHODS, PetalModel
from .trainer import ablate, check_dims, evaluate, rows_csv, sweep_experts, train

EXIT_OK, EXIT_USAGE, EXIT_BREACH, EXIT_IO = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _run_options(p: argparse.ArgumentParser, out_default: str):
    p.add_argument("--config", help="YAML run config (default: packaged toy config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--experts", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--few-shot", type=int, choices=(50, 150), dest="few_shot")
    p.add_argument("--out", default=out_default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="petal", description="Adapter tuning on a toy frozen mini-former.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one method and write checkpoint, metrics and config echo")
    _run_options(p, "runs/train")

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on the validation split")
    _run_options(p, "runs/eval")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("grad-check", help="finite-difference check of every trainable tensor")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("param-budget", help="closed-form trainable-parameter accounting")
    p.add_argument("--paper-dims", action="store_true", help="H_v=1408 H_t=768 R=64 M=64 K=3")
    p.add_argument("--H-v", type=int, default=56, dest="H_v")
    p.add_argument("--H-t", type=int, default=32, dest="H_t")
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--middle", type=int, default=4, help="expert bottleneck width M")
    p.add_argument("--experts", type=int, default=3)
    p.add_argument("--d-p", type=int, dest="d_p")
    p.add_argument("--csv", action="store_true", help="print CSV instead of aligned text")
    p.add_argument("--compare", action="store_true", help="append the method comparison table")

    p = sub.add_parser("sweep-experts", help="train once per expert count")
    _run_options(p, "runs/sweep")
    p.add_argument("--ks", default="1,2,3,4,5,6", help="comma-separated expert counts")

    p = sub.add_parser("dump-attention", help="write cross-attention maps as CSV")
    _run_options(p, "runs/attention")
    p.add_argument("--checkpoint")
    p.add_argument("--sample", type=int, default=0)

    p = sub.add_parser("ablate", help="train the petal method under every ablation")
    _run_options(p, "runs/ablate")
    return parser


def _config(args) -> RunConfig:
    rc = load_config(args.config)
    return rc.override(seed=args.seed, method=args.method, ablation=args.ablation, experts=args.experts,
                       rank=args.rank, few_shot=args.few_shot)


def _restore(rc: RunConfig, checkpoint: str) -> PetalModel:
    model = PetalModel(rc.model, rc.train.adapter_spec(), rc.task.kind)
    expected = {name: t.shape for name, t in model.named_trainable().items()}
    model.load_state(load_adapter(checkpoint, expected))
    return model


def cmd_train(args) -> int:
    rc = _config(args)
    res = train(rc.model, rc.train, rc.task, out_dir=args.out)
    rep = res.report
    print(f"method={rc.train.method} ablation={rc.train.ablation} seed={rc.train.seed} "
          f"trainable={rep.trainable_count} train_items={rep.train_items} steps={rep.steps}")
    print(f"val accuracy {rep.val_accuracy:.4f}  train loss {rep.initial_train_loss:.4f} -> "
          f"{rep.final_train_loss:.4f}  ({rep.wall_time:.1f}s)")
    print(f"wrote {res.out_dir}/adapter.petl, metrics.csv, config.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _config(args)
    check_dims(rc.model, rc.task)
    model = _restore(rc, args.checkpoint)
    data = gen_dataset(rc.task)
    loss, acc = evaluate(model, data.val)
    text = f"split,loss,accuracy\nval,{loss!r},{acc!r}\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "eval.csv", text.encode())
    print(f"val loss {loss:.6f} accuracy {acc:.4f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    res = run_suite(seed=args.seed)
    print(res.to_text(), end="")
    if not res.ok:
        return EXIT_BREACH
    return EXIT_OK


def cmd_param_budget(args) -> int:
    dims = dict(H_v=args.H_v, H_t=args.H_t, R=args.rank, M=args.middle, K=args.experts)
    if args.paper_dims:
        dims = dict(B.PAPER_DIMS)
    report = B.petal_budget(**dims, d_p=args.d_p)
    print(report.to_csv() if args.csv else report.to_text(), end="")
    if args.compare:
        print()
        print(B.comparison_text(B.compare_budgets(**dims)), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    rc = _config(args)
    try:
        ks = [int(k) for k in args.ks.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--ks must be comma-separated integers, got {args.ks!r}") from None
    rows = sweep_experts(rc.model, rc.train, rc.task, ks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_csv(rows)
    atomic_write(out / "sweep.csv", text.encode())
    print(text, end="")
    return EXIT_OK


def cmd_dump(args) -> int:
    rc = _config(args)
    check_dims(rc.model, rc.task)
    if args.checkpoint:
        model = _restore(rc, args.checkpoint)
    else:
        model = PetalModel(rc.model, rc.train.adapter_spec(), rc.task.kind)
    val = gen_dataset(rc.task).val
    if not 0 <= args.sample < len(val):
        raise ConfigError(f"--sample {args.sample} outside the {len(val)} validation items")
    one = val.take([args.sample])
    res, _ = model.forward(one.vision, one.question_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = dump_attention(res.attn_maps, out / "attention.csv")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _config(args)
    rows = ablate(rc.model, replace(rc.train, method="petal", ablation="none"), rc.task)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_csv(rows)
    atomic_write(out / "ablation.csv", text.encode())
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "param-budget": cmd_param_budget,
    "sweep-experts": cmd_sweep,
    "dump-attention": cmd_dump,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except InvariantBreach as exc:
        print(f"invariant breach: {exc}", file=sys.stderr)
        return EXIT_BREACH
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, PetalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
