"""``nmq`` command line: train, compress, report, verify, ablation.

Exit codes are shared by every command: 0 success, 1 runtime or
verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .compress import compress_checkpoint
from .errors import InvalidConfig, NMQError
from .estimators import build_scheme
from .experiments import run_desk_experiment
from .optim import TransformerSchedule
from .sizer import measure_actual
from .sparse import SparsityPattern
from .tensor_io import checkpoint_load, checkpoint_save, deserialize, serialize
from .train import (
    CompressionConfig,
    ModelSpec,
    export_checkpoint,
    init_state,
    make_synthetic_task,
    params_from_checkpoint,
    train,
)
from .verify import GROUPS, bit_flip_fault, run_verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

TRAIN_DEFAULTS = {
    "bits": 32,
    "sub_channels": 1,
    "sparsity": "none",
    "symmetric": None,
    "prune_steps": 1,
    "steps": 1000,
    "batch_size": 16,
    "hidden": "32,32",
    "lr": 0.3,
    "warmup": 100,
    "include": "*linear*",
    "out": None,
    "metrics": None,
    "init": None,
}
COMPRESS_DEFAULTS = {"bits": 32, "sub_channels": 1, "sparsity": "none", "symmetric": None, "include": "*linear*"}


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("NMQ_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"NMQ_SEED must be an integer, got {raw!r}") from None


def _add_compression_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, choices=(32, 8, 4, 2))
    p.add_argument("--sub-channels", type=int, dest="sub_channels")
    p.add_argument("--sparsity", choices=("none", "2:4", "1:4"))
    sym = p.add_mutually_exclusive_group()
    sym.add_argument("--symmetric", dest="symmetric", action="store_const", const=True)
    sym.add_argument("--asymmetric", dest="symmetric", action="store_const", const=False)
    p.add_argument("--include", help="glob of tensor names to compress (default *linear*)")
    p.add_argument("--config", help="JSON file of option values; flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nmq", description="N:M sparsity and low-bit quantization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on the built-in synthetic task")
    _add_compression_flags(t)
    t.add_argument("--prune-steps", type=int, dest="prune_steps")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 32,32")
    t.add_argument("--lr", type=float, help="base learning rate of the warmup schedule")
    t.add_argument("--warmup", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--init", help="dense checkpoint to fine-tune from")
    t.add_argument("--out", help="checkpoint to write")
    t.add_argument("--metrics", help="JSON-lines file for per-step metrics")

    c = sub.add_parser("compress", help="one-shot prune and post-training quantization")
    c.add_argument("--in", dest="inp", required=True)
    c.add_argument("--out", required=True)
    _add_compression_flags(c)

    r = sub.add_parser("report", help="estimated and actual size of a checkpoint")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--json", action="store_true")

    v = sub.add_parser("verify", help="randomized checks against reference implementations")
    v.add_argument("--cases", type=int, default=200)
    v.add_argument("--seed", type=int)
    v.add_argument("--inject-fault", dest="inject_fault", choices=GROUPS, help=argparse.SUPPRESS)

    a = sub.add_parser("ablation", help="desk-scale ablation grid on the synthetic task")
    a.add_argument("--seed", type=int)
    a.add_argument("--dense-steps", type=int, default=1000, dest="dense_steps")
    a.add_argument("--finetune-steps", type=int, default=500, dest="finetune_steps")
    return parser


def resolve_options(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, overridden by the ``--config`` file, overridden by explicit flags."""
    opts = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        allowed = set(defaults) | {"seed"}
        unknown = sorted(set(loaded) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        opts.update(loaded)
    for key in list(defaults) + ["seed"]:
        value = getattr(args, key, None)
        if value is not None:
            opts[key] = value
    if opts.get("seed") is None:
        opts["seed"] = default_seed()
    return opts


def compression_from(opts: dict) -> tuple:
    if opts["bits"] not in (32, 8, 4, 2):
        raise UsageError(f"--bits must be one of 32, 8, 4, 2, got {opts['bits']}")
    if opts["bits"] == 32 and opts["sub_channels"] != 1:
        raise UsageError("--sub-channels requires quantization (--bits 8, 4 or 2)")
    if opts["bits"] == 32 and opts["symmetric"] is not None:
        raise UsageError("--symmetric/--asymmetric require quantization")
    if opts["sub_channels"] < 1:
        raise UsageError("--sub-channels must be >= 1")
    if opts["sparsity"] not in ("none", "2:4", "1:4"):
        raise UsageError(f"--sparsity must be none, 2:4 or 1:4, got {opts['sparsity']!r}")
    scheme = build_scheme(opts["bits"], opts["symmetric"], opts["sub_channels"])
    return scheme, SparsityPattern.parse(opts["sparsity"])


def cmd_train(args) -> int:
    opts = resolve_options(args, TRAIN_DEFAULTS)
    scheme, pattern = compression_from(opts)
    if opts["steps"] < 1:
        raise UsageError("--steps must be at least 1")
    if opts["prune_steps"] < 1:
        raise UsageError("--prune-steps must be at least 1")
    if pattern is not None and opts["prune_steps"] > opts["steps"]:
        raise UsageError("--prune-steps cannot exceed --steps")
    try:
        hidden = tuple(int(h) for h in str(opts["hidden"]).split(",") if h)
    except ValueError:
        raise UsageError(f"--hidden must be comma-separated integers, got {opts['hidden']!r}") from None

    seed = opts["seed"]
    data = make_synthetic_task(seed)
    spec = ModelSpec(data.input_dim, data.vocab_size, hidden)
    config = CompressionConfig(scheme, pattern, opts["prune_steps"], opts["include"])
    state = init_state(spec, config, seed)
    if opts["init"]:
        params = params_from_checkpoint(checkpoint_load(opts["init"]))
        expected = {k: v.shape for k, v in state.params.items()}
        if {k: v.shape for k, v in params.items()} != expected:
            raise InvalidConfig(f"{opts['init']} does not match the model layout {expected}")
        state.params = params
    schedule = TransformerSchedule(opts["lr"], opts["warmup"])
    result = train(data, spec, config, opts["steps"], seed=seed, batch_size=opts["batch_size"],
                   schedule=schedule, state=state)

    final_loss = result.log[-1]["loss"]
    if opts["metrics"]:
        with open(opts["metrics"], "w") as fh:
            for row in result.log:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"final": True, "loss": final_loss, "token_error_rate": result.token_error_rate}) + "\n")
    if opts["out"]:
        checkpoint_save(export_checkpoint(result.state, config), opts["out"])
    print(f"final loss {final_loss:.4f}  token error rate {result.token_error_rate:.4f}")
    return EXIT_OK


def cmd_compress(args) -> int:
    opts = resolve_options(args, COMPRESS_DEFAULTS)
    scheme, pattern = compression_from(opts)
    try:
        raw = Path(args.inp).read_bytes()
    except OSError as exc:
        raise NMQError(f"cannot read {args.inp}: {exc}") from exc
    ckpt = deserialize(raw)
    if scheme is None and pattern is None:
        out = raw  # identity transform
    else:
        out = serialize(compress_checkpoint(ckpt, scheme, pattern, opts["include"]))
    try:
        Path(args.out).write_bytes(out)
    except OSError as exc:
        raise NMQError(f"cannot write {args.out}: {exc}") from exc
    return EXIT_OK


def cmd_report(args) -> int:
    report = measure_actual(checkpoint_load(args.inp))
    print(report.to_json() if args.json else report.to_text())
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.cases < 0:
        raise UsageError("--cases must be >= 0")
    seed = args.seed if args.seed is not None else default_seed()
    fault = bit_flip_fault(args.inject_fault) if args.inject_fault else None
    result = run_verify(args.cases, seed, fault)
    if result.ok:
        print(f"all {args.cases} cases passed")
        return EXIT_OK
    for f in result.failures:
        print(f"FAILED group={f.group} case={f.index} seed={f.seed}")
        print(f.to_json())
    return EXIT_FAIL


def cmd_ablation(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    result = run_desk_experiment(seed, dense_steps=args.dense_steps, finetune_steps=args.finetune_steps)
    for label, ter in result.rows():
        print(f"{label:<28} token error {ter:.3f}")
    print(f"({result.seconds:.0f} s)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compress": cmd_compress,
    "report": cmd_report,
    "verify": cmd_verify,
    "ablation": cmd_ablation,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidConfig) as exc:
        print(f"nmq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NMQError as exc:
        print(f"nmq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
