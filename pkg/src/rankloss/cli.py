"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 a verification verdict of "violated", 4 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

from . import losses, trainer, verify
from .dataset import (DataError, SequenceDataset, generate_markov_dataset, k_core_filter,
                      leave_one_out_split, load_interactions)
from .losses import LossSpec
from .metrics import evaluate_scorer
from .scorer import ScorerParams

EXIT_USAGE, EXIT_DATA, EXIT_VIOLATED, EXIT_DIVERGED = 1, 2, 3, 4
DEFAULT_NCE_C = 10.0
DEFAULT_SCE_ALPHA = 100.0
# sampled losses default to this share of the catalog as negatives
DEFAULT_K_FRACTION = 0.05


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_train_options(p):
    p.add_argument("--data", required=True, help="dataset JSON written by gen-data")
    p.add_argument("--config", help="JSON file of train settings; explicit flags win")
    p.add_argument("--loss", choices=losses.KINDS)
    p.add_argument("--K", type=int, help="negatives per example")
    p.add_argument("--alpha", type=float)
    p.add_argument("--c", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-history", type=int)
    p.add_argument("--sliding-window", action="store_true", default=None)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--decay", type=float)
    p.add_argument("--tied", action="store_true", default=None,
                   help="share input and output item embeddings")
    p.add_argument("--include-target", action="store_true", default=None)
    p.add_argument("--replacement", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--cutoffs", type=int, nargs="+")


def _add_common(p):
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankloss", description="Sampled ranking losses for sequential recommendation.")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="synthesize a Markov dataset or ingest an interaction log")
    g.add_argument("--interactions", help="user<TAB>item<TAB>timestamp file to ingest")
    g.add_argument("--k-core", type=int, default=5)
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--items", type=int, default=500)
    g.add_argument("--self-consistency", type=float, default=0.8)
    g.add_argument("--min-len", type=int, default=8)
    g.add_argument("--max-len", type=int, default=24)
    g.add_argument("--out", help="output path (default stdout)")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one configuration and write its epoch log")
    _add_train_options(t)
    _add_common(t)
    t.add_argument("--checkpoint", help="write best-validation parameters here")

    e = sub.add_parser("eval", help="evaluate saved parameters")
    e.add_argument("--data", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--split", choices=("validation", "test"), default="test")
    e.add_argument("--cutoffs", type=int, nargs="+", default=[1, 5, 10])
    e.add_argument("--max-history", type=int, default=50)
    _add_common(e)

    v = sub.add_parser("verify-bounds", help="run the identity and bound checks")
    v.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    v.add_argument("--trials", type=int)
    _add_common(v)

    s = sub.add_parser("sweep", help="train one run per hyperparameter value")
    s.add_argument("--sweep", required=True, choices=("eta", "c", "alpha-k", "K", "L"))
    s.add_argument("--values", type=float, nargs="+", help="eta, c, alpha or L values")
    s.add_argument("--Ks", type=int, nargs="+", help="K values for alpha-k and K sweeps")
    _add_train_options(s)
    _add_common(s)
    return parser


def resolve_seed(flag, config: dict) -> int:
    if flag is not None:
        return flag
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("RANKLOSS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"RANKLOSS_SEED must be an integer, got {env!r}") from exc
    return 0


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    return data


def build_loss(args, config_loss: dict, item_count: int) -> LossSpec:
    loss = dict(config_loss)
    if args.loss is not None and args.loss != loss.get("kind"):
        loss = {"kind": args.loss}
    loss.setdefault("kind", "CE")
    for key in ("K", "alpha", "c", "eta", "n"):
        value = getattr(args, key)
        if value is not None:
            loss[key] = value
    kind = loss["kind"]
    if kind == "NCE":
        loss.setdefault("c", DEFAULT_NCE_C)
    if kind == "SCE":
        loss.setdefault("alpha", DEFAULT_SCE_ALPHA)
    if kind in losses.SAMPLED_KINDS:
        loss.setdefault("K", max(1, round(DEFAULT_K_FRACTION * item_count)))
    keep = set(losses._JSON_KEYS[kind]) | {"kind"}
    if kind in losses.PAIRWISE_KINDS:
        keep.add("K")
    extra = set(loss) - keep
    if extra:
        raise UsageError(f"options {sorted(extra)} do not apply to {kind}")
    return LossSpec.from_dict(loss)


_FLAG_FIELDS = ("epochs", "lr", "batch_size", "max_history", "sliding_window", "eval_every",
                "dim", "decay", "tied", "include_target", "replacement", "cutoffs", "threads")


def build_config(args, item_count: int) -> trainer.TrainConfig:
    config = _load_config(args.config)
    fields = dict(config)
    fields["loss"] = build_loss(args, config.get("loss", {}), item_count)
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    fields["seed"] = resolve_seed(args.seed, config)
    try:
        return trainer.TrainConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _write(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    with open(out, "w", newline="") as fh:
        fh.write(text)


def _records_to_csv(records) -> str:
    keys = []
    for r in records:
        keys.extend(k for k in r if k not in keys)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerow({k: json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else
                         ("" if v is None else v) for k, v in ((k, r.get(k)) for k in keys)})
    return buf.getvalue()


def _json_lines(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def cmd_gen_data(args) -> int:
    if args.interactions:
        log = load_interactions(args.interactions)
        dataset = leave_one_out_split(k_core_filter(log, args.k_core))
    else:
        try:
            dataset = generate_markov_dataset(args.users, args.items, (args.min_len, args.max_len),
                                              args.self_consistency, resolve_seed(args.seed, {}))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    _write(dataset.to_json(), args.out)
    return 0


def cmd_train(args) -> int:
    dataset = SequenceDataset.load(args.data)
    config = build_config(args, dataset.item_count)
    try:
        record = trainer.train(config, dataset)
    except trainer.TrainingDiverged as exc:
        print(f"rankloss: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write(record.to_csv() if args.format == "csv" else record.to_json() + "\n", args.out)
    if args.checkpoint:
        record.params.save(args.checkpoint)
    return 0


def cmd_eval(args) -> int:
    dataset = SequenceDataset.load(args.data)
    try:
        params = ScorerParams.load(args.params)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read parameters {args.params}: {exc}") from exc
    if params.item_count != dataset.item_count:
        raise DataError("parameter table size differs from the dataset catalog")
    report = evaluate_scorer(params, dataset, args.split, args.cutoffs, args.max_history, args.threads)
    records = report.to_records()
    _write(_records_to_csv(records) if args.format == "csv" else _json_lines(records), args.out)
    return 0


def cmd_verify(args) -> int:
    if args.trials is not None and args.trials < 1:
        raise UsageError("--trials must be positive")
    seed = resolve_seed(args.seed, {})
    try:
        records = verify.run_suite(args.suite, args.trials, seed, args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    _write(_records_to_csv(records) if args.format == "csv" else _json_lines(records), args.out)
    violated = [r["check"] for r in records if r["verdict"] == "violated"]
    if violated:
        print(f"rankloss: violated: {', '.join(violated)}", file=sys.stderr)
        return EXIT_VIOLATED
    return 0


def cmd_sweep(args) -> int:
    dataset = SequenceDataset.load(args.data)
    base = build_config(args, dataset.item_count)
    kind = args.sweep
    needs_values = kind in ("eta", "c", "alpha-k", "L")
    if needs_values and not args.values:
        raise UsageError(f"--sweep {kind} needs --values")
    if kind in ("alpha-k", "K") and not args.Ks:
        raise UsageError(f"--sweep {kind} needs --Ks")
    try:
        if kind == "eta":
            rows = trainer.run_eta_sweep(base, args.values, dataset)
        elif kind == "c":
            rows = trainer.run_c_sweep(base, args.values, dataset)
        elif kind == "alpha-k":
            rows = trainer.run_alpha_k_grid(base, args.values, args.Ks, dataset)
        elif kind == "K":
            rows = trainer.run_k_sweep(base, args.Ks, dataset)
        else:
            if any(v != int(v) or v < 1 for v in args.values):
                raise UsageError("L values must be positive integers")
            rows = trainer.run_length_sweep(base, [int(v) for v in args.values], dataset)
    except trainer.TrainingDiverged as exc:
        print(f"rankloss: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = [{k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in r.items()}
            for r in rows]
    _write(trainer.rows_to_csv(rows) if args.format == "csv" else _json_lines(rows), args.out)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "verify-bounds": cmd_verify, "sweep": cmd_sweep}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"rankloss: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"rankloss: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
