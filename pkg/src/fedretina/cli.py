"""Command-line entry point: fedretina <subcommand> [flags]."""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from fedretina import __version__
from fedretina.checkpoint import load_checkpoint
from fedretina.errors import FedRetinaError, UsageError
from fedretina.experiments import (
    FEDERATED,
    ExperimentConfig,
    build_independent_test,
    build_institution,
    build_institutions,
    checkpoint_path,
    crossval_report,
    default_institutions,
    experiment1,
    experiment2,
    generate_data,
    load_config,
    train_federated_model,
    train_institution_model,
    write_manifest,
)
from fedretina.federation import InstitutionClient
from fedretina.image_utils import DegradeSpec
from fedretina.metrics import evaluate
from fedretina.reporting import check_consistency, format_table, summarize, write_json
from fedretina.transport import TcpServerTransport, parse_address, run_client

logger = logging.getLogger(__name__)

DEFAULT_BIND = "127.0.0.1:8765"


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file or a previous run's manifest.json")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="train institutions one at a time")
    common.add_argument("--max-rounds", type=int, help="override the federation round limit")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug")
    common.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedretina", description="Federated diabetic retinopathy simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_flags()

    gen = sub.add_parser("gen-data", parents=[common], help="write synthetic institution datasets")
    gen.add_argument("--institutions", type=int, help="number of institutions H1..Hn")
    gen.add_argument("--per-class", type=int, help="images per severity grade at every institution")
    gen.add_argument("--degrade-last", help="quality range LOW:HIGH for the last institution")
    gen.add_argument("--image-size", type=int, help="square image size in pixels")

    local = sub.add_parser("train-local", parents=[common], help="train standalone institution models")
    local.add_argument("--institution", action="append", help="institution name (repeatable; default all)")

    sub.add_parser("federate", parents=[common], help="run the federation in-process")

    serve = sub.add_parser("serve", parents=[common], help="run the federation server over TCP")
    serve.add_argument("--bind", default=DEFAULT_BIND, help="HOST:PORT to listen on")

    client = sub.add_parser("client", parents=[common], help="join a TCP federation as one institution")
    client.add_argument("--server", default=DEFAULT_BIND, help="HOST:PORT of the server")
    client.add_argument("--client-id", required=True, help="institution name from the config")

    sub.add_parser("experiment1", parents=[common], help="local vs federated models on the independent test set")
    exp2 = sub.add_parser("experiment2", parents=[common], help="generalizability matrix across test sets")
    exp2.add_argument("--train", action="store_true", help="train the models instead of loading checkpoints")
    sub.add_parser("crossval", parents=[common], help="k-fold comparison of trunk presets")

    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", help="checkpoint file (default: the federated model)")
    ev.add_argument("--test-set", default="independent", help="'independent' or an institution name")

    sub.add_parser("report", parents=[common], help="summarize and cross-check the reports in --out")
    return parser


def _configure_logging(args: argparse.Namespace) -> None:
    if args.quiet:
        level = logging.ERROR
    else:
        level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    config = config.with_overrides(seed=args.seed, max_rounds=args.max_rounds, out_dir=args.out,
                                   workers=1 if args.deterministic else None)
    return config.validate()


def _print_counts(counts) -> None:
    for name, parts in counts.items():
        for part, per_class in parts.items():
            print(f"{name:>16} {part:<10} {per_class}  total {sum(per_class)}")


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    institutions = config.institutions
    if args.institutions is not None:
        if args.institutions < 1:
            raise UsageError("--institutions must be >= 1")
        institutions = default_institutions(args.institutions)
    if args.per_class is not None:
        institutions = tuple(replace(inst, per_class=args.per_class) for inst in institutions)
    if args.degrade_last is not None:
        last = institutions[-1]
        institutions = institutions[:-1] + (replace(last, degrade=DegradeSpec.parse(args.degrade_last)),)
    overrides = {"institutions": institutions}
    if args.image_size is not None:
        overrides["image_size"] = args.image_size
    config = replace(config, **overrides).with_overrides(
        seed=args.seed, out_dir=args.out or "data").validate()
    counts = generate_data(config, config.out_dir)
    write_manifest(config, "gen-data")
    _print_counts(counts)
    return 0


def cmd_train_local(args: argparse.Namespace) -> int:
    config = _load(args)
    wanted = set(args.institution or [inst.name for inst in config.institutions])
    unknown = wanted - {inst.name for inst in config.institutions}
    if unknown:
        raise UsageError(f"unknown institution(s): {', '.join(sorted(unknown))}")
    write_manifest(config, "train-local")
    rows = []
    for inst in config.institutions:
        if inst.name not in wanted:
            continue
        data = build_institution(inst, config)
        report = evaluate(train_institution_model(config, data), data.test)
        rows.append([inst.name, report.accuracy, report.macro_roc_auc, report.n_samples])
    print(format_table(["model", "accuracy (own test)", "macro ROC AUC", "n"], rows))
    return 0


def _print_rounds(rounds) -> None:
    print(format_table(["round", "participants", "val loss", "val accuracy"],
                       [[r.t, ",".join(r.participants), r.global_val_loss, r.global_val_accuracy] for r in rounds]))


def cmd_federate(args: argparse.Namespace) -> int:
    config = _load(args)
    write_manifest(config, "federate")
    _, rounds = train_federated_model(config, build_institutions(config))
    _print_rounds(rounds)
    print(f"federated model: {checkpoint_path(config, FEDERATED)}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    config = _load(args)
    try:
        bind = parse_address(args.bind)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    institutions = build_institutions(config)
    transport = TcpServerTransport(bind, len(institutions), [data.name for data in institutions])
    print(f"listening on {transport.address[0]}:{transport.address[1]}", flush=True)
    transport.accept_clients()
    write_manifest(config, "serve")
    _, rounds = train_federated_model(config, institutions, transport)
    _print_rounds(rounds)
    return 0


def cmd_client(args: argparse.Namespace) -> int:
    config = _load(args)
    try:
        server = parse_address(args.server)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    matches = [inst for inst in config.institutions if inst.name == args.client_id]
    if not matches:
        raise UsageError(f"--client-id {args.client_id!r} is not an institution in the config")
    inst = matches[0]
    data = build_institution(inst, config)
    client = InstitutionClient(inst.name, data.train, data.validation, config.specs(),
                               config.federated_train_config(), inst.local_epochs, config.np_dtype)
    rounds = run_client(server, client)
    print(f"{inst.name}: served {rounds} rounds")
    return 0


def cmd_experiment1(args: argparse.Namespace) -> int:
    config = _load(args)
    write_manifest(config, "experiment1")
    payload = experiment1(config)
    rows = {**payload["models"], **payload.get("baselines", {})}
    print(format_table(["model", "accuracy", "macro ROC AUC"],
                       [[name, r["accuracy"], r["macro_roc_auc"]] for name, r in rows.items()]))
    return 0


def cmd_experiment2(args: argparse.Namespace) -> int:
    config = _load(args)
    write_manifest(config, "experiment2")
    matrix = experiment2(config, train_inline=args.train)
    print(format_table(["model"] + matrix.columns, [[name] + row for name, row in zip(matrix.rows, matrix.cells)]))
    best = matrix.best_per_column()
    print("best per test set: " + ", ".join(f"{column}={best[column]}" for column in matrix.columns))
    return 0


def cmd_crossval(args: argparse.Namespace) -> int:
    config = _load(args)
    write_manifest(config, "crossval")
    payload = crossval_report(config)
    print(format_table(["variant", "accuracy", "std", "macro ROC AUC", "size (MB)"],
                       [[v["name"], v["mean_accuracy"], v["std_accuracy"], v["mean_macro_roc_auc"],
                         v["model_size_mb"]] for v in payload["variants"]]))
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _load(args)
    path = Path(args.checkpoint) if args.checkpoint else checkpoint_path(config, FEDERATED)
    model, round_index = load_checkpoint(path, config.specs(), config.input_shape)
    if args.test_set == "independent":
        test = build_independent_test(config)
    else:
        matches = [inst for inst in config.institutions if inst.name == args.test_set]
        if not matches:
            raise UsageError(f"unknown test set {args.test_set!r}")
        test = build_institution(matches[0], config).test
    report = evaluate(model, test)
    write_json(Path(config.out_dir) / f"evaluation_{path.stem}_{args.test_set}.json", report.to_dict())
    print(f"{path} (round {round_index}) on {args.test_set}:")
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out or (load_config(args.config).out_dir if args.config else "results"))
    print(summarize(out))
    problems = check_consistency(out)
    if problems:
        raise UsageError("JSON and CSV reports disagree:\n  " + "\n  ".join(problems))
    print("\nJSON and CSV reports agree.")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-local": cmd_train_local,
    "federate": cmd_federate,
    "serve": cmd_serve,
    "client": cmd_client,
    "experiment1": cmd_experiment1,
    "experiment2": cmd_experiment2,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except FedRetinaError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
