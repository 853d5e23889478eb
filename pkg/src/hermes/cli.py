"""Command-line entry points: ``train``, ``eval``, ``synth`` and ``pl-sim``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Logs go to stderr;
``eval`` prints its report as JSON on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data as hdata
from . import engine
from .core import ConfigError, TrainConfig, load_config, parse_assignments

log = logging.getLogger("hermes")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; usage errors are 1 here
        raise UsageError(f"{self.prog}: {message}")


def _assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hermes", description="Semi-supervised joint lesion segmentation and classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], type=_assignment, metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    p = sub.add_parser("train", help="train a model and write metrics and checkpoints")
    common(p)
    p.add_argument("--out", default="runs/hermes")
    p.add_argument("--data", help="dataset root (benign/ and malignant/); synthetic data when omitted")
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint and print JSON")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="evaluate every sample under this root instead of the config's validation split")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=400)

    p = sub.add_parser("pl-sim", help="pseudo-label selection experiment, written as CSV")
    common(p)
    p.add_argument("--out", default="pl_sim.csv")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--labeled", type=int, default=50)
    p.add_argument("--epochs", type=int, default=40)
    return parser


def resolve_config(args, env=None) -> TrainConfig:
    """File, then ``HERMES_SEED``, then ``--seed``, then ``--set`` (later wins)."""
    env = os.environ if env is None else env
    config = load_config(args.config) if args.config else TrainConfig()
    pairs = []
    if env.get("HERMES_SEED"):
        pairs.append(("seed", env["HERMES_SEED"]))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    pairs.extend(args.overrides)
    return parse_assignments(pairs, config)


def _train(args) -> int:
    config = resolve_config(args)
    if args.data:
        config = config.replace(data_root=args.data)
    result = engine.fit(config, args.out, resume=args.checkpoint)
    log.info("best %s, final dice %.4f acc %.4f", result.best_checkpoint, result.final_eval.dice_mean, result.final_eval.accuracy)
    return 0


def _eval(args) -> int:
    state = engine.load_checkpoint(args.checkpoint)
    config = state.config
    if args.overrides or args.config or args.seed is not None:
        config = resolve_config(args)
    if args.data:
        samples = list(hdata.scan_dataset(args.data, config.image_size).samples.values())
    else:
        index = engine.build_index(config)
        samples = index.get(index.val)
    report = engine.evaluate(state.model, samples, config)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _synth(args) -> int:
    config = resolve_config(args)
    samples = hdata.synth_generate(args.n, config.image_size, config.seed)
    hdata.write_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def _pl_sim(args) -> int:
    config = resolve_config(args)
    rows = engine.pl_accuracy_experiment(config, n_samples=args.n, n_labeled=args.labeled, epochs=args.epochs)
    engine.write_pl_csv(rows, args.out)
    for s in engine.PL_STRATEGIES:
        log.info("%s: late pseudo-label accuracy %.4f", s, engine.late_mean_accuracy(rows, s))
    return 0


COMMANDS = {"train": _train, "eval": _eval, "synth": _synth, "pl-sim": _pl_sim}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage() + str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
