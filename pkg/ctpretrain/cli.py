"""ctpretrain main file"""

import argparse
from collections import Counter
from dataclasses import replace
import json
import logging
import sys

from . import CTPretrainException
from .config_reader import ConfigReader
from .experiment import RunsConfig, load_experiment
from . import harness


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "-f",
        "--file",
        "--config",
        dest="file",
        help="config file location.  Either a single file or a folder of yaml files.",
        default=None,
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. --set pretrain.epochs=5.  May be repeated.",
    )
    common.add_argument("--seed", type=int, help="global seed, overrides the config")
    common.add_argument(
        "--out",
        help="output folder: cohort folder for synth, bundle folder for report, "
        + "run store root otherwise",
    )
    common.add_argument(
        "--force", action="store_true", help="overwrite existing outputs and rerun finished runs"
    )
    common.add_argument(
        "-c",
        "--configcheck",
        action="store_true",
        help="Parse the config files, replace environment variables, display and exit.",
    )
    common.add_argument(
        "-r",
        "--configraw",
        action="store_true",
        help="When performing a config check, do not parse environment variables.",
    )
    common.add_argument("-d", "--debug", help="enable debug mode", action="store_true")
    return common


def parse_args(argv=None):
    """Parse command line arguments."""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="ctpretrain",
        description="Self-supervised pretraining experiments on synthetic CT cohorts",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="render the synthetic cohort")
    for name, text in (("pretrain", "pretrain a model"), ("finetune", "fine-tune a model")):
        command = commands.add_parser(name, parents=[common], help=text)
        command.add_argument("--init", help="run id to start from")
    evaluate = commands.add_parser("evaluate", parents=[common], help="evaluate a fine-tuned run")
    evaluate.add_argument("--run", required=True, help="fine-tune run id")
    cka = commands.add_parser("cka", parents=[common], help="compare the layers of two runs")
    cka.add_argument("--run", required=True, nargs=2, metavar=("RUN_A", "RUN_B"))
    report = commands.add_parser("report", parents=[common], help="report over evaluated runs")
    report.add_argument("--run", required=True, nargs="+", help="evaluate and cka run ids")
    commands.add_parser("matrix", parents=[common], help="run the whole experiment grid")
    return parser.parse_args(argv)


def _synth(config, args):
    cohort = harness.cmd_synth(config, args.out, args.force)
    return {
        "cohort": str(cohort.root / harness.COHORT_MANIFEST),
        "cases": len(cohort),
        "splits": dict(Counter(entry.split for entry in cohort)),
    }


def _pretrain(config, args):
    return harness.cmd_pretrain(config, args.init, args.force).to_dict()


def _finetune(config, args):
    return harness.cmd_finetune(config, args.init, args.force).to_dict()


def _evaluate(config, args):
    report = harness.cmd_evaluate(config, args.run, args.force)
    return {"run_id": report.metadata["run_id"], "summary": report.to_dict()["summary"]}


def _cka(config, args):
    return harness.cmd_cka(config, *args.run, args.force).to_dict()


def _report(config, args):
    paths = harness.cmd_report(config, args.run, args.out)
    return {name: str(path) for name, path in paths.items()}


def _matrix(config, args):
    cells = harness.cmd_matrix(config, args.force)
    return {
        "pretrain": [manifest.run_id for manifest in cells["pretrain"]],
        "finetune": [manifest.run_id for manifest in cells["finetune"]],
        "evaluate": cells["evaluate"],
        "report": {name: str(path) for name, path in cells["report"][0].items()},
    }


COMMANDS = {
    "synth": _synth,
    "pretrain": _pretrain,
    "finetune": _finetune,
    "evaluate": _evaluate,
    "cka": _cka,
    "report": _report,
    "matrix": _matrix,
}


def error_payload(exc: CTPretrainException) -> dict:
    return {"error": type(exc).__name__, "message": exc.message, "details": exc.details()}


def main(argv=None):
    """Entry point for the ctpretrain cli"""
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO)

    try:
        if args.configcheck:
            config = ConfigReader(args.file, args.configraw, args.overrides)
            if args.configraw:
                logging.info("Raw config check requested.  Config is:\n")
                config.print_raw()
            else:
                logging.info("Config check requested.  Config is:\n")
                config.print()
            sys.exit(0)

        config = load_experiment(args.file, args.overrides).with_seed(args.seed)
        if args.out and args.command not in ("synth", "report"):
            config = replace(config, runs=RunsConfig(args.out))
        result = COMMANDS[args.command](config, args)
    except CTPretrainException as exc:
        logging.debug("Command %s failed", args.command, exc_info=True)
        print(json.dumps(error_payload(exc), sort_keys=True, default=str), file=sys.stderr)
        sys.exit(1)

    print(json.dumps(result, indent=2, sort_keys=True, default=str))
