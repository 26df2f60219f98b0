"""Main entrypoint for the modguard command line."""
import argparse
import asyncio
import json
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch
from pydantic import ValidationError

from modguard.config import load_experiment_config, settings, with_derived_seeds
from modguard.schemas.models import ExperimentConfig
from modguard.shared.artifacts import missing_artifacts
from modguard.shared.training import METHODS
from modguard.workers.attack_worker import DEFENSES, AttackWorker
from modguard.workers.calibration_worker import CalibrationWorker
from modguard.workers.data_worker import DataWorker
from modguard.workers.evaluation_worker import EvaluationWorker
from modguard.workers.repro_worker import ReproWorker
from modguard.workers.training_worker import TrainingWorker
from modguard.workers.viz_worker import VizWorker

logging.basicConfig(
    level=getattr(logging, settings.log_level.upper()),
    format='{"timestamp": "%(asctime)s", "level": "%(levelname)s", "logger": "%(name)s", "message": "%(message)s"}',
    datefmt="%Y-%m-%dT%H:%M:%S",
)

logger = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train", "calibrate", "attack", "eval", "viz", "repro")


def _float_list(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {value!r}")


def _str_list(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="Experiment TOML file")
    common.add_argument("--seed", type=int, default=None, help="Root seed (overrides the config file)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE")
    common.add_argument("--threads", type=int, default=None, help="Worker cap for per-frame parallelism")
    common.add_argument("--json", action="store_true", help="Print the summary as JSON on stdout")

    parser = argparse.ArgumentParser(prog="modguard", description="Adversarial robustness of modulation classifiers")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic labelled dataset")
    p.add_argument("--classes", type=_str_list, default=None)
    p.add_argument("--snr-db", type=_float_list, default=None)
    p.add_argument("--frames-per-cell", type=int, default=None)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("train", parents=[common], help="Train a classifier")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--method", choices=list(METHODS), required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--eps-max", type=float, default=None)
    p.add_argument("--fixed-eps", type=float, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--smooth-alpha", type=float, default=None)

    p = sub.add_parser("calibrate", parents=[common], help="Fit an SVM rejection head or the autoencoder detector")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, default=None)
    p.add_argument("--kind", choices=["svm", "ae"], default="svm")
    p.add_argument("--reject-rate", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--C", dest="svm_c", type=float, default=None)
    p.add_argument("--out", type=Path, default=None)

    for name, text in (("attack", "Attack a defense over a PNR grid"), ("eval", "Security curve of one defense")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", type=Path, required=True)
        p.add_argument("--model", type=Path, required=True)
        p.add_argument("--svm", type=Path, default=None)
        p.add_argument("--ae", type=Path, default=None)
        p.add_argument("--pnr-db", type=_float_list, default=None)
        p.add_argument("--snr-db", type=float, default=None)
        p.add_argument("--out", type=Path, default=None)
        if name == "attack":
            p.add_argument("--defense", choices=list(DEFENSES), default="none")
            p.add_argument("--iters", type=int, default=None)
            p.add_argument("--step", type=float, default=None)
            p.add_argument("--tol", type=float, default=None)
        else:
            p.add_argument("--variant", required=True)

    p = sub.add_parser("viz", parents=[common], help="PCA projection of a model's feature layer")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dims", type=int, choices=[2, 3], default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("repro", parents=[common], help="Run the whole pipeline from one config")
    p.add_argument("--out", type=Path, default=None)

    return parser


def _flag_fields(args: argparse.Namespace) -> Dict[str, Any]:
    """Named flags as dotted config paths; unset flags are None and ignored."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    fields: Dict[str, Any] = {"seed": get("seed")}
    if args.command == "gen-data":
        fields.update(
            dataset__classes=get("classes"),
            dataset__snr_grid=get("snr_db"),
            dataset__frames_per_cell=get("frames_per_cell"),
            dataset__n=get("length"),
            dataset__split_ratio=get("split_ratio"),
        )
    elif args.command == "train":
        fields.update(
            train__epochs=get("epochs"),
            train__lr=get("lr"),
            train__batch_size=get("batch_size"),
            cat__eta=get("eta"),
            cat__c=get("c"),
            cat__eps_max=get("eps_max"),
            adversarial__fixed_eps=get("fixed_eps"),
            lsgna__noise_sigma=get("noise_sigma"),
            lsgna__smooth_alpha=get("smooth_alpha"),
        )
    elif args.command == "calibrate":
        rate_field = "svm__reject_rate" if args.kind == "svm" else "autoencoder__flag_rate"
        fields.update({rate_field: get("reject_rate"), "svm__gamma": get("gamma"), "svm__C": get("svm_c")})
    elif args.command in ("attack", "eval"):
        fields.update(eval__pnr_grid=get("pnr_db"), eval__snr_db=get("snr_db"))
        if args.command == "attack":
            fields.update(attack__max_iters=get("iters"), attack__step_size=get("step"), attack__tol=get("tol"))
    elif args.command == "viz":
        fields.update(eval__pca_dims=get("dims"))
        if args.config is None and fields["seed"] is None:
            # projections consume no randomness
            fields["seed"] = 0
    return fields


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment_config(args.config, args.overrides, **_flag_fields(args))
    return with_derived_seeds(config)


def _output_root(config: ExperimentConfig) -> Path:
    return config.output_dir or settings.output_dir


def build_worker(args: argparse.Namespace, config: ExperimentConfig):
    """Instantiate the worker a subcommand runs."""
    root = _output_root(config)
    threads = args.threads or settings.threads
    command = args.command
    if command == "gen-data":
        return DataWorker(config, args.out or root / "data.mgd")
    if command == "train":
        return TrainingWorker(config, args.data, args.method, args.out or root / "models" / f"{args.method}.mgm")
    if command == "calibrate":
        if args.kind == "svm":
            out = args.out or root / "models" / Path(args.model or "svm").with_suffix(".mgs").name
        else:
            out = args.out or root / "models" / "twofold.mga"
        return CalibrationWorker(config, args.data, args.kind, out, args.model)
    if command == "attack":
        return AttackWorker(
            config, args.data, args.model, args.defense, args.out or root, args.svm, args.ae, threads=threads
        )
    if command == "eval":
        return EvaluationWorker(
            config, args.data, args.variant, args.model, args.out or root, args.svm, args.ae, threads=threads
        )
    if command == "viz":
        return VizWorker(config, args.data, args.model, args.out or root)
    if command == "repro":
        return ReproWorker(config, args.out or root, threads=threads)
    raise ValueError(f"Unknown command: {command}. Must be one of: {', '.join(COMMANDS)}")


async def run_worker(worker) -> Dict[str, Any]:
    """Run one worker and return its summary."""
    logger.info(f"Starting {type(worker).__name__}")
    return await worker.run()


def main(argv: Optional[List[str]] = None) -> int:
    """Main entrypoint."""
    argv = list(sys.argv[1:] if argv is None else argv)
    # Command: CLI arg > MODGUARD_COMMAND > settings default
    if not argv or argv[0] not in COMMANDS and argv[0] not in ("-h", "--help"):
        argv = [settings.command, *argv]

    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = build_config(args)
    except ValidationError as e:
        parser.print_usage(sys.stderr)
        print(f"modguard {args.command}: invalid configuration:\n{e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, tomllib.TOMLDecodeError) as e:
        parser.print_usage(sys.stderr)
        print(f"modguard {args.command}: {e}", file=sys.stderr)
        return 2

    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(args.threads or settings.threads)

    try:
        worker = build_worker(args, config)
        result = asyncio.run(run_worker(worker))
    except KeyboardInterrupt:
        logger.info("Worker interrupted by user")
        return 1
    except Exception as e:
        logger.error(f"Worker failed: {e}", exc_info=True)
        return 1

    missing = missing_artifacts(result.get("artifacts", []))
    if missing:
        logger.error(f"Declared artifacts were not produced: {missing}")
        return 1

    logger.info(f"Worker completed successfully: {result.get('status')}")
    if args.json:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
