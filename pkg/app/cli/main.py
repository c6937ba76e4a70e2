"""
Command-line interface: synth, train, eval, visualize, gradcheck and experiments
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import cv2
import numpy as np
from pydantic import ValidationError

from app.config.env_config import DEFAULT_CONFIG_FILE, LOG_LEVEL
from app.config.settings import (
    FLAT_KEYS,
    RunConfig,
    read_config_file,
    read_sidecar,
    resolve_run_config,
    write_sidecar,
)
from app.errors import ShapeError, UsageError, VerificationError
from app.models.checkpoint import load_checkpoint
from app.models.network import forward, param_shapes
from app.tensor.gradcheck import DEFAULT_EPSILON
from app.tools.experiments import (
    DEFAULT_SEEDS,
    VARIANTS,
    acceptance_checks,
    run_experiments,
    summarize_experiments,
)
from app.tools.image_io import read_image, write_boxes, write_map
from app.tools.synthdata import (
    export_dataset,
    gen_dataset,
    gen_sample,
    gen_splits,
    held_out_base_seed,
    load_samples,
)
from app.tools.verification import CHECKS, run_checks, summarize
from app.training.trainer import evaluate, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VERIFICATION = 3

CHECKPOINT_NAME = "model.gatn"
METRICS_NAME = "metrics.jsonl"
EXPERIMENTS_NAME = "experiments.csv"

# extra spellings for a few flat keys
FLAG_ALIASES = {
    "num_classes": ["--classes"],
    "train_per_class": ["--per-class"],
    "out_dir": ["--out"],
}


def _int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}")


class _Parser(argparse.ArgumentParser):
    """Argument errors are usage errors (exit 1), not argparse's exit 2."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _config_flags() -> argparse.ArgumentParser:
    parent = _Parser(add_help=False)
    group = parent.add_argument_group("configuration (flag > config file > checkpoint sidecar > default)")
    group.add_argument("--config", type=Path, default=None, help="Flat 'key = value' config file")
    group.add_argument("--log-level", default=None, help="Logging level (default: GATN_LOG_LEVEL or INFO)")
    for key, section in FLAT_KEYS.items():
        flags = [f"--{key.replace('_', '-')}", *FLAG_ALIASES.get(key, [])]
        group.add_argument(*flags, dest=key, default=argparse.SUPPRESS, help=f"[{section}] {key}")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = _Parser(prog="gatn", description="Gated attention multi-instance image classifier")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = commands.add_parser("synth", parents=[parent], help="Write a synthetic dataset to disk")
    synth.add_argument("--split", choices=("train", "test"), default="train")
    synth.set_defaults(handler=cmd_synth)

    train_cmd = commands.add_parser("train", parents=[parent], help="Train and write a checkpoint")
    train_cmd.add_argument("--track-test", action="store_true", help="Log held-out accuracy every epoch")
    train_cmd.add_argument("--progress", action="store_true", help="Show a progress bar")
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", parents=[parent], help="Evaluate a checkpoint")
    eval_cmd.set_defaults(handler=cmd_eval)

    visualize = commands.add_parser("visualize", parents=[parent], help="Write attention heatmaps")
    source = visualize.add_mutually_exclusive_group()
    source.add_argument("--image", type=Path, default=None, help="Image file to visualize")
    source.add_argument("--sample-seed", type=int, default=None, help="Synthetic sample seed")
    visualize.add_argument("--sample-class", type=int, default=0, help="Class of the synthetic sample")
    visualize.set_defaults(handler=cmd_visualize)

    gradcheck = commands.add_parser("gradcheck", parents=[parent], help="Verify gradients")
    gradcheck.add_argument("--op", action="append", choices=list(CHECKS), default=None)
    gradcheck.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    experiments = commands.add_parser(
        "experiments", parents=[parent], help="Multi-seed accuracy, ablation and localization runs"
    )
    experiments.add_argument("--seeds", type=_int_list, default=list(DEFAULT_SEEDS), help="Comma-separated seeds")
    experiments.add_argument("--variant", action="append", choices=list(VARIANTS), default=None)
    experiments.add_argument("--progress", action="store_true", help="Show a progress bar per run")
    experiments.set_defaults(handler=cmd_experiments)
    return parser


def _flag_values(args: argparse.Namespace) -> Dict[str, Any]:
    return {key: value for key, value in vars(args).items() if key in FLAT_KEYS}


def _load_config(args: argparse.Namespace, use_sidecar: bool = False) -> RunConfig:
    flags = _flag_values(args)
    config_file = args.config or (Path(DEFAULT_CONFIG_FILE) if DEFAULT_CONFIG_FILE else None)
    file_values = read_config_file(config_file) if config_file else {}

    sidecar: Dict[str, Any] = {}
    if use_sidecar:
        checkpoint = flags.get("checkpoint") or file_values.get("checkpoint")
        sidecar = read_sidecar(Path(checkpoint) if checkpoint else _default_checkpoint(flags, file_values))

    config, overridden = resolve_run_config(flags, file_values, sidecar)
    for key in overridden:
        logger.info(f"Flag --{key.replace('_', '-')} overrides the config file value {file_values[key]!r}")
    logger.info(f"Resolved configuration: {json.dumps(config.to_flat(include_paths=True), default=str)}")
    return config


def _default_checkpoint(flags: Dict[str, Any], file_values: Dict[str, Any]) -> Path:
    out_dir = flags.get("out_dir") or file_values.get("out_dir") or RunConfig().paths.out_dir
    return Path(out_dir) / CHECKPOINT_NAME


def _checkpoint_path(config: RunConfig) -> Path:
    return config.paths.checkpoint or config.paths.out_dir / CHECKPOINT_NAME


def _load_params(config: RunConfig) -> Dict[str, np.ndarray]:
    network = config.network_config()
    return load_checkpoint(_checkpoint_path(config), param_shapes(network))


def cmd_synth(args: argparse.Namespace) -> int:
    config = _load_config(args)
    synth = config.synth
    seed = config.train.seed
    if args.split == "train":
        samples = gen_dataset(synth.train_per_class, seed, synth)
    else:
        samples = gen_dataset(synth.test_per_class, held_out_base_seed(synth.train_per_class, seed, synth), synth)
    export_dataset(samples, config.paths.out_dir)
    return EXIT_OK


def _datasets(config: RunConfig):
    if config.paths.data_dir is not None:
        return load_samples(config.paths.data_dir), None
    synth = config.synth
    return gen_splits(synth.train_per_class, synth.test_per_class, config.train.seed, synth)


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    train_set, test_set = _datasets(config)
    checkpoint = _checkpoint_path(config)
    logger.info(f"Training on {len(train_set)} samples for {config.train.epochs} epoch(s)")

    train(
        train_set,
        config.network_config(),
        config.train,
        checkpoint_path=checkpoint,
        metrics_path=config.paths.out_dir / METRICS_NAME,
        test_samples=test_set if args.track_test else None,
        progress=args.progress,
    )
    write_sidecar(checkpoint, config)
    logger.info(f"Checkpoint written to {checkpoint}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args, use_sidecar=True)
    params = _load_params(config)
    if config.paths.data_dir is not None:
        samples = load_samples(config.paths.data_dir)
    else:
        synth = config.synth
        first_seed = held_out_base_seed(synth.train_per_class, config.train.seed, synth)
        samples = gen_dataset(synth.test_per_class, first_seed, synth)
    metrics = evaluate(samples, params, config.network_config())
    print(json.dumps(metrics.model_dump(), indent=2))
    return EXIT_OK


def render_attention(
    image: np.ndarray, params: Dict[str, np.ndarray], config: RunConfig, out_dir: Path
) -> Dict[str, Path]:
    """
    Write the attention panels of one image.

    Maps are upsampled to the image size and min-max scaled to 0..255 PGM.

    Returns:
        Written file paths keyed by panel name
    """
    output = forward(image, params, config.network_config())
    size = np.shape(image)[-2:]
    features = output.features.data[0]
    gates = output.attention.gates.data[0]
    highest, lowest = int(np.argmax(gates)), int(np.argmin(gates))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {
        "semantic_map": write_map(out_dir / "semantic_map.pgm", output.attention.semantic_map.data[0, 0], size),
        "attention_map": write_map(out_dir / "attention_map.pgm", output.attention.attention_map.data[0, 0], size),
        "feature_map": write_map(out_dir / "feature_map.pgm", features.mean(axis=0), size),
        "channel_lowest": write_map(out_dir / "channel_lowest.pgm", features[lowest], size),
        "channel_highest": write_map(out_dir / "channel_highest.pgm", features[highest], size),
        "boxes": write_boxes(out_dir / "boxes.txt", output.pixel_boxes),
    }
    gates_path = out_dir / "gates.txt"
    gates_path.write_text("".join(f"{k} {value:.10g}\n" for k, value in enumerate(gates)))
    written["gates"] = gates_path
    logger.info(f"Highest gate: channel {highest}, lowest gate: channel {lowest}")
    return written


def cmd_visualize(args: argparse.Namespace) -> int:
    config = _load_config(args, use_sidecar=True)
    params = _load_params(config)
    if args.image is not None:
        image = read_image(args.image)
    else:
        seed = args.sample_seed if args.sample_seed is not None else config.train.seed
        image = gen_sample(seed, args.sample_class, config.synth).image
    written = render_attention(image, params, config, config.paths.out_dir)
    logger.info(f"Wrote {len(written)} files to {config.paths.out_dir}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _load_config(args)
    report = run_checks(args.op, seed=config.train.seed, epsilon=args.epsilon)
    for result in report.results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:16s} {result.max_error:.3e} < {result.tolerance:g} {status}  [{summarize(result.errors)}]")
    logger.debug(f"Gradient check report:\n{report.to_frame().to_string(index=False)}")
    if not report.passed:
        raise VerificationError(
            f"gradient check failed for: {', '.join(r.name for r in report.failures)}"
        )
    return EXIT_OK


def cmd_experiments(args: argparse.Namespace) -> int:
    config = _load_config(args)
    frame = run_experiments(config, args.seeds, args.variant or list(VARIANTS), progress=args.progress)
    out = config.paths.out_dir
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / EXPERIMENTS_NAME, index=False)
    print(frame.to_string(index=False))
    print(summarize_experiments(frame).to_string())

    checks = acceptance_checks(frame)
    for name, passed in checks.items():
        print(f"{name:28s} {'ok' if passed else 'FAIL'}")
    failed = [name for name, passed in checks.items() if not passed]
    if failed:
        raise VerificationError(f"experiment checks failed: {', '.join(failed)}")
    return EXIT_OK


def _configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format="%(asctime)s - %(levelname)s - %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, dispatch and map errors to exit codes."""
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.log_level)
        return args.handler(args)
    except (json.JSONDecodeError, cv2.error) as e:
        logger.error(f"unreadable input: {e}")
        return EXIT_IO
    except (UsageError, ShapeError, ValidationError, ValueError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except VerificationError as e:
        logger.error(str(e))
        return EXIT_VERIFICATION
    except OSError as e:
        logger.error(str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
