"""Command line interface for the orthonode package."""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from orthonode.adversary import run_attack
from orthonode.config import ConfigError, ExperimentConfig, load_config
from orthonode.dataio import Dataset, load_datasets
from orthonode.layers import load_checkpoint
from orthonode.lipschitz import (
    GronwallReport,
    contraction_rate,
    estimate_lipschitz,
    flow_lipschitz,
    gronwall_certify,
    lipschitz_upper_bound,
    representation_gap,
)
from orthonode.odeint import DynamicsField, SolverConfig, export_trajectory_csv, integrate
from orthonode.selftest import run_selftest
from orthonode.trainer import (
    NodeModel,
    NonFiniteLoss,
    build_model,
    compare_solvers,
    evaluate,
    load_model,
    parameter_count,
    save_model,
    train,
)
from orthonode.utils import rng_stream, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NON_FINITE = 2
EXIT_SELFTEST_FAILED = 3

CHECKPOINT_NAME = "checkpoint.bin"


def setup_logging(verbose: bool = False) -> None:
    """Adjust logging level for verbose mode."""
    if verbose:
        logging.getLogger().setLevel(logging.DEBUG)


def parse_args(args: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--out", type=Path, help="Output directory (overrides config)")
    common.add_argument("--seed", type=int, help="Experiment seed (overrides config)")
    common.add_argument(
        "--threads", type=int, help="Worker threads for evaluation (overrides config)"
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Enable verbose output")

    parser = argparse.ArgumentParser(
        description="Train and certify Neural ODE classifiers with orthogonal dynamics",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser(
        "train", parents=[common], help="Train a model and evaluate it under attacks"
    )
    certify = commands.add_parser(
        "certify", parents=[common], help="Lipschitz, Gronwall and contraction reports"
    )
    certify.add_argument("--checkpoint", type=Path, required=True, help="Model checkpoint")
    attack = commands.add_parser(
        "attack-eval", parents=[common], help="Accuracy table under the configured attacks"
    )
    attack.add_argument(
        "--checkpoint",
        type=Path,
        nargs="+",
        required=True,
        help="One or more checkpoints (one table row each)",
    )
    commands.add_parser("selftest", parents=[common], help="Run the property suites")

    parsed_args = parser.parse_args(args)
    if parsed_args.command == "train" and parsed_args.config is None:
        parser.error("train needs --config")
    if parsed_args.threads is not None and parsed_args.threads < 1:
        parser.error("--threads must be at least 1")
    return parsed_args


def resolve_config(
    parsed_args: argparse.Namespace, checkpoint: Optional[Path] = None
) -> ExperimentConfig:
    """Config from --config, else the one embedded in the checkpoint; then CLI overrides."""
    if parsed_args.config is not None:
        config = load_config(parsed_args.config)
    elif checkpoint is not None:
        _, header = load_checkpoint(checkpoint)
        config = ExperimentConfig.from_dict(header.get("config") or {})
    else:
        config = ExperimentConfig()
    return config.with_overrides(
        seed=parsed_args.seed, out_dir=parsed_args.out, threads=parsed_args.threads
    )


def write_trajectories(model: NodeModel, x: np.ndarray, out_dir: Path) -> List[Path]:
    """One CSV per sample: the NODE state norm along the integration."""
    block = model.node_block
    if block is None:
        return []
    features = model.pre(model.cast(x))
    return [
        export_trajectory_csv(
            integrate(block.field, features[i : i + 1], block.cfg),
            out_dir / "trajectories" / f"sample_{i}.csv",
        )
        for i in range(features.shape[0])
    ]


def cmd_train(config: ExperimentConfig) -> int:
    out_dir = Path(config.out_dir)
    train_set, test_set = load_datasets(config.dataset, config.seed)
    model = build_model(
        config.arch_kind,
        config.model,
        config.solver,
        train_set.sample_shape,
        train_set.class_count,
        rng_stream(config.seed, "init"),
    )
    model, report = train(model, train_set, config.train, config.seed)
    report.merge(evaluate(model, test_set, config.attacks, config.seed, threads=config.threads))
    report.lipschitz["parameters"] = parameter_count(model)
    if model.node_block is not None:
        report.lipschitz["dynamics_upper_bound"] = lipschitz_upper_bound(model.node_block.field)
    report.config = config.to_dict()

    save_model(model, out_dir / CHECKPOINT_NAME, config=config.to_dict())
    write_json(report.to_dict(), out_dir / "metrics.json")
    write_trajectories(model, test_set.images[: config.certify.trajectory_samples], out_dir)
    logger.info(f"Wrote checkpoint and metrics to {out_dir}")
    return EXIT_OK


def _feature_pairs(
    model: NodeModel, dataset: Dataset, config: ExperimentConfig
) -> Tuple[np.ndarray, np.ndarray]:
    count = min(config.certify.pairs, len(dataset))
    if count == 0:
        raise ValueError("Certification needs at least one test sample")
    z = model.pre(model.cast(dataset.images[:count])).astype(np.float64)
    noise = rng_stream(config.seed, "certify").standard_normal(z.shape)
    return z, z + config.certify.radius * noise


def _parallel_gronwall(
    field: DynamicsField,
    solver: SolverConfig,
    pairs: Tuple[np.ndarray, np.ndarray],
    c: float,
    threads: int,
) -> GronwallReport:
    """Certify pair chunks concurrently and keep the worst chunk."""
    chunks = np.array_split(np.arange(pairs[0].shape[0]), threads)
    chunks = [chunk for chunk in chunks if chunk.size]
    run = partial(gronwall_certify, field, solver, C=c)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        reports = list(executor.map(lambda i: run((pairs[0][i], pairs[1][i])), chunks))
    worst = max(reports, key=lambda report: report.max_ratio)
    return GronwallReport(
        pairs_tested=sum(report.pairs_tested for report in reports),
        max_ratio=worst.max_ratio,
        violated=any(report.violated for report in reports),
        c_used=c,
        tolerance=worst.tolerance,
        worst_time=worst.worst_time,
        c_below_empirical=any(report.c_below_empirical for report in reports),
    )


def cmd_certify(checkpoint: Path, config: ExperimentConfig) -> int:
    model, _ = load_model(checkpoint)
    _, test_set = load_datasets(config.dataset, config.seed)
    result: Dict[str, Any] = {"arch_kind": model.arch_kind, "config": config.to_dict()}

    block = model.node_block
    if block is None:
        result["lipschitz"] = {"body_upper_bound": lipschitz_upper_bound(model.body)}
    else:
        pairs = _feature_pairs(model, test_set, config)
        result["lipschitz"] = estimate_lipschitz(block.field, pairs).to_dict()
        result["gronwall"] = _parallel_gronwall(
            block.field, block.cfg, pairs, config.certify.gronwall_c, config.threads
        ).to_dict()
        result["contraction"] = contraction_rate(
            block.field, block.cfg, pairs, config.certify.contraction_threshold
        ).to_dict()
        result["flow_lipschitz"] = flow_lipschitz(block, pairs)
        logger.info(
            f"Dynamics bound {result['lipschitz']['upper']:.6f}, "
            f"Gronwall violated = {result['gronwall']['violated']}, "
            f"rho = {result['contraction']['rho_estimate']:.4f}"
        )

    gradient_attacks = [a for a in config.attacks if a.kind in ("fgsm", "pgd")]
    if gradient_attacks:
        spec = gradient_attacks[0]
        count = min(config.certify.pairs, len(test_set))
        x = test_set.images[:count].astype(model.dtype)
        x_adv = run_attack(
            model, x, test_set.labels[:count], spec, rng_stream(config.seed, "certify", 1)
        )
        result["representation_gap"] = {"attack": spec.label, **representation_gap(model, x, x_adv)}

    write_json(result, Path(config.out_dir) / "certificate.json")
    logger.info(f"Wrote certificate to {Path(config.out_dir) / 'certificate.json'}")
    return EXIT_OK


def cmd_attack_eval(checkpoints: List[Path], config: ExperimentConfig) -> int:
    _, test_set = load_datasets(config.dataset, config.seed)
    rows, details = [], {}
    for checkpoint in checkpoints:
        model, _ = load_model(checkpoint)
        report = evaluate(model, test_set, config.attacks, config.seed, threads=config.threads)
        rows.append({"arch": model.arch_kind, **report.accuracies})
        entry: Dict[str, Any] = {"checkpoint": str(checkpoint), "accuracies": report.accuracies}
        if config.compare_solvers and model.node_block is not None:
            entry["solvers"] = compare_solvers(
                model,
                test_set,
                config.attacks,
                dict(config.compare_solvers),
                config.seed,
                threads=config.threads,
            )
        details[f"{model.arch_kind}:{checkpoint.name}"] = entry

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(rows).set_index("arch")
    table.to_csv(out_dir / "table.csv", float_format="%.2f")
    write_json({"models": details, "config": config.to_dict()}, out_dir / "attack_metrics.json")
    logger.info(f"Accuracy table:\n{table.to_string(float_format=lambda v: f'{v:.2f}')}")
    return EXIT_OK


def cmd_selftest(seed: int = 0) -> int:
    result = run_selftest(seed)
    if not result.ok:
        logger.error(f"Failed properties: {', '.join(sorted(result.failed))}")
        return EXIT_SELFTEST_FAILED
    logger.info(f"All {len(result.passed)} properties passed in {result.seconds:.1f} s")
    return EXIT_OK


def main(args: Optional[List[str]] = None) -> int:
    """Main entry point for the orthonode command."""
    parsed_args = parse_args(args)
    setup_logging(parsed_args.verbose)

    try:
        if parsed_args.command == "selftest":
            return cmd_selftest(parsed_args.seed or 0)
        if parsed_args.command == "train":
            return cmd_train(resolve_config(parsed_args))
        if parsed_args.command == "certify":
            checkpoint = parsed_args.checkpoint
            if not checkpoint.is_file():
                raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
            return cmd_certify(checkpoint, resolve_config(parsed_args, checkpoint))
        checkpoints = parsed_args.checkpoint
        missing = [str(path) for path in checkpoints if not path.is_file()]
        if missing:
            raise FileNotFoundError(f"Checkpoint(s) not found: {', '.join(missing)}")
        return cmd_attack_eval(checkpoints, resolve_config(parsed_args, checkpoints[0]))

    except NonFiniteLoss as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_NON_FINITE
    except (FileNotFoundError, ConfigError, ValueError, OSError) as e:
        logger.error(f"Error: {str(e)}")
        if parsed_args.verbose:
            logger.exception("Detailed error trace:")
        return EXIT_INPUT_ERROR
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}")
        logger.exception("Detailed error trace:")
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
