"""
Command Line Interface
Entry point for ingesting data, running individual pipeline stages and whole
experiments, and building result tables

Usage:
    python -m cli.main run --preset desk --method feddiff
    python -m cli.main report --results-dir runs --axis alpha --axis epsilon
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.config import (
    METHODS,
    PRESETS,
    build_experiment_config,
    config as runtime_config,
    load_config_file,
    setup_logging,
)
from data.datasets import DATASET_NAMES, ingest
from data.partition import partition_summary
from errors import FedGenError
from federation.server import global_train_config, train_global
from harness.reporting import AXES, emit_table, plot_audit_histograms, plot_partition
from orchestrator import ExperimentOrchestrator, run_experiment
from storage.artifact_store import ArtifactStore, find_results

logger = logging.getLogger(__name__)


def _experiment_parser() -> argparse.ArgumentParser:
    """Flags shared by every subcommand that needs an experiment configuration"""
    parser = argparse.ArgumentParser(add_help=False)
    group = parser.add_argument_group("experiment")
    group.add_argument("--config", help="INI experiment file (flags override its values)")
    group.add_argument("--preset", choices=sorted(PRESETS), help="Base settings: desk or full")
    group.add_argument("--dataset", choices=DATASET_NAMES, help="Dataset name (default: fashionmnist)")
    group.add_argument("--data-root", help="Dataset root (default: $FEDGEN_DATA_ROOT or ./datasets)")
    group.add_argument("--train-subset", type=int, help="Use a random subset of this many training rows")
    group.add_argument("--clients", dest="client_count", type=int, help="Number of clients C (default: 10)")
    group.add_argument("--alpha", type=float, help="Dirichlet concentration (default: 0.01)")
    group.add_argument("--method", choices=METHODS, help="Method (default: feddiff)")
    group.add_argument("--local-epochs", type=int, help="Client epochs (default: 200)")
    group.add_argument("--global-epochs", type=int, help="Global classifier epochs (default: 50)")
    group.add_argument("--batch-size", type=int, help="Batch size (default: 128)")
    group.add_argument("--denoiser-lr", type=float, help="Denoiser learning rate (default: 1e-3)")
    group.add_argument("--classifier-lr", type=float, help="Classifier learning rate (default: 3e-4)")
    group.add_argument("--seeds", type=int, nargs="+", help="Seeds (default: 0 1 2)")
    group.add_argument("--timesteps", type=int, help="Diffusion steps T (default: 1000)")
    group.add_argument("--steps", dest="sampling_steps", type=int, help="Sampling steps S (default: 1000)")
    group.add_argument("--sample-batch-size", type=int, help="Samples per sampling batch (default: 500)")
    group.add_argument("--model-size", choices=("default", "small"), help="Denoiser size (default: default)")
    group.add_argument("--synthetic-count", type=int, help="Generated samples (default: training set size)")
    group.add_argument("--epsilon", type=float, help="Per-client privacy budget; enables DP (default: off)")
    group.add_argument("--delta", type=float, help="Privacy delta (default: 1e-5)")
    group.add_argument("--clip-norm", type=float, help="Per-sample clip norm (default: 1.0)")
    group.add_argument("--noise-multiplier", type=float, help="Fixed sigma instead of calibration")
    group.add_argument("--fmf-share", type=float, help="Budget share of the magnitude release (default: 0.05)")
    group.add_argument("--filter", choices=("none", "fmf", "oracle"), help="Synthetic data filter (default: none)")
    group.add_argument("--gamma", type=float, help="FMF removal fraction (default: 0.05)")
    group.add_argument("--fmf-scope", choices=("client", "global"), help="FMF ranking scope (default: client)")
    group.add_argument("--audit", action="store_true", default=None, help="Audit client generators")
    group.add_argument("--audit-against", choices=("shard", "full"), help="Audit reference data (default: shard)")
    group.add_argument("--oversample", dest="audit_oversample", type=int,
                       help="Audit samples per reference image (default: 5)")
    group.add_argument("--external-results", help="CSV/JSON with per-seed accuracies to import")
    group.add_argument("--workers", type=int, help="Client worker threads (default: $FEDGEN_WORKERS or 1)")
    group.add_argument("--output", dest="output_dir", help="Output directory (default: $FEDGEN_OUTPUT_DIR or ./runs)")
    return parser


def experiment_from_args(args: argparse.Namespace):
    """Merge preset, config file and flags into an ExperimentConfig"""
    file_values = load_config_file(args.config) if args.config else {}
    overrides: Dict[str, Any] = {
        key: getattr(args, key, None)
        for key in (
            "dataset", "data_root", "train_subset", "client_count", "alpha", "method",
            "local_epochs", "global_epochs", "batch_size", "denoiser_lr", "classifier_lr",
            "seeds", "timesteps", "sampling_steps", "sample_batch_size", "model_size",
            "synthetic_count", "filter", "audit", "audit_against", "audit_oversample",
            "external_results", "workers", "output_dir",
        )
    }
    overrides["privacy"] = {
        "epsilon": args.epsilon,
        "delta": args.delta,
        "clip_norm": args.clip_norm,
        "noise_multiplier": args.noise_multiplier,
        "fmf_share": args.fmf_share,
    }
    overrides["fmf"] = {"gamma": args.gamma, "scope": args.fmf_scope}
    return build_experiment_config(args.preset, file_values, overrides)


def _seed(experiment, args) -> int:
    return args.seed if args.seed is not None else experiment.seeds[0]


# ========== COMMANDS ==========

def cmd_ingest(args) -> int:
    written = ingest(args.dataset, args.source, args.data_root or runtime_config.DATA_ROOT, download=args.download)
    for split, path in written.items():
        print(f"{split}: {path}")
    return 0


def cmd_partition(args) -> int:
    experiment = experiment_from_args(args)
    orchestrator = ExperimentOrchestrator(experiment)
    seed = _seed(experiment, args)
    shards = orchestrator.partition(seed)
    train, _ = orchestrator.datasets()
    matrix = partition_summary(shards, train.class_count)
    plot_partition(matrix, orchestrator.store.seed_dir(seed) / "partition.png")
    for shard, row in zip(shards, matrix):
        print(f"client {shard.client_id}: {len(shard)} samples {row.tolist()}")
    return 0


def cmd_train_clients(args) -> int:
    experiment = experiment_from_args(args)
    orchestrator = ExperimentOrchestrator(experiment)
    seed = _seed(experiment, args)
    try:
        shards = orchestrator.store.load_partition(seed)
    except FedGenError:
        shards = orchestrator.partition(seed)
    payloads = orchestrator.train_clients(seed, shards)
    print(f"Stored {len(payloads)} payloads under {orchestrator.store.seed_dir(seed)}")
    return 0


def cmd_generate(args) -> int:
    experiment = experiment_from_args(args)
    orchestrator = ExperimentOrchestrator(experiment)
    seed = _seed(experiment, args)
    synthetic = orchestrator.generate(seed, orchestrator.store.load_payloads(seed))
    print(f"Generated {len(synthetic)} samples")
    return 0


def cmd_filter(args) -> int:
    experiment = experiment_from_args(args)
    orchestrator = ExperimentOrchestrator(experiment)
    seed = _seed(experiment, args)
    synthetic = orchestrator.store.load_synthetic(seed)
    filtered = orchestrator.filter(seed, synthetic, orchestrator.store.load_payloads(seed))
    print(f"Kept {len(filtered)} of {len(synthetic)} samples")
    return 0


def cmd_train_global(args) -> int:
    experiment = experiment_from_args(args)
    orchestrator = ExperimentOrchestrator(experiment)
    seed = _seed(experiment, args)
    store = orchestrator.store
    name = "filtered" if (store.seed_dir(seed) / "filtered").is_dir() else "synthetic"
    _, test = orchestrator.datasets()
    config = global_train_config(experiment.global_epochs, experiment.classifier_lr,
                                 experiment.batch_size, seed, orchestrator.device)
    _, accuracy = train_global(store.load_synthetic(seed, name), test, config, seed=seed)
    print(f"Global accuracy ({name}): {accuracy:.4f}")
    return 0


def cmd_audit(args) -> int:
    experiment = experiment_from_args(args)
    orchestrator = ExperimentOrchestrator(experiment)
    seed = _seed(experiment, args)
    summary = orchestrator.audit(seed, orchestrator.store.load_payloads(seed), orchestrator.store.load_partition(seed))
    for client_id, entry in summary.items():
        print(f"client {client_id}: min score {entry['min_score']:.4f}, flagged {entry['flagged_count']}")
    return 0


def cmd_run(args) -> int:
    experiment = experiment_from_args(args)
    setup_logging(args.log_level, str(Path(experiment.output_dir) / "run.log"))
    result = run_experiment(experiment)
    if result.mean is not None:
        print(f"{result.method}: {100 * result.mean:.2f}±{100 * result.std:.2f} "
              f"over seeds {sorted(result.accuracies)} [{result.status}]")
    for error in result.errors:
        print(f"seed {error['seed']} failed: {error['message']}", file=sys.stderr)
    return 0 if result.status != "error" else 1


def cmd_report(args) -> int:
    results = find_results(args.results_dir)
    if not results:
        print(f"No results under {args.results_dir}", file=sys.stderr)
        return 1
    output = Path(args.output or args.results_dir)
    for axis in args.axis:
        for name, path in emit_table(results, axis, output).items():
            print(f"{axis} {name}: {path}")
    hists = sorted(Path(args.results_dir).rglob("audit_hist.csv"))
    if hists:
        print(f"audit histogram: {plot_audit_histograms(hists, output / 'audit_scores.png')}")
    return 0


# ========== PARSER ==========

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgen",
        description="One-shot federated learning with client diffusion models",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=runtime_config.LOG_LEVEL, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)
    experiment = _experiment_parser()

    p = sub.add_parser("ingest", help="Convert a dataset distribution into the on-disk format")
    p.add_argument("--dataset", required=True, choices=DATASET_NAMES)
    p.add_argument("--source", required=True, help="torchvision directory or .npz archive")
    p.add_argument("--data-root", help="Dataset root (default: $FEDGEN_DATA_ROOT)")
    p.add_argument("--download", action="store_true", help="Let torchvision download missing files")
    p.set_defaults(handler=cmd_ingest)

    stages = (
        ("partition", "Dirichlet label-skew partition of the training set", cmd_partition),
        ("train-clients", "Train every client and store its single payload", cmd_train_clients),
        ("generate", "Generate the synthetic dataset from stored payloads", cmd_generate),
        ("filter", "Filter the stored synthetic dataset (fmf or oracle)", cmd_filter),
        ("train-global", "Train and evaluate the global classifier", cmd_train_global),
        ("audit", "Memorization audit of stored client generators", cmd_audit),
    )
    for name, help_text, handler in stages:
        p = sub.add_parser(name, help=help_text, parents=[experiment])
        p.add_argument("--seed", type=int, help="Seed to operate on (default: first configured seed)")
        p.set_defaults(handler=handler)

    p = sub.add_parser("run", help="End-to-end experiment over all seeds", parents=[experiment])
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("report", help="Build mean±std tables and plots from result.json files")
    p.add_argument("--results-dir", required=True, help="Directory searched for result.json")
    p.add_argument("--axis", action="append", choices=AXES, required=True, help="Grouping axis (repeatable)")
    p.add_argument("--output", help="Destination directory (default: the results directory)")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except FedGenError as e:
        logger.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
