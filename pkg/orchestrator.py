"""
Experiment Orchestrator
Coordinates partitioning, client training, one-shot upload, server-side
generation, filtering, global training, auditing and statistics
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch

from audit.memorization import DEFAULT_NEIGHBORS, audit_generator
from config.config import ExperimentConfig, config as runtime_config
from data.datasets import LabeledImageDataset, load_dataset, subset
from data.partition import ClientShard, dirichlet_partition
from diffusion.trainer import TrainConfig
from errors import FedGenError, ProtocolError
from federation.baselines import evaluate_ensemble, fedavg_aggregate, load_external_results, train_central
from federation.classifier_training import classifier_config_for, evaluate_accuracy
from federation.client import ClientPayload, run_client
from federation.server import (
    ProtocolTrace,
    SyntheticDataset,
    client_seed,
    global_train_config,
    server_generate,
    train_global,
)
from models.checkpoint import build_model, count_parameters
from models.denoiser import DenoiserConfig
from models.flops import count_flops
from privacy.accountant import PrivacySpec
from quality.fourier import fmf_filter
from quality.oracle import oracle_filter
from storage.artifact_store import ArtifactStore

logger = logging.getLogger(__name__)

SUBSET_SEED = 0


@dataclass
class RunResult:
    """Per-seed accuracies of one experiment cell and their population statistics"""
    method: str
    config: Dict[str, Any]
    accuracies: Dict[int, float] = field(default_factory=dict)
    errors: List[Dict[str, Any]] = field(default_factory=list)
    resources: Dict[str, Any] = field(default_factory=dict)
    privacy_spent: Optional[float] = None
    timing: Dict[str, float] = field(default_factory=dict)
    seeds: Dict[int, Dict[str, Any]] = field(default_factory=dict)

    @property
    def mean(self) -> Optional[float]:
        values = list(self.accuracies.values())
        return float(np.mean(values)) if values else None

    @property
    def std(self) -> Optional[float]:
        values = list(self.accuracies.values())
        return float(np.std(values, ddof=0)) if values else None

    @property
    def status(self) -> str:
        if not self.errors:
            return "ok"
        return "partial" if self.accuracies else "error"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "status": self.status,
            "accuracies": {str(s): a for s, a in self.accuracies.items()},
            "mean": self.mean,
            "std": self.std,
            "errors": self.errors,
            "resources": self.resources,
            "privacy_spent": self.privacy_spent,
            "timing": self.timing,
            "seeds": {str(s): v for s, v in self.seeds.items()},
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "RunResult":
        result = cls(
            method=payload["method"],
            config=payload.get("config", {}),
            accuracies={int(s): float(a) for s, a in payload.get("accuracies", {}).items()},
            errors=list(payload.get("errors", [])),
            resources=dict(payload.get("resources", {})),
            privacy_spent=payload.get("privacy_spent"),
            timing=dict(payload.get("timing", {})),
            seeds={int(s): v for s, v in payload.get("seeds", {}).items()},
        )
        for key in ("mean", "std"):
            stored, derived = payload.get(key), getattr(result, key)
            if stored is not None and derived is not None and abs(stored - derived) > 1e-9:
                raise ProtocolError(f"stored {key} {stored} disagrees with per-seed values ({derived})")
        return result


class ExperimentOrchestrator:
    """
    Runs one experiment configuration over all of its seeds
    """

    def __init__(self, experiment: ExperimentConfig, store: ArtifactStore = None, device: str = None):
        """
        Args:
            experiment: Validated experiment configuration
            store: Artifact store (default: one rooted at experiment.output_dir)
            device: Torch device (default: Config.DEVICE)
        """
        self.experiment = experiment
        self.store = store or ArtifactStore(experiment.output_dir)
        self.device = device or runtime_config.DEVICE
        self._train: Optional[LabeledImageDataset] = None
        self._test: Optional[LabeledImageDataset] = None

    # ========== DATA ==========

    def datasets(self) -> Tuple[LabeledImageDataset, LabeledImageDataset]:
        if self._train is None:
            train = load_dataset(self.experiment.dataset, self.experiment.data_root, "train")
            self._train = subset(train, self.experiment.train_subset, seed=SUBSET_SEED)
            self._test = load_dataset(self.experiment.dataset, self.experiment.data_root, "test")
        return self._train, self._test

    def use_datasets(self, train: LabeledImageDataset, test: LabeledImageDataset):
        """Inject in-memory datasets instead of reading the dataset root"""
        self._train, self._test = train, test

    # ========== CONFIG HELPERS ==========

    def privacy_spec(self) -> Optional[PrivacySpec]:
        settings = self.experiment.privacy
        if settings is None:
            return None
        return PrivacySpec(
            epsilon_target=settings.epsilon,
            delta=settings.delta,
            clip_norm=settings.clip_norm,
            noise_multiplier=settings.noise_multiplier,
        )

    def local_train_config(self, seed: int, client_id: int) -> TrainConfig:
        exp = self.experiment
        lr = exp.denoiser_lr if exp.method == "feddiff" else exp.classifier_lr
        microbatch = exp.privacy.microbatch_size if exp.privacy else 32
        return TrainConfig(epochs=exp.local_epochs, batch_size=exp.batch_size, lr=lr,
                           seed=client_seed(seed, client_id), microbatch_size=microbatch, device=self.device)

    def global_config(self, seed: int) -> TrainConfig:
        exp = self.experiment
        return global_train_config(exp.global_epochs, exp.classifier_lr, exp.batch_size, seed, self.device)

    # ========== PIPELINE STEPS ==========

    def partition(self, seed: int) -> List[ClientShard]:
        train, _ = self.datasets()
        shards = dirichlet_partition(train, self.experiment.client_count, self.experiment.alpha, seed)
        self.store.save_partition(seed, shards)
        return shards

    def train_clients(self, seed: int, shards: List[ClientShard], trace: ProtocolTrace = None) -> List[ClientPayload]:
        """Run every client in the worker pool; each payload is uploaded and stored once"""
        train, _ = self.datasets()
        exp = self.experiment
        method = "feddiff" if exp.method == "feddiff" else "classifier-local"
        privacy = self.privacy_spec()
        with_fmf = exp.method == "feddiff" and exp.filter == "fmf"
        fmf_share = exp.privacy.fmf_share if exp.privacy else 0.0

        def work(shard: ClientShard) -> ClientPayload:
            return run_client(
                shard.client_id,
                train.select(shard.indices),
                method,
                self.local_train_config(seed, shard.client_id),
                model_size=exp.model_size,
                timesteps=exp.timesteps,
                privacy=privacy,
                fmf=with_fmf,
                fmf_share=fmf_share,
                history_path=self.store.history_path(seed, shard.client_id) if method == "feddiff" else None,
            )

        if exp.workers > 1:
            with ThreadPoolExecutor(max_workers=exp.workers) as pool:
                payloads = list(pool.map(work, shards))
        else:
            payloads = [work(shard) for shard in shards]

        for payload in payloads:
            if trace is not None:
                trace.record_upload(payload.client_id, payload.size_bytes())
            self.store.save_payload(seed, payload)
        return payloads

    def generate(self, seed: int, payloads: List[ClientPayload]) -> SyntheticDataset:
        train, _ = self.datasets()
        exp = self.experiment
        total = exp.synthetic_count or len(train)
        synthetic = server_generate(payloads, total, steps=exp.sampling_steps, seed=seed,
                                    sample_batch_size=exp.sample_batch_size, device=self.device)
        self.store.save_synthetic(seed, synthetic)
        return synthetic

    def filter(self, seed: int, synthetic: SyntheticDataset, payloads: List[ClientPayload]) -> SyntheticDataset:
        exp = self.experiment
        if exp.filter == "fmf":
            profiles = {p.client_id: p.magnitude_profile for p in payloads if p.magnitude_profile is not None}
            filtered = fmf_filter(synthetic, profiles, gamma=exp.fmf.gamma, scope=exp.fmf.scope,
                                  report_path=self.store.fmf_report_path(seed))
        elif exp.filter == "oracle":
            train, _ = self.datasets()
            oracle, accuracy = train_central(train, self._test, self.global_config(seed))
            logger.info("Oracle classifier accuracy: %.4f", accuracy)
            filtered = oracle_filter(synthetic, oracle, device=self.device)
        else:
            return synthetic
        self.store.save_synthetic(seed, filtered, name="filtered")
        return filtered

    def audit(self, seed: int, payloads: List[ClientPayload], shards: List[ClientShard]) -> Dict[str, Any]:
        train, _ = self.datasets()
        exp = self.experiment
        by_id = {s.client_id: s for s in shards}
        summary = {}
        for payload in payloads:
            reference = train.select(by_id[payload.client_id].indices) if exp.audit_against == "shard" else train
            if len(reference) <= DEFAULT_NEIGHBORS:
                logger.warning("Client %d: %d reference images, too few for the audit neighborhood; skipped",
                               payload.client_id, len(reference))
                continue
            report, _ = audit_generator(
                payload, reference,
                oversample=exp.audit_oversample,
                steps=exp.sampling_steps,
                threshold=exp.audit_threshold,
                seed=seed,
                sample_batch_size=exp.sample_batch_size,
                device=self.device,
                output_dir=self.store.audit_dir(seed, payload.client_id),
            )
            summary[str(payload.client_id)] = {
                "min_score": report.min_score,
                "flagged_count": report.flagged_count,
            }
        return summary

    def check_one_shot(self, seed: int, trace: ProtocolTrace, shards: List[ClientShard]):
        trace.assert_one_shot([s.client_id for s in shards])
        extra = {c: n for c, n in self.store.checkpoint_counts(seed).items() if n != 1}
        if extra:
            raise ProtocolError(f"client directories without exactly one checkpoint: {extra}")

    # ========== SEED AND RUN ==========

    def run_seed(self, seed: int) -> Dict[str, Any]:
        """
        Complete pipeline for one seed

        Returns:
            Seed summary with accuracy, spent epsilon, payload bytes and timing
        """
        exp = self.experiment
        torch.manual_seed(seed)
        _, test = self.datasets()
        timing: Dict[str, float] = {}
        summary: Dict[str, Any] = {"seed": seed, "status": "ok"}

        if exp.method == "central":
            logger.info("Step 1: training the centralized reference...")
            started = time.time()
            train, _ = self.datasets()
            _, accuracy = train_central(train, test, self.global_config(seed))
            timing["central"] = time.time() - started
            summary.update({"accuracy": accuracy, "timing": timing})
            self.store.save_seed_summary(seed, summary)
            return summary

        logger.info("Step 1: partitioning into %d clients (alpha=%g)...", exp.client_count, exp.alpha)
        shards = self.partition(seed)

        logger.info("Step 2: training %d clients (%s)...", len(shards), exp.method)
        started = time.time()
        trace = ProtocolTrace()
        payloads = self.train_clients(seed, shards, trace)
        timing["clients"] = time.time() - started
        self.store.save_trace(seed, trace)

        if exp.method == "feddiff":
            logger.info("Step 3: generating the global synthetic dataset (S=%d)...", exp.sampling_steps)
            started = time.time()
            synthetic = self.generate(seed, payloads)
            timing["generation"] = time.time() - started

            if exp.filter != "none":
                logger.info("Step 4: filtering synthetic data (%s)...", exp.filter)
                synthetic = self.filter(seed, synthetic, payloads)
            summary["synthetic_count"] = len(synthetic)

            logger.info("Step 5: training the global classifier for %d epochs...", exp.global_epochs)
            started = time.time()
            _, accuracy = train_global(synthetic, test, self.global_config(seed), seed=seed)
            timing["global"] = time.time() - started

            if exp.audit:
                logger.info("Step 6: auditing client generators for memorization...")
                summary["audit"] = self.audit(seed, payloads, shards)
        elif exp.method == "fedavg":
            logger.info("Step 3: averaging client classifiers...")
            accuracy = evaluate_accuracy(fedavg_aggregate(payloads), test, self.device)
        else:
            logger.info("Step 3: evaluating the client ensemble...")
            accuracy = evaluate_ensemble(payloads, test, self.device)

        self.check_one_shot(seed, trace, shards)
        summary.update({
            "accuracy": accuracy,
            "privacy_spent": max((p.spent_epsilon() for p in payloads), default=0.0) if exp.privacy else None,
            "payload_bytes": {str(p.client_id): p.size_bytes() for p in payloads},
            "uploads": len(trace.events),
            "timing": timing,
        })
        self.store.save_seed_summary(seed, summary)
        return summary

    def resource_stats(self) -> Dict[str, Any]:
        """Parameter counts and per-image MFLOPs of the models this method trains"""
        train, _ = self.datasets()
        height, _, channels = train.image_shape
        stats: Dict[str, Any] = {}
        classifier = build_model(classifier_config_for(train))
        stats["classifier_params"] = count_parameters(classifier)
        stats["classifier_mflops"] = count_flops(classifier, (channels, height, height))
        if self.experiment.method == "feddiff":
            denoiser = build_model(DenoiserConfig.sized(
                self.experiment.model_size, image_size=height, image_channels=channels,
                class_count=train.class_count, timesteps=self.experiment.timesteps,
            ))
            stats["denoiser_params"] = count_parameters(denoiser)
            stats["denoiser_mflops"] = count_flops(denoiser, (channels, height, height))
        return stats

    def import_external(self, result: RunResult) -> RunResult:
        """
        Wrap per-seed accuracies produced by a baseline's own code; every
        imported method is stored under <output>/<method>/, the first is returned
        """
        imported = load_external_results(self.experiment.external_results)
        results = []
        for method, per_seed in imported.items():
            logger.info("Imported %d seeds for %s", len(per_seed), method)
            entry = RunResult(method=method, config=result.config, accuracies=dict(per_seed))
            ArtifactStore(str(self.store.root / method)).save_result(entry.to_dict())
            results.append(entry)
        return results[0]

    def run(self) -> RunResult:
        """Every seed in sequence; a failing seed is recorded and the rest still run"""
        exp = self.experiment
        result = RunResult(method=exp.method, config=exp.model_dump(mode="json"))

        if exp.method == "external-baseline-import":
            return self.import_external(result)

        started = time.time()
        result.resources = self.resource_stats()
        spent = []
        for seed in exp.seeds:
            logger.info("===== seed %d =====", seed)
            try:
                summary = self.run_seed(seed)
            except FedGenError as e:
                logger.error("Seed %d failed: %s", seed, e)
                result.errors.append({"seed": seed, "status": "error", "message": str(e)})
                continue
            result.accuracies[seed] = float(summary["accuracy"])
            result.seeds[seed] = summary
            if summary.get("privacy_spent") is not None:
                spent.append(summary["privacy_spent"])
            if summary.get("payload_bytes"):
                result.resources["payload_bytes"] = summary["payload_bytes"]

        result.privacy_spent = max(spent) if spent else None
        result.timing["total_seconds"] = time.time() - started
        self.store.save_result(result.to_dict())
        if result.mean is not None:
            logger.info("Result (%s): %.4f ± %.4f over %d seeds [%s]",
                        exp.method, result.mean, result.std, len(result.accuracies), result.status)
        return result


def run_experiment(experiment: ExperimentConfig, store: ArtifactStore = None) -> RunResult:
    return ExperimentOrchestrator(experiment, store).run()
