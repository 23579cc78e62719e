"""
Artifact Store
Handles every on-disk artifact of an experiment run: partitions, client
payloads, the synthetic dataset, traces and results

Layout under the output directory:
    seed_<s>/partition.json
    seed_<s>/client_<id>/checkpoint/..., label_counts.json, magnitude.bin,
        magnitude_meta.json, ledger.json, loss_history.csv
    seed_<s>/synthetic/ (dataset format + provenance.csv), fmf_report.csv
    seed_<s>/trace.json, seed_<s>/audit/client_<id>/...
    result.json
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from data.partition import ClientShard
from errors import IngestionError
from federation.client import ClientPayload
from federation.server import ProtocolTrace, SyntheticDataset
from models.checkpoint import ModelCheckpoint
from privacy.accountant import PrivacyLedger
from quality.fourier import MAGNITUDE_META_FILE, MagnitudeProfile

logger = logging.getLogger(__name__)

RESULT_FILE = "result.json"


class ArtifactStore:
    """
    Reads and writes run artifacts under one root directory
    """

    def __init__(self, root: str):
        """
        Args:
            root: Output directory of the experiment (created if missing)
        """
        self.root = Path(root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IngestionError(f"Failed to create output directory {self.root}: {e}", path=str(self.root)) from e

    def seed_dir(self, seed: int) -> Path:
        path = self.root / f"seed_{seed}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def client_dir(self, seed: int, client_id: int) -> Path:
        return self.seed_dir(seed) / f"client_{client_id}"

    def history_path(self, seed: int, client_id: int) -> Path:
        return self.client_dir(seed, client_id) / "loss_history.csv"

    def fmf_report_path(self, seed: int) -> Path:
        return self.seed_dir(seed) / "fmf_report.csv"

    def audit_dir(self, seed: int, client_id: int) -> Path:
        return self.seed_dir(seed) / "audit" / f"client_{client_id}"

    # ========== JSON HELPERS ==========

    def _write_json(self, path: Path, payload: Any) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=_json_default)
        return path

    def _read_json(self, path: Path) -> Any:
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise IngestionError(f"Failed to read {path}: {e}", path=str(path)) from e

    # ========== PARTITION ==========

    def save_partition(self, seed: int, shards: List[ClientShard]) -> Path:
        return self._write_json(self.seed_dir(seed) / "partition.json", [s.to_dict() for s in shards])

    def load_partition(self, seed: int) -> List[ClientShard]:
        return [ClientShard.from_dict(s) for s in self._read_json(self.seed_dir(seed) / "partition.json")]

    # ========== PAYLOADS ==========

    def save_payload(self, seed: int, payload: ClientPayload) -> Path:
        directory = self.client_dir(seed, payload.client_id)
        payload.checkpoint.save(directory / "checkpoint")
        self._write_json(directory / "label_counts.json", {
            "client_id": payload.client_id,
            "label_counts": payload.label_counts.tolist(),
        })
        if payload.magnitude_profile is not None:
            payload.magnitude_profile.save(directory)
        if payload.ledger is not None:
            payload.ledger.save(directory / "ledger.json")
        return directory

    def load_payload(self, seed: int, client_id: int) -> ClientPayload:
        directory = self.client_dir(seed, client_id)
        counts = self._read_json(directory / "label_counts.json")

        profile = None
        if (directory / MAGNITUDE_META_FILE).is_file():
            profile = MagnitudeProfile.load(directory)
        ledger = None
        if (directory / "ledger.json").is_file():
            ledger = PrivacyLedger.load(directory / "ledger.json")

        return ClientPayload(
            client_id=int(counts["client_id"]),
            checkpoint=ModelCheckpoint.load(directory / "checkpoint"),
            label_counts=np.asarray(counts["label_counts"], dtype=np.int64),
            magnitude_profile=profile,
            ledger=ledger,
        )

    def payload_ids(self, seed: int) -> List[int]:
        ids = []
        for path in self.seed_dir(seed).glob("client_*"):
            if (path / "label_counts.json").is_file():
                ids.append(int(path.name.split("_", 1)[1]))
        return sorted(ids)

    def load_payloads(self, seed: int) -> List[ClientPayload]:
        ids = self.payload_ids(seed)
        if not ids:
            raise IngestionError(f"No client payloads under {self.seed_dir(seed)}", path=str(self.seed_dir(seed)))
        return [self.load_payload(seed, client_id) for client_id in ids]

    def checkpoint_counts(self, seed: int) -> Dict[int, int]:
        """Checkpoint directories per client directory"""
        counts = {}
        for path in self.seed_dir(seed).glob("client_*"):
            counts[int(path.name.split("_", 1)[1])] = sum(
                1 for p in path.rglob("config.json") if p.parent.name == "checkpoint"
            )
        return counts

    # ========== SYNTHETIC DATA ==========

    def save_synthetic(self, seed: int, synthetic: SyntheticDataset, name: str = "synthetic") -> Path:
        return synthetic.save(self.seed_dir(seed) / name)

    def load_synthetic(self, seed: int, name: str = "synthetic") -> SyntheticDataset:
        return SyntheticDataset.load(self.seed_dir(seed) / name)

    # ========== TRACE AND RESULTS ==========

    def save_trace(self, seed: int, trace: ProtocolTrace) -> Path:
        return self._write_json(self.seed_dir(seed) / "trace.json", trace.to_dict())

    def save_seed_summary(self, seed: int, summary: Dict) -> Path:
        return self._write_json(self.seed_dir(seed) / "summary.json", summary)

    def load_seed_summary(self, seed: int) -> Optional[Dict]:
        path = self.seed_dir(seed) / "summary.json"
        return self._read_json(path) if path.is_file() else None

    def save_result(self, result: Dict) -> Path:
        return self._write_json(self.root / RESULT_FILE, result)

    def load_result(self) -> Dict:
        return self._read_json(self.root / RESULT_FILE)


def find_results(directory) -> List[Dict]:
    """Every result.json below directory, in path order"""
    results = []
    for path in sorted(Path(directory).rglob(RESULT_FILE)):
        try:
            with open(path, "r", encoding="utf-8") as f:
                results.append(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            logger.warning("Skipping unreadable result %s: %s", path, e)
    return results


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)
