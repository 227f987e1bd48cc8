"""
Run ledger: one directory per run holding the config, every artifact and its
content hash, logs, metrics, reports and plots.

    <run>/config.json
    <run>/artifacts/...            data, PCA, codec, caches, checkpoints, probe
    <run>/artifacts/hashes.json    sha256 of each recorded artifact
    <run>/log.ndjson               one JSON object per training log row
    <run>/metrics.json
    <run>/reports/  <run>/plots/
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from .config import ExperimentConfig
from .exceptions import DependencyError, FingerprintMismatchError
from .utils import PathLike, dump_json, read_json, sha256_file, write_json

logger = logging.getLogger(__name__)

RUN_ROOT_ENV = "VIDSEM_RUN_ROOT"
DEFAULT_RUN_ROOT = "runs"


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, DEFAULT_RUN_ROOT))


def resolve_run_dir(out: Optional[PathLike], name: str = "default") -> Path:
    """An explicit --out wins; otherwise <VIDSEM_RUN_ROOT>/<name>."""
    return Path(out) if out else default_run_root() / name


class RunLedger:
    def __init__(self, root: PathLike):
        self.root = Path(root)

    # Layout -----------------------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def artifacts(self) -> Path:
        return self.root / "artifacts"

    @property
    def data_dir(self) -> Path:
        return self.artifacts / "data"

    @property
    def manifest_path(self) -> Path:
        return self.data_dir / "manifest.json"

    @property
    def pca_path(self) -> Path:
        return self.artifacts / "pca.npz"

    @property
    def codec_path(self) -> Path:
        return self.artifacts / "codec.json"

    def feature_dir(self, kind: str) -> Path:
        """kind: "gt" for encoder features, "pred" for cached Stage-1 rollouts."""
        return self.artifacts / "features" / kind

    def feature_path(self, kind: str, clip_index: int) -> Path:
        return self.feature_dir(kind) / f"clip_{clip_index:05d}.vsf"

    @property
    def stage1_path(self) -> Path:
        return self.artifacts / "stage1.pt"

    def stage2_path(self, arm: str = "full") -> Path:
        return self.artifacts / "stage2" / f"{arm}.pt"

    @property
    def probe_path(self) -> Path:
        return self.artifacts / "probe.json"

    def samples_path(self, arm: str = "full") -> Path:
        return self.artifacts / "samples" / f"{arm}.npz"

    @property
    def hashes_path(self) -> Path:
        return self.artifacts / "hashes.json"

    @property
    def log_path(self) -> Path:
        return self.root / "log.ndjson"

    @property
    def metrics_path(self) -> Path:
        return self.root / "metrics.json"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def plots_dir(self) -> Path:
        return self.root / "plots"

    # Config -----------------------------------------------------------------

    def write_config(self, config: ExperimentConfig) -> None:
        write_json(self.config_path, config.to_dict())

    def load_config(self) -> ExperimentConfig:
        self.require(self.config_path, "generate-data")
        return ExperimentConfig.from_dict(read_json(self.config_path))

    # Artifacts --------------------------------------------------------------

    def _key(self, path: PathLike) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def _hashes(self) -> Dict[str, str]:
        return read_json(self.hashes_path) if self.hashes_path.exists() else {}

    def require(self, path: PathLike, stage: str) -> Path:
        """Raise DependencyError naming the missing artifact and the stage that builds it."""
        path = Path(path)
        if not path.exists():
            raise DependencyError(f"missing artifact {path}; run `vidsem {stage}` first")
        return path

    def record(self, *paths: PathLike) -> None:
        hashes = self._hashes()
        for path in paths:
            hashes[self._key(path)] = sha256_file(path)
        write_json(self.hashes_path, hashes)

    def forget(self, prefix: str) -> None:
        """Drop recorded hashes under a relative prefix (a stage being rebuilt)."""
        hashes = {k: v for k, v in self._hashes().items() if not k.startswith(prefix)}
        write_json(self.hashes_path, hashes)

    def fingerprint(self, path: PathLike) -> str:
        key = self._key(path)
        hashes = self._hashes()
        if key not in hashes:
            raise DependencyError(f"artifact {key} has no recorded hash; rebuild it")
        return hashes[key]

    def verify(self, path: PathLike, stage: str) -> str:
        """Check an upstream artifact exists and still matches its recorded hash."""
        self.require(path, stage)
        expected = self.fingerprint(path)
        actual = sha256_file(path)
        if actual != expected:
            raise FingerprintMismatchError(
                f"{self._key(path)} changed since it was recorded; rerun `vidsem {stage}`"
            )
        return actual

    # Logs and metrics -------------------------------------------------------

    def append_log(self, row: Dict[str, Any]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def append_logs(self, rows: Iterable[Dict[str, Any]]) -> None:
        for row in rows:
            self.append_log(row)

    def read_log(self) -> List[Dict[str, Any]]:
        if not self.log_path.exists():
            return []
        with open(self.log_path) as f:
            return [json.loads(line) for line in f if line.strip()]

    def clear_log(self, stage: str, arm: Optional[str] = None) -> None:
        """Remove earlier rows of a stage (and arm) so a rerun does not duplicate them."""
        rows = [
            r for r in self.read_log()
            if not (r.get("stage") == stage and (arm is None or r.get("arm") == arm))
        ]
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")

    def read_metrics(self) -> Dict[str, Any]:
        return read_json(self.metrics_path) if self.metrics_path.exists() else {}

    def update_metrics(self, key: str, value: Any) -> None:
        metrics = self.read_metrics()
        metrics[key] = value
        write_json(self.metrics_path, metrics)

    def write_report(self, name: str, report: Any) -> Path:
        path = self.reports_dir / f"{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(dump_json(report))
        return path


__all__ = ["RunLedger", "default_run_root", "resolve_run_dir", "RUN_ROOT_ENV"]
