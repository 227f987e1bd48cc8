"""
Training and evaluation curves rendered from a run ledger's log.ndjson.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .ledger import RunLedger  # noqa: E402

logger = logging.getLogger(__name__)

# (figure name, log stage, y field, y label, log-scale y)
FIGURES: Tuple[Tuple[str, str, str, str, bool], ...] = (
    ("stage1_loss", "stage1", "loss", "Smooth L1", True),
    ("stage2_loss", "stage2", "loss_ema", "diffusion loss (EMA)", True),
    ("eval_ffd", "eval", "ffd", "FFD", False),
    ("eval_miou", "eval", "miou_all", "probe mIoU (all classes)", False),
)


def collect_series(rows: List[dict], stage: str, field: str) -> Dict[str, Tuple[List[int], List[float]]]:
    """Group (step, value) pairs by arm; rows without the field are skipped."""
    series: Dict[str, Tuple[List[int], List[float]]] = defaultdict(lambda: ([], []))
    for row in rows:
        if row.get("stage") != stage or row.get(field) is None:
            continue
        steps, values = series[row.get("arm", stage)]
        steps.append(int(row["step"]))
        values.append(float(row[field]))
    return {arm: series[arm] for arm in sorted(series)}


def plot_series(series: Dict[str, Tuple[List[int], List[float]]], ylabel: str, path: Path,
                log_y: bool = False) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for arm, (steps, values) in series.items():
        order = sorted(range(len(steps)), key=steps.__getitem__)
        ax.plot([steps[i] for i in order], [values[i] for i in order], label=arm, linewidth=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if log_y and all(v > 0 for _, values in series.values() for v in values):
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    # No Software metadata: replots of an unchanged ledger are byte-identical.
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot(ledger: RunLedger) -> List[Path]:
    rows = ledger.read_log()
    if not rows:
        logger.warning(f"No log rows in {ledger.log_path}; nothing to plot")
        return []
    written = []
    for name, stage, field, ylabel, log_y in FIGURES:
        series = collect_series(rows, stage, field)
        if not series:
            logger.debug(f"No '{field}' series for stage '{stage}'; skipping {name}")
            continue
        written.append(plot_series(series, ylabel, ledger.plots_dir / f"{name}.png", log_y))
    logger.info(f"Wrote {len(written)} plot(s) to {ledger.plots_dir}")
    return written


__all__ = ["plot", "plot_series", "collect_series"]
