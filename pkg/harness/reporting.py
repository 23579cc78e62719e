"""
Result Reporting
Purpose: Assemble run results into mean±std tables and render the accuracy
curves, audit histograms and partition heatmaps
Uses: pandas for tables, matplotlib for plots
"""

import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import matplotlib
import numpy as np
import pandas as pd

from errors import ArgumentError

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

logger = logging.getLogger(__name__)

AXES = ("alpha", "C", "epsilon", "gamma", "steps")
NO_PRIVACY = "none"


def _as_dict(result) -> Dict[str, Any]:
    return result if isinstance(result, dict) else result.to_dict()


def axis_value(result: Dict[str, Any], axis: str):
    """Value of the grouping axis recorded in a result's config"""
    cfg = result.get("config", {})
    if axis == "alpha":
        return cfg.get("alpha")
    if axis == "C":
        return cfg.get("client_count")
    if axis == "epsilon":
        privacy = cfg.get("privacy")
        return privacy["epsilon"] if privacy else NO_PRIVACY
    if axis == "gamma":
        return cfg.get("fmf", {}).get("gamma") if cfg.get("filter") == "fmf" else 0.0
    if axis == "steps":
        return cfg.get("sampling_steps")
    raise ArgumentError(f"axis must be one of {AXES}, got {axis!r}")


def row_label(result: Dict[str, Any]) -> str:
    """Method name, suffixed with the filter when one is active"""
    cfg = result.get("config", {})
    label = result.get("method", cfg.get("method", "unknown"))
    if cfg.get("filter") in ("fmf", "oracle"):
        label = f"{label}+{cfg['filter']}"
    return label


def format_cell(accuracies: List[float]) -> str:
    values = np.asarray(accuracies, dtype=np.float64) * 100.0
    return f"{values.mean():.2f}±{values.std(ddof=0):.2f}"


def group_results(results: Iterable, axis: str) -> Dict[str, Dict[Any, List[float]]]:
    """row label -> axis value -> pooled per-seed accuracies"""
    groups: Dict[str, Dict[Any, List[float]]] = {}
    for result in results:
        result = _as_dict(result)
        accuracies = [float(a) for a in result.get("accuracies", {}).values()]
        if not accuracies:
            logger.warning("Skipping %s result without accuracies", result.get("method"))
            continue
        value = axis_value(result, axis)
        if value is None:
            logger.warning("Skipping %s result without a %s value", result.get("method"), axis)
            continue
        groups.setdefault(row_label(result), {}).setdefault(value, []).extend(accuracies)
    return groups


def _sort_key(value):
    return (1, 0.0) if value == NO_PRIVACY else (0, float(value))


def build_table(results: Iterable, axis: str) -> pd.DataFrame:
    """Rows are methods, columns are axis values, cells are mean±std in percent"""
    groups = group_results(results, axis)
    columns = sorted({v for cells in groups.values() for v in cells}, key=_sort_key)
    rows = {
        label: [format_cell(cells[c]) if c in cells else "" for c in columns]
        for label, cells in sorted(groups.items())
    }
    table = pd.DataFrame.from_dict(rows, orient="index", columns=[str(c) for c in columns])
    table.index.name = "method"
    return table


def plot_accuracy(results: Iterable, axis: str, path) -> Optional[Path]:
    """One line per method: mean accuracy with std bars against the axis values"""
    groups = group_results(results, axis)
    if not groups:
        logger.warning("No results to plot for axis %s", axis)
        return None

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, cells in sorted(groups.items()):
        values = sorted((v for v in cells if v != NO_PRIVACY), key=_sort_key)
        if not values:
            continue
        means = [100.0 * np.mean(cells[v]) for v in values]
        stds = [100.0 * np.std(cells[v], ddof=0) for v in values]
        ax.errorbar([float(v) for v in values], means, yerr=stds, marker="o", capsize=3, label=label)
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy (%)")
    if axis in ("alpha", "epsilon"):
        ax.set_xscale("log")
    ax.legend()
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def emit_table(results: Iterable, axis: str, output_dir) -> Dict[str, Path]:
    """
    Write table_<axis>.csv and, for the epsilon, gamma and steps axes, the
    accuracy plot

    Args:
        results: RunResult objects or their dictionaries
        axis: alpha, C, epsilon, gamma or steps
        output_dir: Destination directory

    Returns:
        Mapping artifact name -> written path
    """
    if axis not in AXES:
        raise ArgumentError(f"axis must be one of {AXES}, got {axis!r}")
    results = [_as_dict(r) for r in results]
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    written: Dict[str, Path] = {}
    table = build_table(results, axis)
    csv_path = output_dir / f"table_{axis}.csv"
    table.to_csv(csv_path, encoding="utf-8")
    written["table"] = csv_path
    logger.info("Wrote %d x %d table to %s", table.shape[0], table.shape[1], csv_path)

    if axis in ("epsilon", "gamma", "steps"):
        plot = plot_accuracy(results, axis, output_dir / f"accuracy_vs_{axis}.png")
        if plot is not None:
            written["plot"] = plot
    return written


# ========== FIGURES ==========

def plot_audit_histograms(hist_files: Iterable[Union[str, Path]], path, threshold: float = 1.0) -> Optional[Path]:
    """Overlay audit_hist.csv files on a log-scale count axis"""
    hist_files = [Path(p) for p in hist_files]
    if not hist_files:
        logger.warning("No audit histograms found")
        return None

    fig, ax = plt.subplots(figsize=(6, 4))
    for hist in hist_files:
        frame = pd.read_csv(hist)
        if frame.empty:
            continue
        edges = np.append(frame["bin_low"].to_numpy(), frame["bin_high"].to_numpy()[-1])
        ax.stairs(frame["count"].to_numpy(), edges, label=hist.parent.name)
    ax.axvline(threshold, color="red", linestyle="--")
    ax.set_yscale("log")
    ax.set_xlabel("distance score")
    ax.set_ylabel("count")
    ax.legend(fontsize="small")
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_partition(matrix: np.ndarray, path) -> Path:
    """Client x class heatmap of a partition"""
    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(max(4, matrix.shape[1] * 0.5), max(3, matrix.shape[0] * 0.4)))
    image = ax.imshow(matrix, aspect="auto", cmap="viridis")
    ax.set_xlabel("class")
    ax.set_ylabel("client")
    ax.set_xticks(range(matrix.shape[1]))
    ax.set_yticks(range(matrix.shape[0]))
    fig.colorbar(image, ax=ax, label="samples")
    fig.tight_layout()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
