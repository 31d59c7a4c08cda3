"""SVG learning curves and a normalized summary table from run manifests."""

from __future__ import annotations

import csv
import glob
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import protocol  # noqa: E402
from .train import load_manifest, manifest_file, read_metrics  # noqa: E402

TAIL_FRACTION = 0.1


class EmptyReport(ValueError):
    pass


def find_manifests(pattern: str) -> list[Path]:
    """Expand a glob of manifest files or run directories."""
    out = []
    for p in sorted(glob.glob(pattern, recursive=True)):
        path = Path(p)
        if path.is_dir():
            path = path / "manifest.json"
        if path.name == "manifest.json" and path.exists():
            out.append(path)
    return out


def _series(rows: list[dict], key: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([int(r["iteration"]) for r in rows])
    y = np.array([float(r[key]) if r[key] != "" else np.nan for r in rows])
    return x, y


def tail_mean(rows: list[dict], fraction: float = TAIL_FRACTION) -> float:
    n = max(1, int(round(len(rows) * fraction)))
    return float(np.mean([float(r["per_capita_return"]) for r in rows[-n:]]))


def build_report(manifest_paths, out_dir: str | Path) -> dict:
    """Writes returns.svg, distill_kl.svg and summary.csv; returns the plotted data."""
    manifest_paths = list(manifest_paths)
    if not manifest_paths:
        raise EmptyReport("empty report: no run manifests matched")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "mixplay"

    runs = []
    for path in manifest_paths:
        man = load_manifest(path)
        runs.append((man, read_metrics(manifest_file(man, "metrics"))))

    points: dict[str, int] = {}
    fig, ax = plt.subplots(figsize=(7, 4))
    for man, rows in runs:
        x, y = _series(rows, "per_capita_return")
        ax.plot(x, y, label=man["run_id"], linewidth=1)
        points[man["run_id"]] = len(x)
    ax.set_xlabel("iteration")
    ax.set_ylabel("per-capita return")
    if len(runs) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "returns.svg", metadata={"Date": None})
    plt.close(fig)

    kl_points: dict[str, int] = {}
    fig, ax = plt.subplots(figsize=(7, 4))
    for man, rows in runs:
        events = [r for r in rows if r["distill_event"] in ("F", "R")]
        if not events:
            continue
        ax.plot(np.arange(1, len(events) + 1), [float(r["distill_kl_after"]) for r in events],
                marker=".", linewidth=1, label=man["run_id"])
        kl_points[man["run_id"]] = len(events)
    ax.set_xlabel("distillation event")
    ax.set_ylabel("KL after event")
    ax.set_yscale("symlog", linthresh=1e-6)
    fig.tight_layout()
    fig.savefig(out / "distill_kl.svg", metadata={"Date": None})
    plt.close(fig)

    rows = [protocol.MetricRow(man["method"], man["substrate"], "training", man["seed"], len(r), tail_mean(r))
            for man, r in runs]
    summary = protocol.normalize_table(rows)
    protocol.write_rows(summary, out / "summary.csv")
    return {"return_points": points, "kl_points": kl_points, "raw": rows, "summary": summary,
            "files": [out / "returns.svg", out / "distill_kl.svg", out / "summary.csv"]}


def format_table(rows: list[protocol.MetricRow]) -> str:
    lines = [f"{'substrate':<20} {'scenario':<12} {'method':<18} {'seeds':>5} {'return':>10} {'norm':>6}"]
    for r in rows:
        norm = "" if r.normalized_return is None else f"{r.normalized_return:.3f}"
        lines.append(f"{r.substrate:<20} {r.scenario:<12} {r.method:<18} {r.seed:>5} {r.focal_return:>10.4f} {norm:>6}")
    return "\n".join(lines)


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
