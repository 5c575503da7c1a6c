"""Figure and CSV rendering downstream of the machine-readable reports.

Run/ablation/sweep reports all flatten into one metrics CSV; figures are
written next to it (metric bars for runs and ablations, metric-vs-axis
curves with std bands for sweeps, plus per-client loss traces when present).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import METRIC_NAMES


def _summary_rows(label: str, report: dict, extra: dict | None = None) -> list[dict]:
    rows = []
    for r in report["repeats"]:
        row = {"variant": label, "repeat": r["repeat"], "seed": r["seed"], "kind": "repeat"}
        row.update({m: r["metrics"][m] for m in METRIC_NAMES})
        row.update(extra or {})
        rows.append(row)
    row = {"variant": label, "repeat": "", "seed": "", "kind": "mean"}
    row.update({m: report["summary"][m]["mean"] for m in METRIC_NAMES})
    row.update(extra or {})
    rows.append(row)
    row = {"variant": label, "repeat": "", "seed": "", "kind": "std"}
    row.update({m: report["summary"][m]["std"] for m in METRIC_NAMES})
    row.update(extra or {})
    rows.append(row)
    return rows


def _collect_rows(report: dict) -> list[dict]:
    kind = report.get("kind")
    if kind == "run":
        return _summary_rows("run", report)
    if kind == "ablation":
        rows = []
        for name, sub in report["variants"].items():
            rows.extend(_summary_rows(name, sub))
        return rows
    if kind == "sweep":
        rows = []
        for point in report["points"]:
            rows.extend(
                _summary_rows(
                    f"{report['axis']}={point['value']}",
                    point["report"],
                    extra={"axis_value": point["value"]},
                )
            )
        return rows
    raise ValueError(f"cannot render report of kind {kind!r}")


def write_metrics_csv(report: dict, path: Path) -> Path:
    rows = _collect_rows(report)
    fields = ["variant", "kind", "repeat", "seed", *METRIC_NAMES]
    if any("axis_value" in r for r in rows):
        fields.append("axis_value")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _bar_figure(report: dict, variants: dict[str, dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.8 / len(variants)
    for vi, (name, sub) in enumerate(variants.items()):
        means = [sub["summary"][m]["mean"] for m in METRIC_NAMES]
        stds = [sub["summary"][m]["std"] for m in METRIC_NAMES]
        xs = [i + vi * width for i in range(len(METRIC_NAMES))]
        ax.bar(xs, means, width=width, yerr=stds, capsize=3, label=name)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(METRIC_NAMES))])
    ax.set_xticklabels(METRIC_NAMES, rotation=15)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _sweep_figure(report: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    values = [p["value"] for p in report["points"]]
    for metric in METRIC_NAMES:
        means = [p["report"]["summary"][metric]["mean"] for p in report["points"]]
        stds = [p["report"]["summary"][metric]["std"] for p in report["points"]]
        ax.plot(values, means, marker="o", label=metric)
        ax.fill_between(
            values,
            [m - s for m, s in zip(means, stds)],
            [m + s for m, s in zip(means, stds)],
            alpha=0.15,
        )
    ax.set_xlabel(report["axis"])
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _loss_figure(run_report: dict, path: Path) -> Path | None:
    traces = run_report["repeats"][0].get("loss_traces") or {}
    if not any(traces.values()):
        return None
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for cid in sorted(traces, key=int):
        if traces[cid]:
            ax.plot(traces[cid], label=f"client {cid}", alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("adaptation loss")
    if len(traces) <= 12:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_report(report: dict, out_dir) -> list[Path]:
    """Write the CSV and every applicable figure; returns the paths created."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_metrics_csv(report, out_dir / "metrics.csv")]
    kind = report.get("kind")
    if kind == "run":
        written.append(_bar_figure(report, {"run": report}, out_dir / "metrics.png"))
        loss = _loss_figure(report, out_dir / "loss_traces.png")
        if loss:
            written.append(loss)
    elif kind == "ablation":
        written.append(_bar_figure(report, report["variants"], out_dir / "ablation.png"))
        loss = _loss_figure(report["variants"]["full"], out_dir / "loss_traces.png")
        if loss:
            written.append(loss)
    elif kind == "sweep":
        written.append(_sweep_figure(report, out_dir / "sweep.png"))
    return written
