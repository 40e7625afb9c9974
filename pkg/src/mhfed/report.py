"""Report rendering: CSV tables and matplotlib figures for runs and sweeps."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .harness import RunMetrics


def _domains(metrics: RunMetrics) -> list[str]:
    return [r.domain for r in metrics.finals]


def write_val_curves(metrics: RunMetrics, out_path) -> Path:
    """Validation MSE per epoch, one line per domain."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for domain in _domains(metrics):
        recs = [r for r in metrics.epochs if r.domain == domain]
        ax.plot([r.epoch for r in recs], [r.val_mse for r in recs],
                marker=".", label=domain)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation MSE")
    ax.set_title(f"{metrics.variant} seed={metrics.seed}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def write_ablation_report(results: dict[str, RunMetrics], out_dir) -> tuple[Path, Path]:
    """Variant-by-domain test MSE as ablation.csv plus a bar-chart figure."""
    out_dir = Path(out_dir)
    variants = sorted(results)
    domains = _domains(results[variants[0]])
    table = {
        variant: {r.domain: r.test_mse for r in results[variant].finals}
        for variant in variants
    }

    csv_path = out_dir / "ablation.csv"
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["variant"] + domains + ["mean"])
        for variant in variants:
            row = [table[variant][d] for d in domains]
            writer.writerow([variant] + [repr(v) for v in row] + [repr(sum(row) / len(row))])

    fig, axes = plt.subplots(
        (len(domains) + 1) // 2, 2, figsize=(10, 3.2 * ((len(domains) + 1) // 2)),
        squeeze=False,
    )
    for k, domain in enumerate(domains):
        ax = axes[k // 2][k % 2]
        ax.bar(range(len(variants)), [table[v][domain] for v in variants])
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=45, ha="right", fontsize=8)
        ax.set_title(f"{domain} test MSE")
    for k in range(len(domains), axes.size):
        axes[k // 2][k % 2].axis("off")
    fig.tight_layout()
    fig_path = out_dir / "ablation.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return csv_path, fig_path


def write_sweep_report(results: list[tuple[float, RunMetrics]], out_dir) -> tuple[Path, Path]:
    """Blending-fraction sweep: sweep_alpha.csv plus test MSE vs alpha lines."""
    out_dir = Path(out_dir)
    alphas = [alpha for alpha, _ in results]
    domains = _domains(results[0][1])
    rows = {
        alpha: {r.domain: r.test_mse for r in metrics.finals}
        for alpha, metrics in results
    }

    csv_path = out_dir / "sweep_alpha.csv"
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["alpha"] + domains + ["mean"])
        for alpha in alphas:
            row = [rows[alpha][d] for d in domains]
            writer.writerow([repr(alpha)] + [repr(v) for v in row] + [repr(sum(row) / len(row))])

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for domain in domains:
        ax.plot(alphas, [rows[a][domain] for a in alphas], marker="o", label=domain)
    ax.plot(alphas, [sum(rows[a].values()) / len(domains) for a in alphas],
            linestyle="--", color="black", label="mean")
    ax.set_xlabel("blending fraction alpha")
    ax.set_ylabel("test MSE")
    ax.legend()
    fig.tight_layout()
    fig_path = out_dir / "sweep_alpha.png"
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return csv_path, fig_path
