"""Output writers: 17-significant-digit CSV, run manifests, and the report
figures rendered next to each delimited file.

Numeric CSV fields use %.17g so doubles round-trip exactly; manifests
record the command, a key-order-independent digest of the configuration,
the seed, the tool version, timestamps, and the produced files.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

FMT = "%.17g"


def config_digest(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def write_manifest(
    path: Path,
    command: str,
    config: dict,
    seed,
    outputs: list[str],
    started_at: str,
    extra: dict | None = None,
) -> None:
    manifest = {
        "command": command,
        "config_digest": config_digest(config),
        "seed": seed,
        "version": _tool_version(),
        "started_at": started_at,
        "finished_at": utcnow(),
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _tool_version() -> str:
    from . import __version__

    return __version__


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [FMT % v if isinstance(v, (int, float, np.floating)) else v for v in row]
            )


def figure_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".png")


def render_profile_figure(profile, path: Path) -> None:
    t = profile.grid.nodes
    fig, axes = plt.subplots(3, 1, figsize=(7.0, 8.0), sharex=True)
    axes[0].plot(t, profile.theta, lw=1.6)
    axes[0].set_ylabel(r"$\theta(t)$")
    axes[1].plot(t, profile.lambda_coeff, lw=1.6, color="tab:orange")
    axes[1].set_ylabel(r"$\lambda(t)$")
    axes[2].plot(t, profile.Lambda, lw=1.6, color="tab:green")
    axes[2].set_ylabel(r"$\Lambda(t)$")
    axes[2].set_xlabel("t")
    bad = ~profile.validity
    if np.any(bad):
        for ax in axes:
            ax.fill_between(t, 0, 1, where=bad, alpha=0.15, color="red",
                            transform=ax.get_xaxis_transform())
    fig.suptitle(f"equilibrium profile ({profile.family.value})")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_verification_figure(report, path: Path) -> None:
    rows = report.rows
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    sc = ax.scatter(rows[:, 0], rows[:, 2], c=rows[:, 3], s=14, cmap="coolwarm")
    fig.colorbar(sc, ax=ax, label="operator value")
    ax.set_xlabel("t")
    ax.set_ylabel("control u")
    status = "pass" if report.passed else "FAIL"
    ax.set_title(f"spike-variation check: {status} (max {report.max_value:.3e})")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_samples_figure(samples: np.ndarray, estimate: float, se: float, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.hist(samples, bins=120, density=True, alpha=0.8)
    ax.axvline(float(np.mean(samples)), color="k", lw=1.0, ls="--")
    ax.set_xlabel("terminal wealth")
    ax.set_ylabel("density")
    ax.set_title(f"terminal law; J = {estimate:.6g} (se {se:.2g})")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_trace_figure(trace, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.semilogy(np.arange(1, len(trace) + 1), trace, marker="o", lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(r"$\sup_t |\theta_{k+1} - \theta_k|$")
    ax.set_title("policy-iteration contraction")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_diagnostics_figure(report: dict, path: Path) -> None:
    keys = ["holder_half_ratio", "lipschitz_in_law_ratio", "flow_property_w2_defect"]
    vals = [report[k] for k in keys]
    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    ax.bar(range(len(keys)), vals, color=["tab:blue", "tab:orange", "tab:green"])
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(["Hölder(1/2)", "Lipschitz", "flow defect"], rotation=10)
    ax.set_yscale("log")
    ax.set_title("flow-map diagnostics")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
