"""Figures written next to the text/jsonl reports (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_training_curves(steps: list[dict], path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [s["step"] for s in steps]
    for key in ("total", "l_r", "l_m", "l_s", "l_c"):
        y = [s[key] for s in steps]
        if any(v != 0 for v in y):
            ax.plot(x, y, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_step_chamfer(model_cd, baseline_cd, path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = list(range(1, len(model_cd) + 1))
    ax.plot(steps, model_cd, marker="o", label="model")
    ax.plot(steps, baseline_cd, marker="s", label="copy-last")
    ax.set_xlabel("prediction step")
    ax.set_ylabel("chamfer distance [m^2]")
    ax.set_xticks(steps)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
