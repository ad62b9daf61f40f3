"""Figure rendering for the report paths (written next to the CSV/JSON)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_attention_heatmap(weights: np.ndarray, tags: list[str], meta: dict, out_path) -> None:
    """Post-bias weight rows as a heatmap; a line marks the task-key start."""
    fig, ax = plt.subplots(figsize=(7, 4))
    im = ax.imshow(weights, aspect="auto", cmap="viridis", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="attention weight")
    try:
        task_start = tags.index("task")
        ax.axvline(task_start - 0.5, color="red", linewidth=1.0)
    except ValueError:
        pass
    ax.set_xlabel("key index (red line: first task key)")
    ax.set_ylabel("task query row")
    title = " ".join(f"{k}={v}" for k, v in meta.items())
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_dispersion_curves(rows, out_path) -> None:
    """Mean task mass and mean nu vs window count, averaged over heads."""
    by_w: dict[int, list[tuple[float, float]]] = {}
    for W, _layer, _head, mass, nu in rows:
        by_w.setdefault(W, []).append((mass, nu))
    ws = sorted(by_w)
    mass = [float(np.mean([m for m, _ in by_w[w]])) for w in ws]
    nus = [float(np.mean([n for _, n in by_w[w]])) for w in ws]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ws, mass, "o-", label="mean task mass")
    ax.plot(ws, nus, "s--", label="mean nu (window mass)")
    ax.set_xlabel("windows W")
    ax.set_ylabel("attention mass")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_sweep_curves(rows, out_path) -> None:
    """Mean score with a std band per W, across bias values b."""
    by_w: dict[int, list[tuple[float, float, float]]] = {}
    for b, W, mean, std in rows:
        by_w.setdefault(W, []).append((b, mean, std))
    fig, ax = plt.subplots(figsize=(6, 4))
    for w in sorted(by_w):
        pts = sorted(by_w[w])
        bs = [p[0] for p in pts]
        means = np.array([p[1] for p in pts])
        stds = np.array([p[2] for p in pts])
        ax.plot(bs, means, "o-", label=f"W={w}")
        ax.fill_between(bs, means - stds, means + stds, alpha=0.2)
    ax.set_xlabel("bias b")
    ax.set_ylabel("score (%)")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def save_eval_scores(report, out_path) -> None:
    """Per-seed scores with the mean +/- std band."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(report.scores))
    ax.plot(xs, report.scores, "o", label="per-seed score")
    ax.axhline(report.mean, color="black", linewidth=1.0, label=f"mean {report.summary}")
    ax.axhspan(report.mean - report.std, report.mean + report.std, alpha=0.15, color="gray")
    ax.set_xlabel("seed index")
    ax.set_ylabel(f"score (%)  [{report.task}]")
    ax.set_ylim(-2, 102)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
