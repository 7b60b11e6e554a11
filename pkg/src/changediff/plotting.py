"""Figures written next to the text artifacts of each command.

Everything goes through ``matplotlib.figure.Figure`` directly, so no pyplot
state or interactive backend is involved.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from matplotlib.figure import Figure

from .metrics import SCDConfusion


def plot_loss_curves(history: Sequence[dict], path) -> None:
    """Training losses against step, one panel per logged term."""
    steps = [h["step"] for h in history]
    fig = Figure(figsize=(9, 3), layout="constrained")
    axes = fig.subplots(1, 3)
    for ax, key in zip(axes, ("l_ldm", "l_rat", "l_spa")):
        values = np.array([h[key] for h in history], dtype=float)
        ax.plot(steps, values, lw=0.8, color="0.6")
        if len(values) >= 10:
            w = max(len(values) // 20, 2)
            smooth = np.convolve(values, np.ones(w) / w, mode="valid")
            ax.plot(steps[w - 1:], smooth, lw=1.5, color="C0")
        ax.set_title(key)
        ax.set_xlabel("step")
    fig.savefig(path, dpi=100)


def plot_confusion(conf: SCDConfusion, class_names: Sequence[str], path) -> None:
    labels = ["no change"] + [f"to {n}" for n in class_names]
    q = conf.Q.astype(float)
    rows = q.sum(axis=1, keepdims=True)
    frac = np.divide(q, rows, out=np.zeros_like(q), where=rows > 0)
    fig = Figure(figsize=(1.2 * len(labels) + 2, 1.1 * len(labels) + 1.5), layout="constrained")
    ax = fig.subplots()
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    for i in range(q.shape[0]):
        for j in range(q.shape[1]):
            ax.text(j, i, f"{int(q[i, j])}", ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("prediction")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, label="row fraction")
    fig.savefig(path, dpi=100)


def plot_metrics(metrics: dict[str, tuple[float, str]], path) -> None:
    names = list(metrics)
    values = [metrics[n][0] for n in names]
    colors = ["C0" if metrics[n][1] == "ok" else "C3" for n in names]
    fig = Figure(figsize=(8, 3), layout="constrained")
    ax = fig.subplots()
    ax.bar(names, values, color=colors)
    ax.set_ylim(min(0.0, min(values)), max(1.0, max(values)))
    ax.tick_params(axis="x", rotation=45)
    ax.set_title("red bars: degenerate denominators")
    fig.savefig(path, dpi=100)


def plot_sequences(sessions: Sequence[Sequence[tuple[np.ndarray, np.ndarray]]], path, max_sessions: int = 4) -> None:
    """Grid of color maps over images; each session is a (color map, image) list in time order."""
    sessions = list(sessions)[:max_sessions]
    if not sessions:
        return
    cols = max(len(s) for s in sessions)
    fig = Figure(figsize=(1.6 * cols, 3.2 * len(sessions)), layout="constrained")
    axes = np.atleast_2d(fig.subplots(2 * len(sessions), cols, squeeze=False))
    for ax in axes.ravel():
        ax.set_axis_off()
    for r, seq in enumerate(sessions):
        for k, (cmap, image) in enumerate(seq):
            axes[2 * r, k].imshow(cmap, interpolation="nearest")
            axes[2 * r, k].set_title(f"t{k}", fontsize=8)
            axes[2 * r + 1, k].imshow(image, interpolation="nearest")
    fig.savefig(path, dpi=100)
