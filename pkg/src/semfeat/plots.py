"""Match overlays and trajectory plots. Every PNG gets a sidecar JSON describing what was drawn."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _sidecar(png: Path, payload: dict) -> Path:
    side = png.with_suffix(".json")
    side.write_text(json.dumps(payload, indent=2) + "\n")
    return side


def plot_matches(path, image_a, image_b, xy_a, xy_b, correct, title: str | None = None) -> Path:
    """Side-by-side views with one segment per match: green correct, red incorrect."""
    path = Path(path)
    image_a, image_b = np.asarray(image_a), np.asarray(image_b)
    xy_a, xy_b = np.asarray(xy_a, float).reshape(-1, 2), np.asarray(xy_b, float).reshape(-1, 2)
    correct = np.asarray(correct, bool).ravel()
    w = image_a.shape[1]
    canvas = np.concatenate([image_a, image_b], axis=1)
    fig, ax = plt.subplots(figsize=(8, 4), dpi=100)
    ax.imshow(np.clip(canvas, 0, 1), interpolation="nearest")
    segments = []
    for pa, pb, ok in zip(xy_a, xy_b, correct):
        color = "green" if ok else "red"
        ax.plot([pa[0], pb[0] + w], [pa[1], pb[1]], color=color, linewidth=0.8)
        segments.append({"a": [float(pa[0]), float(pa[1])], "b": [float(pb[0]), float(pb[1])], "color": color})
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    _sidecar(path, {"kind": "matches", "segments": segments, "n_green": int(correct.sum()), "n_red": int((~correct).sum())})
    return path


def plot_trajectories(path, estimated: np.ndarray, reference: np.ndarray, rmse: float | None = None) -> Path:
    path = Path(path)
    est, ref = np.asarray(estimated, float), np.asarray(reference, float)
    fig, ax = plt.subplots(figsize=(5, 5), dpi=100)
    ax.plot(ref[:, 0], ref[:, 1], "k-", label="reference")
    ax.plot(est[:, 0], est[:, 1], "b--", label="estimated (aligned)")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    if rmse is not None:
        ax.set_title(f"RMSE {rmse:.3f} m")
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    _sidecar(path, {"kind": "trajectory", "n_estimated": len(est), "n_reference": len(ref), "rmse": rmse})
    return path
