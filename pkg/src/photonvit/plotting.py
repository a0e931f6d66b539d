"""PNG figures written next to the CSV reports (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_matmul_errors(path, err_var, analytic_var):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    a = np.ravel(analytic_var)
    e = np.ravel(err_var)
    ax.loglog(a, e, ".", ms=3, alpha=0.6)
    lo, hi = max(min(a.min(), e.min()), 1e-30), max(a.max(), e.max())
    ax.plot([lo, hi], [lo, hi], "k--", lw=1)
    ax.set_xlabel("analytic MAC variance")
    ax.set_ylabel("empirical error variance")
    ax.set_title("per-element output error")
    return _save(fig, path)


def plot_accuracy_sweep(path, sigmas, series):
    """``series`` maps a configuration label to mean accuracy per sigma."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, values in series.items():
        ax.plot(sigmas, values, marker="o", label=label)
    ax.set_xlabel("sigma_fab")
    ax.set_ylabel("mean top-1 accuracy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_training(path, history):
    epochs = [m.epoch for m in history]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.plot(epochs, [m.loss for m in history], label="loss")
    a1.plot(epochs, [m.ce for m in history], label="CE", ls="--")
    a1.set_xlabel("epoch")
    a1.legend(fontsize=8)
    a2.plot(epochs, [m.clean_acc for m in history], label="clean")
    noisy = [m.noisy_acc_mean for m in history]
    if not all(np.isnan(noisy)):
        a2.plot(epochs, noisy, label="noisy mean")
    a2.set_xlabel("epoch")
    a2.set_ylabel("accuracy")
    a2.legend(fontsize=8)
    return _save(fig, path)


def plot_eval(path, per_trial):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(np.arange(len(per_trial)), per_trial)
    ax.axhline(np.mean(per_trial), color="k", ls="--", lw=1)
    ax.set_xlabel("noise trial")
    ax.set_ylabel("top-1 accuracy")
    return _save(fig, path)


def plot_energy(path, reports):
    """Stacked per-component energy and latency for each model, plus the first model's energy pie."""
    names = list(reports)
    comps = list(next(iter(reports.values())).energy_pj)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
    for ax, attr, unit, scale in ((axes[0], "energy_pj", "energy (uJ)", 1e-6),
                                  (axes[1], "latency_ns", "latency (us)", 1e-3)):
        bottom = np.zeros(len(names))
        for comp in comps:
            vals = np.array([getattr(reports[n], attr)[comp] * scale for n in names])
            ax.bar(names, vals, bottom=bottom, label=comp)
            bottom += vals
        ax.set_ylabel(unit)
        ax.set_yscale("log")
    axes[0].legend(fontsize=7)
    first = reports[names[0]]
    shares = {c: v for c, v in first.energy_pj.items() if v > 0}
    axes[2].pie(list(shares.values()), labels=list(shares), autopct="%1.0f%%", textprops={"fontsize": 7})
    axes[2].set_title(f"{names[0]} energy")
    return _save(fig, path)


def plot_variation_map(path, grid, cell_mm):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ny, nx = grid.shape
    im = ax.imshow(grid, origin="lower", extent=(0, nx * cell_mm, 0, ny * cell_mm), cmap="coolwarm")
    fig.colorbar(im, ax=ax, label="resonance shift (nm)")
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    return _save(fig, path)


def plot_lut(path, levels, delta_plus):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(levels, delta_plus, ".", ms=2)
    ax.set_xlabel("level")
    ax.set_ylabel("detuning (nm)")
    return _save(fig, path)
