"""Figures written next to the CSV results. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_trajectory", "plot_profiles", "plot_comparison", "plot_spectrum", "plot_sweep"]

_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_trajectory(traj, delta: float, path) -> Path:
    """Norm traces on a log scale with the ``exp(-delta t)`` reference, plus ``u`` and ``z``."""
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    t = traj.t
    for label, y in (("H0", traj.h0), ("H1", traj.h1), ("state", traj.composite)):
        ax0.semilogy(t, np.maximum(y, 1e-300), label=label)
    ref = traj.composite[0] * np.exp(-delta * t)
    ax0.semilogy(t, ref, "k--", lw=0.8, label=r"$e^{-\delta t}$")
    if traj.V is not None:
        ax0.semilogy(t, np.maximum(traj.weighted_V(delta), 1e-300), ":", label=r"$e^{2\delta t}V$")
    ax0.set_ylabel("norm")
    ax0.set_title(f"fitted rate {traj.rate:.3f} (delta = {delta:g})")
    ax0.legend(fontsize=8)
    ax1.plot(t, traj.u, label="u")
    ax1.plot(t, traj.z, label="z")
    ax1.set_xlabel("t")
    ax1.legend(fontsize=8)
    return _save(fig, path)


def plot_profiles(traj, path, n_snap: int = 6) -> Path:
    """Snapshots of each component profile."""
    N = traj.profiles.shape[1]
    fig, axes = plt.subplots(1, N, figsize=(3.2 * N, 3), squeeze=False)
    idx = np.unique(np.linspace(0, traj.t.size - 1, n_snap).astype(int))
    for j in range(N):
        ax = axes[0, j]
        for i in idx:
            ax.plot(traj.grid, traj.profiles[i, j], label=f"t={traj.t[i]:.2g}")
        ax.set_title(f"y^{j + 1}")
        ax.set_xlabel("x")
    axes[0, 0].legend(fontsize=7)
    return _save(fig, path)


def plot_comparison(traj, fd, path) -> Path:
    """Spectral against finite-difference output and ``H0`` norm."""
    fig, (ax0, ax1) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax0.plot(traj.t, traj.z, label="spectral")
    ax0.plot(fd.t, fd.z, "--", label=f"finite difference (M={fd.M})")
    ax0.set_ylabel("z")
    ax0.legend(fontsize=8)
    ax1.semilogy(traj.t, traj.h0, label="spectral")
    ax1.semilogy(fd.t, fd.h0, "--", label="finite difference")
    ax1.set_ylabel("H0 norm")
    ax1.set_xlabel("t")
    ax1.legend(fontsize=8)
    return _save(fig, path)


def plot_spectrum(rows, path) -> Path:
    """Eigenvalues and coefficient magnitudes against ``k``; ``rows`` are dicts."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    chains = sorted({r["chain"] for r in rows})
    for ch in chains:
        sub = [r for r in rows if r["chain"] == ch]
        k = [r["k"] for r in sub]
        ax0.plot(k, [r["lambda"] for r in sub], "o", ms=3, label=f"chain {ch}")
        ax1.semilogy(k, [max(abs(r["beta"]), 1e-300) for r in sub], "o", ms=3, label=f"|beta| chain {ch}")
        ax1.semilogy(k, [max(abs(r["c"]), 1e-300) for r in sub], "x", ms=3, label=f"|c| chain {ch}")
    ax0.set_xlabel("k")
    ax0.set_ylabel("lambda")
    ax1.set_xlabel("k")
    ax0.legend(fontsize=7)
    ax1.legend(fontsize=7)
    return _save(fig, path)


def plot_sweep(rows, axes_names, path) -> Path:
    """Fitted rate per cell, failed cells marked at zero."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    labels = [", ".join(f"{a}={r[a]}" for a in axes_names) or "base" for r in rows]
    rates = [r["rate"] if isinstance(r.get("rate"), float) and np.isfinite(r["rate"]) else 0.0 for r in rows]
    colors = ["tab:green" if r["status"] == "ok" else "tab:red" for r in rows]
    ax.bar(range(len(rows)), rates, color=colors)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("fitted rate")
    return _save(fig, path)
