"""Report figures written next to the CSV outputs (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
    "savefig.dpi": 120,
    # keep files byte-stable across runs
    "svg.hashsalt": "emaq",
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_sweep(rows, path, optimal=None):
    """Mean return against N with a one-std band and the behavior baseline."""
    n, mean, std, base = (np.array(c, dtype=float) for c in zip(*rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(n, mean, "o-", color="tab:green", label="EMaQ")
        ax.fill_between(n, mean - std, mean + std, color="tab:green", alpha=0.2, lw=0)
        ax.axhline(base[0], color="0.4", ls="--", label="behavior")
        if optimal is not None:
            ax.axhline(optimal, color="k", ls=":", label="optimal")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("N (samples per state)")
        ax.set_ylabel("return")
        ax.legend()
        _save(fig, path)


def plot_training(rows, path):
    """Mean loss and evaluation return against update step."""
    steps = np.array([r["step"] for r in rows], dtype=float)
    loss = np.array([r["mean_loss"] for r in rows], dtype=float)
    ret = np.array([r["eval_mean"] for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        a1.plot(steps[1:], loss[1:], color="tab:blue")
        a1.set_yscale("log")
        a1.set_xlabel("update")
        a1.set_ylabel("mean TD loss")
        a2.plot(steps, ret, "o-", color="tab:green")
        a2.set_xlabel("update")
        a2.set_ylabel("eval return")
        _save(fig, path)


def plot_online(rows, path, random_return=None):
    steps = np.array([r["env_steps"] for r in rows], dtype=float)
    ret = np.array([r["eval_mean"] for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, ret, color="tab:green", label="test policy")
        if random_return is not None:
            ax.axhline(random_return, color="0.4", ls="--", label="random")
        ax.set_xlabel("environment steps")
        ax.set_ylabel("eval return")
        ax.legend()
        _save(fig, path)


def plot_bounds(rows, path):
    """Suboptimality against both forms of the bound, per N."""
    n, lhs, rhs_e, rhs_m, _ = (np.array(c, dtype=float) for c in zip(*rows))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(n, lhs, "o-", label="sup |Q* - Q_N|")
        ax.plot(n, rhs_e, "s--", label="bound (expectation)")
        ax.plot(n, rhs_m, "^:", label="bound (max)")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("N")
        ax.legend()
        _save(fig, path)


def plot_series(x, series: dict, path, xlabel="", ylabel=""):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, y in series.items():
            ax.plot(x, y, lw=0.8, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        _save(fig, path)
