"""Static SVG figures for the analysis CSVs. Requires matplotlib."""

from __future__ import annotations

from collections import defaultdict
from typing import Sequence

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_marginal(path, reports) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rep in reports:
        if rep.bucket == "all":
            continue
        steps = np.arange(1, len(rep.delta_ce) + 1)
        ax.plot(steps, rep.delta_ce, marker="o", label=f"{rep.bucket} (n={rep.count})")
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("step i")
    ax.set_ylabel("mean CE_{i-1} - CE_i")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_difficulty(path, records) -> None:
    plt = _pyplot()
    by_k = defaultdict(list)
    for r in records:
        by_k[r.khat].append(r.l_t)
    ks = sorted(by_k)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.boxplot([by_k[k] for k in ks], labels=[str(k) for k in ks], showfliers=False)
    ax.set_xlabel("executed additional steps")
    ax.set_ylabel("step-0 NLL")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_counterfactual(path, rows: Sequence) -> None:
    plt = _pyplot()
    subsets = ("easy", "hard")
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5), sharey=True)
    for ax, name in zip(axes, subsets):
        sel = sorted((r for r in rows if r.subset == name), key=lambda r: r.alpha)
        ax.plot([r.avg_steps for r in sel], [r.delta_loss for r in sel], marker="o")
        for r in sel:
            ax.annotate(f"{r.alpha:g}", (r.avg_steps, r.delta_loss), fontsize=7)
        ax.axhline(0.0, color="grey", lw=0.8)
        ax.set_title(name)
        ax.set_xlabel("avg executed steps")
    axes[0].set_ylabel("delta loss vs alpha=0")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_convergence(path, fit) -> None:
    plt = _pyplot()
    n = np.arange(1, len(fit.rmse) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(n, fit.rmse, marker="o", label="measured")
    if fit.contraction > 0:
        ax.semilogy(n, fit.amplitude * fit.contraction ** n, ls="--",
                    label=f"fit L={fit.contraction:.3f}, R2={fit.r2:.4f}")
    ax.set_xlabel("Jacobi iteration n")
    ax.set_ylabel("RMSE to fixed point")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
