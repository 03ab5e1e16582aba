#!/usr/bin/env python3
"""Plot the CSVs written by `dtdsim` commands.

    plot_run.py fit <fit_dir> [-o out.png]
    plot_run.py counterfactual <counterfactual_dir> [-o out.png]
    plot_run.py metrics <evaluate_dir> [--context anytime] [-o out.png]
"""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_fit(d: Path, out: Path) -> None:
    path = pd.read_csv(d / "posterior_path.csv", parse_dates=["timestamp"])
    trace = pd.read_csv(d / "fit_trace.csv")
    params = [c for c in path.columns if c not in ("timestamp", "cgm", "fitted_cgm")]
    fig, axes = plt.subplots(len(params) + 2, 1, figsize=(10, 2.2 * (len(params) + 2)), sharex=False)
    axes[0].plot(trace["iteration"], trace["loss"], lw=0.8)
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("symlog")
    axes[1].plot(path["timestamp"], path["cgm"], ".", ms=1.5, label="cgm")
    axes[1].plot(path["timestamp"], path["fitted_cgm"], lw=0.8, label="fitted")
    axes[1].set_ylabel("mg/dL")
    axes[1].legend(loc="upper right")
    for ax, p in zip(axes[2:], params):
        ax.plot(path["timestamp"], path[p], lw=0.8)
        ax.set_ylabel(p)
    fig.tight_layout()
    fig.savefig(out, dpi=120)


def plot_counterfactual(d: Path, out: Path) -> None:
    cf = pd.read_csv(d / "counterfactual.csv")
    anchors = cf["anchor_timestamp"].unique()
    fig, axes = plt.subplots(len(anchors), 1, figsize=(8, 3 * len(anchors)), squeeze=False)
    for ax, a in zip(axes[:, 0], anchors):
        sub = cf[(cf["anchor_timestamp"] == a) & (cf["model"] == "dtd_sim")]
        for name, g in sub.groupby("scenario"):
            ax.plot(g["minutes"], g["mean"], label=name)
            ax.fill_between(g["minutes"], g["lo95"], g["hi95"], alpha=0.15)
        ax.set_title(a, fontsize=9)
        ax.set_xlabel("minutes after anchor")
        ax.set_ylabel("mg/dL")
    axes[0, 0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)


def plot_metrics(d: Path, out: Path, context: str) -> None:
    m = pd.read_csv(d / "metrics.csv")
    m = m[m["context"] == context]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for name, g in m.groupby("model"):
        axes[0].plot(g["horizon_min"], g["mae"], "o-", label=name)
        axes[1].plot(g["horizon_min"], g["mase"], "o-", label=name)
    axes[0].set_ylabel("MAE (mg/dL)")
    axes[1].set_ylabel("MASE")
    axes[1].axhline(1.0, color="grey", lw=0.5)
    for ax in axes:
        ax.set_xlabel("horizon (min)")
    axes[0].legend(fontsize=8)
    fig.suptitle(context)
    fig.tight_layout()
    fig.savefig(out, dpi=120)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("kind", choices=["fit", "counterfactual", "metrics"])
    ap.add_argument("dir", type=Path)
    ap.add_argument("-o", "--out", type=Path)
    ap.add_argument("--context", default="anytime")
    a = ap.parse_args()
    out = a.out or a.dir / f"{a.kind}.png"
    if a.kind == "fit":
        plot_fit(a.dir, out)
    elif a.kind == "counterfactual":
        plot_counterfactual(a.dir, out)
    else:
        plot_metrics(a.dir, out, a.context)
    print(out)


if __name__ == "__main__":
    main()
