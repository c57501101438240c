"""Figures of an output directory, drawn from its CSV files with ``--plot``."""
import os
from typing import Optional

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns


FIGURE_NAME = "results.pdf"


def read_output(out_dir: str, name: str) -> Optional[pd.DataFrame]:
    """The CSV file ``name`` of ``out_dir``, or None when the run did not write it."""
    path = os.path.join(out_dir, name)
    return pd.read_csv(path) if os.path.exists(path) else None


def plot_trajectory(axs, traj: pd.DataFrame, rho: Optional[pd.DataFrame], envelope: float = 1.0):
    """Tracked output with its envelope around the setpoint, the inputs and the robustness signal."""
    refs = [c for c in traj.columns if c.startswith("r") and c[1:].isdigit()]
    sns.lineplot(x=traj["t"], y=traj["x1"], ax=axs[0], color="black", label="y")
    if refs:
        r = traj[refs[0]]
        sns.lineplot(x=traj["t"], y=r, ax=axs[0], color="blue", linestyle="--", label="r")
        axs[0].fill_between(traj["t"], r - envelope, r + envelope, alpha=0.15, facecolor="blue")
    axs[0].set_ylabel("Lateral position")
    for c in [c for c in traj.columns if c.startswith("u") and c[1:].isdigit()]:
        sns.lineplot(x=traj["t"], y=traj[c], ax=axs[1], label=c)
    axs[1].set_ylabel("Input")
    if rho is not None:
        sns.lineplot(x=rho["t"], y=rho["rho"], ax=axs[2], color="green")
        axs[2].axhline(0.0, color="red", linewidth=0.8)
    axs[2].set_ylabel("Robustness")


def plot_monitor(axs, monitor: pd.DataFrame, adaptations: Optional[pd.DataFrame]):
    """Predicted fitness with one standard deviation, overall fitness and integrated surprise."""
    mean = monitor["fitness_pred_mean"]
    std = np.sqrt(np.maximum(monitor["fitness_pred_var"], 0.0))
    sns.lineplot(x=monitor["t"], y=mean, ax=axs[0], color="blue")
    axs[0].fill_between(monitor["t"], mean - std, mean + std, alpha=0.2, facecolor="blue")
    axs[0].set_ylabel("Fitness")
    sns.lineplot(x=monitor["t"], y=monitor["overall_fitness"], ax=axs[1], color="black")
    axs[1].set_ylabel("Overall fitness")
    sns.lineplot(x=monitor["t"], y=monitor["integral_sp"], ax=axs[2], color="purple")
    axs[2].set_ylabel("Integrated surprise")
    if adaptations is not None:
        for t in adaptations["t"]:
            for ax in axs:
                ax.axvline(t, color="red", alpha=0.5)


def plot_results(out_dir: str) -> str:
    """Draws the figures of ``out_dir`` into ``results.pdf`` and returns its path.

    Raises:
        FileNotFoundError: when ``trajectory.csv`` is missing
    """
    traj = read_output(out_dir, "trajectory.csv")
    if traj is None:
        raise FileNotFoundError(f"no trajectory.csv in {out_dir}")
    rho = read_output(out_dir, "robustness.csv")
    monitor = read_output(out_dir, "monitor.csv")
    with_monitor = monitor is not None and not monitor.empty
    rows = 6 if with_monitor else 3
    sns.set_theme(style="whitegrid")
    fig, axs = plt.subplots(rows, 1, figsize=(12, 2.5 * rows), sharex=True)
    plot_trajectory(axs[:3], traj, rho)
    if with_monitor:
        plot_monitor(axs[3:], monitor, read_output(out_dir, "adaptations.csv"))
    axs[-1].set_xlabel("Time (s)")
    sns.despine(fig)
    path = os.path.join(out_dir, FIGURE_NAME)
    fig.savefig(path, format="pdf", bbox_inches="tight")
    plt.close(fig)
    return path
