import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed SVG ids so repeated runs give identical files
matplotlib.rcParams["svg.hashsalt"] = "etmhe"

SVG_METADATA = {"Date": None}


def plot_states(logger: logging.Logger, result, path: str) -> str:
    """
    Plot true states against estimates, one panel per state, with event times marked.

    Args:
        logger (logging.Logger): Logger instance.
        result (SimResult): Finished simulation.
        path (str): Destination SVG file.

    Returns:
        str: The path written.
    """
    truth = result.truth.states
    est = result.estimates
    t = np.arange(truth.shape[0])
    events = np.flatnonzero(result.gamma[1:]) + 1
    n_x = truth.shape[1]
    fig, axes = plt.subplots(n_x, 1, figsize=(8, 2.5 * n_x), sharex=True, squeeze=False)
    for i, ax in enumerate(axes[:, 0]):
        ax.plot(t, truth[:, i], color="black", label="true")
        ax.plot(t, est[:, i], color="tab:blue", linestyle="--", label="estimate")
        ax.plot(events, est[events, i], linestyle="none", marker="o", markersize=3,
                color="tab:red", label="event")
        ax.set_ylabel(f"x{i + 1}")
        ax.grid(True, alpha=0.3)
    axes[0, 0].legend(loc="upper right")
    axes[-1, 0].set_xlabel("t")
    fig.suptitle(f"{result.config.model}: alpha={result.params.alpha:g}, {result.events} events")
    fig.tight_layout()
    _save(logger, fig, path)
    return path


def plot_gamma(logger: logging.Logger, gamma, path: str, label: str = "") -> str:
    """Event raster: a bar at every t with gamma_t = 1."""
    gamma = np.asarray(gamma, dtype=int)
    t = np.arange(1, gamma.size)
    fig, ax = plt.subplots(figsize=(8, 1.6))
    ax.vlines(t[gamma[1:] == 1], 0, 1, color="black", linewidth=1.0)
    ax.set_xlim(0, max(gamma.size - 1, 1))
    ax.set_ylim(0, 1.05)
    ax.set_yticks([])
    ax.set_xlabel("t")
    if label:
        ax.set_title(label)
    fig.tight_layout()
    _save(logger, fig, path)
    return path


def _save(logger: logging.Logger, fig, path: str) -> None:
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
        logger.info(f"Wrote figure {path}")
    except Exception as e:
        logger.error(f"Error writing figure {path}: {str(e)}")
        raise
    finally:
        plt.close(fig)
