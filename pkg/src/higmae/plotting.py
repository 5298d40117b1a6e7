"""Report figures written next to the CSV/JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "figure.figsize": (4.5, 3.0),
    "savefig.dpi": 120,
}
# no date stamp so reruns produce identical files
_METADATA = {"Software": None}


def figure_path(data_path, suffix: str = ".png") -> Path:
    """Sibling path of a data file with the figure suffix, e.g. ``loss.csv`` -> ``loss.png``."""
    return Path(data_path).with_suffix(suffix)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_loss(history, path) -> Path:
    """Reconstruction loss per epoch, with the recovered-node count on a twin axis."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        epochs = [r.epoch for r in history]
        ax.plot(epochs, [r.loss for r in history], color="C0", lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("SCE loss", color="C0")
        if any(r.recovered_S for r in history):
            twin = ax.twinx()
            twin.step(epochs, [r.recovered_S for r in history], where="post", color="C1", lw=0.9)
            twin.set_ylabel("recovered at top scale", color="C1")
        return _save(fig, path)


def plot_schedule(rows, path, n_masked: int | None = None) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ts = [t for t, _ in rows]
        ax.step(ts, [r for _, r in rows], where="post", color="C2")
        ax.set_xlabel("epoch t")
        ax.set_ylabel("recovered nodes R(t)")
        if n_masked is not None:
            ax.set_title(f"masked at top scale: {n_masked}")
        return _save(fig, path)


def plot_probe(reports, path) -> Path:
    """Per-fold accuracies, one group of bars per repeat."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        width = 0.8 / max(len(reports), 1)
        for r, rep in enumerate(reports):
            xs = [k + r * width for k in range(len(rep.fold_accuracies))]
            ax.bar(xs, rep.fold_accuracies, width=width, label=f"seed {rep.seed}: {rep.mean:.3f}")
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("fold")
        ax.set_ylabel("accuracy")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_hierarchy_sizes(hierarchy_json: dict, path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        graphs = hierarchy_json["graphs"]
        for g in graphs[:50]:
            ax.plot([lv["scale"] for lv in g["levels"]], [lv["n"] for lv in g["levels"]],
                    marker="o", lw=0.8, alpha=0.6)
        ax.set_xlabel("scale")
        ax.set_ylabel("nodes")
        ax.set_yscale("log")
        return _save(fig, path)
