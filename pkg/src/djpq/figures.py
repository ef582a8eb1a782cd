"""Per-layer charts and training curves rendered next to the reports.

Everything draws through the Agg backend so runs work headless; figures
are a reporting convenience and never feed back into training, so the
byte-stability contract covers reports and checkpoints only.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .errors import DataError

_W_COLOR = "#33557f"
_A_COLOR = "#8fb0d9"
_P_COLOR = "#b0533f"


def _save(fig, path):
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight",
                    metadata={"Software": "djpq"})
    finally:
        plt.close(fig)
    return str(path)


def layer_chart(report, path):
    """Bit-widths, pruning ratios and BOP shares, one panel each."""
    report.validate()
    names = [r.layer_id for r in report.rows]
    idx = range(len(names))
    fig, (ax_b, ax_p, ax_o) = plt.subplots(
        1, 3, figsize=(3.6 + 0.5 * len(names), 3.4))

    ax_b.bar([i - 0.2 for i in idx], [r.weight_bits for r in report.rows],
             width=0.4, color=_W_COLOR, label="weights")
    ax_b.bar([i + 0.2 for i in idx], [r.act_bits for r in report.rows],
             width=0.4, color=_A_COLOR, label="activations")
    ax_b.set_ylabel("bit-width")
    ax_b.legend(frameon=False, fontsize=8)

    ax_p.bar(idx, [r.prune_out for r in report.rows], color=_P_COLOR)
    ax_p.set_ylim(0.0, 1.0)
    ax_p.set_ylabel("pruned output channels")

    total = report.total_bops
    ax_o.bar(idx, [r.bops / total for r in report.rows], color=_W_COLOR)
    ax_o.set_ylabel("share of total BOPs")

    for ax in (ax_b, ax_p, ax_o):
        ax.set_xticks(list(idx))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    fig.suptitle(f"compression ratio {report.bop_ratio:.1f}x, "
                 f"accuracy {report.accuracy:.2%}", fontsize=10)
    return _save(fig, path)


def training_chart(stats, path):
    """Loss and accuracy per epoch, with the soft BOP total alongside."""
    if not stats:
        raise DataError("no epoch statistics to plot")
    epochs = [s.epoch for s in stats]
    fig, (ax_l, ax_c) = plt.subplots(1, 2, figsize=(8.0, 3.2))

    ax_l.plot(epochs, [s.loss for s in stats], color=_W_COLOR, label="loss")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_a = ax_l.twinx()
    ax_a.plot(epochs, [s.accuracy for s in stats], color=_P_COLOR,
              label="accuracy")
    ax_a.set_ylabel("training accuracy")
    ax_a.set_ylim(0.0, 1.0)

    ax_c.plot(epochs, [s.surrogate_bops for s in stats], color=_W_COLOR)
    ax_c.set_xlabel("epoch")
    ax_c.set_ylabel("soft BOP total")
    ax_c.set_yscale("log")
    # strength changes (annealing, stage handoffs) show up as markers
    for i in range(1, len(stats)):
        if (stats[i].gamma, stats[i].beta) != (stats[i - 1].gamma,
                                               stats[i - 1].beta):
            ax_c.axvline(stats[i].epoch, color=_A_COLOR, linewidth=0.8)
    fig.tight_layout()
    return _save(fig, path)


def render_figures(report, stats, out_dir, stem):
    """Write the layer chart (and the training chart when stats exist);
    returns the list of paths."""
    paths = [layer_chart(report, os.path.join(out_dir, f"{stem}_layers.png"))]
    if stats:
        paths.append(training_chart(
            stats, os.path.join(out_dir, f"{stem}_training.png")))
    return paths
