"""Matplotlib figures for the report command.  Files only, no display."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .infer import NUISANCE_SPLITS, SPLIT_ORDER  # noqa: E402

# fixed metadata keeps repeated renders byte-stable
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def ablation_bars(rows, path):
    """Grouped bars: per-split accuracy for each ablation row.

    ``rows`` is a list of ``(name, accuracy_dict, ood_avg)``.
    """
    fig, ax = plt.subplots(figsize=(10, 4))
    cols = list(SPLIT_ORDER) + ["avg"]
    width = 0.8 / max(len(rows), 1)
    for k, (name, acc, avg) in enumerate(rows):
        vals = [100 * acc[s] for s in SPLIT_ORDER] + [100 * avg]
        xs = [i + (k - (len(rows) - 1) / 2) * width for i in range(len(cols))]
        ax.bar(xs, vals, width, label=name)
    ax.set_xticks(range(len(cols)), [c.capitalize() for c in cols])
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8, ncol=min(len(rows), 3))
    return _save(fig, path)


def ood_chain(names, ood, path):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(range(len(names)), [100 * v for v in ood], marker="o")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mean OOD accuracy (%)")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def ttt_traces(history, pseudo_acc, path):
    """Split sizes, A/B agreement and pseudo-label accuracy per TTT epoch."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ep = [r["epoch"] for r in history]
    ax1.plot(ep, [r["labeled_a"] for r in history], marker="o", label="labeled (A)")
    ax1.plot(ep, [r["labeled_b"] for r in history], marker="s", label="labeled (B)")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("samples")
    ax1.legend(fontsize=8)
    ax2.plot(ep, [r["agreement"] for r in history], marker="o", label="A/B agreement")
    if pseudo_acc:
        ax2.plot(range(len(pseudo_acc)), pseudo_acc, marker="s", label="pseudo-label acc.")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1)
    ax2.legend(fontsize=8)
    return _save(fig, path)


def pretrain_curves(histories, path):
    """Validation accuracy per epoch for each pre-training variant."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, hist in histories.items():
        ax.plot([r["epoch"] for r in hist], [r["val_acc"] for r in hist], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def nuisance_ranking(acc, path):
    """Horizontal bars of the six nuisance accuracies for one row."""
    fig, ax = plt.subplots(figsize=(6, 3))
    names = sorted(NUISANCE_SPLITS, key=lambda s: acc[s])
    ax.barh(names, [100 * acc[s] for s in names])
    ax.set_xlim(0, 100)
    ax.set_xlabel("accuracy (%)")
    return _save(fig, path)
