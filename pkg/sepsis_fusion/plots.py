"""Self-contained SVG figures with byte-stable output."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from sepsis_fusion.errors import OutputError  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "sepsis-fusion",
    "svg.fonttype": "none",
    "figure.figsize": (6.0, 4.5),
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def _save(fig, path):
    try:
        fig.savefig(path, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise OutputError(f"cannot write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def roc_figure(points, area, path, title="ROC", operating_points=()):
    """operating_points: (label, fpr, tpr) markers drawn on the curve."""
    fpr, tpr = zip(*points)
    fig, ax = plt.subplots()
    ax.plot(fpr, tpr, drawstyle="default", color="tab:blue", label="model")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8, label="chance")
    for label, x, y in operating_points:
        ax.plot([x], [y], marker="o", linestyle="none", label=f"{label} ({x:.3f}, {y:.3f})")
    ax.text(0.55, 0.08, f"AUC = {area:.6f}", transform=ax.transAxes)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize="small")
    return _save(fig, path)


def pr_figure(recall, precision, average_precision, path, title="Precision-recall"):
    fig, ax = plt.subplots()
    ax.step(recall, precision, where="post", color="tab:green")
    ax.text(0.05, 0.08, f"AP = {average_precision:.6f}", transform=ax.transAxes)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    return _save(fig, path)


def bar_figure(labels, values, path, title, ylabel, errors=None):
    fig, ax = plt.subplots()
    positions = range(len(labels))
    ax.bar(positions, values, yerr=errors, color="tab:blue", capsize=3)
    for x, value in zip(positions, values):
        ax.annotate(f"{value:.4f}", (x, value), textcoords="offset points", xytext=(0, 4),
                    ha="center", fontsize="small")
    ax.set_xticks(list(positions))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize="small")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def line_figure(x, series, path, title, xlabel, ylabel, logx=False):
    """series: mapping of legend label to y values over x."""
    fig, ax = plt.subplots()
    for label, values in series.items():
        ax.plot(x, values, marker="o", label=label)
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize="small")
    return _save(fig, path)
