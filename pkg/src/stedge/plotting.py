"""Report figures: precision-recall curves, round history, patch-distance maps."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _iso_f(ax):
    r = np.linspace(0.01, 1, 200)
    for f in (0.2, 0.4, 0.6, 0.8):
        p = f * r / (2 * r - f)
        ok = (p > 0) & (p <= 1)
        ax.plot(r[ok], p[ok], color="0.85", lw=0.8, zorder=0)


def plot_pr_curves(reports, path, title="Precision-recall"):
    """One curve per ``{label: MetricsReport}`` with the ODS point marked."""
    fig, ax = plt.subplots(figsize=(5, 5))
    _iso_f(ax)
    for label, rep in reports.items():
        pts = [p for p in rep.curve if p.precision > 0 or p.recall > 0]
        r = [p.recall for p in pts]
        p = [p.precision for p in pts]
        (line,) = ax.plot(r, p, lw=1.5, label=f"{label} (ODS {rep.ods:.3f})")
        best = max(rep.curve, key=lambda q: q.f_measure, default=None)
        if best is not None:
            ax.plot(best.recall, best.precision, "o", color=line.get_color())
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(title)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_round_history(history, path):
    """Edge count per round next to the last-epoch training loss."""
    rounds = [h["round"] for h in history]
    counts = [h["n_edge"] for h in history]
    losses = [h["loss"][-1] if h.get("loss") else np.nan for h in history]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(rounds, counts, "o-")
    bounds = [h.get("upper_bound") for h in history]
    if any(v is not None for v in bounds):
        a.axhline(max(v for v in bounds if v is not None), ls="--", color="0.5", label="sum |C|")
        a.legend(fontsize=8)
    a.set_xlabel("round")
    a.set_ylabel("pseudo-label edge pixels")
    b.plot(rounds, losses, "s-", color="C1")
    b.set_xlabel("round")
    b.set_ylabel("final epoch loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_patch_distance(img, dist, path):
    """Image beside its mean patch-to-neighbour distance map."""
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 4))
    a.imshow(np.clip(img, 0, 1), cmap="gray" if np.ndim(img) == 2 else None)
    a.set_title("image")
    im = b.imshow(dist, cmap="magma")
    b.set_title("patch distance")
    fig.colorbar(im, ax=b, fraction=0.046)
    for ax in (a, b):
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path

