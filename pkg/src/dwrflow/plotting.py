"""Figures written next to the CSV outputs (file backend only)."""
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _figure(ncols=1):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(1, ncols, figsize=(STYLE["figure.figsize"][0] * ncols, STYLE["figure.figsize"][1]))
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def newton_history(history, path):
    """Residual L1 norm per Newton step."""
    fig, ax = _figure()
    it = [h["iteration"] for h in history]
    ax.semilogy(it, [h["residual_l1"] for h in history], "o-", ms=3)
    ax.set_xlabel("Newton step")
    ax.set_ylabel(r"$\|R\|_1$")
    return _save(fig, path)


def adapt_rounds(reports, path):
    """Coarse, estimated and fine functional values against the element count."""
    fig, (a0, a1) = _figure(2)
    n = [r["elements_before"] for r in reports]
    a0.plot(n, [r["J_coarse"] for r in reports], "o-", label="J coarse")
    a0.plot(n, [r["J_estimate"] for r in reports], "s--", label="J corrected")
    fine = [r.get("J_fine", math.nan) for r in reports]
    if np.isfinite(fine).any():
        a0.plot(n, fine, "^:", label="J fine")
    a0.set_xscale("log")
    a0.set_xlabel("elements")
    a0.set_ylabel("J")
    a0.legend()
    rounds = [r["round"] for r in reports]
    a1.bar(rounds, [r["dual_wall_seconds"] for r in reports], color="0.5", label="dual")
    a1.plot(rounds, [r["total_wall_seconds"] for r in reports], "ko-", label="round total")
    a1.set_xlabel("round")
    a1.set_ylabel("wall seconds")
    a1.legend()
    return _save(fig, path)


def training_curves(reports, path):
    """Per-fold train (solid) and validation (dashed) loss."""
    fig, ax = _figure()
    for rep in reports:
        label = "final" if rep.fold < 0 else f"fold {rep.fold}"
        line, = ax.semilogy(rep.train_loss, label=label)
        if rep.val_loss:
            ax.semilogy(rep.val_loss, "--", color=line.get_color())
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean relative loss")
    ax.legend(ncol=2)
    return _save(fig, path)


def field_map(mesh, values, path, label, window=(-0.5, 1.5, -0.6, 0.6)):
    """Piecewise constant element field around the profile."""
    fig, ax = _figure()
    verts = mesh.nodes[mesh.tri]
    coll = PolyCollection(verts, array=np.asarray(values, dtype=float), cmap="coolwarm", edgecolors="none")
    ax.add_collection(coll)
    ax.set_xlim(window[0], window[1])
    ax.set_ylim(window[2], window[3])
    ax.set_aspect("equal")
    ax.grid(False)
    fig.colorbar(coll, ax=ax, label=label)
    return _save(fig, path)


def speedup(report, path):
    """Speedup t(1)/t(N) per stage with the ideal line."""
    fig, ax = _figure()
    counts = sorted(next(iter(report.times.values())))
    ax.plot(counts, counts, "k:", label="ideal")
    for stage, per in report.speedup.items():
        ax.plot(counts, [per[n] for n in counts], "o-", label=stage)
    ax.set_xlabel("threads")
    ax.set_ylabel("speedup")
    ax.set_title(f"{report.elements} elements")
    ax.legend()
    return _save(fig, path)


def comparison(rows, J_ref, path):
    """Functional error and dual wall time per round, exact against surrogate."""
    fig, (a0, a1) = _figure(2)
    rounds = [r for r in rows if r[0] != "final"]
    x = [r[0] for r in rounds]
    a0.semilogy([r[1] for r in rounds], [max(r[5], 1e-16) for r in rounds], "o-", label="exact dual")
    a0.semilogy([r[2] for r in rounds], [max(r[6], 1e-16) for r in rounds], "s--", label="surrogate dual")
    a0.set_xscale("log")
    a0.set_xlabel("elements")
    a0.set_ylabel(f"|J - J_ref|, J_ref = {J_ref:.6g}")
    a0.legend()
    w = 0.4
    a1.bar(np.array(x) - w / 2, [r[7] for r in rounds], w, label="exact dual")
    a1.bar(np.array(x) + w / 2, [r[8] for r in rounds], w, label="surrogate dual")
    a1.set_yscale("log")
    a1.set_xlabel("round")
    a1.set_ylabel("dual wall seconds")
    a1.legend()
    return _save(fig, path)
