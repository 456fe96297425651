"""Static matplotlib figures written next to the sweep/defense tables."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

VARIANT_COLORS = {"PGD": "0.45", "VSA": "C3", "VBA": "C0", "VBA_VSA": "C2"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def success_rate_figure(cells, path):
    """Success rate against epsilon, one panel per (n, steps), one line per variant."""
    with plt.rc_context(STYLE):
        groups = sorted({(c["n"], c["steps"]) for c in cells})
        fig, axes = plt.subplots(1, max(len(groups), 1), figsize=(3.0 * max(len(groups), 1), 2.6),
                                 squeeze=False)
        for ax, (n, steps) in zip(axes[0], groups):
            for variant in sorted({c["variant"] for c in cells}):
                rows = sorted((c["epsilon"], c["success_rate"]) for c in cells
                              if c["n"] == n and c["steps"] == steps and c["variant"] == variant)
                if rows:
                    eps, rate = zip(*rows)
                    ax.plot(eps, rate, marker="o", ms=3, label=variant,
                            color=VARIANT_COLORS.get(variant))
            ax.set_title(f"n={n}, M={steps}")
            ax.set_xlabel("epsilon")
            ax.set_ylim(-2, 102)
        axes[0][0].set_ylabel("success rate (%)")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)


def steps_figure(cells, path):
    """Success rate against the step budget M."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        keys = sorted({(c["variant"], c["epsilon"], c["n"]) for c in cells})
        for variant, eps, n in keys:
            rows = sorted((c["steps"], c["success_rate"]) for c in cells
                          if (c["variant"], c["epsilon"], c["n"]) == (variant, eps, n))
            if len(rows) > 1:
                m, rate = zip(*rows)
                ax.plot(m, rate, marker="o", ms=3, label=f"{variant} eps={eps:g} n={n}")
        ax.set_xscale("log")
        ax.set_xlabel("steps M")
        ax.set_ylabel("success rate (%)")
        if ax.lines:
            ax.legend(frameon=False)
        else:
            ax.text(0.5, 0.5, "single step budget", ha="center", transform=ax.transAxes)
        return _save(fig, path)


def objective_figure(traces, path):
    """Mean objective per step; ``traces`` maps a label to a (S, M) array."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        for label, tr in sorted(traces.items()):
            if tr.size:
                ax.plot(np.arange(1, tr.shape[1] + 1), tr.mean(axis=0), lw=1, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("mean objective")
        if traces:
            ax.legend(frameon=False, fontsize=5)
        return _save(fig, path)


def defense_figure(rows, path):
    """Defended success rate against epsilon, per defense and n."""
    with plt.rc_context(STYLE):
        defenses = sorted({r["defense"] for r in rows})
        fig, axes = plt.subplots(1, max(len(defenses), 1), figsize=(3.0 * max(len(defenses), 1), 2.6),
                                 squeeze=False)
        for ax, name in zip(axes[0], defenses):
            for key in sorted({(r["variant"], r["n"], r["steps"]) for r in rows if r["defense"] == name}):
                pts = sorted((r["epsilon"], r["defended_rate"]) for r in rows
                             if r["defense"] == name and (r["variant"], r["n"], r["steps"]) == key)
                eps, rate = zip(*pts)
                ax.plot(eps, rate, marker="o", ms=3, label=f"{key[0]} n={key[1]}")
            ax.set_title(name)
            ax.set_xlabel("epsilon")
            ax.set_ylim(-2, 102)
        axes[0][0].set_ylabel("defended success (%)")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)


def cloud_figure(original, added, path, title=None):
    """Scatter of an adversarial sample: original points blue, added points red."""
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(3.2, 3.2))
        ax = fig.add_subplot(projection="3d")
        ax.scatter(*original.T, s=2, c="blue", depthshade=False)
        if len(added):
            ax.scatter(*np.asarray(added).T, s=8, c="red", depthshade=False)
        ax.set_box_aspect((1, 1, 1))
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)
