"""Optional PNG figures for the CLI report path (matplotlib, Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def gradient_field_figure(rows, path):
    methods = []
    for r in rows:
        if r[2] not in methods:
            methods.append(r[2])
    fig, axes = plt.subplots(1, len(methods), figsize=(4 * len(methods), 3.6), sharey=True)
    for ax, name in zip(np.atleast_1d(axes), methods):
        pts = np.array([(r[0], r[1], r[3], r[4]) for r in rows if r[2] == name])
        norm = np.linalg.norm(pts[:, 2:], axis=1)
        norm[norm == 0] = 1.0
        ax.quiver(pts[:, 0], pts[:, 1], pts[:, 2] / norm, pts[:, 3] / norm, angles="xy")
        ax.set_title(name)
        ax.set_xlabel("theta1 (mean)")
    np.atleast_1d(axes)[0].set_ylabel("theta2 (log std)")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def mu_sweep_figure(sweep, path):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.semilogx([s["lam"] for s in sweep], [s["mu_hat"] for s in sweep], "o-")
    ax.set_xlabel("damping")
    ax.set_ylabel("mu_hat")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def learning_curve_figure(records, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for rec in records:
        if rec.rows:
            ax.plot([r["env_steps"] for r in rec.rows], [r["mean_return"] for r in rec.rows],
                    label=f"seed {rec.seed}")
    ax.set_xlabel("environment steps")
    ax.set_ylabel("return")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def ablation_figure(rows, path):
    values = []
    for r in rows:
        if r["value"] not in values:
            values.append(r["value"])
    means = [np.nanmean([r["final_return"] for r in rows if r["value"] == v]) for v in values]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar([str(v) for v in values], means)
    ax.set_xlabel(rows[0]["axis"] if rows else "")
    ax.set_ylabel("mean final return")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
