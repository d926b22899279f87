"""PNG figures written next to the CSV reports.

Figures are rendered with the Agg backend and without timestamp metadata so
repeated runs produce identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_META = {"Software": None}


def figure_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".png")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_history(history, path) -> Path:
    fig, (ax_l, ax_g) = plt.subplots(1, 2, figsize=(8, 3))
    steps = range(len(history.loss))
    ax_l.plot(steps, history.loss, color="tab:blue")
    ax_l.set_xlabel("step")
    ax_l.set_ylabel("loss")
    ax_g.semilogy(steps, history.grad_norm, color="tab:orange")
    ax_g.set_xlabel("step")
    ax_g.set_ylabel("gradient norm")
    return _save(fig, path)


def plot_ablation(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = [r.name for r in rows]
    ax.bar(names, [r.psnr for r in rows], color="tab:green")
    lo = min(r.psnr for r in rows)
    ax.set_ylim(lo - 1.0, max(r.psnr for r in rows) + 0.5)
    ax.set_ylabel("PSNR (dB)")
    ax.tick_params(axis="x", labelrotation=45, labelsize=8)
    return _save(fig, path)


def plot_pipeline(rows, path) -> Path:
    """Resource bars for ``(mode, Decision)`` rows, with the score annotated."""
    fig, (ax_m, ax_c) = plt.subplots(1, 2, figsize=(8, 3))
    modes = [m for m, _ in rows]
    ax_m.bar(modes, [d.resources.peak_activation_bytes / 2 ** 20 for _, d in rows])
    ax_m.set_ylabel("peak activations (MiB)")
    ax_c.bar(modes, [d.resources.total_macs / 1e9 for _, d in rows], color="tab:purple")
    ax_c.set_ylabel("GMACs")
    for ax in (ax_m, ax_c):
        ax.tick_params(axis="x", labelsize=8)
    for i, (_, d) in enumerate(rows):
        ax_c.annotate(f"{d.verdict} {d.score:.2f}", (i, 0), ha="center", va="bottom",
                      fontsize=7)
    return _save(fig, path)


def plot_metrics(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    ids = [i for i, _ in rows]
    finite = [(r.psnr if r.psnr != float("inf") else float("nan")) for _, r in rows]
    ax.plot(ids, finite, "o-", label="PSNR")
    ax.plot(ids, [r.psnrb if r.psnrb != float("inf") else float("nan") for _, r in rows],
            "s--", label="PSNR-B")
    ax.set_ylabel("dB")
    ax.legend(fontsize=8)
    return _save(fig, path)
