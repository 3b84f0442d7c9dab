"""Matplotlib figures for optimisation and experiment reports (Agg backend)."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import write_bytes_atomic  # noqa: E402

# no Software/date metadata so identical data gives identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, metadata=_PNG_META)
    plt.close(fig)
    write_bytes_atomic(Path(path), buf.getvalue())


def loss_curve(report, path, title=None):
    """Descent loss per iteration plus held-out PSNR at checkpoints."""
    hist = report.history if hasattr(report, "history") else report["history"]
    ckpts = report.checkpoints if hasattr(report, "checkpoints") else report["checkpoints"]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    it = [h["iteration"] for h in hist]
    ax[0].semilogy(it, [h["mse"] for h in hist], label="mse")
    if any(h["perceptual_proxy"] for h in hist):
        ax[0].semilogy(it, [h["perceptual_proxy"] for h in hist], label="perceptual proxy")
    ax[0].set_xlabel("iteration")
    ax[0].set_ylabel("training loss")
    ax[0].legend(frameon=False)
    pts = [(c["iteration"], c["held_out"].get("psnr")) for c in ckpts if c["held_out"]]
    if pts:
        ax[1].plot(*zip(*pts), "o-", color="C3")
    ax[1].set_xlabel("iteration")
    ax[1].set_ylabel("held-out PSNR [dB]")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save(fig, path)


def psnr_summary(bundle, path):
    """Init vs final held-out PSNR per subject, one panel per variant."""
    variants = bundle["variants"]
    fig, axes = plt.subplots(1, len(variants), figsize=(4.5 * len(variants), 3.4), squeeze=False)
    for ax, var in zip(axes[0], variants):
        ok = [r for r in var["rows"] if r["status"] == "ok"]
        x = np.arange(len(ok))
        ax.bar(x - 0.2, [r["init_psnr"] for r in ok], 0.4, label="init")
        ax.bar(x + 0.2, [r["final_psnr"] for r in ok], 0.4, label="optimised")
        ax.set_xticks(x)
        ax.set_xticklabels([str(r["subject"]) for r in ok])
        ax.set_xlabel("subject seed")
        ax.set_ylabel("held-out PSNR [dB]")
        ax.set_title(var["name"])
        ax.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def experiment_figures(bundle, histories, out_dir):
    out_dir = Path(out_dir)
    psnr_summary(bundle, out_dir / "heldout_psnr.png")
    for (variant, seed), report in sorted(histories.items()):
        loss_curve(report, out_dir / f"loss_{variant}_seed_{seed:04d}.png",
                   title=f"{variant} / seed {seed}")
