"""Report figures rendered to files (non-interactive backend)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import smooth  # noqa: E402


def plot_tau_sweep(sweep, path):
    taus = [r["tau"] for r in sweep]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, side, title in ((axes[0], "sr", "super-resolution"), (axes[1], "ds", "downscaling")):
        ax.plot(taus, [r[f"{side}_psnr_y"] for r in sweep], "o-", color="tab:blue")
        ax.set_xlabel("temperature")
        ax.set_ylabel("PSNR-Y (dB)", color="tab:blue")
        ax.set_title(title)
        twin = ax.twinx()
        twin.plot(taus, [r[f"{side}_diversity"] for r in sweep], "s--", color="tab:red")
        twin.set_ylabel("diversity", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_losses(rows, path, window=50):
    it = np.array([r["iter"] for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for key in ("nll_x", "nll_y"):
        axes[0].plot(it, smooth([r[key] for r in rows], window), label=key)
    axes[0].set_title("per-dimension NLL (smoothed)")
    for key in ("content", "domain_gen", "sr_pix", "ds_pix", "sr_per", "ds_per"):
        vals = np.array([r[key] for r in rows], dtype=float)
        ok = np.isfinite(vals)
        if ok.any():
            axes[1].plot(it[ok], smooth(vals[ok], window), label=key)
    axes[1].set_title("other terms (smoothed)")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
