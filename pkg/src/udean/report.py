"""Loss/metric plots and a text summary for a run directory."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .losses import GENERATOR_TERMS  # noqa: E402
from .network import count_parameters, load_checkpoint  # noqa: E402

# inference size of the full-scale published network, for side-by-side reporting
REFERENCE_INFERENCE_PARAMS_M = 2.457


def _read_log(path: Path):
    rows = []
    if not path.exists():
        return rows
    for line in path.read_text().splitlines():
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            break  # a killed run can leave a torn last line
    return rows


def _read_validation(path: Path):
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_report(run_dir, out_dir) -> str:
    run, out = Path(run_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    complete = (run / "DONE").exists()
    rows = _read_log(run / "loss_log.jsonl")
    val = _read_validation(run / "validation.csv")

    if rows:
        it = [r["iteration"] for r in rows]
        fig, axes = plt.subplots(1, 2, figsize=(11, 4))
        for k in GENERATOR_TERMS + ("total",):
            axes[0].plot(it, [r[k] for r in rows], label=k, lw=1)
        axes[0].set_yscale("symlog", linthresh=1e-3)
        axes[0].set_xlabel("iteration")
        axes[0].legend(fontsize=7)
        axes[0].set_title("generator losses")
        for k in ("lrd", "fd"):
            pts = [(r["iteration"], r[k]) for r in rows if r.get(k) is not None]
            if pts:
                axes[1].plot(*zip(*pts), label=k, lw=1)
        axes[1].set_xlabel("iteration")
        axes[1].set_title("discriminator losses")
        axes[1].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "losses.png", dpi=100)
        plt.close(fig)
    if val:
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
        ep = [v["epoch"] for v in val]
        for ax, key in zip(axes, ("ssim", "psnr")):
            ax.errorbar(ep, [v[f"{key}_mean"] for v in val], [v[f"{key}_std"] for v in val], capsize=2)
            ax.set_xlabel("epoch")
            ax.set_title(f"validation {key.upper()}")
        fig.tight_layout()
        fig.savefig(out / "validation.png", dpi=100)
        plt.close(fig)

    lines = [f"run: {run}", f"status: {'complete' if complete else 'INCOMPLETE'}",
             f"iterations logged: {len(rows)}"]
    if rows:
        last = rows[-1]
        lines.append("last iteration: " + ", ".join(f"{k}={last[k]:.5g}" for k in GENERATOR_TERMS + ("total",)))
    if val:
        best = max(val, key=lambda v: v["ssim_mean"])
        lines.append(f"best validation: epoch {int(best['epoch'])} SSIM {best['ssim_mean']:.4f} "
                     f"PSNR {best['psnr_mean']:.3f}")
    ck = run / "checkpoints" / "best.npz"
    if ck.exists():
        comps, _ = load_checkpoint(ck)
        n_inf, n_all = count_parameters(comps, "inference"), count_parameters(comps, "all")
        lines.append(f"parameters: inference {n_inf / 1e6:.3f} M, all {n_all / 1e6:.3f} M "
                     f"(full-size reference inference {REFERENCE_INFERENCE_PARAMS_M} M)")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    marker = out / "INCOMPLETE"
    if complete:
        marker.unlink(missing_ok=True)
    else:
        marker.write_text("run directory has no DONE marker; plots are partial\n")
    return text
