"""Report rendering: CSV tables plus matplotlib figures saved to files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport
from .formats import SEMANTIC_PALETTE
from .model import Reconstruction

__all__ = ["write_eval_report", "write_reconstruction_report"]


def write_eval_report(report: EvalReport, estimated, reference,
                      out_dir: str | Path) -> list[Path]:
    """Write ape.csv plus trajectory and error figures; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    csv_path = out / "ape.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit", "rotation_error_deg", "translation_error_m"])
        for key, rot, trans in report.per_unit:
            writer.writerow([key, f"{rot:.9g}", f"{trans:.9g}"])
        writer.writerow([])
        writer.writerow(["median_rotation_deg", f"{report.median_rotation_deg:.9g}"])
        writer.writerow(["median_translation_m", f"{report.median_translation_m:.9g}"])
        writer.writerow(["rmse_translation_m", f"{report.rmse_translation_m:.9g}"])
    paths.append(csv_path)

    keys = [k for k, _, _ in report.per_unit]
    est_xy = np.stack([report.alignment.apply_pose(estimated[k]).t[:2] for k in keys])
    ref_xy = np.stack([reference[k].t[:2] for k in keys])
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.plot(ref_xy[:, 0], ref_xy[:, 1], "k-", lw=1.2, label="reference")
    ax.plot(est_xy[:, 0], est_xy[:, 1], "r--", lw=1.0, label="estimate (aligned)")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("trajectory (top view)")
    fig.tight_layout()
    traj_path = out / "trajectory.png"
    fig.savefig(traj_path, dpi=130)
    plt.close(fig)
    paths.append(traj_path)

    rots = [r for _, r, _ in report.per_unit]
    trans = [t for _, _, t in report.per_unit]
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    axes[0].plot(rots, "b-", lw=0.9)
    axes[0].axhline(report.median_rotation_deg, color="b", ls=":", lw=0.8)
    axes[0].set_ylabel("rotation err [deg]")
    axes[1].plot(trans, "g-", lw=0.9)
    axes[1].axhline(report.median_translation_m, color="g", ls=":", lw=0.8)
    axes[1].set_ylabel("translation err [m]")
    axes[1].set_xlabel("unit (trajectory order)")
    fig.suptitle("absolute pose error per unit")
    fig.tight_layout()
    err_path = out / "errors.png"
    fig.savefig(err_path, dpi=130)
    plt.close(fig)
    paths.append(err_path)
    return paths


def write_reconstruction_report(recon: Reconstruction,
                                out_dir: str | Path,
                                label_names: dict[int, str] | None = None) -> list[Path]:
    """Write units.csv and a top-view scene figure; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    csv_path = out / "units.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "timestamp", "registered",
                         "qw", "qx", "qy", "qz", "tx", "ty", "tz"])
        for uid in sorted(recon.units):
            u = recon.units[uid]
            if u.pose is None:
                writer.writerow([uid, u.timestamp, int(u.registered)] + [""] * 7)
            else:
                q, t = u.pose.q, u.pose.t
                writer.writerow([uid, u.timestamp, int(u.registered),
                                 *(f"{v:.9g}" for v in (*q, *t))])
    paths.append(csv_path)

    fig, ax = plt.subplots(figsize=(7, 7))
    names = label_names or {}
    by_label: dict[int, list[np.ndarray]] = {}
    for p in recon.points.values():
        by_label.setdefault(p.semantic_label, []).append(p.position)
    for label, pts in sorted(by_label.items()):
        arr = np.stack(pts)
        name = names.get(label, "unknown")
        color = np.array(SEMANTIC_PALETTE.get(name, (120, 120, 120))) / 255.0
        ax.scatter(arr[:, 0], arr[:, 1], s=2, color=color, label=name, alpha=0.6)
    origins = [u.pose.t for u in recon.registered_units() if u.pose is not None]
    if origins:
        arr = np.stack([t for t in origins])
        ax.plot(arr[:, 0], arr[:, 1], "r-", lw=1.4, label="trajectory")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8, markerscale=3)
    ax.set_title(f"{len(recon.points)} points, "
                 f"{len(recon.registered_units())} registered units")
    fig.tight_layout()
    scene_path = out / "scene.png"
    fig.savefig(scene_path, dpi=130)
    plt.close(fig)
    paths.append(scene_path)
    return paths
