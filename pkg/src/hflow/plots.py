"""Figures of the flow stage: mask composite, phase profiles and the total-flow trace."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io  # noqa: E402


def composite(ax, m0_mean, artery_mask, center, radius, width, sections):
    """Power Doppler image with the artery mask, selection annulus and section lines."""
    img = np.asarray(m0_mean, dtype=float)
    lo, hi = np.percentile(img, [1, 99.5])
    ax.imshow(img, cmap="gray", vmin=lo, vmax=hi)
    overlay = np.zeros(img.shape + (4,))
    overlay[artery_mask] = (0.9, 0.1, 0.1, 0.45)
    ax.imshow(overlay)
    for r in (radius - width / 2, radius + width / 2):
        ax.add_patch(plt.Circle(center, r, fill=False, color="y", lw=0.8))
    for s in sections:
        t = math.radians(s.orientation_deg)
        cx, cy = s.center_px
        dx, dy = math.cos(t), -math.sin(t)
        half = s.profile.size / 2
        ax.plot([cx - half * dx, cx + half * dx], [cy - half * dy, cy + half * dy], "c-", lw=1)
        ax.text(cx, cy, str(s.section_id), color="c", fontsize=7)
    ax.set_axis_off()


def phase_profiles(ax, pp):
    for mean, std, label, color in ((pp.systole_mean, pp.systole_std, "systole", "C3"),
                                    (pp.diastole_mean, pp.diastole_std, "diastole", "C0")):
        ax.plot(pp.axis, mean * 1e3, color=color, label=label)
        ax.fill_between(pp.axis, (mean - std) * 1e3, (mean + std) * 1e3, color="0.7", alpha=0.5)
    ax.set_xlabel("position / fitted radius")
    ax.set_ylabel("velocity (mm/s)")
    ax.legend(frameon=False)


def flow_trace(ax, result):
    ax.plot(result.times_s, result.total_flow_series, color="0.6", lw=0.8, label="per window")
    ax.plot(result.times_s, result.smoothed_series, color="k", lw=1.2, label="smoothed")
    ax.plot(result.times_s[result.systolic_index], result.systolic_flow, "v", color="C3")
    ax.plot(result.times_s[result.diastolic_index], result.diastolic_flow, "^", color="C0")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("total arterial flow (uL/min)")
    ax.set_title(f"mean {result.mean_total_flow:.1f} uL/min, RI {result.resistivity_index:.2f}", fontsize=9)
    ax.legend(frameon=False, fontsize=8)


def write_figures(cfg, analysis) -> list:
    out = cfg.out
    m0, _ = io.read_array(out / "m0")
    mask = io.read_pgm(out / "artery_mask.pgm") > 0
    h, w = mask.shape
    center = cfg.flow.center_px if cfg.flow.center_px is not None else ((w - 1) / 2, (h - 1) / 2)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 5))
    composite(ax, np.asarray(m0, dtype=float).mean(axis=0), mask, center, cfg.flow.circle_radius_px,
              cfg.flow.circle_width_px, analysis.reference_sections)
    paths.append(_save(fig, out / "composite.png"))

    if analysis.phase_profiles is not None:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        phase_profiles(ax, analysis.phase_profiles)
        paths.append(_save(fig, out / "profiles.png"))

    fig, ax = plt.subplots(figsize=(6, 3))
    flow_trace(ax, analysis.result)
    paths.append(_save(fig, out / "flow.png"))
    return paths


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
