"""Occlusion-sensitivity maps, dynamic survival curves, and their SVG renderings."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .cox import BaselineHazardTable, dynamic_survival
from .metrics import MONTHS
from .model import ImageSequence, InputError, ParameterStore, cohort_risks, patchify_batch

__all__ = [
    "SensitivityMap",
    "occlusion_sensitivity",
    "maps_to_csv",
    "dynamic_survival_curve",
    "curve_to_csv",
    "render_heatmap",
    "render_heatmaps",
    "render_curve",
]

log = logging.getLogger(__name__)


@dataclass
class SensitivityMap:
    visit: int
    values: np.ndarray  # (side / region_side, side / region_side)
    region_side: int
    fill: float
    signed: bool = False


def occlusion_sensitivity(params: ParameterStore, seq: ImageSequence, n_visits: int,
                          region_side: int = 8, fill: float = 0.0, signed: bool = False,
                          chunk: int = 1) -> tuple[list[SensitivityMap], int]:
    """Risk change when each region of one visit is replaced by ``fill``.

    Returns the per-visit maps and the number of forward passes used,
    ``n_visits * (side / region_side)**2 + 1``.  With the default
    ``chunk=1`` every probe runs through exactly the same arithmetic as the
    baseline, so a probe that changes nothing scores exactly 0; larger
    chunks batch probes for speed at the cost of rounding-level noise.
    """
    config = params.config
    if n_visits < 1 or n_visits > len(seq):
        raise InputError(f"cannot use {n_visits} of {len(seq)} visits")
    rows, cols = np.shape(seq.images[0])
    if rows % region_side or cols % region_side:
        raise InputError(f"region side {region_side} does not divide image {rows}x{cols}")
    consts = params.constants()
    base_seq = seq.truncated(n_visits)
    baseline = float(cohort_risks([base_seq], [n_visits], consts, config).data[0])
    gr, gc = rows // region_side, cols // region_side

    probes = []
    for j in range(n_visits):
        for a in range(gr):
            for b in range(gc):
                probes.append((j, a, b))
    base_stack = np.stack(base_seq.images[:n_visits])
    base_patches = patchify_batch(base_stack, config.P) if base_stack.shape[1:] == (config.P, config.P) \
        else None
    deltas = np.empty(len(probes))
    for start in range(0, len(probes), chunk):
        batch = probes[start:start + chunk]
        seqs, patch_list = [], []
        for j, a, b in batch:
            imgs = [im for im in base_seq.images]
            occluded = imgs[j].copy()
            occluded[a * region_side:(a + 1) * region_side, b * region_side:(b + 1) * region_side] = fill
            imgs[j] = occluded
            seqs.append(ImageSequence(seq.patient_id, base_seq.times, imgs, seq.covariates))
            if base_patches is not None:
                p = base_patches.copy()
                p[j] = patchify_batch(occluded[None], config.P)[0]
                patch_list.append(p)
        patches = np.concatenate(patch_list) if patch_list else None
        r = cohort_risks(seqs, [n_visits] * len(seqs), consts, config, patches=patches).data
        deltas[start:start + len(batch)] = r - baseline
    n_passes = len(probes) + 1
    log.info("occlusion: %d forward passes", n_passes)
    if not signed:
        deltas = np.abs(deltas)
    grids = deltas.reshape(n_visits, gr, gc)
    maps = [SensitivityMap(j, grids[j], region_side, fill, signed) for j in range(n_visits)]
    return maps, n_passes


def maps_to_csv(maps: Sequence[SensitivityMap], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["visit", "region_row", "region_col", "sensitivity"])
        for m in maps:
            for (a, b), v in np.ndenumerate(m.values):
                w.writerow([m.visit, a, b, repr(float(v))])


def dynamic_survival_curve(risk: float, table: BaselineHazardTable, t_star_months: float,
                           grid_months: Sequence[float]) -> list[tuple[float, float]]:
    """Conditional survival ``P(U > t* + dt | U > t*)`` along a grid of increments (months)."""
    grid = np.asarray(grid_months, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted ascending")
    t_star = t_star_months / MONTHS
    return [(float(dt), dynamic_survival(risk, t_star, dt / MONTHS, table)) for dt in grid]


def curve_to_csv(curve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dt_months", "probability"])
        for dt, p in curve:
            w.writerow([f"{dt:g}", repr(float(p))])


# SVG ----------------------------------------------------------------------

def _ramp(x: float) -> str:
    """Blue (0) to red (1)."""
    x = min(max(x, 0.0), 1.0)
    return f"#{round(255 * x):02x}00{round(255 * (1 - x)):02x}"


def _gray(v: float, lo: float, hi: float) -> str:
    level = 128 if hi <= lo else round(255 * (v - lo) / (hi - lo))
    return f"#{level:02x}{level:02x}{level:02x}"


def render_heatmap(smap: SensitivityMap, underlay, vmin: float | None = None,
                   vmax: float | None = None, scale: int = 4, opacity: float = 0.5) -> str:
    """Self-contained SVG: grayscale image with a semi-transparent sensitivity overlay.

    Sensitivities are min-max normalized over ``[vmin, vmax]`` (default:
    this map's own range); a flat map renders at mid-ramp.
    """
    img = np.asarray(underlay, dtype=np.float64)
    rows, cols = img.shape
    gr, gc = smap.values.shape
    if gr * smap.region_side != rows or gc * smap.region_side != cols:
        raise InputError("sensitivity grid does not match the underlay")
    lo = float(smap.values.min()) if vmin is None else vmin
    hi = float(smap.values.max()) if vmax is None else vmax
    ilo, ihi = float(img.min()), float(img.max())
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * scale}" '
           f'height="{rows * scale}" viewBox="0 0 {cols} {rows}" shape-rendering="crispEdges">',
           f"<title>{escape(f'visit {smap.visit} occlusion sensitivity')}</title>",
           '<g id="underlay">']
    for (i, j), v in np.ndenumerate(img):
        out.append(f'<rect x="{j}" y="{i}" width="1" height="1" fill="{_gray(v, ilo, ihi)}"/>')
    out.append(f'</g><g id="overlay" fill-opacity="{opacity:g}">')
    s = smap.region_side
    for (a, b), v in np.ndenumerate(smap.values):
        x = 0.5 if hi <= lo else (float(v) - lo) / (hi - lo)
        out.append(f'<rect x="{b * s}" y="{a * s}" width="{s}" height="{s}" fill="{_ramp(x)}" '
                   f'data-sensitivity="{float(v):.6g}"/>')
    out.append("</g></svg>")
    return "\n".join(out) + "\n"


def render_heatmaps(maps: Sequence[SensitivityMap], images: Sequence[np.ndarray]) -> list[str]:
    """Render every visit on one shared min-max scale."""
    lo = min(float(m.values.min()) for m in maps)
    hi = max(float(m.values.max()) for m in maps)
    return [render_heatmap(m, images[m.visit], lo, hi) for m in maps]


def render_curve(curve, t_star_months: float, width: int = 480, height: int = 320) -> str:
    """Step-line SVG of a dynamic survival curve."""
    pad = 40
    dts = [dt for dt, _ in curve]
    span = max(max(dts), 1e-9)

    def px(dt):
        return pad + (width - 2 * pad) * dt / span

    def py(p):
        return height - pad - (height - 2 * pad) * p

    pts = []
    for k, (dt, p) in enumerate(curve):
        if k:
            pts.append(f"{px(dt):.2f},{py(curve[k - 1][1]):.2f}")
        pts.append(f"{px(dt):.2f},{py(p):.2f}")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f"<title>{escape(f'conditional survival from month {t_star_months:g}')}</title>",
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<polyline fill="none" stroke="#c00000" stroke-width="2" points="{" ".join(pts)}"/>',
           f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle" font-size="12">'
           f'months after {t_star_months:g}</text>',
           f'<text x="12" y="{height / 2:.0f}" font-size="12" '
           f'transform="rotate(-90 12 {height / 2:.0f})" text-anchor="middle">probability</text>',
           "</svg>"]
    return "\n".join(out) + "\n"
