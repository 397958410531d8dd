"""Dose comparison metrics: gamma analysis, relative error, depth sections.

Gamma values are computed discretely at voxel centers with anisotropic
physical spacing. For every predicted voxel the search over reference
voxels is pruned at the radius where the spatial term alone already
exceeds the best candidate so far; the pruning is exactness-preserving,
and an unpruned full search is kept as a self-check path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import DataError, DoseGrid
from .tensor import DimensionError


@dataclass
class GammaCriteria:
    """Distance-to-agreement (mm) and dose difference (fraction of max
    reference dose), plus the low-dose masking policy."""

    dta_mm: float = 3.0
    dose_fraction: float = 0.01
    masked: bool = False
    low_dose_mask_fraction: float = 1e-4
    local_normalization: bool = False

    def __post_init__(self):
        if self.dta_mm <= 0:
            raise ValueError("distance-to-agreement must be positive")
        if not 0.0 < self.dose_fraction < 1.0:
            raise ValueError("dose difference must be a fraction in (0, 1)")


@dataclass
class GammaReport:
    gamma: np.ndarray
    pass_rate: float
    evaluated: int
    total_failed: int
    section_fractions: tuple
    criteria: GammaCriteria = field(repr=False)

    @property
    def no_evaluated_voxels(self) -> bool:
        return self.evaluated == 0


def _check_compatible(predicted: DoseGrid, reference: DoseGrid):
    if predicted.values.shape != reference.values.shape:
        raise DimensionError(
            f"grid shapes differ: {predicted.values.shape} vs {reference.values.shape}"
        )
    if predicted.spacing != reference.spacing:
        raise DimensionError(
            f"grid spacings differ: {predicted.spacing} vs {reference.spacing}"
        )


def _prepare(predicted: DoseGrid, reference: DoseGrid, criteria: GammaCriteria):
    _check_compatible(predicted, reference)
    pred = predicted.values.astype(np.float64)
    ref = reference.values.astype(np.float64)
    ref_max = float(ref.max())
    if ref_max <= 0.0:
        raise DataError("reference grid carries no dose; gamma is undefined")
    if criteria.masked:
        pred_max = pred.max()
        if pred_max > 0:
            pred = np.where(pred < criteria.low_dose_mask_fraction * pred_max, 0.0, pred)
    return pred, ref, ref_max


def _dose_term(pred_vals, ref_vals, criteria: GammaCriteria, ref_max: float):
    if criteria.local_normalization:
        denom = np.maximum(criteria.dose_fraction * ref_vals, 1e-300)
    else:
        denom = criteria.dose_fraction * ref_max
    return ((pred_vals - ref_vals) / denom) ** 2


def _sorted_offsets(shape, spacing, r_max_mm: float):
    """Integer voxel offsets (excluding zero) sorted by physical distance,
    restricted to |offset| < r_max_mm."""
    l, h, w = shape
    dz, dy, dx = spacing
    nz = min(l - 1, int(r_max_mm / dz))
    ny = min(h - 1, int(r_max_mm / dy))
    nx = min(w - 1, int(r_max_mm / dx))
    offsets = []
    r2_max = r_max_mm * r_max_mm
    for oz in range(-nz, nz + 1):
        for oy in range(-ny, ny + 1):
            for ox in range(-nx, nx + 1):
                if oz == 0 and oy == 0 and ox == 0:
                    continue
                d2 = (oz * dz) ** 2 + (oy * dy) ** 2 + (ox * dx) ** 2
                if d2 < r2_max:
                    offsets.append((d2, oz, oy, ox))
    offsets.sort()
    return offsets


def _shift_slices(shape, offset):
    src, dst = [], []
    for n, o in zip(shape, offset):
        dst.append(slice(max(0, -o), n - max(0, o)))
        src.append(slice(max(0, o), n - max(0, -o)))
    return tuple(dst), tuple(src)


def gamma_grid(
    predicted: DoseGrid,
    reference: DoseGrid,
    criteria: GammaCriteria | None = None,
    prune: bool = True,
) -> np.ndarray:
    """Per-voxel gamma of the predicted grid against the reference.

    With ``prune`` the offset scan stops once the spatial term alone
    exceeds every voxel's current best candidate; results are identical
    to the unpruned full scan.
    """
    criteria = criteria or GammaCriteria()
    pred, ref, ref_max = _prepare(predicted, reference, criteria)
    spacing = predicted.spacing
    dta2 = criteria.dta_mm**2
    best = _dose_term(pred, ref, criteria, ref_max)
    if prune:
        r_need = criteria.dta_mm * float(np.sqrt(best.max()))
    else:
        r_need = 1.0 + float(
            np.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(pred.shape, spacing)))
        )
    for d2, oz, oy, ox in _sorted_offsets(pred.shape, spacing, r_need):
        s2 = d2 / dta2
        if prune and s2 >= best.max():
            break
        dst, src = _shift_slices(pred.shape, (oz, oy, ox))
        cand = s2 + _dose_term(pred[dst], ref[src], criteria, ref_max)
        np.minimum(best[dst], cand, out=best[dst])
    return np.sqrt(best)


def gamma_value(
    index: tuple,
    predicted: DoseGrid,
    reference: DoseGrid,
    criteria: GammaCriteria | None = None,
) -> float:
    """Gamma at one predicted voxel, by direct search over the reference."""
    criteria = criteria or GammaCriteria()
    pred, ref, ref_max = _prepare(predicted, reference, criteria)
    iz, iy, ix = index
    dz, dy, dx = predicted.spacing
    value = pred[iz, iy, ix]
    best = float(_dose_term(value, ref[iz, iy, ix], criteria, ref_max))
    r_need = criteria.dta_mm * np.sqrt(best)
    l, h, w = pred.shape
    z = (np.arange(l) - iz) * dz
    y = (np.arange(h) - iy) * dy
    x = (np.arange(w) - ix) * dx
    d2 = (
        z[:, None, None] ** 2 + y[None, :, None] ** 2 + x[None, None, :] ** 2
    ) / criteria.dta_mm**2
    candidates = d2 + _dose_term(value, ref, criteria, ref_max)
    return float(np.sqrt(min(best, candidates.min())))


def depth_section_histogram(gamma: np.ndarray, sections: int = 4) -> np.ndarray:
    """Fraction of failed voxels (gamma >= 1) in each beam-depth section,
    normalized by the total failure count; all zeros when nothing fails."""
    failed = gamma >= 1.0
    total = int(failed.sum())
    parts = np.array_split(failed, sections, axis=0)
    if total == 0:
        return np.zeros(sections)
    return np.array([part.sum() / total for part in parts])


def gamma_pass_rate(
    predicted: DoseGrid,
    reference: DoseGrid,
    criteria: GammaCriteria | None = None,
    sections: int = 4,
) -> GammaReport:
    """Gamma grid plus the pass rate over evaluated voxels.

    Voxels with gamma exactly zero (bitwise identical dose at the same
    position, typically no-dose regions) are excluded from the
    denominator. In masked mode, predicted voxels below the low-dose
    threshold are zeroed before evaluation. A voxel passes iff gamma < 1.
    """
    criteria = criteria or GammaCriteria()
    g = gamma_grid(predicted, reference, criteria)
    evaluated_mask = g != 0.0
    evaluated = int(evaluated_mask.sum())
    if evaluated == 0:
        pass_rate = 100.0
    else:
        pass_rate = 100.0 * float((g[evaluated_mask] < 1.0).mean())
    total_failed = int((g >= 1.0).sum())
    fractions = tuple(depth_section_histogram(g, sections))
    return GammaReport(
        gamma=g,
        pass_rate=pass_rate,
        evaluated=evaluated,
        total_failed=total_failed,
        section_fractions=fractions,
        criteria=criteria,
    )


def relative_error(predicted: DoseGrid, reference: DoseGrid) -> float:
    """Mean absolute voxel difference as a percentage of the maximum
    reference dose."""
    _check_compatible(predicted, reference)
    ref = reference.values.astype(np.float64)
    ref_max = float(ref.max())
    if ref_max <= 0.0:
        raise DataError("reference grid carries no dose; relative error is undefined")
    diff = np.abs(predicted.values.astype(np.float64) - ref)
    return float(diff.mean() / ref_max * 100.0)


def peak_depth_index(values: np.ndarray) -> int:
    """Beam-axis index of the per-slice maximum dose peak."""
    return int(values.max(axis=(1, 2)).argmax())


def format_report(report: GammaReport, rho: float | None = None) -> str:
    c = report.criteria
    lines = [
        f"gamma criteria: dd={c.dose_fraction * 100:g}% dta={c.dta_mm:g}mm "
        f"masked={'yes' if c.masked else 'no'}",
        f"pass rate: {report.pass_rate:.4f}%  "
        f"(evaluated {report.evaluated} voxels, {report.total_failed} failed)",
    ]
    if report.no_evaluated_voxels:
        lines.append("note: no voxels evaluated (all gamma values exactly zero)")
    fractions = " ".join(f"{f:.3f}" for f in report.section_fractions)
    lines.append(f"failed-voxel depth sections: [{fractions}]")
    if rho is not None:
        lines.append(f"relative error: {rho:.4f}%")
    return "\n".join(lines)
