"""Deterministic toy proton transport: phantoms, depth-dose, lateral spread.

This is the data-generating oracle for the learned model. It is analytic
and exactly reproducible: water-equivalent depth is accumulated along the
beam axis, a Bragg-like depth-dose curve is evaluated at each voxel's
water-equivalent path length, and a lateral Gaussian whose width grows
linearly with traversed depth shapes the beam cross-section. No claim of
clinical accuracy is made; the curve is merely Bragg-shaped and fully
testable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grids import DoseGrid, GeometryGrid, write_dose, write_geometry

_f32 = np.float32

# Range-energy rule: range_mm = RANGE_ALPHA_MM * energy**RANGE_EXPONENT.
RANGE_ALPHA_MM = 0.022
RANGE_EXPONENT = 1.77

# Depth-dose shape: an affine entrance rise plus a Gaussian peak at the range.
ENTRANCE_LEVEL = 0.3
ENTRANCE_RISE = 0.7
PEAK_SIGMA_FRACTION = 0.012
FALLOFF_SIGMAS = 6.0

# Lateral beam model.
SIGMA_GROWTH_PER_MM = 0.02
FWHM_TO_SIGMA = 1.0 / 2.3548200450309493

# Relative stopping power ranges per material class.
MATERIAL_RANGES = {
    "air": (0.001, 0.05),
    "lung": (0.2, 0.5),
    "soft": (0.9, 1.1),
    "bone": (1.3, 1.9),
}

PHANTOM_LAYOUTS = ("water", "slabs", "blobs")

# Default block geometry: 3 mm along the beam, 1 mm vertically, 3 mm across.
DEFAULT_SHAPE = (64, 16, 8)
DEFAULT_SPACING = (3.0, 1.0, 3.0)


@dataclass
class BeamSpec:
    """A mono-energetic pencil beam entering along the first grid axis."""

    energy: float
    fwhm_mm: float = 10.0
    center_mm: tuple[float, float] | None = None  # (y, x); None centers on the grid

    def __post_init__(self):
        self.energy = float(self.energy)
        if not 80.0 <= self.energy <= 130.0:
            raise ValueError(f"beam energy {self.energy} MeV outside [80, 130]")
        if self.fwhm_mm <= 0:
            raise ValueError("beam FWHM must be positive")


@dataclass
class PhantomSpec:
    """Recipe for reproducible synthetic stopping-power blocks."""

    seed: int = 0
    layout: str = "slabs"
    materials: dict = field(default_factory=lambda: dict(MATERIAL_RANGES))

    def __post_init__(self):
        if self.layout not in PHANTOM_LAYOUTS:
            raise ValueError(f"unknown phantom layout {self.layout!r}")


def range_mm(energy: float) -> float:
    """Nominal range in water for a beam of the given energy (MeV)."""
    return RANGE_ALPHA_MM * float(energy) ** RANGE_EXPONENT


def bragg_depth_dose(energy: float, wepl) -> np.ndarray:
    """Relative depth-dose at water-equivalent depth ``wepl`` (mm).

    The curve rises affinely from a positive entrance level, peaks at
    exactly 1.0 at the nominal range, and is identically zero beyond the
    range plus a falloff margin.
    """
    if energy <= 0:
        raise ValueError("energy must be positive")
    r = _f32(range_mm(energy))
    sigma = _f32(PEAK_SIGMA_FRACTION) * r
    w = np.asarray(wepl, dtype=_f32)
    peak = np.exp(-_f32(0.5) * ((w - r) / sigma) ** 2, dtype=_f32)
    rise = _f32(ENTRANCE_LEVEL) * (1 + _f32(ENTRANCE_RISE) * np.minimum(w, r) / r)
    top = _f32(ENTRANCE_LEVEL * (1.0 + ENTRANCE_RISE) + 1.0)
    curve = np.where(w <= r, rise + peak, top * peak) / top
    curve = np.where(w > r + _f32(FALLOFF_SIGMAS) * sigma, _f32(0.0), curve)
    return curve.astype(_f32)


def radiological_depth(geometry: GeometryGrid) -> np.ndarray:
    """Water-equivalent depth (mm) at each voxel center.

    Cumulative sum of density times beam-axis spacing down each column,
    counting half of the voxel's own contribution (center evaluation).
    """
    rho = geometry.values
    dz = _f32(geometry.spacing[0])
    csum = np.cumsum(rho, axis=0, dtype=_f32)
    return (csum - _f32(0.5) * rho) * dz


def _lateral_weight(shape, spacing, beam: BeamSpec) -> np.ndarray:
    l, h, w = shape
    dz, dy, dx = (_f32(s) for s in spacing)
    if beam.center_mm is None:
        cy = _f32(h) * dy / _f32(2.0)
        cx = _f32(w) * dx / _f32(2.0)
    else:
        cy, cx = (_f32(c) for c in beam.center_mm)
    z = (np.arange(l, dtype=_f32) + _f32(0.5)) * dz
    y = (np.arange(h, dtype=_f32) + _f32(0.5)) * dy
    x = (np.arange(w, dtype=_f32) + _f32(0.5)) * dx
    sigma0 = _f32(beam.fwhm_mm) * _f32(FWHM_TO_SIGMA)
    sigma = sigma0 + _f32(SIGMA_GROWTH_PER_MM) * z
    r2 = (y - cy)[:, None] ** 2 + (x - cx)[None, :] ** 2
    denom = _f32(2.0) * sigma * sigma
    return np.exp(-r2[None, :, :] / denom[:, None, None], dtype=_f32)


def simulate_dose(geometry: GeometryGrid, beam: BeamSpec) -> DoseGrid:
    """Evaluate the analytic transport model on every voxel."""
    wepl = radiological_depth(geometry)
    depth_dose = bragg_depth_dose(beam.energy, wepl)
    weight = _lateral_weight(geometry.shape, geometry.spacing, beam)
    values = depth_dose * weight
    return DoseGrid(values, geometry.spacing, energy=beam.energy)


def add_pseudo_mc_noise(dose: DoseGrid, level: float, seed: int) -> DoseGrid:
    """Perturb nonzero voxels with Gaussian noise of std ``level * max dose``.

    Mimics the flat noise floor of a Monte Carlo engine; results are
    clamped at zero and reproducible for a given seed.
    """
    if level < 0:
        raise ValueError("noise level must be nonnegative")
    values = dose.values.copy()
    if level == 0 or not values.any():
        return DoseGrid(values, dose.spacing, dose.energy)
    rng = np.random.default_rng(seed)
    std = _f32(level) * values.max()
    noise = rng.standard_normal(values.shape, dtype=_f32) * std
    nonzero = values != 0
    values[nonzero] = np.maximum(values[nonzero] + noise[nonzero], _f32(0.0))
    return DoseGrid(values, dose.spacing, dose.energy)


def mask_low_dose(values: np.ndarray, threshold_fraction: float) -> np.ndarray:
    """Zero out voxels below ``threshold_fraction`` of the block maximum."""
    if threshold_fraction <= 0 or not values.any():
        return values.copy()
    cut = _f32(threshold_fraction) * values.max()
    return np.where(values < cut, _f32(0.0), values)


# ---------------------------------------------------------------------------
# phantom construction


def _sample_slab_profile(rng, n_slices, materials, soft_first=True):
    """Per-slice densities for a stack of uniform slabs."""
    names = ["soft", "bone", "lung", "air"]
    probs = [0.65, 0.12, 0.15, 0.08]
    # slab boundaries on even slice indices, at least 2 slices per slab
    candidates = np.arange(2, n_slices - 1, 2)
    n_slabs = min(int(rng.integers(3, 9)), len(candidates) + 1)
    cuts = np.sort(rng.choice(candidates, size=n_slabs - 1, replace=False))
    bounds = np.concatenate([[0], cuts, [n_slices]])
    profile = np.empty(n_slices, dtype=_f32)
    for k in range(n_slabs):
        if k == 0 and soft_first:
            name = "soft"
        else:
            name = names[int(rng.choice(len(names), p=probs))]
        lo, hi = materials[name]
        profile[bounds[k] : bounds[k + 1]] = _f32(rng.uniform(lo, hi))
    return profile


def _insert_blobs(rng, values, spacing, materials):
    """Carve 1-3 ellipsoidal inclusions of a different material."""
    l, h, w = values.shape
    dz, dy, dx = spacing
    zc = (np.arange(l) + 0.5) * dz
    yc = (np.arange(h) + 0.5) * dy
    xc = (np.arange(w) + 0.5) * dx
    for _ in range(int(rng.integers(1, 4))):
        name = ["air", "lung", "bone"][int(rng.choice(3))]
        lo, hi = materials[name]
        density = _f32(rng.uniform(lo, hi))
        center = (
            rng.uniform(0.15, 0.85) * l * dz,
            rng.uniform(0.2, 0.8) * h * dy,
            rng.uniform(0.2, 0.8) * w * dx,
        )
        radii = (rng.uniform(6, 30), rng.uniform(3, 10), rng.uniform(3, 10))
        dist2 = (
            ((zc - center[0]) / radii[0])[:, None, None] ** 2
            + ((yc - center[1]) / radii[1])[None, :, None] ** 2
            + ((xc - center[2]) / radii[2])[None, None, :] ** 2
        )
        values[dist2 <= 1.0] = density
    return values


def generate_phantom(
    spec: PhantomSpec,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    sample_index: int = 0,
    max_energy: float = 130.0,
) -> GeometryGrid:
    """Deterministically build phantom ``sample_index`` of a given spec.

    Slab and blob phantoms are rejection-sampled so that the central
    columns reach the full water-equivalent range of a ``max_energy``
    beam, keeping the dose peak inside the block.
    """
    l, h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(sample_index, 0)))
    if spec.layout == "water":
        return GeometryGrid(np.ones(shape, dtype=_f32), spacing)

    wepl_needed = range_mm(max_energy) + 4.0 * spacing[0]
    for _ in range(64):
        profile = _sample_slab_profile(rng, l, spec.materials)
        values = np.broadcast_to(profile[:, None, None], shape).copy()
        if spec.layout == "blobs":
            values = _insert_blobs(rng, values, spacing, spec.materials)
        center_cols = values[:, h // 2 - 1 : h // 2 + 1, w // 2 - 1 : w // 2 + 1]
        total_wepl = center_cols.sum(axis=0).min() * spacing[0]
        if total_wepl >= wepl_needed:
            return GeometryGrid(values, spacing)
    # extremely unlucky stream: fall back to uniform soft tissue
    lo, hi = spec.materials["soft"]
    return GeometryGrid(np.full(shape, rng.uniform(lo, hi), dtype=_f32), spacing)


# ---------------------------------------------------------------------------
# dataset generation


def generate_dataset(
    count: int,
    phantom_spec: PhantomSpec,
    out_dir,
    energy_sampler=None,
    energy_range: tuple[float, float] = (80.0, 130.0),
    energies_per_geometry: int = 4,
    shape=DEFAULT_SHAPE,
    spacing=DEFAULT_SPACING,
    beam_fwhm_mm: float = 10.0,
    noise_level: float = 0.0,
    mask_fraction: float = 0.006,
) -> list[Path]:
    """Write ``count`` geometries, each with dose blocks at sampled energies.

    Energies are sampled uniformly in ``energy_range`` unless a sampler
    callable ``(rng) -> MeV`` is given, and rounded to one decimal. The
    range's upper end also sets how much water-equivalent depth phantoms
    must provide. Every sample derives its own RNG stream from
    (seed, index), so parallel and serial generation produce identical
    bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(count):
        geometry = generate_phantom(
            phantom_spec, shape, spacing, sample_index=i, max_energy=energy_range[1]
        )
        geom_path = out_dir / f"geom_{i:05d}.dgrd"
        write_geometry(geom_path, geometry)
        written.append(geom_path)
        energy_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=phantom_spec.seed, spawn_key=(i, 1))
        )
        for j in range(energies_per_geometry):
            if energy_sampler is None:
                energy = float(energy_rng.uniform(*energy_range))
            else:
                energy = float(energy_sampler(energy_rng))
            energy = round(energy, 1)
            dose = simulate_dose(geometry, BeamSpec(energy, fwhm_mm=beam_fwhm_mm))
            if noise_level > 0:
                noise_seed = int(
                    np.random.SeedSequence(
                        entropy=phantom_spec.seed, spawn_key=(i, 2 + j)
                    ).generate_state(1)[0]
                )
                dose = add_pseudo_mc_noise(dose, noise_level, noise_seed)
            masked = mask_low_dose(dose.values, mask_fraction)
            dose_path = out_dir / f"dose_{i:05d}_{j}.dgrd"
            write_dose(dose_path, DoseGrid(masked, spacing, energy=energy))
            written.append(dose_path)
    return written
