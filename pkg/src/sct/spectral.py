"""Synthetic multi-material phantoms and per-bin photon-count simulation.

The forward model is monochromatic per energy bin: bin ``n`` sees the
attenuation of every material at its effective energy, so after the log
transform each sinogram is exactly ``A`` applied to ``sum_m theta_nm f_m``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .recon import Geometry, forward_project
from .tensor import mode_fold, mode_unfold

log = logging.getLogger(__name__)


class EnergyRangeError(ValueError):
    pass


@dataclass
class MassAttenuationTable:
    """Mass-attenuation samples ``material -> (energies keV, mu/rho cm^2/g)``."""

    samples: dict

    def __post_init__(self):
        for name, (e, v) in self.samples.items():
            e = np.asarray(e, dtype=float)
            v = np.asarray(v, dtype=float)
            if e.ndim != 1 or e.shape != v.shape or e.size < 2:
                raise ValueError(f"{name}: need at least two (energy, value) samples")
            if np.any(np.diff(e) <= 0):
                raise ValueError(f"{name}: energies must be strictly increasing")
            if np.any(v <= 0):
                raise ValueError(f"{name}: coefficients must be positive")
            self.samples[name] = (e, v)

    @property
    def materials(self):
        return list(self.samples)


def load_attenuation_table(path=None) -> MassAttenuationTable:
    """Read a ``material,energy_keV,mu_over_rho`` CSV (bundled table by default)."""
    if path is None:
        text = resources.files("sct").joinpath("data/attenuation.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = {}
    for rec in csv.DictReader(text.splitlines()):
        rows.setdefault(rec["material"].strip(), []).append(
            (float(rec["energy_keV"]), float(rec["mu_over_rho"]))
        )
    samples = {}
    for name, pairs in rows.items():
        pairs.sort()
        samples[name] = ([p[0] for p in pairs], [p[1] for p in pairs])
    return MassAttenuationTable(samples)


def attenuation_at(table: MassAttenuationTable, material: str, energy: float) -> float:
    """Log-log linear interpolation of mu/rho (cm^2/g) at ``energy`` keV."""
    if material not in table.samples:
        raise ValueError(f"material {material!r} not in table")
    e, v = table.samples[material]
    if not (e[0] <= energy <= e[-1]):
        raise EnergyRangeError(
            f"{energy} keV outside tabulated range [{e[0]}, {e[-1]}] for {material}"
        )
    k = int(np.searchsorted(e, energy))
    if e[k] == energy:
        return float(v[k])
    w = (np.log(energy) - np.log(e[k - 1])) / (np.log(e[k]) - np.log(e[k - 1]))
    return float(np.exp((1 - w) * np.log(v[k - 1]) + w * np.log(v[k])))


@dataclass(frozen=True)
class SpectrumBins:
    e_lo: tuple
    e_hi: tuple
    e_eff: tuple
    i0: tuple

    def __post_init__(self):
        for name in ("e_lo", "e_hi", "e_eff", "i0"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        n = len(self.e_eff)
        if not (len(self.e_lo) == len(self.e_hi) == len(self.i0) == n) or n == 0:
            raise ValueError("all bin fields need the same nonzero length")
        for k in range(n):
            if not self.e_lo[k] < self.e_eff[k] < self.e_hi[k]:
                raise ValueError(f"bin {k}: effective energy must lie inside the window")
            if self.i0[k] <= 0:
                raise ValueError(f"bin {k}: incident flux must be positive")
            if k and self.e_lo[k] < self.e_hi[k - 1]:
                raise ValueError("bins must be ordered and non-overlapping")

    def __len__(self):
        return len(self.e_eff)


@dataclass(frozen=True)
class Disk:
    center: tuple
    radius: float
    material: int
    fraction: float = 1.0
    # material receiving ``1 - fraction`` inside the disk; None means air
    balance: int | None = None


@dataclass
class PhantomSpec:
    shape: tuple = (256, 256)
    pixel_size: float = 0.0324
    n_materials: int = 3
    disks: list = field(default_factory=list)


def make_phantom(spec: PhantomSpec):
    """Rasterize disks into a ``(J1, J2, M)`` fraction tensor and an air map.

    A pixel belongs to a disk when its center lies within the radius. Later
    disks overwrite earlier ones, so every pixel holds either air or the
    composition of the last disk covering it.
    """
    j1, j2 = (int(s) for s in spec.shape)
    f = np.zeros((j1, j2, spec.n_materials))
    ii, jj = np.mgrid[:j1, :j2]
    for d in spec.disks:
        if not 0.0 <= d.fraction <= 1.0:
            raise ValueError(f"disk fraction {d.fraction} outside [0, 1]")
        for m in (d.material, d.balance):
            if m is not None and not 0 <= m < spec.n_materials:
                raise ValueError(f"disk material index {m} out of range")
        inside = (ii - d.center[0]) ** 2 + (jj - d.center[1]) ** 2 <= d.radius**2
        f[inside] = 0.0
        f[inside, d.material] = d.fraction
        if d.balance is not None:
            f[inside, d.balance] += 1.0 - d.fraction
    air = 1.0 - f.sum(axis=2)
    return f, air


def build_attenuation_matrix_true(table: MassAttenuationTable, bins: SpectrumBins,
                                  materials, densities) -> np.ndarray:
    """``N x M`` matrix of linear attenuation (cm^-1) at each bin's effective energy."""
    out = np.empty((len(bins), len(materials)))
    for m, name in enumerate(materials):
        if name not in table.samples:
            raise ValueError(f"material {name!r} missing from attenuation table")
        if name not in densities:
            raise ValueError(f"no density given for material {name!r}")
        for n, e in enumerate(bins.e_eff):
            out[n, m] = attenuation_at(table, name, e) * float(densities[name])
    return out


def spectral_images(f: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Image-domain model ``X(3) = basis @ F(3)``: ``(J1, J2, M) -> (J1, J2, N)``."""
    x3 = np.asarray(basis) @ mode_unfold(f, 3)
    return mode_fold(x3, 3, f.shape[:2] + (basis.shape[0],))


@dataclass
class CountData:
    y: np.ndarray  # (V, C, N)
    geometry: Geometry
    seed: int | None


def line_integrals(f_true: np.ndarray, basis: np.ndarray, geom: Geometry) -> np.ndarray:
    """Per-bin ``A x_n`` for ``x_n = sum_m theta_nm f_m``, shape ``(V, C, N)``.

    Projects each material once and mixes the sinograms, which equals
    projecting each bin image because the projector is linear.
    """
    f_true = np.asarray(f_true, dtype=float)
    basis = np.asarray(basis, dtype=float)
    if f_true.shape[:2] != geom.shape:
        raise ValueError(f"phantom grid {f_true.shape[:2]} does not match geometry {geom.shape}")
    if basis.shape[1] != f_true.shape[2]:
        raise ValueError("attenuation matrix columns must match material channels")
    mats = np.stack([forward_project(f_true[:, :, m], geom)
                     for m in range(f_true.shape[2])], axis=-1)
    return mats @ basis.T


def sample_poisson(mean: np.ndarray, seed: int) -> np.ndarray:
    """Poisson draw of a ``(V, C, N)`` mean array.

    Each (bin, view) row gets its own child stream of ``SeedSequence(seed)``
    so the draw does not depend on evaluation order.
    """
    v_count, _, n_count = mean.shape
    children = np.random.SeedSequence(seed).spawn(n_count * v_count)
    out = np.empty_like(mean)
    for n in range(n_count):
        for v in range(v_count):
            rng = np.random.default_rng(children[n * v_count + v])
            out[v, :, n] = rng.poisson(mean[v, :, n])
    return out


def synthesize_counts(f_true, basis, geom: Geometry, bins: SpectrumBins,
                      noise: bool = False, seed: int | None = 0) -> CountData:
    basis = np.asarray(basis, dtype=float)
    if basis.shape[0] != len(bins):
        raise ValueError("attenuation matrix rows must match the number of bins")
    p = line_integrals(f_true, basis, geom)
    y = np.asarray(bins.i0)[None, None, :] * np.exp(-p)
    if noise:
        if seed is None:
            raise ValueError("noisy simulation needs a seed")
        y = sample_poisson(y, seed)
    return CountData(y=y, geometry=geom, seed=seed if noise else None)


def log_normalize(counts: CountData, bins: SpectrumBins, y_floor: float = 0.5) -> np.ndarray:
    """``p = -ln(max(y, y_floor) / I0)`` per bin, shape ``(V, C, N)``."""
    y = np.asarray(counts.y, dtype=float)
    if np.any(y < 0):
        raise ValueError("counts must be nonnegative")
    i0 = np.asarray(bins.i0)[None, None, :]
    return -np.log(np.maximum(y, y_floor) / i0)
