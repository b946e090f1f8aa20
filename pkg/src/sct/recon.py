"""Parallel-beam projector and filtered backprojection.

Image pixel ``(i, j)`` has its center at ``x = (j - (J2-1)/2) * px`` and
``y = ((J1-1)/2 - i) * px``; detector ``c`` sits at
``t = (c - (C-1)/2) * d``. View ``v`` has angle ``theta = v * pi / V`` and
integrates along lines ``x cos(theta) + y sin(theta) = t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates


@dataclass(frozen=True)
class Geometry:
    n_angles: int = 360
    n_detectors: int = 384
    detector_spacing: float = 0.0324
    shape: tuple = (256, 256)
    pixel_size: float = 0.0324

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.n_angles < 1 or self.n_detectors < 1:
            raise ValueError("need at least one angle and one detector")
        if self.detector_spacing <= 0 or self.pixel_size <= 0:
            raise ValueError("spacings must be positive")
        diag = self.pixel_size * np.hypot(*self.shape)
        if self.n_detectors * self.detector_spacing < diag * (1 - 1e-12):
            raise ValueError(
                f"detector span {self.n_detectors * self.detector_spacing:.4g} cm "
                f"does not cover the image diagonal {diag:.4g} cm"
            )

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * np.pi / self.n_angles

    @property
    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing


def _check_image(image, geom: Geometry) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.shape != geom.shape:
        raise ValueError(f"image shape {image.shape} does not match geometry {geom.shape}")
    return image


def forward_project(image: np.ndarray, geom: Geometry) -> np.ndarray:
    """Ray-driven line integrals, shape ``(V, C)``.

    Each ray is sampled at pixel-size steps and the image is read with
    bilinear interpolation (zero outside the grid).
    """
    image = _check_image(image, geom)
    j1, j2 = geom.shape
    px = geom.pixel_size
    half = 0.5 * px * np.hypot(j1, j2) + px
    n_steps = int(np.ceil(2 * half / px)) + 1
    s = (np.arange(n_steps) - (n_steps - 1) / 2) * px
    t = geom.detector_positions
    sino = np.empty((geom.n_angles, geom.n_detectors))
    for v, theta in enumerate(geom.angles):
        c, sn = np.cos(theta), np.sin(theta)
        x = t[:, None] * c - s[None, :] * sn
        y = t[:, None] * sn + s[None, :] * c
        coords = np.stack([(j1 - 1) / 2 - y / px, x / px + (j2 - 1) / 2])
        vals = map_coordinates(image, coords.reshape(2, -1), order=1,
                               mode="grid-constant", cval=0.0)
        sino[v] = vals.reshape(t.size, n_steps).sum(axis=1) * px
    return sino


def ramp_response(n_detectors: int, filter: str = "ramp") -> np.ndarray:
    """Frequency response of the discrete ramp filter in sample units.

    Built from the band-limited spatial kernel (``h[0] = 1/4``,
    ``h[odd k] = -1/(pi k)^2``) zero-padded to the next power of two that is
    at least ``2 C``.
    """
    size = 1 << int(np.ceil(np.log2(max(2 * n_detectors, 2))))
    k = np.concatenate([np.arange(0, size // 2 + 1), np.arange(-size // 2 + 1, 0)])
    h = np.zeros(size)
    h[0] = 0.25
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    resp = np.real(np.fft.fft(h))
    if filter == "shepp-logan":
        resp = resp * np.sinc(np.fft.fftfreq(size))
    elif filter != "ramp":
        raise ValueError(f"unknown filter {filter!r}")
    return resp


def filter_sinogram(sino: np.ndarray, geom: Geometry, filter: str = "ramp") -> np.ndarray:
    resp = ramp_response(geom.n_detectors, filter)
    size = resp.size
    padded = np.zeros((sino.shape[0], size))
    padded[:, :geom.n_detectors] = sino
    out = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * resp, axis=1))
    return out[:, :geom.n_detectors] / geom.detector_spacing


def backproject(filtered: np.ndarray, geom: Geometry) -> np.ndarray:
    j1, j2 = geom.shape
    px = geom.pixel_size
    x = (np.arange(j2) - (j2 - 1) / 2) * px
    y = ((j1 - 1) / 2 - np.arange(j1)) * px
    xx, yy = np.meshgrid(x, y)
    t0 = geom.detector_positions[0]
    d = geom.detector_spacing
    det_idx = np.arange(geom.n_detectors, dtype=float)
    img = np.zeros(geom.shape)
    for v, theta in enumerate(geom.angles):
        u = (xx * np.cos(theta) + yy * np.sin(theta) - t0) / d
        img += np.interp(u, det_idx, filtered[v], left=0.0, right=0.0)
    return img * (np.pi / geom.n_angles)


def fbp(sino: np.ndarray, geom: Geometry, filter: str = "ramp") -> np.ndarray:
    """Filtered backprojection of a ``(V, C)`` sinogram; output in cm^-1."""
    sino = np.asarray(sino, dtype=float)
    if sino.shape != (geom.n_angles, geom.n_detectors):
        raise ValueError(
            f"sinogram shape {sino.shape} does not match geometry "
            f"({geom.n_angles}, {geom.n_detectors})"
        )
    return backproject(filter_sinogram(sino, geom, filter), geom)
