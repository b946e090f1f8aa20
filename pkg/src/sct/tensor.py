"""Dense 3-way tensors, unfolding, patches and per-channel normalization.

Tensors are plain ``numpy`` arrays of shape ``(J1, J2, C)``.

Unfolding convention
--------------------
``mode_unfold(t, k)`` puts dimension ``k`` on the rows. The remaining two
dimensions index columns lexicographically with the *first* retained
dimension varying fastest::

    mode 1: M[i1, i2 + J2 * i3]
    mode 2: M[i2, i1 + J1 * i3]
    mode 3: M[i3, i1 + J1 * i2]

so the mode-1 unfolding of a ``(J1, J2, M)`` material tensor is the plane
``[F_1 | F_2 | ... | F_M]`` of side-by-side channel images.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_tensor3(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if t.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains non-finite entries")
    return t


def _check_mode(mode: int) -> int:
    if mode not in (1, 2, 3):
        raise ValueError(f"mode must be 1, 2 or 3, got {mode!r}")
    return mode - 1


def mode_unfold(t: np.ndarray, mode: int) -> np.ndarray:
    axis = _check_mode(mode)
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected a 3-way tensor, got shape {t.shape}")
    return np.reshape(np.moveaxis(t, axis, 0), (t.shape[axis], -1), order="F")


def mode_fold(m: np.ndarray, mode: int, shape) -> np.ndarray:
    axis = _check_mode(mode)
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3:
        raise ValueError(f"shape must have three entries, got {shape}")
    m = np.asarray(m)
    rest = [s for i, s in enumerate(shape) if i != axis]
    if m.ndim != 2 or m.shape != (shape[axis], rest[0] * rest[1]):
        raise ValueError(
            f"matrix of shape {m.shape} cannot fold to {shape} along mode {mode}"
        )
    moved = np.reshape(m, (shape[axis], rest[0], rest[1]), order="F")
    return np.moveaxis(moved, 0, axis)


@dataclass
class PatchSet:
    """Vectorized ``s x s`` patches (columns, row-major within a patch).

    ``positions`` is a ``(P, 3)`` integer array of (row, col, plane) anchors.
    """

    patches: np.ndarray
    positions: np.ndarray
    patch_size: int

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=float)
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        if self.patches.shape[0] != self.patch_size**2:
            raise ValueError("patch rows must equal patch_size**2")
        if self.patches.shape[1] != self.positions.shape[0]:
            raise ValueError("one anchor per patch column is required")

    def __len__(self):
        return self.positions.shape[0]


def anchor_grid(extent: int, s: int, stride: int) -> np.ndarray:
    """Stride-grid anchors along one axis, last anchor clamped to the border."""
    if s > extent:
        raise ValueError(f"patch size {s} exceeds image extent {extent}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    anchors = list(range(0, extent - s + 1, stride))
    if anchors[-1] != extent - s:
        anchors.append(extent - s)
    return np.asarray(anchors, dtype=np.int64)


def extract_patches(image: np.ndarray, patch_size: int, stride: int = 1,
                    plane: int = 0) -> PatchSet:
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("extract_patches expects a 2-D image")
    s = int(patch_size)
    rows = anchor_grid(image.shape[0], s, stride)
    cols = anchor_grid(image.shape[1], s, stride)
    windows = np.lib.stride_tricks.sliding_window_view(image, (s, s))
    sel = windows[rows[:, None], cols[None, :]]  # (R, C, s, s)
    patches = sel.reshape(-1, s * s).T.copy()
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    positions = np.stack(
        [rr.ravel(), cc.ravel(), np.full(rr.size, plane, dtype=np.int64)], axis=1
    )
    return PatchSet(patches, positions, s)


def patches_at(image: np.ndarray, positions: np.ndarray, patch_size: int) -> PatchSet:
    """Patches of a 2-D image at explicit anchors."""
    image = np.asarray(image, dtype=float)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    s = int(patch_size)
    windows = np.lib.stride_tricks.sliding_window_view(image, (s, s))
    sel = windows[positions[:, 0], positions[:, 1]]
    return PatchSet(sel.reshape(-1, s * s).T.copy(), positions, s)


def _accumulate(p: PatchSet, shape):
    shape = tuple(int(v) for v in shape[:2])
    s = p.patch_size
    pos = p.positions
    if len(pos) and (pos[:, 0].min() < 0 or pos[:, 1].min() < 0
                     or pos[:, 0].max() + s > shape[0]
                     or pos[:, 1].max() + s > shape[1]):
        raise ValueError("patch anchors fall outside the target shape")
    off = np.arange(s)
    flat = ((pos[:, 0, None, None] + off[None, :, None]) * shape[1]
            + pos[:, 1, None, None] + off[None, None, :]).ravel()
    size = shape[0] * shape[1]
    # bincount sums in input order, so the result is deterministic.
    vals = p.patches.T.reshape(-1)
    acc = np.bincount(flat, weights=vals, minlength=size).reshape(shape)
    cnt = np.bincount(flat, minlength=size).reshape(shape).astype(float)
    return acc, cnt


def aggregate_patches(p: PatchSet, shape, normalize: bool = True) -> np.ndarray:
    """Scatter patches back into an image.

    With ``normalize`` each pixel is divided by the number of covering
    patches; without it this is the exact adjoint of patch extraction.
    """
    acc, cnt = _accumulate(p, shape)
    if not normalize:
        return acc
    if np.any(cnt == 0):
        raise RuntimeError("some pixels are not covered by any patch")
    return acc / cnt


def patch_coverage(shape, patch_size: int, stride: int) -> np.ndarray:
    """Number of stride-grid patches covering each pixel."""
    rows = anchor_grid(shape[0], patch_size, stride)
    cols = anchor_grid(shape[1], patch_size, stride)
    r = np.zeros(shape[0])
    c = np.zeros(shape[1])
    for a in rows:
        r[a:a + patch_size] += 1
    for a in cols:
        c[a:a + patch_size] += 1
    return np.outer(r, c)


@dataclass
class NormalizationRecord:
    offset: np.ndarray
    scale: np.ndarray

    def apply(self, t: np.ndarray) -> np.ndarray:
        return (np.asarray(t, dtype=float) - self.offset) / self.scale

    def invert(self, t: np.ndarray) -> np.ndarray:
        return np.asarray(t, dtype=float) * self.scale + self.offset


def normalize_materials(f: np.ndarray):
    """Per-channel min-max scaling to [0, 1].

    Constant channels map to zero and record ``scale = 1``.
    """
    f = as_tensor3(f)
    lo = f.min(axis=(0, 1))
    hi = f.max(axis=(0, 1))
    scale = hi - lo
    scale = np.where(scale > 0, scale, 1.0)
    rec = NormalizationRecord(offset=lo, scale=scale)
    return rec.apply(f), rec
