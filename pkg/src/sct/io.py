"""Tensor files (MDT1), PGM rendering, CSV matrices and dictionary persistence."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

MAGIC = "MDT1"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_MAX_HEADER = 1 << 16


class FormatError(ValueError):
    """Malformed artifact file; ``offset`` is the byte position of the problem."""

    def __init__(self, msg, offset):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def _header_bytes(shape, dtype_tag, units):
    hdr = {"magic": MAGIC, "dtype": dtype_tag, "shape": [int(s) for s in shape],
           "order": "row-major", "units": units}
    return (json.dumps(hdr, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def tensor_bytes(t: np.ndarray, units: str = "", dtype: str | None = None) -> bytes:
    t = np.asarray(t)
    if dtype is None:
        dtype = "f32" if t.dtype == np.float32 else "f64"
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
    payload = np.ascontiguousarray(t, dtype=_DTYPES[dtype]).tobytes(order="C")
    return _header_bytes(t.shape, dtype, units) + payload


def write_tensor(t: np.ndarray, path, units: str = "", dtype: str | None = None) -> Path:
    """Write ``t`` as an MDT1 file. f32 arrays stay f32, anything else becomes f64."""
    path = Path(path)
    data = tensor_bytes(t, units, dtype)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def parse_tensor(data: bytes):
    """Decode MDT1 bytes into ``(array, header)``."""
    nl = data.find(b"\n", 0, _MAX_HEADER)
    if nl < 0:
        raise FormatError("missing header terminator", min(len(data), _MAX_HEADER))
    try:
        hdr = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}", 0) from None
    if not isinstance(hdr, dict) or hdr.get("magic") != MAGIC:
        raise FormatError(f"bad magic, expected {MAGIC!r}", 0)
    if hdr.get("dtype") not in _DTYPES:
        raise FormatError(f"unsupported dtype {hdr.get('dtype')!r}", 0)
    if hdr.get("order") != "row-major":
        raise FormatError(f"unsupported order {hdr.get('order')!r}", 0)
    shape = hdr.get("shape")
    if (not isinstance(shape, list) or not shape
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape)):
        raise FormatError("shape must be a nonempty list of nonnegative integers", 0)
    dt = _DTYPES[hdr["dtype"]]
    count = 1
    for s in shape:
        count *= s
    start = nl + 1
    need = count * dt.itemsize
    if need > 1 << 40:
        raise FormatError(f"shape {shape} overflows the payload limit", start)
    have = len(data) - start
    if have < need:
        raise FormatError(f"truncated payload: expected {need} bytes, found {have}", len(data))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", start + need)
    arr = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), hdr


def read_tensor(path) -> np.ndarray:
    return parse_tensor(Path(path).read_bytes())[0]


def read_tensor_header(path) -> dict:
    return parse_tensor(Path(path).read_bytes())[1]


def to_gray(image: np.ndarray, window) -> np.ndarray:
    """``round(255 * clamp((v - lo) / (hi - lo), 0, 1))`` with halves rounded up."""
    lo, hi = (float(w) for w in window)
    if not lo < hi:
        raise ValueError(f"display window needs lo < hi, got [{lo}, {hi}]")
    v = np.clip((np.asarray(image, dtype=float) - lo) / (hi - lo), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def render(t: np.ndarray, channel: int, window, path) -> Path:
    """Write one channel of a tensor as a binary PGM (P5)."""
    t = np.asarray(t)
    img = t[:, :, channel] if t.ndim == 3 else t
    if img.ndim != 2:
        raise ValueError("render needs a 2-D image or a 3-D tensor")
    g = to_gray(img, window)
    path = Path(path)
    path.write_bytes(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii") + g.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM", 0)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM supported", 0)
    body = parts[4]
    if len(body) != w * h:
        raise FormatError("PGM payload size mismatch", len(data) - len(body))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_matrix_csv(B: np.ndarray, path, materials=None) -> Path:
    """Attenuation matrix as CSV: one row per bin, one column per material."""
    B = np.asarray(B, dtype=float)
    materials = materials or [f"m{k}" for k in range(B.shape[1])]
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", *materials])
        for n, row in enumerate(B):
            w.writerow([n, *(repr(float(v)) for v in row)])
    return path


def read_matrix_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "bin":
        raise FormatError("attenuation CSV must start with a 'bin' header", 0)
    try:
        B = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except ValueError as e:
        raise FormatError(f"non-numeric attenuation entry: {e}", 0) from None
    return B, rows[0][1:]


def save_dictionary(D, path, train_config=None) -> Path:
    """Atoms go to an MDT1 file ``(S, T, 1)``; metadata to ``<path>.json``."""
    path = Path(path)
    write_tensor(D.atoms[:, :, None], path, units="unit-norm atoms")
    meta = {"patch_size": D.patch_size, "n_atoms": D.n_atoms,
            "history": [float(h) for h in D.history]}
    if train_config is not None:
        meta["train_config"] = asdict(train_config)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_dictionary(path):
    """Returns ``(Dictionary, TrainConfig or None)``."""
    from .dictlearn import Dictionary, TrainConfig

    atoms = read_tensor(path)
    side = Path(str(path) + ".json")
    if not side.exists():
        raise FormatError(f"dictionary sidecar {side} is missing", 0)
    meta = json.loads(side.read_text())
    D = Dictionary(atoms[:, :, 0], int(meta["patch_size"]), list(meta.get("history", [])))
    cfg = TrainConfig(**meta["train_config"]) if "train_config" in meta else None
    return D, cfg
