"""JSON pipeline configuration with strict schema checks."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .decomp import DlimdParams, TvmdParams
from .dictlearn import TrainConfig
from .recon import Geometry
from .spectral import Disk, PhantomSpec, SpectrumBins


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "phantom": {
        "shape": [256, 256],
        "pixel_size": 0.0324,
        "materials": ["water", "aluminum", "iodine"],
        "densities": {"water": 1.0, "aluminum": 2.699, "iodine": 0.02},
        "disks": [
            {"center": [128, 128], "radius": 100, "material": 0},
            {"center": [128, 70], "radius": 20, "material": 1},
            {"center": [70, 128], "radius": 18, "material": 2},
            {"center": [186, 128], "radius": 18, "material": 2, "fraction": 0.5, "balance": 0},
            {"center": [128, 186], "radius": 18, "material": 2, "fraction": 0.25, "balance": 0},
        ],
    },
    "geometry": {"n_angles": 360, "n_detectors": 384, "detector_spacing": 0.0324},
    "spectrum": {
        "e_lo": [20, 35, 50, 70],
        "e_hi": [35, 50, 70, 100],
        "e_eff": [30, 40, 60, 80],
        "attenuation_table": None,
    },
    "noise": {"enabled": True, "seed": 0, "I0": 5000.0},
    "dictionary": {},
    "dlimd": {},
    "tvmd": {},
    "rois": {
        "basis": [
            {"rects": [[110, 110, 146, 146]]},
            {"rects": [[118, 60, 138, 80]]},
            {"rects": [[60, 118, 80, 138]]},
        ],
        "evaluation": {
            "aluminum": {"rects": [[116, 58, 140, 82]]},
            "iodine_1": {"rects": [[60, 118, 80, 138]]},
            "iodine_0.5": {"rects": [[176, 118, 196, 138]]},
            "iodine_0.25": {"rects": [[118, 176, 138, 196]]},
            "water": {"rects": [[100, 140, 120, 160], [140, 96, 160, 116]]},
        },
    },
    "outputs": {"directory": "sct-runs"},
}

_SECTIONS = set(DEFAULT_CONFIG)


@dataclass
class PhantomConfig:
    shape: tuple = (256, 256)
    pixel_size: float = 0.0324
    materials: list = field(default_factory=list)
    densities: dict = field(default_factory=dict)
    disks: list = field(default_factory=list)


@dataclass
class SpectrumConfig:
    e_lo: tuple = ()
    e_hi: tuple = ()
    e_eff: tuple = ()
    attenuation_table: str | None = None


@dataclass
class NoiseConfig:
    enabled: bool = True
    seed: int = 0
    I0: object = 5000.0


@dataclass
class PipelineConfig:
    phantom: PhantomConfig
    geometry: Geometry
    spectrum: SpectrumConfig
    noise: NoiseConfig
    dictionary: TrainConfig
    dlimd: DlimdParams
    tvmd: TvmdParams
    rois: dict
    outputs: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def materials(self):
        return list(self.phantom.materials)

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(tuple(self.phantom.shape), self.phantom.pixel_size,
                           len(self.phantom.materials), self.phantom.disks)

    def bins(self) -> SpectrumBins:
        n = len(self.spectrum.e_eff)
        i0 = self.noise.I0
        i0 = list(i0) if isinstance(i0, (list, tuple)) else [i0] * n
        return SpectrumBins(self.spectrum.e_lo, self.spectrum.e_hi, self.spectrum.e_eff, i0)

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory is excluded)."""
        body = {k: v for k, v in self.raw.items() if k != "outputs"}
        text = json.dumps(body, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("densities", "evaluation"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(section, data, allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    extra = sorted(set(data) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(extra)}")


def _build(cls, section, data, rename=None, skip=()):
    rename = rename or {}
    names = [f.name for f in fields(cls) if f.name not in skip]
    allowed = [rename.get(n, n) for n in names]
    _check_keys(section, data, allowed)
    kwargs = {n: data[rename.get(n, n)] for n in names if rename.get(n, n) in data}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from None


def _disk(i, d):
    _check_keys(f"phantom.disks[{i}]", d, ["center", "radius", "material", "fraction", "balance"])
    for key in ("center", "radius", "material"):
        if key not in d:
            raise ConfigError(f"phantom.disks[{i}] is missing {key!r}")
    return Disk(tuple(float(c) for c in d["center"]), float(d["radius"]), int(d["material"]),
                float(d.get("fraction", 1.0)), d.get("balance"))


def _roi(name, r):
    if isinstance(r, dict):
        _check_keys(name, r, ["rects", "pixels"])
        for rect in r.get("rects", []):
            if len(rect) != 4:
                raise ConfigError(f"{name}: rects need [r0, c0, r1, c1]")
    return r


def parse_config(data: dict) -> PipelineConfig:
    """Validate a config document (merged over the defaults) before any computation."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", data, _SECTIONS)
    raw = _merge(DEFAULT_CONFIG, data)
    for sec in ("noise", "spectrum", "geometry", "outputs"):
        _check_keys(sec, raw[sec], DEFAULT_CONFIG[sec])

    ph = raw["phantom"]
    _check_keys("phantom", ph, [f.name for f in fields(PhantomConfig)])
    mats = list(ph["materials"])
    if not mats:
        raise ConfigError("phantom.materials is empty")
    missing = [m for m in mats if m not in ph["densities"]]
    if missing:
        raise ConfigError(f"phantom.densities missing {missing}")
    try:
        disks = [_disk(i, d) for i, d in enumerate(ph["disks"])]
        phantom = PhantomConfig(tuple(int(s) for s in ph["shape"]), float(ph["pixel_size"]),
                                mats, dict(ph["densities"]), disks)
        for d in disks:
            for m in (d.material, d.balance):
                if m is not None and not 0 <= m < len(mats):
                    raise ConfigError(f"disk material index {m} out of range")
    except (TypeError, ValueError, KeyError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid 'phantom' section: {e}") from None

    geo = dict(raw["geometry"], shape=phantom.shape, pixel_size=phantom.pixel_size)
    geometry = _build(Geometry, "geometry", geo)
    spectrum = _build(SpectrumConfig, "spectrum", raw["spectrum"])
    noise = _build(NoiseConfig, "noise", raw["noise"])
    if isinstance(noise.seed, bool) or not isinstance(noise.seed, int) or noise.seed < 0:
        raise ConfigError("noise.seed must be a nonnegative integer")
    dsec = dict(raw["dictionary"])
    dsec.setdefault("seed", noise.seed)
    dictionary = _build(TrainConfig, "dictionary", dsec)
    dl = dict(raw["dlimd"])
    dl.setdefault("eps", DlimdParams().eps if len(mats) == 3 else [0.5] * len(mats))
    dlimd = _build(DlimdParams, "dlimd", dl)
    if len(dlimd.eps) != len(mats):
        raise ConfigError(f"dlimd.eps needs {len(mats)} entries")
    tvmd = _build(TvmdParams, "tvmd", raw["tvmd"], rename={"lam": "lambda"})

    rois = raw["rois"]
    _check_keys("rois", rois, ["basis", "evaluation"])
    if len(rois["basis"]) != len(mats):
        raise ConfigError(f"rois.basis needs one ROI per material ({len(mats)})")
    for i, r in enumerate(rois["basis"]):
        _roi(f"rois.basis[{i}]", r)
    for k, r in rois["evaluation"].items():
        _roi(f"rois.evaluation.{k}", r)

    cfg = PipelineConfig(phantom, geometry, spectrum, noise, dictionary, dlimd, tvmd,
                         rois, dict(raw["outputs"]), raw)
    try:
        cfg.bins()
    except ValueError as e:
        raise ConfigError(f"invalid 'spectrum' section: {e}") from None
    return cfg


def load_config(path=None, seed: int | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if seed is not None:
        data = copy.deepcopy(data)
        data.setdefault("noise", {})["seed"] = int(seed)
    return parse_config(data)


def config_to_json(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.raw, indent=2, sort_keys=True) + "\n"


def effective_params(cfg: PipelineConfig) -> dict:
    return {"dictionary": asdict(cfg.dictionary), "dlimd": asdict(cfg.dlimd),
            "tvmd": asdict(cfg.tvmd)}
