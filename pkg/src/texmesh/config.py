"""Flat key-value configuration.

Files hold one ``key = value`` per line (``#`` starts a comment).  Any key can
be overridden from the environment as ``TEXMESH_<KEY>`` (upper case).
Unknown keys are rejected by name.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

ENV_PREFIX = "TEXMESH_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 0
    precision: str = "float64"  # feature extractor arithmetic; geometry, rendering and banks stay float64

    # geometry
    template_level: int = 4
    psi_hidden: int = 128
    psi_layers: int = 3
    fit_steps: int = 400
    fit_lr: float = 0.01
    lambda_lap: float = 0.3
    lambda_normal: float = 0.1

    # camera / images
    image_size: int = 128
    stride: int = 8
    focal_factor: float = 2.5  # focal length in pixels = factor * image width
    distance: float = 6.0

    # textures
    n_bins: int = 7
    bin_angle: float = 60.0
    texture_size: int = 256
    feature_dim: int = 128
    temperature_T: float = 5.0
    sigma: float = 1.0
    momentum: float = 0.9
    bg_capacity: int = 2560
    bg_per_image: int = 64
    bg_margin: int = 1  # feature pixels kept clear of the object when sampling background
    skip_extent: float = 0.2

    # training
    epochs: int = 800
    lr: float = 1e-4
    lr_decay: float = 0.996
    batch_size: int = 16
    n_pos: int = 1000
    n_neg: int = 2000
    n_class_neg: int = 512
    tau: float = 0.1
    ce_temperature: float = 0.07
    extractor_channels: str = "32,64,128,128"

    # inference
    init_azimuths: int = 12
    init_elevations: int = 4
    init_thetas: int = 3
    elevation_min: float = -15.0  # degrees
    elevation_max: float = 45.0
    theta_max: float = 15.0
    inf_steps: int = 300
    inf_lr: float = 0.05
    simplex_latent: bool = False
    full_res_segmentation: bool = True

    # synthetic scenes
    n_per_class: int = 300
    occlusion_level: int = 0
    distance_jitter: float = 0.05

    def replace(self, **kw) -> "Config":
        return replace(self, **kw)

    @property
    def feature_size(self) -> int:
        if self.image_size % self.stride:
            raise ConfigError("image_size must be divisible by stride")
        return self.image_size // self.stride

    @property
    def focal(self) -> float:
        return self.focal_factor * self.image_size

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(c) for c in str(self.extractor_channels).split(",") if c.strip())

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(key: str, raw):
    f = _FIELDS[key]
    typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str, "bool": bool}[f.type]
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"invalid boolean for {key}: {raw!r}")
    try:
        if typ is int:
            num = float(raw)
            if num != int(num):
                raise ValueError(raw)
            val = int(num)
        else:
            val = typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from exc
    if isinstance(val, float) and not math.isfinite(val):
        raise ConfigError(f"non-finite value for {key}")
    return val


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def make_config(overrides: dict | None = None, base: Config | None = None, env: bool = True) -> Config:
    values = {}
    for key, raw in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _coerce(key, raw)
    if env:
        for name, raw in os.environ.items():
            if name.startswith(ENV_PREFIX):
                key = name[len(ENV_PREFIX):].lower()
                if key in ("debug",):
                    continue
                if key not in _FIELDS:
                    raise ConfigError(f"unknown config key: {key} (from {name})")
                values[key] = _coerce(key, raw)
    cfg = replace(base or Config(), **values)
    _ = cfg.feature_size
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError(f"invalid value for precision: {cfg.precision!r}")
    return cfg


def load_config(path: str | os.PathLike | None, overrides: dict | None = None, env: bool = True) -> Config:
    values = parse_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return make_config(values, env=env)


# Desk-scale settings used by the bundled synthetic experiments.
DESK = {
    "precision": "float32",
    "stride": 4,
    "template_level": 3,
    "psi_hidden": 64,
    "fit_steps": 300,
    "texture_size": 32,
    "feature_dim": 64,
    "bg_capacity": 512,
    "bg_per_image": 32,
    "epochs": 25,
    "lr": 2e-3,
    "lr_decay": 0.97,
    "n_pos": 128,
    "n_neg": 256,
    "n_class_neg": 128,
    "extractor_channels": "16,32,64,64,64",
    "inf_steps": 60,
    "n_per_class": 300,
}


def desk_config(**overrides) -> Config:
    merged = dict(DESK)
    merged.update(overrides)
    return make_config(merged, env=False)
