"""Dataset manifests, prediction records, PNG images and metric CSVs.

Manifest and prediction files hold one JSON object per line.  Angles are
stored in degrees and converted to radians on load.
"""
from __future__ import annotations

import csv
import json
import math
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

ANGLE_KEYS = ("azimuth", "elevation", "theta")


@dataclass
class Record:
    image: str
    cls: str
    azimuth: float  # radians
    elevation: float
    theta: float
    distance: float
    latent: int = 0
    mask: str | None = None  # amodal mask
    visible_mask: str | None = None
    occlusion: int = 0
    id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def pose(self) -> tuple[float, float, float, float]:
        return (self.azimuth, self.elevation, self.theta, self.distance)

    def to_json(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        for k in ANGLE_KEYS:
            d[k] = math.degrees(d[k])
        extra = d.pop("extra")
        d.update(extra)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Record":
        d = dict(d)
        known = {"image", "class", "azimuth", "elevation", "theta", "distance", "latent", "mask",
                 "visible_mask", "occlusion", "id"}
        missing = [k for k in ("image", "class", *ANGLE_KEYS, "distance") if k not in d]
        if missing:
            raise ValueError(f"manifest record lacks {missing}")
        extra = {k: d.pop(k) for k in list(d) if k not in known}
        return cls(image=d["image"], cls=d["class"], azimuth=math.radians(float(d["azimuth"])),
                   elevation=math.radians(float(d["elevation"])), theta=math.radians(float(d["theta"])),
                   distance=float(d["distance"]), latent=int(d.get("latent", 0)), mask=d.get("mask"),
                   visible_mask=d.get("visible_mask"), occlusion=int(d.get("occlusion", 0)),
                   id=str(d.get("id", "")), extra=extra)


def write_jsonl(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_manifest(path, records: list[Record]) -> None:
    write_jsonl(path, [r.to_json() for r in records])


def read_manifest(path) -> list[Record]:
    """Load a manifest, resolving relative paths against its directory."""
    root = Path(path).parent
    out = []
    for d in read_jsonl(path):
        r = Record.from_json(d)
        for key in ("image", "mask", "visible_mask"):
            val = getattr(r, key)
            if val is not None and not Path(val).is_absolute():
                setattr(r, key, str(root / val))
        if not Path(r.image).exists():
            raise FileNotFoundError(f"manifest image not found: {r.image}")
        out.append(r)
    return out


def write_png(path, array) -> None:
    from PIL import Image

    a = np.asarray(array)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    elif a.dtype != np.uint8:
        a = (np.clip(a, 0, 1) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(a).save(path, optimize=False)


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im).copy()


def read_mask(path) -> np.ndarray:
    a = read_png(path)
    if a.ndim == 3:
        a = a[..., 0]
    return a > 127


def repro_header(config=None, seed: int | None = None) -> dict:
    """Config hash, seed and library versions for a run log."""
    import numba
    import scipy
    import torch

    from . import __version__

    return {
        "texmesh": __version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
        "numba": numba.__version__,
        "config_hash": config.digest() if config is not None else None,
        "seed": seed,
    }


def write_metrics_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return "" if v is None else v
