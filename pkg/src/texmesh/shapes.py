"""Built-in procedural object classes for synthetic scenes.

Every exemplar is a radial deformation of the geodesic sphere, so each vertex
keeps its sphere direction as a texture anchor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh, build_template


@dataclass(frozen=True)
class Superellipsoid:
    radii: tuple[float, float, float]
    exponent: float = 2.0

    def radial(self, dirs: np.ndarray) -> np.ndarray:
        a = np.asarray(self.radii)
        e = self.exponent
        r = np.sum(np.abs(dirs / a) ** e, axis=1) ** (-1.0 / e)
        return dirs * r[:, None]


BUILTIN_CLASSES: dict[str, list[Superellipsoid]] = {
    "ball": [Superellipsoid((0.8, 0.8, 0.8)), Superellipsoid((0.85, 0.85, 0.62))],
    "spindle": [Superellipsoid((1.1, 0.55, 0.55)), Superellipsoid((1.0, 0.65, 0.48))],
    "crate": [Superellipsoid((0.9, 0.7, 0.5), 4.0), Superellipsoid((0.8, 0.8, 0.45), 4.0)],
}


def class_names() -> list[str]:
    return list(BUILTIN_CLASSES)


def exemplar_mesh(shape: Superellipsoid, level: int = 3) -> tuple[Mesh, np.ndarray]:
    """Exemplar mesh plus the per-vertex sphere anchors."""
    t = build_template(level)
    return Mesh(shape.radial(t.vertices), t.faces), t.vertices


def class_exemplars(name: str, level: int = 3) -> list[Mesh]:
    return [exemplar_mesh(s, level)[0] for s in BUILTIN_CLASSES[name]]


def sphere(radius: float = 1.0, level: int = 3) -> Mesh:
    t = build_template(level)
    return Mesh(t.vertices * radius, t.faces)


def ellipsoid(radii, level: int = 3) -> Mesh:
    t = build_template(level)
    return Mesh(Superellipsoid(tuple(radii)).radial(t.vertices), t.faces)
