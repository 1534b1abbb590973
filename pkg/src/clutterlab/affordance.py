"""Closed-form suction affordance from a depth image.

Stands in for a learned affordance ConvNet. The score at each pixel is the
product of four cues computed from depth alone, so blocks that touch at equal
height, overlap, or lean behave the way a purely appearance-driven network
does: it has no notion of object identity.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .scene import ImageMeta, RgbdImage


@dataclass(frozen=True)
class SurrogateParams:
    smooth_size: int = 5          # box filter before normal estimation
    normal_power: float = 4.0
    flat_window: int = 11
    flat_kappa: float = 2e4       # 1/m^2
    edge_jump: float = 0.005      # m, depth step counted as a discontinuity
    edge_scale: float = 16.0      # px
    min_elevation: float = 0.002  # m
    # variances below this are float noise on a perfectly flat top
    var_floor: float = 1e-12

    @property
    def radius(self) -> int:
        """Half-width of the window the score at a pixel depends on."""
        normal = self.smooth_size // 2 + 1
        flat = self.flat_window // 2
        edge = int(np.ceil(self.edge_scale)) + 1
        return max(normal, flat, edge)


@dataclass
class AffordanceMap:
    values: np.ndarray
    meta: ImageMeta = field(default_factory=ImageMeta)

    @property
    def shape(self):
        return self.values.shape


def verticality(depth: np.ndarray, pixel_size: float, p: SurrogateParams) -> np.ndarray:
    smooth = ndi.uniform_filter(depth, size=p.smooth_size, mode="nearest")
    gy, gx = np.gradient(smooth, pixel_size)
    nz = 1.0 / np.sqrt(1.0 + gx * gx + gy * gy)
    return np.maximum(nz, 0.0) ** p.normal_power


def flatness(depth: np.ndarray, p: SurrogateParams) -> np.ndarray:
    mean = ndi.uniform_filter(depth, size=p.flat_window, mode="nearest")
    sq = ndi.uniform_filter(depth * depth, size=p.flat_window, mode="nearest")
    var = sq - mean * mean
    var[var < p.var_floor] = 0.0
    return np.exp(-p.flat_kappa * var)


def discontinuities(depth: np.ndarray, jump: float) -> np.ndarray:
    """Pixels with a 4-neighbour whose depth differs by more than ``jump``."""
    edge = np.zeros(depth.shape, dtype=bool)
    dv = np.abs(np.diff(depth, axis=0)) > jump
    dh = np.abs(np.diff(depth, axis=1)) > jump
    edge[:-1] |= dv
    edge[1:] |= dv
    edge[:, :-1] |= dh
    edge[:, 1:] |= dh
    return edge


def edge_distance(depth: np.ndarray, p: SurrogateParams) -> np.ndarray:
    edge = discontinuities(depth, p.edge_jump)
    if not edge.any():
        return np.ones(depth.shape)
    d = ndi.distance_transform_edt(~edge)
    return np.minimum(1.0, d / p.edge_scale)


def compute_affordance(image: RgbdImage, params: SurrogateParams | None = None) -> AffordanceMap:
    p = params or SurrogateParams()
    depth = np.asarray(image.depth, dtype=float)
    score = (verticality(depth, image.meta.pixel_size, p)
             * flatness(depth, p)
             * edge_distance(depth, p)
             * (depth > p.min_elevation))
    return AffordanceMap(np.clip(score, 0.0, 1.0), image.meta)


def save_affordance_png(aff: AffordanceMap, path) -> Path:
    """Write a 16-bit grayscale PNG and a ``.json`` sidecar with the image meta."""
    from PIL import Image

    path = Path(path)
    q = np.round(np.clip(aff.values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)
    path.with_suffix(".json").write_text(json.dumps(aff.meta.to_dict(), indent=1) + "\n")
    return path


def load_affordance_png(path) -> AffordanceMap:
    from PIL import Image

    path = Path(path)
    q = np.asarray(Image.open(path), dtype=np.float64)
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = ImageMeta.from_dict(json.loads(sidecar.read_text()))
    else:
        meta = ImageMeta(height=q.shape[0], width=q.shape[1])
    return AffordanceMap(q / 65535.0, meta)
