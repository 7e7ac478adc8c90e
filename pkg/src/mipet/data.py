"""Datasets with ground-truth factors: procedural mini-sprites, 2-D toy samplers, dSprites."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import npyio
from .autodiff import rng

log = logging.getLogger(__name__)

SHAPES = ("square", "ellipse", "triangle")


@dataclass
class FactorDataset:
    """Images (or points) with an aligned integer factor table."""

    images: np.ndarray
    factors: np.ndarray
    names: list[str]
    cardinalities: list[int]
    _strata: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.factors = np.asarray(self.factors, dtype=np.int64)
        if len(self.images) != len(self.factors):
            raise ValueError("images and factors must have the same number of rows")
        if self.factors.ndim != 2 or self.factors.shape[1] != len(self.cardinalities):
            raise ValueError("factor table width must match the number of cardinalities")
        if len(self.names) != len(self.cardinalities):
            raise ValueError("one name per factor required")
        if (self.factors < 0).any() or (self.factors >= np.asarray(self.cardinalities)).any():
            raise ValueError("factor value outside its cardinality")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_factors(self) -> int:
        return len(self.cardinalities)

    def as_float(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return np.asarray(imgs, dtype=np.float64)

    def stratum(self, factor: int, value: int) -> np.ndarray:
        key = (factor, value)
        if key not in self._strata:
            self._strata[key] = np.flatnonzero(self.factors[:, factor] == value)
        return self._strata[key]

    def subsample(self, count: int, seed: int) -> "FactorDataset":
        """Random subset stratified on the first factor."""
        if count >= len(self):
            return self
        gen = rng(seed, "subsample")
        f0 = self.factors[:, 0]
        picks = []
        values = np.unique(f0)
        per = [count // len(values) + (1 if i < count % len(values) else 0) for i in range(len(values))]
        for v, c in zip(values, per):
            idx = np.flatnonzero(f0 == v)
            picks.append(gen.choice(idx, size=min(c, len(idx)), replace=False))
        idx = np.sort(np.concatenate(picks))
        return FactorDataset(self.images[idx], self.factors[idx], list(self.names), list(self.cardinalities))

    def to_npz(self, path) -> None:
        """Write in the dSprites layout (``imgs``, ``latents_classes``)."""
        npyio.save_npz(path, imgs=self.images, latents_classes=self.factors,
                       cardinalities=np.asarray(self.cardinalities, dtype=np.int64))


@dataclass(frozen=True)
class MiniSpritesConfig:
    resolution: int = 32
    shapes: tuple[str, ...] = SHAPES
    scales: int = 4
    rotations: int = 8
    x_positions: int = 8
    y_positions: int = 8
    min_half_size: float = 0.1
    max_half_size: float = 0.2
    position_range: tuple[float, float] = (0.3, 0.7)

    @property
    def cardinalities(self) -> list[int]:
        return [len(self.shapes), self.scales, self.rotations, self.x_positions, self.y_positions]


def _inside(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership in the unit-half-size shape, in shape-local coordinates."""
    if shape == "square":
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if shape == "ellipse":
        return u * u + (v / 0.5) ** 2 <= 1
    if shape == "triangle":
        # apex at v = 1, base of half-width 1 at v = -1
        return (v >= -1) & (np.abs(u) <= (1 - v) / 2)
    raise ValueError(f"unknown shape {shape!r}")


def render_sprite(config: MiniSpritesConfig, shape: str, half_size: float, angle: float,
                  cx: float, cy: float) -> np.ndarray:
    """Binary image sampled at pixel centres (nearest-neighbour rasterisation)."""
    r = config.resolution
    coords = (np.arange(r) + 0.5) / r
    px, py = np.meshgrid(coords, coords)
    dx, dy = px - cx, py - cy
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / half_size
    v = (-s * dx + c * dy) / half_size
    return _inside(shape, u, v).astype(np.uint8)


def gen_minisprites(config: MiniSpritesConfig | None = None) -> FactorDataset:
    """Every combination of (shape, scale, rotation, x, y) rasterised once.

    Rotations span a quarter turn so that all rotation levels stay visually
    distinct for the square.
    """
    config = config or MiniSpritesConfig()
    if config.resolution < 16:
        raise ValueError("mini-sprites need resolution >= 16 to resolve the shapes")
    for s in config.shapes:
        if s not in SHAPES:
            raise ValueError(f"unknown shape {s!r}")
    sizes = np.linspace(config.min_half_size, config.max_half_size, config.scales)
    angles = np.arange(config.rotations) * (math.pi / 2) / config.rotations
    xs = np.linspace(*config.position_range, config.x_positions)
    ys = np.linspace(*config.position_range, config.y_positions)
    card = config.cardinalities
    factors = np.array(list(itertools.product(*[range(c) for c in card])), dtype=np.int64)
    images = np.empty((len(factors), config.resolution, config.resolution), dtype=np.uint8)
    for i, (sh, sc, ro, xi, yi) in enumerate(factors):
        images[i] = render_sprite(config, config.shapes[sh], sizes[sc], angles[ro], xs[xi], ys[yi])
    names = ["shape", "scale", "orientation", "x_position", "y_position"]
    return FactorDataset(images, factors, names, card)


def sample_beta2d(alpha: float, beta: float, count: int, seed: int) -> np.ndarray:
    """``count`` points with independent Beta(alpha, beta) coordinates."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("Beta shape parameters must be positive")
    return rng(seed, "beta2d").beta(alpha, beta, size=(count, 2))


def sample_dirichlet(alphas, count: int, seed: int) -> np.ndarray:
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or len(alphas) < 2 or (alphas <= 0).any():
        raise ValueError("Dirichlet needs at least two positive concentration parameters")
    return rng(seed, "dirichlet").dirichlet(alphas, size=count)


def toy_dataset(dist: str, count: int, seed: int, alpha: float = 2.0, beta: float = 5.0,
                alphas=(2.0, 3.0, 5.0)) -> FactorDataset:
    """2-D toy points wrapped as a dataset with a single dummy factor."""
    if dist == "beta":
        pts = sample_beta2d(alpha, beta, count, seed)
    elif dist == "dirichlet":
        pts = sample_dirichlet(alphas, count, seed)[:, :2]
    else:
        raise ValueError(f"unknown toy distribution {dist!r}")
    return FactorDataset(pts, np.zeros((count, 1), dtype=np.int64), ["none"], [1])


def load_dsprites_npz(path, subsample: int | None = None, seed: int = 0) -> FactorDataset:
    """Load a dSprites-layout archive; constant factor columns (colour) are dropped."""
    arrays = npyio.load_npz(path, members=["imgs", "latents_classes"])
    imgs, classes = arrays["imgs"], arrays["latents_classes"].astype(np.int64)
    card = classes.max(axis=0) + 1
    keep = np.flatnonzero(card > 1)
    default_names = ["color", "shape", "scale", "orientation", "x_position", "y_position"]
    if classes.shape[1] == len(default_names):
        names = [default_names[i] for i in keep]
    else:
        names = [f"factor{i}" for i in keep]
    ds = FactorDataset(imgs, classes[:, keep], names, [int(c) for c in card[keep]])
    if subsample:
        ds = ds.subsample(subsample, seed)
    return ds


def load_npz_dataset(path) -> FactorDataset:
    """Load an archive written by :meth:`FactorDataset.to_npz` (or a dSprites file)."""
    arrays = npyio.load_npz(path)
    if "cardinalities" in arrays:
        card = [int(c) for c in arrays["cardinalities"]]
        names = ["shape", "scale", "orientation", "x_position", "y_position"]
        if len(names) != len(card):
            names = [f"factor{i}" for i in range(len(card))]
        return FactorDataset(arrays["imgs"], arrays["latents_classes"], names, card)
    return load_dsprites_npz(path)


def fixed_factor_batch(dataset: FactorDataset, factor_index: int, seed: int, count: int,
                       value: int | None = None):
    """Indices of ``count`` samples sharing one (random) value of ``factor_index``.

    Returns ``(indices, value, with_replacement)``; sampling falls back to
    replacement when the stratum is smaller than ``count``.
    """
    if not 0 <= factor_index < dataset.num_factors:
        raise ValueError(f"factor index {factor_index} out of range")
    gen = rng(seed, f"fixed_factor/{factor_index}")
    if value is None:
        value = int(gen.integers(dataset.cardinalities[factor_index]))
    idx = dataset.stratum(factor_index, value)
    if len(idx) == 0:
        raise ValueError(f"no samples with factor {factor_index} = {value}")
    replace = len(idx) < count
    if replace:
        log.warning("stratum (%d=%d) has %d samples < %d; sampling with replacement",
                    factor_index, value, len(idx), count)
    return gen.choice(idx, size=count, replace=replace), value, replace
