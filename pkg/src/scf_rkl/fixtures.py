"""Seeded synthetic MLP checkpoint pairs for tests, benchmarks and the CLI."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint_io import TensorEntry, TensorMap, decode, encode
from .rng import normal, uniform


@dataclass(frozen=True)
class FixtureSpec:
    layers: int = 4
    width: int = 64
    outputs: int = 10
    seed: int = 0
    # overall size of secondary - base relative to the base weight scale
    scale: float = 0.05
    # fraction of coordinates carrying an extra heavy-tailed update
    sparse_fraction: float = 0.02
    # typical magnitude of the heavy-tailed update relative to the dense noise
    sparse_gain: float = 4.0
    # coherent rescaling of the base weights, in units of scale (moves the spectrum as a whole)
    drift: float = 0.6
    dtype: str = "F32"

    def __post_init__(self):
        if self.layers < 1 or self.width < 1 or self.outputs < 1:
            raise ValueError("layers, width and outputs must be positive")
        if self.scale < 0:
            raise ValueError("scale must be nonnegative")
        if not 0 <= self.sparse_fraction <= 1:
            raise ValueError("sparse_fraction must be in [0, 1]")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i in range(self.layers):
            out[f"layers.{i}.weight"] = (self.width, self.width)
            out[f"layers.{i}.bias"] = (self.width,)
        out["head.weight"] = (self.outputs, self.width)
        return out


def _round(values: np.ndarray, dtype: str) -> np.ndarray:
    return decode(encode(values, dtype), dtype)


def make_fixture(spec: FixtureSpec = FixtureSpec()) -> tuple[TensorMap, TensorMap]:
    """Return ``(base, secondary)`` checkpoints.

    Base weights are Gaussian with std 1/sqrt(fan_in); biases are small. The
    secondary adds a small coherent rescaling of the base, dense Gaussian noise
    and a sparse heavy-tailed component (ratio of normals), so the update has
    genuine outliers to find. ``scale=0`` reproduces the base bit for bit.
    """
    base, secondary = {}, {}
    meta = {k: str(v) for k, v in asdict(spec).items()}
    for name, shape in spec.shapes().items():
        n = int(np.prod(shape))
        init_std = 1.0 / np.sqrt(shape[-1]) if len(shape) > 1 else 0.02
        wb = _round(normal(spec.seed, n, "init", name) * init_std, spec.dtype)

        noise_std = spec.scale * init_std
        dense = normal(spec.seed, n, "dense", name) * noise_std
        hit = uniform(spec.seed, n, "where", name) < spec.sparse_fraction
        ratio = normal(spec.seed, n, "num", name) / (
            np.abs(normal(spec.seed, n, "den", name)) + 0.25)
        pert = spec.drift * spec.scale * wb + dense + np.where(hit, ratio * spec.sparse_gain * noise_std, 0.0)
        ws = np.where(pert == 0, wb, wb + pert)

        base[name] = TensorEntry(shape, spec.dtype, encode(wb, spec.dtype))
        secondary[name] = TensorEntry(shape, spec.dtype, encode(ws, spec.dtype))
    return TensorMap(base, meta), TensorMap(secondary, meta)
