"""Low/high frequency split and component (de)quantization."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class DequantConfig:
    bit_depth: int = 16
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        lo, hi = self.value_range
        if not lo < hi:
            raise ValueError(f"value_range must satisfy min < max, got {self.value_range}")
        object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @property
    def levels(self) -> int:
        return 1 << self.bit_depth

    @property
    def step(self) -> float:
        lo, hi = self.value_range
        return (hi - lo) / self.levels


HIGH_RANGE = (-0.5, 0.5)
LOW_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class FrequencyPair:
    low: np.ndarray
    high: np.ndarray
    sigma: float


def kernel_radius(sigma: float) -> int:
    return max(1, math.ceil(3.0 * sigma))


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian taps for offsets ``-radius..radius``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = kernel_radius(sigma)
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (k / sigma) ** 2)
    return w / w.sum()


def blur(image: np.ndarray, sigma: float, radius: int | None = None) -> np.ndarray:
    """Separable Gaussian blur over the last two axes, mirror-reflected borders."""
    kernel = gaussian_kernel(sigma, radius)
    out = ndimage.correlate1d(np.asarray(image, dtype=np.float64), kernel, axis=-1, mode="mirror")
    return ndimage.correlate1d(out, kernel, axis=-2, mode="mirror")


def decompose(image: np.ndarray, sigma: float = 1.0) -> FrequencyPair:
    """Split ``image`` (..., H, W) into blurred low part and residual high part."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0 or image.ndim < 2:
        raise ValueError(f"cannot decompose an empty image of shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    low = blur(image, sigma)
    return FrequencyPair(low=low, high=image - low, sigma=float(sigma))


def quantize(component: np.ndarray, cfg: DequantConfig, clip=False) -> np.ndarray:
    """Integer grid levels of ``component`` (the b-bit encoding)."""
    component = np.asarray(component, dtype=np.float64)
    lo, hi = cfg.value_range
    if clip:
        component = np.clip(component, lo, hi)
    else:
        bad = np.argwhere((component < lo) | (component > hi) | ~np.isfinite(component))
        if len(bad):
            where = tuple(int(i) for i in bad[0])
            raise ValueError(
                f"{len(bad)} values outside {cfg.value_range}; first at {where}: {component[where]!r}"
            )
    levels = np.floor((component - lo) / cfg.step)
    return np.clip(levels, 0, cfg.levels - 1).astype(np.int64)


def dequantize(component: np.ndarray, cfg: DequantConfig, rng: np.random.Generator | None = None,
               noise: np.ndarray | None = None, clip=False) -> np.ndarray:
    """Snap to the b-bit grid and add one step of uniform noise.

    Pass either a generator ``rng`` or an explicit ``noise`` array in [0, 1).
    With neither, the cell midpoint is used.  ``clip`` saturates out-of-range
    values instead of rejecting them.
    """
    levels = quantize(component, cfg, clip=clip)
    if noise is None:
        noise = rng.random(levels.shape) if rng is not None else np.full(levels.shape, 0.5)
    else:
        noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), levels.shape)
        if np.any((noise < 0) | (noise >= 1)):
            raise ValueError("dequantization noise must lie in [0, 1)")
    return cfg.value_range[0] + (levels + noise) * cfg.step
