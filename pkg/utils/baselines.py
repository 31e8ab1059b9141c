#baselines.py
"""
Mertens exposure fusion, the classical comparator

Per-pixel quality weights (contrast, saturation, well-exposedness) are
normalised across the inputs, then Laplacian pyramids of the images are
blended with Gaussian pyramids of the weights and collapsed.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.ndimage

from utils.errors import ConfigurationError, InputError
from utils.fusion import as_rgb, luminance_of

logger = logging.getLogger(__name__)

_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
WELL_EXPOSED_SIGMA = 0.2
WEIGHT_FLOOR = 1e-12
OVERSHOOT_WARNING = 0.1


class PyramidKind(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


@dataclass
class Pyramid:
    """Levels at halving resolution, level 0 full size"""

    levels: List[np.ndarray]
    kind: PyramidKind

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, index: int) -> np.ndarray:
        return self.levels[index]


def quality_weights(image: np.ndarray, exponents: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """
    Mertens quality measure of one exposure

    Args:
        image: RGB in [0, 1] (grayscale is promoted)
        exponents: Powers on contrast, saturation and well-exposedness

    Returns:
        Non-negative weight plane, not yet normalised
    """
    rgb = as_rgb(image)
    wc, ws, we = exponents
    contrast = np.abs(scipy.ndimage.convolve(luminance_of(rgb), _LAPLACIAN, mode="mirror"))
    saturation = np.std(rgb, axis=2)
    well_exposedness = np.prod(np.exp(-((rgb - 0.5) ** 2) / (2 * WELL_EXPOSED_SIGMA ** 2)), axis=2)
    return (contrast ** wc) * (saturation ** ws) * (well_exposedness ** we)


def normalize_weights(weights: Sequence[np.ndarray], eps: float = WEIGHT_FLOOR) -> List[np.ndarray]:
    """Floor and normalise so the planes sum to one at every pixel"""
    floored = [np.asarray(w, dtype=np.float64) + eps for w in weights]
    total = np.sum(floored, axis=0)
    return [w / total for w in floored]


def _blur(image: np.ndarray, gain: float = 1.0) -> np.ndarray:
    taps = _BINOMIAL * gain
    out = scipy.ndimage.correlate1d(image, taps, axis=0, mode="reflect")
    return scipy.ndimage.correlate1d(out, taps, axis=1, mode="reflect")


def _reduce(image: np.ndarray) -> np.ndarray:
    return _blur(image)[::2, ::2]


def _expand(image: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    up = np.zeros(shape[:2] + image.shape[2:], dtype=np.float64)
    up[::2, ::2] = image
    return _blur(up, gain=2.0)


def _clamp_levels(shape: Tuple[int, ...], levels: int) -> int:
    if levels < 1:
        raise ConfigurationError(f"Pyramid needs at least one level, got {levels}")
    limit = int(np.floor(np.log2(min(shape[:2])))) + 1
    if levels > limit:
        logger.warning(f"{levels} pyramid levels is too many for {shape[:2]}; using {limit}")
        return limit
    return levels


def gaussian_pyramid(image: np.ndarray, levels: int) -> Pyramid:
    image = np.asarray(image, dtype=np.float64)
    levels = _clamp_levels(image.shape, levels)
    out = [image]
    for _ in range(1, levels):
        out.append(_reduce(out[-1]))
    return Pyramid(out, PyramidKind.GAUSSIAN)


def laplacian_pyramid(image: np.ndarray, levels: int) -> Pyramid:
    """
    Band-pass decomposition with the Gaussian residual as the last level

    Args:
        image: (H, W) or (H, W, C)
        levels: Requested depth; reduced with a warning when the image is too small

    Returns:
        Laplacian Pyramid whose collapse() is the input
    """
    gaussian = gaussian_pyramid(image, levels).levels
    bands = [fine - _expand(coarse, fine.shape) for fine, coarse in zip(gaussian[:-1], gaussian[1:])]
    return Pyramid(bands + [gaussian[-1]], PyramidKind.LAPLACIAN)


def collapse(pyramid: Pyramid) -> np.ndarray:
    if pyramid.kind is not PyramidKind.LAPLACIAN:
        raise ConfigurationError("Only Laplacian pyramids can be collapsed")
    out = pyramid.levels[-1]
    for band in reversed(pyramid.levels[:-1]):
        out = band + _expand(out, band.shape)
    return out


def default_depth(shape: Tuple[int, ...]) -> int:
    return max(1, int(np.floor(np.log2(min(shape[:2])))) - 2)


def mertens_fuse(
    images: Sequence[np.ndarray],
    exponents: Tuple[float, float, float] = (1.0, 1.0, 1.0),
    levels: Optional[int] = None,
) -> np.ndarray:
    """
    Fuse registered exposures by quality-weighted pyramid blending

    Args:
        images: Two or more RGB images of equal size in [0, 1]
        exponents: Quality measure exponents
        levels: Pyramid depth (default floor(log2(min dim)) - 2)

    Returns:
        Fused RGB image clipped to [0, 1]

    Raises:
        InputError: Fewer than two images or mismatched sizes
    """
    rgbs = [as_rgb(np.asarray(img, dtype=np.float64)) for img in images]
    if len(rgbs) < 2:
        raise InputError(f"Mertens fusion needs at least 2 images, got {len(rgbs)}")
    if any(img.shape != rgbs[0].shape for img in rgbs):
        raise InputError(f"Mertens inputs differ in size: {[img.shape for img in rgbs]}")

    depth = levels if levels is not None else default_depth(rgbs[0].shape)
    weights = normalize_weights([quality_weights(img, exponents) for img in rgbs])

    blended = None
    for img, weight in zip(rgbs, weights):
        bands = laplacian_pyramid(img, depth).levels
        gains = gaussian_pyramid(weight, depth).levels
        contribution = [band * gain[:, :, np.newaxis] for band, gain in zip(bands, gains)]
        blended = contribution if blended is None else [b + c for b, c in zip(blended, contribution)]

    fused = collapse(Pyramid(blended, PyramidKind.LAPLACIAN))
    overshoot = max(0.0, -float(fused.min()), float(fused.max()) - 1.0)
    if overshoot > OVERSHOOT_WARNING:
        logger.warning(f"Mertens output overshoots [0, 1] by {overshoot:.3f} before clipping")
    return np.clip(fused, 0.0, 1.0)
