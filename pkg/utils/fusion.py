#fusion.py
"""
Fusion Pipeline Module

Colour conversion, CNN luminance fusion, per-pixel chroma fusion and
recomposition, plus the synthetic exposure-pair generator used for
laptop-scale training data.
"""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.errors import ConfigurationError, InputError
from utils.mefssim import MefSsimConfig, mef_ssim
from utils.network import NetworkParams, forward

logger = logging.getLogger(__name__)

# Neutral chroma on the 8-bit scale
TAU = 128.0

# Full-range BT.601
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class YCbCrImage:
    """Y in [0, 1]; Cb and Cr in [0, 255] centred on 128"""

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        if not (self.y.shape == self.cb.shape == self.cr.shape):
            raise ConfigurationError(f"YCbCr planes differ in size: {self.y.shape}, {self.cb.shape}, {self.cr.shape}")


def as_rgb(image: np.ndarray) -> np.ndarray:
    """Promote a grayscale plane to three identical channels"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return np.repeat(image[:, :, np.newaxis], 3, axis=2)
    if image.ndim == 3 and image.shape[2] == 3:
        return image
    raise InputError(f"Expected a grayscale or RGB image, got shape {image.shape}")


def luminance_of(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return np.clip(image, 0.0, 1.0)
    return np.clip(as_rgb(image) @ _LUMA, 0.0, 1.0)


def rgb_to_ycbcr(rgb: np.ndarray) -> YCbCrImage:
    """
    Full-range BT.601 (JPEG) conversion

    Args:
        rgb: (H, W, 3) in [0, 1]; grayscale planes are promoted

    Returns:
        YCbCrImage with clamped planes
    """
    rgb = as_rgb(rgb)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = TAU + 255.0 * (-0.168736 * r - 0.331264 * g + 0.5 * b)
    cr = TAU + 255.0 * (0.5 * r - 0.418688 * g - 0.081312 * b)
    return YCbCrImage(np.clip(y, 0.0, 1.0), np.clip(cb, 0.0, 255.0), np.clip(cr, 0.0, 255.0))


def ycbcr_to_rgb(ycc: YCbCrImage) -> np.ndarray:
    cb = (ycc.cb - TAU) / 255.0
    cr = (ycc.cr - TAU) / 255.0
    r = ycc.y + 1.402 * cr
    g = ycc.y - 0.344136 * cb - 0.714136 * cr
    b = ycc.y + 1.772 * cb
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def fuse_chroma(x1, x2, tau: float = TAU):
    """
    Blend two chroma values weighted by their distance from neutral

    Works elementwise on arrays. Where both inputs are neutral the result is
    tau; where they are equal it is that value exactly.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    w1, w2 = np.abs(x1 - tau), np.abs(x2 - tau)
    total = w1 + w2
    safe = np.where(total > 0, total, 1.0)
    fused = np.where(total > 0, (x1 * w1 + x2 * w2) / safe, tau)
    fused = np.where(x1 == x2, x1, fused)
    return float(fused) if fused.ndim == 0 else fused


@dataclass
class ExposurePair:
    under: np.ndarray
    over: np.ndarray
    ev_low: Optional[float] = None
    ev_high: Optional[float] = None

    def __post_init__(self):
        self.under = as_rgb(self.under)
        self.over = as_rgb(self.over)
        if self.under.shape != self.over.shape:
            raise InputError(f"Exposure pair sizes differ: {self.under.shape} vs {self.over.shape}")


@dataclass
class FusionReport:
    image_id: str
    score: float
    scale_scores: List[float]
    seconds: float
    score_map: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "score": self.score,
            "scale_scores": list(self.scale_scores),
            "seconds": self.seconds,
        }


def write_report(reports: List[FusionReport], path: Union[str, Path]) -> Path:
    """JSON lines, one record per fused image"""
    path = Path(path)
    frame = pd.DataFrame([r.to_record() for r in reports], columns=["image_id", "score", "scale_scores", "seconds"])
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_json(path, orient="records", lines=True)
    return path


def fuse_ycbcr(params: NetworkParams, first: YCbCrImage, second: YCbCrImage) -> YCbCrImage:
    """CNN on luminance (clamped), weighted blend on chroma"""
    if first.y.shape != second.y.shape:
        raise InputError(f"Cannot fuse images of size {first.y.shape} and {second.y.shape}")
    y, _ = forward(params, first.y, second.y)
    return YCbCrImage(
        np.clip(y, 0.0, 1.0),
        fuse_chroma(first.cb, second.cb),
        fuse_chroma(first.cr, second.cr),
    )


def fuse_pair(
    params: NetworkParams,
    pair: ExposurePair,
    image_id: str = "pair",
    metric_cfg: Optional[MefSsimConfig] = None,
) -> Tuple[np.ndarray, FusionReport]:
    """
    Fuse a registered exposure pair into one RGB image

    Args:
        params: Trained network
        pair: Under- and over-exposed images
        image_id: Name carried in the report
        metric_cfg: Metric used for the report score

    The report scores the luminance of the returned RGB, so chroma
    recomposition and clipping are reflected in it.

    Returns:
        Tuple of (fused RGB in [0, 1], FusionReport)
    """
    started = time.perf_counter()
    first, second = rgb_to_ycbcr(pair.under), rgb_to_ycbcr(pair.over)
    fused = fuse_ycbcr(params, first, second)
    rgb = ycbcr_to_rgb(fused)
    seconds = time.perf_counter() - started

    result = mef_ssim([first.y, second.y], luminance_of(rgb), metric_cfg)
    report = FusionReport(image_id, result.score, result.scale_scores, seconds, result.score_map)
    logger.info(f"Fused '{image_id}' in {seconds:.2f}s, MEF-SSIM {result.score:.4f}")
    return rgb, report


def _expose(base: np.ndarray, ev: float, gamma: float) -> np.ndarray:
    if ev == 0:
        return base.copy()
    linear = np.power(base, gamma) * (2.0 ** ev)
    return np.power(np.clip(linear, 0.0, 1.0), 1.0 / gamma)


def synthesize_exposure_pair(
    base: np.ndarray, ev_low: float = -2.0, ev_high: float = 2.0, gamma: float = 2.2
) -> ExposurePair:
    """
    Simulate an under/over exposure bracket from one image

    The image is linearised by gamma, scaled by 2**ev, clipped and re-encoded.

    Raises:
        ConfigurationError: ev_low > ev_high or gamma <= 0
    """
    if ev_low > ev_high:
        raise ConfigurationError(f"ev_low ({ev_low}) must not exceed ev_high ({ev_high})")
    if gamma <= 0:
        raise ConfigurationError(f"Gamma must be positive, got {gamma}")
    base = np.clip(as_rgb(base), 0.0, 1.0)
    return ExposurePair(_expose(base, ev_low, gamma), _expose(base, ev_high, gamma), ev_low, ev_high)
