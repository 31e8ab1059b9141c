#mefssim.py
"""
MEF-SSIM Quality Module

No-reference quality of a fused luminance plane against its two exposures.
Each window of each input is split into contrast, structure and luminance;
the desired patch takes the strongest contrast and a contrast-weighted
structure, and the fused window is scored against it with the SSIM
structure term. The analytic gradient of the windowed mean score with
respect to the fused plane drives unsupervised training.

Plain Gaussian-window SSIM (with gradient) lives here too, for the
supervised baseline.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)

# Per-pixel variance at or below this counts as a flat (zero-contrast) patch
FLAT_VARIANCE = 1e-12


@dataclass
class MefSsimConfig:
    """
    Args:
        window: Square window side in pixels
        stride: Window step; 1 scores a window around every pixel
        c: Stability constant of the score
        scales: Number of dyadic scales (2x box downsampling)
        structure_exponent: p in the structure weight ||y~||^p
        luminance: Multiply the coarsest scale by a luminance-consistency term
        luminance_c: Stability constant of the luminance term
        sigma_local, sigma_global: Spread of the well-exposedness weights
            that build the desired luminance
    """

    window: int = 8
    stride: int = 1
    c: float = 0.03 ** 2
    scales: int = 3
    structure_exponent: float = 4.0
    luminance: bool = False
    luminance_c: float = 0.01 ** 2
    sigma_local: float = 0.2
    sigma_global: float = 0.2

    def __post_init__(self):
        if self.window < 2:
            raise ConfigurationError(f"MEF-SSIM window must be >= 2, got {self.window}")
        if self.stride < 1:
            raise ConfigurationError(f"MEF-SSIM stride must be >= 1, got {self.stride}")
        if self.scales < 1:
            raise ConfigurationError(f"MEF-SSIM needs at least one scale, got {self.scales}")
        if self.c <= 0 or self.luminance_c <= 0:
            raise ConfigurationError("MEF-SSIM stability constants must be positive")
        if self.structure_exponent < 0:
            raise ConfigurationError(f"Structure exponent must be >= 0, got {self.structure_exponent}")


@dataclass
class PatchDecomposition:
    contrast: float
    structure: np.ndarray
    luminance: float
    degenerate: bool = False

    def reconstruct(self) -> np.ndarray:
        return self.contrast * self.structure + self.luminance


@dataclass
class DesiredPatch:
    values: np.ndarray
    contrast: float
    degenerate: bool = False


@dataclass
class MefSsimResult:
    """
    score: Product of the per-scale mean window scores
    score_map: Finest-scale window scores at pixel resolution, scaled by the
        coarser-scale means (its mean is the score when stride is 1)
    scale_scores: Mean window score per scale, finest first
    """

    score: float
    score_map: np.ndarray
    scale_scores: List[float] = field(default_factory=list)

    @property
    def scales(self) -> int:
        return len(self.scale_scores)


def decompose_patch(patch: Sequence[float]) -> PatchDecomposition:
    """
    Split a patch into contrast, unit structure and mean luminance

    Flat patches get contrast 0, a zero structure vector and the
    degenerate flag.
    """
    y = np.asarray(patch, dtype=np.float64).ravel()
    if y.size == 0:
        raise ConfigurationError("Cannot decompose an empty patch")
    luminance = float(y.mean())
    centered = y - luminance
    contrast = float(np.linalg.norm(centered))
    if contrast * contrast <= FLAT_VARIANCE * y.size:
        return PatchDecomposition(0.0, np.zeros_like(y), luminance, degenerate=True)
    return PatchDecomposition(contrast, centered / contrast, luminance)


def desired_patch(patches: Sequence[Sequence[float]], p: float = 4.0) -> DesiredPatch:
    """
    Build the ideal local fusion target from two input patches

    Contrast is the larger of the two; structure is the weighted mean of the
    input structures with weights ||y~_k||^p, renormalised to unit length.
    Luminance is discarded.

    Args:
        patches: Two equal-length patches
        p: Structure weight exponent

    Returns:
        DesiredPatch; degenerate (zero vector) when both inputs are flat, and a
        zero vector with zero contrast when the weighted structures cancel
    """
    if len(patches) != 2:
        raise ConfigurationError(f"Expected 2 patches, got {len(patches)}")
    first, second = (decompose_patch(patch) for patch in patches)
    if first.structure.size != second.structure.size:
        raise ConfigurationError("Patches must have the same length")

    best = max(first.contrast, second.contrast)
    if first.degenerate and second.degenerate:
        return DesiredPatch(np.zeros_like(first.structure), 0.0, degenerate=True)

    # Weights are scaled by the max contrast; the ratio is all that matters
    weights = [0.0 if d.degenerate else (d.contrast / best) ** p for d in (first, second)]
    mean_structure = (weights[0] * first.structure + weights[1] * second.structure) / sum(weights)
    norm = float(np.linalg.norm(mean_structure))
    if norm <= 1e-6:
        # Opposing structures cancel; no structure is preferred
        return DesiredPatch(np.zeros_like(mean_structure), 0.0)
    return DesiredPatch(best * mean_structure / norm, best)


def score_at(desired: Union[DesiredPatch, Sequence[float]], fused: Sequence[float], c: float = 0.03 ** 2) -> float:
    """
    SSIM structure score of a fused patch against the desired patch

    Args:
        desired: DesiredPatch (or raw vector)
        fused: Fused patch of the same length
        c: Stability constant

    Returns:
        (2 cov + c) / (var_desired + var_fused + c), in [-1, 1]
    """
    if c <= 0:
        raise ConfigurationError("Stability constant must be positive")
    if isinstance(desired, DesiredPatch):
        if desired.degenerate:
            return 1.0
        target = np.asarray(desired.values, dtype=np.float64).ravel()
    else:
        target = np.asarray(desired, dtype=np.float64).ravel()
    y_f = np.asarray(fused, dtype=np.float64).ravel()
    if target.shape != y_f.shape:
        raise ConfigurationError("Desired and fused patches must have the same length")

    dt = target - target.mean()
    df = y_f - y_f.mean()
    cov = float(np.mean(dt * df))
    value = (2.0 * cov + c) / (float(np.mean(dt * dt)) + float(np.mean(df * df)) + c)
    return float(np.clip(value, -1.0, 1.0))


def _pad_index(size: int, before: int, after: int) -> np.ndarray:
    """Source index of every row/column of a symmetrically padded axis"""
    return np.pad(np.arange(size), (before, after), mode="symmetric")


def _window_sums(plane: np.ndarray, window: int) -> np.ndarray:
    rows = sliding_window_view(plane, window, axis=0).sum(axis=-1)
    return sliding_window_view(rows, window, axis=1).sum(axis=-1)


def _window_sums_adjoint(grid: np.ndarray, window: int) -> np.ndarray:
    return _window_sums(np.pad(grid, window - 1, mode="constant"), window)


def _downsample(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape[0] // 2 * 2, plane.shape[1] // 2 * 2
    p = plane[:h, :w]
    return 0.25 * (p[0::2, 0::2] + p[1::2, 0::2] + p[0::2, 1::2] + p[1::2, 1::2])


def _downsample_adjoint(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.float64)
    h, w = grad.shape
    quarter = 0.25 * grad
    for dy in (0, 1):
        for dx in (0, 1):
            out[dy:2 * h:2, dx:2 * w:2] = quarter
    return out


@lru_cache(maxsize=128)
def _scale_count(height: int, width: int, window: int, scales: int) -> int:
    count = 1
    h, w = height, width
    while count < scales:
        h, w = h // 2, w // 2
        if min(h, w) < window:
            break
        count += 1
    return count


def _effective_scales(height: int, width: int, window: int, scales: int) -> int:
    count = _scale_count(height, width, window, scales)
    if count < scales:
        logger.warning(
            f"Image {height}x{width} is too small for {scales} scales with window {window}; using {count}"
        )
    return count


@dataclass
class _ScaleTerms:
    scores: np.ndarray
    mean: float
    offset: int
    grad: Optional[np.ndarray] = None


def _scale_terms(
    y1: np.ndarray,
    y2: np.ndarray,
    yf: np.ndarray,
    cfg: MefSsimConfig,
    scale: int,
    with_luminance: bool,
    want_grad: bool,
) -> _ScaleTerms:
    height, width = yf.shape
    w = cfg.window
    n = float(w * w)
    top = w // 2
    rows = _pad_index(height, top, w - 1 - top)
    cols = _pad_index(width, top, w - 1 - top)
    index = np.ix_(rows, cols)
    p1, p2, pf = y1[index], y2[index], yf[index]

    # Window anchored at padded (r, c) is centred on image pixel (r, c)
    offset = top % cfg.stride
    grid = (slice(offset, None, cfg.stride), slice(offset, None, cfg.stride))

    def sums(plane):
        return _window_sums(plane, w)[grid]

    s1, s2, sf = sums(p1), sums(p2), sums(pf)
    v11 = sums(p1 * p1) - s1 * s1 / n
    v22 = sums(p2 * p2) - s2 * s2 / n
    v12 = sums(p1 * p2) - s1 * s2 / n
    vff = sums(pf * pf) - sf * sf / n
    v1f = sums(p1 * pf) - s1 * sf / n
    v2f = sums(p2 * pf) - s2 * sf / n
    mu1, mu2, muf = s1 / n, s2 / n, sf / n

    flat1 = v11 <= FLAT_VARIANCE * n
    flat2 = v22 <= FLAT_VARIANCE * n
    both_flat = flat1 & flat2
    v11 = np.where(flat1, 0.0, v11)
    v22 = np.where(flat2, 0.0, v22)
    c1, c2 = np.sqrt(v11), np.sqrt(v22)
    chat_sq = np.maximum(v11, v22)
    chat = np.sqrt(chat_sq)

    # y^ = alpha1 * y~1 + alpha2 * y~2 with ||y^|| = c^
    safe_chat = np.where(both_flat, 1.0, chat)
    safe_c1 = np.where(flat1, 1.0, c1)
    safe_c2 = np.where(flat2, 1.0, c2)
    w1 = np.where(flat1, 0.0, (c1 / safe_chat) ** cfg.structure_exponent)
    w2 = np.where(flat2, 0.0, (c2 / safe_chat) ** cfg.structure_exponent)
    wsum = np.where(both_flat, 1.0, w1 + w2)
    a1 = w1 / (safe_c1 * wsum)
    a2 = w2 / (safe_c2 * wsum)
    # Grouped so that swapping the inputs gives bit-identical results
    norm_sq = (a1 * a1 * v11 + a2 * a2 * v22) + 2.0 * (a1 * a2) * v12

    # Opposing structures cancel: the desired patch is the zero vector
    cancel = ~both_flat & (norm_sq <= 1e-12)
    a1 = np.where(cancel, 0.0, a1)
    a2 = np.where(cancel, 0.0, a2)
    norm_sq = np.where(both_flat | cancel, 1.0, norm_sq)
    desired_sq = np.where(cancel, 0.0, chat_sq)
    alpha1 = chat * a1 / np.sqrt(norm_sq)
    alpha2 = chat * a2 / np.sqrt(norm_sq)

    cov = (alpha1 * v1f + alpha2 * v2f) / n
    denom = desired_sq / n + vff / n + cfg.c
    cs = np.where(both_flat, 1.0, (2.0 * cov + cfg.c) / denom)

    if with_luminance:
        g1, g2 = float(y1.mean()), float(y2.mean())
        weight1 = np.exp(-((mu1 - 0.5) ** 2) / (2 * cfg.sigma_local ** 2) - (g1 - 0.5) ** 2 / (2 * cfg.sigma_global ** 2))
        weight2 = np.exp(-((mu2 - 0.5) ** 2) / (2 * cfg.sigma_local ** 2) - (g2 - 0.5) ** 2 / (2 * cfg.sigma_global ** 2))
        muhat = (weight1 * mu1 + weight2 * mu2) / (weight1 + weight2)
        lden = muf * muf + muhat * muhat + cfg.luminance_c
        lum = (2.0 * muf * muhat + cfg.luminance_c) / lden
    else:
        lum = 1.0

    scores = cs * lum
    if not np.all(np.isfinite(scores)):
        i, j = np.argwhere(~np.isfinite(scores))[0]
        centre = (int(offset + i * cfg.stride), int(offset + j * cfg.stride))
        raise NumericError(
            f"Non-finite MEF-SSIM term at scale {scale}, window centre (y={centre[0]}, x={centre[1]})",
            {"scale": scale, "window_centre": centre},
        )

    terms = _ScaleTerms(scores=scores, mean=float(np.clip(scores, -1.0, 1.0).mean()), offset=offset)
    if not want_grad:
        return terms

    omega = 1.0 / scores.size
    g = np.where(both_flat, 0.0, 2.0 * lum / (n * denom)) * omega
    coefficients = [
        g * alpha1,
        g * alpha2,
        -g * cs,
        -g * (alpha1 * mu1 + alpha2 * mu2 - cs * muf),
    ]
    if with_luminance:
        coefficients[3] = coefficients[3] + omega * cs * 2.0 * (muhat - lum * muf) / (lden * n)

    spread = []
    for coefficient in coefficients:
        full = np.zeros((height, width), dtype=np.float64)
        full[grid] = coefficient
        spread.append(_window_sums_adjoint(full, w))
    padded_grad = p1 * spread[0] + p2 * spread[1] + pf * spread[2] + spread[3]

    # Fold the padded border back onto the pixels it mirrors
    source = (rows[:, np.newaxis] * width + cols[np.newaxis, :]).ravel()
    terms.grad = np.bincount(source, weights=padded_grad.ravel(), minlength=height * width).reshape(height, width)
    return terms


def _as_planes(inputs: Sequence[np.ndarray], fused: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(inputs) != 2:
        raise ConfigurationError(f"MEF-SSIM expects exactly 2 input images, got {len(inputs)}")
    y1, y2, yf = (np.asarray(p, dtype=np.float64) for p in (inputs[0], inputs[1], fused))
    if y1.ndim != 2 or y1.shape != y2.shape or y1.shape != yf.shape:
        raise ConfigurationError(
            f"MEF-SSIM needs three equally sized planes, got {y1.shape}, {y2.shape}, {yf.shape}"
        )
    return y1, y2, yf


def _evaluate(inputs, fused, cfg: MefSsimConfig, want_grad: bool):
    y1, y2, yf = _as_planes(inputs, fused)
    count = _effective_scales(yf.shape[0], yf.shape[1], cfg.window, cfg.scales)

    levels = [(y1, y2, yf)]
    for _ in range(1, count):
        levels.append(tuple(_downsample(plane) for plane in levels[-1]))

    terms = [
        _scale_terms(a, b, f, cfg, scale, cfg.luminance and scale == count - 1, want_grad)
        for scale, (a, b, f) in enumerate(levels)
    ]
    means = [t.mean for t in terms]
    return levels, terms, means


def _expand_scores(scores: np.ndarray, shape: Tuple[int, int], offset: int, stride: int) -> np.ndarray:
    ys = np.clip((np.arange(shape[0]) - offset + stride // 2) // stride, 0, scores.shape[0] - 1)
    xs = np.clip((np.arange(shape[1]) - offset + stride // 2) // stride, 0, scores.shape[1] - 1)
    return scores[np.ix_(ys, xs)]


def mef_ssim(inputs: Sequence[np.ndarray], fused: np.ndarray, cfg: Optional[MefSsimConfig] = None) -> MefSsimResult:
    """
    Score a fused luminance plane against two exposures

    Args:
        inputs: Under- and over-exposed luminance planes in [0, 1]
        fused: Fused luminance plane of the same size
        cfg: Metric configuration (defaults when omitted)

    Returns:
        MefSsimResult with the scalar score, score map and per-scale means

    Raises:
        ConfigurationError: Planes differ in size
        NumericError: A window produced a non-finite score
    """
    cfg = cfg or MefSsimConfig()
    levels, terms, means = _evaluate(inputs, fused, cfg, want_grad=False)
    score = float(np.prod(means))

    coarse = float(np.prod(means[1:])) if len(means) > 1 else 1.0
    finest = np.clip(terms[0].scores, -1.0, 1.0)
    score_map = _expand_scores(finest, levels[0][2].shape, terms[0].offset, cfg.stride) * coarse
    return MefSsimResult(score=score, score_map=score_map, scale_scores=means)


def mef_ssim_loss_grad(
    inputs: Sequence[np.ndarray], fused: np.ndarray, cfg: Optional[MefSsimConfig] = None
) -> Tuple[float, np.ndarray]:
    """
    Unsupervised training loss 1 - MEF-SSIM and its gradient

    The desired patches depend on the inputs only, so they are constants of
    the derivative. Overlapping windows accumulate into shared pixels.

    Args:
        inputs: Under- and over-exposed luminance planes
        fused: Network output before clamping
        cfg: Metric configuration

    Returns:
        Tuple of (loss in [0, 2], dLoss/dFused plane)
    """
    cfg = cfg or MefSsimConfig()
    levels, terms, means = _evaluate(inputs, fused, cfg, want_grad=True)
    score = float(np.prod(means))

    total = np.zeros_like(levels[0][2])
    for scale, t in enumerate(terms):
        others = float(np.prod([m for k, m in enumerate(means) if k != scale]))
        g = t.grad * others
        for k in range(scale, 0, -1):
            g = _downsample_adjoint(g, levels[k - 1][2].shape)
        total += g
    return 1.0 - score, -total


@dataclass
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


def _gaussian_taps(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window) - (window - 1) / 2.0
    taps = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


def _filter_valid(plane: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = sliding_window_view(plane, k, axis=0) @ taps
    return sliding_window_view(rows, k, axis=1) @ taps


def _filter_valid_adjoint(grad: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    return _filter_valid(np.pad(grad, k - 1, mode="constant"), taps[::-1])


def ssim_with_grad(a: np.ndarray, b: np.ndarray, cfg: Optional[SsimConfig] = None) -> Tuple[float, np.ndarray]:
    """
    Mean single-scale SSIM over valid Gaussian windows and dSSIM/da

    Args:
        a: Plane being optimised
        b: Reference plane of the same size
        cfg: Window and constants

    Returns:
        Tuple of (ssim, gradient with respect to a)
    """
    cfg = cfg or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ConfigurationError(f"SSIM needs two equally sized planes, got {a.shape} and {b.shape}")
    if min(a.shape) < cfg.window:
        raise ConfigurationError(f"SSIM window {cfg.window} exceeds image size {a.shape}")

    taps = _gaussian_taps(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2

    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    q_a, q_b = _filter_valid(a * a, taps), _filter_valid(b * b, taps)
    r = _filter_valid(a * b, taps)
    var_a = q_a - mu_a * mu_a
    var_b = q_b - mu_b * mu_b
    cov = r - mu_a * mu_b

    num1 = 2.0 * mu_a * mu_b + c1
    num2 = 2.0 * cov + c2
    den1 = mu_a * mu_a + mu_b * mu_b + c1
    den2 = var_a + var_b + c2
    den = den1 * den2
    smap = num1 * num2 / den
    value = float(smap.mean())

    scale = 1.0 / smap.size
    d_mu = (2.0 * mu_b * num2 - 2.0 * mu_b * num1) / den - smap * (2.0 * mu_a * den2 - 2.0 * mu_a * den1) / den
    d_q = -smap * den1 / den
    d_r = 2.0 * num1 / den
    grad = scale * (
        _filter_valid_adjoint(d_mu, taps)
        + 2.0 * a * _filter_valid_adjoint(d_q, taps)
        + b * _filter_valid_adjoint(d_r, taps)
    )
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray, cfg: Optional[SsimConfig] = None) -> float:
    """Mean single-scale SSIM of two planes"""
    return ssim_with_grad(a, b, cfg)[0]
