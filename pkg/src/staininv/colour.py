"""RGB/optical-density conversion, the HSD colour transform, and SSIM.

Optical density follows Beer-Lambert: od = -ln((v + 1) / 256) for an 8-bit
channel value v.  The +1 guard keeps the map total (v = 0 stays finite) and
v = 255 maps to exactly zero density.

The HSD transform splits optical density into two chromatic coordinates
(c_x, c_y) and a density component (the per-pixel mean OD, a proxy for
tissue structure independent of stain hue):

    c_x = od_r / I - 1          c_y = (od_g - od_b) / (sqrt(3) * I)

with I the mean OD across channels.  Pixels with I below a small threshold
carry no usable chroma and are flagged as background.
"""

from dataclasses import dataclass

import numpy as np

SQRT3 = np.sqrt(3.0)

#: mean-OD threshold below which a pixel counts as background (near-white).
BACKGROUND_DENSITY_EPS = 1e-4


class GamutError(ValueError):
    """Chromatic coordinates that imply a negative channel density."""


def rgb_to_od(rgb):
    """Map 8-bit channel values (..., 3) to optical densities."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ValueError("expected RGB triples along the last axis")
    if arr.min() < 0 or arr.max() > 255:
        raise ValueError("channel values must lie in [0, 255]")
    return -np.log((arr + 1.0) / 256.0)


def od_to_rgb(od):
    """Inverse of ``rgb_to_od`` with rounding and clamping to 8-bit range."""
    arr = np.asarray(od, dtype=np.float64)
    values = np.rint(256.0 * np.exp(-arr) - 1.0)
    return np.clip(values, 0, 255).astype(np.uint8)


@dataclass
class HsdImage:
    """Per-pixel chromatic coordinates and density planes (any shape)."""

    c_x: np.ndarray
    c_y: np.ndarray
    density: np.ndarray
    background: np.ndarray  # bool mask of near-zero-density pixels


def hsd_forward(od, background_eps=BACKGROUND_DENSITY_EPS):
    """Optical densities (..., 3) -> HSD planes.

    Background pixels (mean OD below ``background_eps``) get c_x = c_y = 0
    and are flagged; their density is kept as-is.
    """
    arr = np.asarray(od, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ValueError("expected OD triples along the last axis")
    if arr.min() < -0.0:
        raise ValueError("optical densities must be non-negative")
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    density = (r + g + b) / 3.0
    background = density < background_eps
    safe = np.where(background, 1.0, density)
    # (2r - g - b)/(3I) == r/I - 1, but is exactly zero for grey pixels.
    c_x = np.where(background, 0.0, (2.0 * r - g - b) / (3.0 * safe))
    c_y = np.where(background, 0.0, (g - b) / (SQRT3 * safe))
    return HsdImage(c_x=c_x, c_y=c_y, density=density, background=background)


def _hsd_channels(hsd):
    c_x = np.asarray(hsd.c_x, dtype=np.float64)
    c_y = np.asarray(hsd.c_y, dtype=np.float64)
    density = np.asarray(hsd.density, dtype=np.float64)
    # Factoring density out keeps grey pixels (c_x = c_y = 0) exact.
    od_r = density * (c_x + 1.0)
    od_g = density * (3.0 - (c_x + 1.0) + SQRT3 * c_y) / 2.0
    od_b = density * (3.0 - (c_x + 1.0) - SQRT3 * c_y) / 2.0
    return np.stack([od_r, od_g, od_b], axis=-1)


def hsd_inverse(hsd, tol=1e-9):
    """HSD planes -> optical densities; raises GamutError on negative ODs.

    Round-off-level negatives (within ``tol``) are clipped to zero so that
    ``hsd_inverse(hsd_forward(od))`` is the identity on valid pixels.
    """
    od = _hsd_channels(hsd)
    worst = od.min()
    if worst < -tol:
        raise GamutError(
            f"chromatic coordinates leave the OD gamut (min channel {worst:.3e})"
        )
    return np.maximum(od, 0.0)


def hsd_inverse_clamped(hsd):
    """Total variant of ``hsd_inverse``: clamp negative ODs, count pixels."""
    od = _hsd_channels(hsd)
    clamped = int(np.count_nonzero((od < -1e-12).any(axis=-1)))
    return np.maximum(od, 0.0), clamped


@dataclass
class SsimConfig:
    """Sliding-window SSIM parameters (uniform window, stride 1)."""

    window: int = 8
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float | None = None  # None: max observed value over the pair


def ssim(a, b, config=None):
    """Mean local structural similarity between two single-channel images."""
    config = config or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"images must be 2-d and equal-shaped, got {a.shape} vs {b.shape}")
    w = config.window
    if a.shape[0] < w or a.shape[1] < w:
        raise ValueError(f"image {a.shape} smaller than {w}x{w} window")
    dyn = config.dynamic_range
    if dyn is None:
        dyn = max(float(a.max()), float(b.max()))
    if dyn <= 0:
        dyn = 1.0  # degenerate pair (all-zero images): constants only
    c1 = (config.k1 * dyn) ** 2
    c2 = (config.k2 * dyn) ** 2

    win_a = np.lib.stride_tricks.sliding_window_view(a, (w, w))
    win_b = np.lib.stride_tricks.sliding_window_view(b, (w, w))
    mu_a = win_a.mean(axis=(2, 3))
    mu_b = win_b.mean(axis=(2, 3))
    var_a = (win_a * win_a).mean(axis=(2, 3)) - mu_a * mu_a
    var_b = (win_b * win_b).mean(axis=(2, 3)) - mu_b * mu_b
    cov = (win_a * win_b).mean(axis=(2, 3)) - mu_a * mu_b
    score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())
