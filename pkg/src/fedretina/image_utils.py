"""Pixel-level transforms: augmentation, Gaussian filtering, resizing and quality degradation.

All functions take and return float arrays shaped (H, W, 3) with values in [0, 1].
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import fft, ndimage

from fedretina.config import (
    BRIGHTNESS_CONTRAST_PROB,
    BRIGHTNESS_RANGE,
    CONTRAST_RANGE,
    DEGRADE_QUALITY,
    FLIP_PROB,
    GAUSSIAN_KERNEL,
    GAUSSIAN_SIGMA,
    ROTATE_MAX_DEGREES,
    ROTATE_PROB,
)
from fedretina.errors import ConfigError


@dataclass(frozen=True)
class GaussianFilterSpec:
    enabled: bool = False
    sigma: float = GAUSSIAN_SIGMA
    kernel_size: int = GAUSSIAN_KERNEL


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = FLIP_PROB
    rotate_prob: float = ROTATE_PROB
    rotate_max_degrees: float = ROTATE_MAX_DEGREES
    brightness_contrast_prob: float = BRIGHTNESS_CONTRAST_PROB
    contrast_range: Tuple[float, float] = CONTRAST_RANGE
    brightness_range: Tuple[float, float] = BRIGHTNESS_RANGE
    gaussian_filter: GaussianFilterSpec = GaussianFilterSpec()

    def validate(self) -> "AugmentPolicy":
        for name in ("flip_prob", "rotate_prob", "brightness_contrast_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {value}")
        if self.rotate_max_degrees < 0:
            raise ConfigError(f"rotate_max_degrees must be >= 0, got {self.rotate_max_degrees}")
        spec = self.gaussian_filter
        if spec.kernel_size < 1 or spec.kernel_size % 2 == 0:
            raise ConfigError(f"gaussian kernel size must be odd, got {spec.kernel_size}")
        if spec.sigma <= 0:
            raise ConfigError(f"gaussian sigma must be > 0, got {spec.sigma}")
        return self


IDENTITY_POLICY = AugmentPolicy(flip_prob=0.0, rotate_prob=0.0, brightness_contrast_prob=0.0)


@dataclass(frozen=True)
class DegradeSpec:
    quality_min: int = DEGRADE_QUALITY[0]
    quality_max: int = DEGRADE_QUALITY[1]

    def validate(self) -> "DegradeSpec":
        if not 1 <= self.quality_min <= self.quality_max <= 100:
            raise ConfigError(
                f"need 1 <= quality_min <= quality_max <= 100, got {self.quality_min}:{self.quality_max}"
            )
        return self

    @classmethod
    def parse(cls, text: str) -> "DegradeSpec":
        """Parse 'LOW:HIGH' (or a single quality)."""
        try:
            parts = [int(part) for part in text.split(":")]
        except ValueError as exc:
            raise ConfigError(f"bad quality range {text!r}, expected LOW:HIGH") from exc
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise ConfigError(f"bad quality range {text!r}, expected LOW:HIGH")
        return cls(parts[0], parts[1]).validate()

    def __str__(self) -> str:
        return f"{self.quality_min}:{self.quality_max}"


def flip_horizontal(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1, :].copy()


def rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre with bilinear resampling; pixels from outside become 0."""
    rotated = ndimage.rotate(pixels, degrees, axes=(1, 0), reshape=False, order=1,
                             mode="constant", cval=0.0, prefilter=False)
    return np.clip(rotated, 0.0, 1.0).astype(pixels.dtype)


def brightness_contrast(pixels: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    return np.clip(alpha * (pixels - 0.5) + 0.5 + beta, 0.0, 1.0).astype(pixels.dtype)


def gaussian_filter(pixels: np.ndarray, sigma: float = GAUSSIAN_SIGMA,
                    kernel_size: int = GAUSSIAN_KERNEL) -> np.ndarray:
    """Separable Gaussian blur over the spatial axes with edge-replicate padding."""
    radius = (kernel_size - 1) // 2
    if radius == 0 or pixels.shape[0] * pixels.shape[1] == 1:
        return pixels.copy()
    blurred = ndimage.gaussian_filter(pixels.astype(np.float64), sigma=(sigma, sigma, 0),
                                      mode="nearest", truncate=radius / sigma)
    return np.clip(blurred, 0.0, 1.0).astype(pixels.dtype)


def augment_traced(pixels: np.ndarray, policy: AugmentPolicy,
                   rng: np.random.Generator) -> Tuple[np.ndarray, Tuple[str, ...]]:
    """Apply the policy and report which transforms fired.

    Order: flip, rotation, brightness/contrast, Gaussian filter. Three uniform
    draws gate the random steps on every call, so the stream advances the same
    way whatever fires.
    """
    gates = rng.random(3)
    applied = []
    out = pixels
    if gates[0] < policy.flip_prob:
        out = flip_horizontal(out)
        applied.append("flip")
    if gates[1] < policy.rotate_prob:
        angle = rng.uniform(-policy.rotate_max_degrees, policy.rotate_max_degrees)
        out = rotate(out, angle)
        applied.append("rotate")
    if gates[2] < policy.brightness_contrast_prob:
        alpha = rng.uniform(*policy.contrast_range)
        beta = rng.uniform(*policy.brightness_range)
        out = brightness_contrast(out, alpha, beta)
        applied.append("brightness_contrast")
    spec = policy.gaussian_filter
    if spec.enabled:
        out = gaussian_filter(out, spec.sigma, spec.kernel_size)
        applied.append("gaussian_filter")
    if out is pixels:
        out = pixels.copy()
    return out, tuple(applied)


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment (half-pixel offsets), edges clamped."""
    in_h, in_w = pixels.shape[:2]
    if (in_h, in_w) == (height, width):
        return pixels.copy()
    rows = (np.arange(height) + 0.5) * (in_h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (in_w / width) - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    channels = [
        ndimage.map_coordinates(pixels[:, :, c].astype(np.float64), [grid_r, grid_c],
                                order=1, mode="nearest")
        for c in range(pixels.shape[2])
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(pixels.dtype)


# Standard JPEG quantization tables (ITU-T T.81 Annex K)
LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMINANCE_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def scaled_table(table: np.ndarray, quality: int) -> np.ndarray:
    """The usual quality-factor scaling: 5000/q below 50, 200-2q otherwise, clamped to [1, 255]."""
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((table * scale + 50.0) / 100.0), 1.0, 255.0)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    height, width = plane.shape
    blocks = plane.reshape(height // 8, 8, width // 8, 8).transpose(0, 2, 1, 3)
    coeffs = fft.dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    dc = coeffs[..., 0, 0].copy()
    coeffs = np.round(coeffs / table) * table
    # block means survive; only the AC detail is quantized
    coeffs[..., 0, 0] = dc
    blocks = fft.idctn(coeffs, type=2, norm="ortho", axes=(-2, -1))
    return blocks.transpose(0, 2, 1, 3).reshape(height, width)


def jpeg_roundtrip(pixels: np.ndarray, quality: int) -> np.ndarray:
    """Emulate JPEG quality loss in memory: YCbCr, 8x8 DCT, quantize the AC coefficients, and back.

    A constant-colour image has no AC energy and passes through unchanged at every quality.

    Sides that are not multiples of 8 are padded by reflection and cropped afterwards.
    """
    height, width = pixels.shape[:2]
    pad_h, pad_w = (-height) % 8, (-width) % 8
    ycc = rgb_to_ycbcr(pixels.astype(np.float64) * 255.0)
    ycc = np.pad(ycc, ((0, pad_h), (0, pad_w), (0, 0)), mode="symmetric")
    tables = (scaled_table(LUMINANCE_TABLE, quality),
              scaled_table(CHROMINANCE_TABLE, quality),
              scaled_table(CHROMINANCE_TABLE, quality))
    planes = [_quantize_plane(ycc[..., c] - 128.0, tables[c]) + 128.0 for c in range(3)]
    rgb = ycbcr_to_rgb(np.stack(planes, axis=-1))[:height, :width]
    return np.clip(rgb / 255.0, 0.0, 1.0).astype(pixels.dtype)


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    mse = float(np.mean((reference.astype(np.float64) - test.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
