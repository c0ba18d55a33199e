"""Flow <-> RGB codec: direction to hue, clamped magnitude to saturation.

Per pixel with flow (u, v):
    alpha  = arctan2(v, u)
    m      = sqrt(u^2 + v^2)
    m_norm = min(1, m / (sigma * sqrt(h^2 + w^2)))
    hue    = (alpha mod 2pi) / 2pi * 360        saturation = m_norm, value = 1

Value is held at 1 so zero flow renders white and the conversion stays
invertible; channels are rounded half-away-from-zero to 8 bits so encoded
images are bit-stable across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CodecError, ConfigError


@dataclass(frozen=True)
class FlowCodecConfig:
    sigma: float = 0.15

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ConfigError("sigma must be positive")


def magnitude_scale(h: int, w: int, cfg: FlowCodecConfig) -> float:
    """The clamp scale sigma * sqrt(h^2 + w^2)."""
    return cfg.sigma * math.sqrt(h * h + w * w)


def normalize_magnitude(m, h: int, w: int, cfg: FlowCodecConfig):
    """Map magnitude >= 0 into [0, 1], clamping at the diagonal scale."""
    return np.minimum(1.0, np.asarray(m, dtype=np.float64)
                      / magnitude_scale(h, w, cfg))


def flow_to_polar(flow: np.ndarray, cfg: FlowCodecConfig):
    """Per-pixel (alpha, m, m_norm) for an [h, w, 2] flow field."""
    u = np.asarray(flow[..., 0], dtype=np.float64)
    v = np.asarray(flow[..., 1], dtype=np.float64)
    alpha = np.arctan2(v, u)
    m = np.hypot(u, v)
    h, w = flow.shape[:2]
    return alpha, m, normalize_magnitude(m, h, w, cfg)


def _round_u8(x: np.ndarray) -> np.ndarray:
    # Half-away-from-zero; inputs are nonnegative so this is floor(x + 0.5).
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def hsv_to_rgb_u8(hue_deg: np.ndarray, sat: np.ndarray,
                  val: np.ndarray) -> np.ndarray:
    """Standard 6-sector HSV -> RGB, vectorized, 8-bit output."""
    hp = (np.asarray(hue_deg, dtype=np.float64) % 360.0) / 60.0
    c = np.asarray(val, dtype=np.float64) * np.asarray(sat, dtype=np.float64)
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    m0 = np.asarray(val, dtype=np.float64) - c
    sector = np.floor(hp).astype(np.int64) % 6
    zeros = np.zeros_like(c)
    r = np.choose(sector, [c, x, zeros, zeros, x, c])
    g = np.choose(sector, [x, c, c, x, zeros, zeros])
    b = np.choose(sector, [zeros, zeros, x, c, c, x])
    rgb = np.stack([r + m0, g + m0, b + m0], axis=-1)
    return _round_u8(rgb * 255.0)


def flow_to_rgb(flow: np.ndarray, cfg: FlowCodecConfig) -> np.ndarray:
    """Encode an [h, w, 2] flow field as an [h, w, 3] uint8 image."""
    if not np.all(np.isfinite(flow)):
        raise CodecError("flow field contains non-finite values")
    alpha, _, m_norm = flow_to_polar(flow, cfg)
    hue = (alpha % (2.0 * math.pi)) / (2.0 * math.pi) * 360.0
    return hsv_to_rgb_u8(hue, m_norm, np.ones_like(m_norm))


def rgb_to_flow(img: np.ndarray, cfg: FlowCodecConfig) -> np.ndarray:
    """Invert flow_to_rgb. Achromatic pixels decode to (0, 0)."""
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    c = mx - mn
    chroma = c > 0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    safe_c = np.where(chroma, c, 1.0)
    hp = np.zeros_like(mx)
    is_r = chroma & (mx == r)
    is_g = chroma & (mx == g) & ~is_r
    is_b = chroma & ~is_r & ~is_g
    hp = np.where(is_r, ((g - b) / safe_c) % 6.0, hp)
    hp = np.where(is_g, (b - r) / safe_c + 2.0, hp)
    hp = np.where(is_b, (r - g) / safe_c + 4.0, hp)
    sat = np.where(chroma & (mx > 0), c / np.where(mx > 0, mx, 1.0), 0.0)
    h, w = img.shape[:2]
    m = sat * magnitude_scale(h, w, cfg)
    alpha = hp * 60.0 * math.pi / 180.0
    flow = np.stack([m * np.cos(alpha), m * np.sin(alpha)], axis=-1)
    return np.where(chroma[..., None], flow, 0.0).astype(np.float32)


def snap_to_lattice(flow: np.ndarray, step: float = 1.0) -> np.ndarray:
    """Round each component to the nearest multiple of `step`."""
    scaled = np.asarray(flow, dtype=np.float64) / step
    snapped = np.floor(np.abs(scaled) + 0.5) * np.sign(scaled) * step
    return snapped.astype(np.float32)
