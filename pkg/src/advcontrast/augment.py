"""Stochastic view augmentations: random crop, flip, brightness/contrast, grayscale.

Pure functions over a caller-owned numpy Generator; the draw order is fixed
(crop offsets, flip, brightness, contrast, grayscale) and every draw is
consumed on every call, so a given rng state fully determines the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclass(frozen=True)
class AugmentConfig:
    crop_pad: int = 2                      # reflect-pad 4 at 32px, scaled to resolution
    flip_prob: float = 0.5
    brightness_delta: float = 0.4
    contrast_range: tuple = (0.6, 1.4)
    grayscale_prob: float = 0.2

    def __post_init__(self):
        for p in (self.flip_prob, self.grayscale_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probabilities must be in [0,1], got {p}")
        if self.crop_pad < 0:
            raise ValueError("crop_pad must be >= 0")

    @staticmethod
    def identity() -> "AugmentConfig":
        return AugmentConfig(crop_pad=0, flip_prob=0.0, brightness_delta=0.0,
                             contrast_range=(1.0, 1.0), grayscale_prob=0.0)

    @staticmethod
    def for_resolution(res: int) -> "AugmentConfig":
        return AugmentConfig(crop_pad=max(1, round(4 * res / 32)))


def random_crop(x: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad by `pad` then crop back to the original size at a random offset."""
    oy, ox = rng.integers(0, 2 * pad + 1, size=2)
    if pad == 0:
        return x
    h, w = x.shape[1], x.shape[2]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    return np.ascontiguousarray(xp[:, oy:oy + h, ox:ox + w])


def color_distort(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random brightness shift, contrast scale around the luminance mean, grayscale."""
    delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    contrast = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1])
    gray_u = rng.random()
    changed = False
    if delta != 0.0:
        x = x + np.float32(delta)
        changed = True
    if contrast != 1.0:
        m = np.float32((x * LUMA[:, None, None]).sum(axis=0).mean())
        x = m + (x - m) * np.float32(contrast)
        changed = True
    if gray_u < cfg.grayscale_prob:
        lum = (x * LUMA[:, None, None]).sum(axis=0)
        x = np.broadcast_to(lum, x.shape).copy()
        changed = True
    if changed:
        x = np.clip(x, 0.0, 1.0)
    return x.astype(np.float32, copy=False)


def apply_augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = random_crop(x, cfg.crop_pad, rng)
    if rng.random() < cfg.flip_prob:
        x = np.ascontiguousarray(x[:, :, ::-1])
    return color_distort(x, cfg, rng)


def sample_view_pair(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Two independent augmentation draws applied to the same image (CHW in [0,1])."""
    return apply_augment(x, cfg, rng), apply_augment(x, cfg, rng)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Per-image view pairs for a batch; returns (view_i, view_j) arrays."""
    vi = np.empty_like(images)
    vj = np.empty_like(images)
    for k in range(images.shape[0]):
        vi[k], vj[k] = sample_view_pair(images[k], cfg, rng)
    return vi, vj
