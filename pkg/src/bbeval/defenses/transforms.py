"""Catalog of randomized, range-preserving image transforms.

Each entry maps a (C, H, W) float image in [-0.5, 0.5] back into the same
range. Transform parameters are sampled at call time from the supplied rng
so a barrage defense can randomize selection, order, and parameters per
image. The two channel transforms only apply to multi-channel images and
are skipped (with a log notice) on grayscale input.
"""

from __future__ import annotations

import logging

import numpy as np

from ..exceptions import ParameterError
from ..rng import generator

log = logging.getLogger(__name__)

LO, HI = -0.5, 0.5

CATALOG = (
    "gaussian-noise", "salt-pepper", "affine-warp", "zoom-crop",
    "contrast-stretch", "fft-perturb", "dct-quantize", "box-blur",
    "channel-permute", "grayscale-mix",
)
MULTICHANNEL_ONLY = frozenset({"channel-permute", "grayscale-mix"})


def usable_transforms(channels: int):
    if channels > 1:
        return list(CATALOG)
    return [t for t in CATALOG if t not in MULTICHANNEL_ONLY]


def _clip(x):
    return np.clip(x, LO, HI).astype(np.float32)


def _resize_nearest(img: np.ndarray, h2: int, w2: int) -> np.ndarray:
    c, h, w = img.shape
    rows = np.minimum((np.arange(h2) * h / h2).astype(int), h - 1)
    cols = np.minimum((np.arange(w2) * w / w2).astype(int), w - 1)
    return img[:, rows][:, :, cols]


def _gaussian_noise(x, params, rng):
    sigma = params.get("sigma", 0.05)
    if sigma == 0:
        return x
    return _clip(x + sigma * rng.standard_normal(x.shape).astype(np.float32))


def _salt_pepper(x, params, rng):
    frac = params.get("fraction", 0.05)
    out = x.copy()
    hits = rng.random(x.shape) < frac
    values = np.where(rng.random(x.shape) < 0.5, LO, HI).astype(np.float32)
    out[hits] = values[hits]
    return out


def _affine_warp(x, params, rng):
    angle = params.get("angle", rng.uniform(-0.3, 0.3))
    dy = params.get("dy", rng.integers(-2, 3))
    dx = params.get("dx", rng.integers(-2, 3))
    c, h, w = x.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = np.cos(-angle), np.sin(-angle)
    src_y = ca * (ys - cy) - sa * (xs - cx) + cy - dy
    src_x = sa * (ys - cy) + ca * (xs - cx) + cx - dx
    src_y = np.clip(np.rint(src_y).astype(int), 0, h - 1)
    src_x = np.clip(np.rint(src_x).astype(int), 0, w - 1)
    return x[:, src_y, src_x]


def _zoom_crop(x, params, rng):
    factor = params.get("factor", rng.uniform(1.0, 1.3))
    c, h, w = x.shape
    h2, w2 = max(1, int(round(h / factor))), max(1, int(round(w / factor)))
    y0, x0 = (h - h2) // 2, (w - w2) // 2
    crop = x[:, y0:y0 + h2, x0:x0 + w2]
    return _resize_nearest(crop, h, w)


def _contrast_stretch(x, params, rng):
    gamma = params.get("gamma", rng.uniform(0.6, 1.6))
    center = float(x.mean())
    return _clip(center + gamma * (x - center))


def _fft_perturb(x, params, rng):
    strength = params.get("strength", 0.1)
    spec = np.fft.rfft2(x, axes=(1, 2))
    jitter = 1.0 + strength * rng.standard_normal(spec.shape)
    return _clip(np.fft.irfft2(spec * jitter, s=x.shape[1:], axes=(1, 2)))


def _dct_quantize(x, params, rng):
    from .fd import blockwise_quantize
    step = params.get("step", float(rng.uniform(20.0, 80.0)))
    return blockwise_quantize(x, step)


def _box_blur(x, params, rng):
    k = int(params.get("kernel", rng.choice([2, 3])))
    c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (k // 2, k - 1 - k // 2), (k // 2, k - 1 - k // 2)),
                    mode="edge")
    out = np.zeros_like(x, dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            out += padded[:, dy:dy + h, dx:dx + w]
    return (out / (k * k)).astype(np.float32)


def _channel_permute(x, params, rng):
    perm = params.get("perm")
    if perm is None:
        perm = rng.permutation(x.shape[0])
    return x[np.asarray(perm)]


def _grayscale_mix(x, params, rng):
    amount = params.get("amount", rng.uniform(0.3, 1.0))
    gray = x.mean(axis=0, keepdims=True)
    return ((1.0 - amount) * x + amount * gray).astype(np.float32)


_FUNCS = {
    "gaussian-noise": _gaussian_noise,
    "salt-pepper": _salt_pepper,
    "affine-warp": _affine_warp,
    "zoom-crop": _zoom_crop,
    "contrast-stretch": _contrast_stretch,
    "fft-perturb": _fft_perturb,
    "dct-quantize": _dct_quantize,
    "box-blur": _box_blur,
    "channel-permute": _channel_permute,
    "grayscale-mix": _grayscale_mix,
}


def transform_catalog_apply(x, transform_ids, params=None, seed: int = 0) -> np.ndarray:
    """Apply a sequence of catalog transforms to one (C, H, W) image.

    ``params`` maps position index to a parameter dict; missing entries are
    sampled from the seeded rng. Channel transforms are skipped on
    single-channel input.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3:
        raise ParameterError("transform_catalog_apply: expected a (C, H, W) image")
    rng = generator(seed, "transform-chain")
    params = params or {}
    out = x
    for pos, tid in enumerate(transform_ids):
        if tid not in _FUNCS:
            raise ParameterError(f"unknown transform id '{tid}'")
        if tid in MULTICHANNEL_ONLY and out.shape[0] == 1:
            log.info("skipping transform '%s': needs multi-channel input", tid)
            continue
        out = _FUNCS[tid](out, params.get(pos, {}), rng)
    return _clip(out)
