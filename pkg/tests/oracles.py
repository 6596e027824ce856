"""Independent scalar element-loop references for every loss.

These deliberately avoid vectorized ops and torch: plain Python loops over
numpy arrays, so they cannot share a bug with the implementations they check.
"""
import math

import numpy as np

DICE_EPS = 1e-5
LOG_EPS = 1e-8


def mean_abs_diff(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    total = 0.0
    count = 0
    for x, y in zip(a.flat, b.flat):
        total += abs(float(x) - float(y))
        count += 1
    return total / count


def cpc(content, content_recon, pattern, pattern_recon) -> float:
    return mean_abs_diff(content, content_recon) + mean_abs_diff(pattern, pattern_recon)


def seg(target_onehot, probs, dice_eps=DICE_EPS, log_eps=LOG_EPS) -> float:
    a = np.asarray(target_onehot, dtype=np.float64)
    m = np.asarray(probs, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
        m = m[None]
    batch, num_classes, height, width = a.shape
    ce = 0.0
    for idx in np.ndindex(a.shape):
        ce += -a[idx] * math.log(max(m[idx], log_eps))
    ce /= a.size
    dice_total = 0.0
    for k in range(num_classes):
        inter = 0.0
        denom = 0.0
        for b in range(batch):
            for i in range(height):
                for j in range(width):
                    inter += a[b, k, i, j] * m[b, k, i, j]
                    denom += a[b, k, i, j] ** 2 + m[b, k, i, j] ** 2
        dice_total += (2.0 * inter + dice_eps) / (denom + dice_eps)
    return ce + (1.0 - dice_total / num_classes)


def lc(target_onehot, probs_direct, probs_translated) -> float:
    return seg(target_onehot, probs_direct) + seg(target_onehot, probs_translated)


def cycle(x, x_recon) -> float:
    return mean_abs_diff(x, x_recon)


def gan_d(real_scores, fake_scores, log_eps=LOG_EPS) -> float:
    real = np.asarray(real_scores, dtype=np.float64)
    fake = np.asarray(fake_scores, dtype=np.float64)
    real_term = 0.0
    for value in real.flat:
        real_term += math.log(max(float(value), log_eps))
    fake_term = 0.0
    for value in fake.flat:
        fake_term += math.log(max(1.0 - float(value), log_eps))
    return -(real_term / real.size + fake_term / fake.size)


def gan_g(fake_scores, log_eps=LOG_EPS) -> float:
    fake = np.asarray(fake_scores, dtype=np.float64)
    total = 0.0
    for value in fake.flat:
        total += math.log(max(float(value), log_eps))
    return -total / fake.size


def total(parts: dict, weights) -> float:
    return (
        weights.cpc * (parts["cpc_s"] + parts["cpc_t"])
        + weights.lc * parts["lc"]
        + weights.cycle * (parts["cycle_s"] + parts["cycle_t"])
        + weights.gan * (parts["gan_s2t"] + parts["gan_t2s"])
    )


def random_simplex(rng, shape) -> np.ndarray:
    """Random per-pixel probability maps bounded away from 0."""
    raw = rng.uniform(0.05, 1.0, size=shape)
    return raw / raw.sum(axis=-3, keepdims=True)


def random_onehot(rng, shape) -> np.ndarray:
    """Random one-hot maps; shape is (..., K, H, W)."""
    *lead, num_classes, height, width = shape
    labels = rng.integers(0, num_classes, size=(*lead, height, width))
    out = np.zeros(shape, dtype=np.float64)
    it = np.ndindex(*labels.shape)
    for idx in it:
        out[(*idx[:-2], labels[idx], idx[-2], idx[-1])] = 1.0
    return out
