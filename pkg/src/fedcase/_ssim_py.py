"""Pure-numpy SSIM map kernel, the fallback for :mod:`fedcase._ssim_ext`.

Window sums are exact int64 integral-image differences and every
floating-point expression mirrors the compiled kernel operation for
operation, so both backends return bit-identical maps.
"""

import numpy as np


def _window_sums(a: np.ndarray, win: int) -> np.ndarray:
    """Sum over every ``win x win`` window of the last two axes."""
    s = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1] + 1), dtype=np.int64)
    s[..., 1:, 1:] = a.cumsum(axis=-2).cumsum(axis=-1)
    return s[..., win:, win:] - s[..., :-win, win:] - s[..., win:, :-win] + s[..., :-win, :-win]


def ssim_maps(query, pool, win, c1, c2):
    """Local SSIM of ``query`` (H, W) against each image of ``pool`` (N, H, W)."""
    q = np.asarray(query, dtype=np.int64)
    p = np.asarray(pool, dtype=np.int64)
    n = win * win
    sx = _window_sums(q, win)
    sxx = _window_sums(q * q, win)
    sy = _window_sums(p, win)
    syy = _window_sums(p * p, win)
    sxy = _window_sums(p * q, win)
    nf = float(n)
    nn1 = float(n * (n - 1))
    mx = sx / nf
    my = sy / nf
    vx = (n * sxx - sx * sx) / nn1
    vy = (n * syy - sy * sy) / nn1
    cov = (n * sxy - sx * sy) / nn1
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den
