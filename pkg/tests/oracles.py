"""Independent reference implementations used as test oracles.

Nothing here imports the package's numeric code paths.
"""

import math
from fractions import Fraction

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def levels_by_enumeration(search_size: int, patch_h, patch_w, frame_h, frame_w, cap: int = 5) -> int:
    """Largest n with n*n <= H_s * Q, found by counting up, then clamped to [1, cap]."""
    x = search_size * Fraction(patch_h) * Fraction(patch_w) / (Fraction(frame_h) * Fraction(frame_w))
    n = 0
    while (n + 1) ** 2 <= x:
        n += 1
    return max(1, min(cap, n))


def bilinear_resize_loops(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resize with edge clamping, one output sample at a time.

    ``img`` is (C, H, W).
    """
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    sy, sx = h / out_h, w / out_w
    for ch in range(c):
        for oy in range(out_h):
            fy = max((oy + 0.5) * sy - 0.5, 0.0)
            y0 = int(math.floor(fy))
            y1 = min(y0 + 1, h - 1)
            ly = fy - y0
            for ox in range(out_w):
                fx = max((ox + 0.5) * sx - 0.5, 0.0)
                x0 = int(math.floor(fx))
                x1 = min(x0 + 1, w - 1)
                lx = fx - x0
                out[ch, oy, ox] = ((1 - ly) * ((1 - lx) * img[ch, y0, x0] + lx * img[ch, y0, x1])
                                   + ly * ((1 - lx) * img[ch, y1, x0] + lx * img[ch, y1, x1]))
    return out


def down_up_loops(img: np.ndarray, levels: int) -> np.ndarray:
    """align -> decimate -> (x2 bilinear)^levels -> clamp -> restore, with scalar loops."""
    c, h, w = img.shape
    step = 2 ** levels
    ah, aw = -(-h // step) * step, -(-w // step) * step
    aligned = img if (ah, aw) == (h, w) else bilinear_resize_loops(img, ah, aw)
    lr = np.zeros((c, ah // step, aw // step))
    for ch in range(c):
        for y in range(ah // step):
            for x in range(aw // step):
                lr[ch, y, x] = aligned[ch, y * step, x * step]
    cur = lr
    for _ in range(levels):
        cur = bilinear_resize_loops(cur, cur.shape[1] * 2, cur.shape[2] * 2)
    cur = np.clip(cur, 0.0, 1.0)
    return cur if (ah, aw) == (h, w) else bilinear_resize_loops(cur, h, w)


def softmax2(a: float, b: float) -> tuple[float, float]:
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    return ea / (ea + eb), eb / (ea + eb)


def box_iou_loops(a, b) -> float:
    """IoU of centre-convention (cx, cy, w, h) tuples via explicit interval overlap."""
    def interval(c, s):
        return c - s / 2, c + s / 2

    ax, bx = interval(a[0], a[2]), interval(b[0], b[2])
    ay, by = interval(a[1], a[3]), interval(b[1], b[3])
    ox = max(0.0, min(ax[1], bx[1]) - max(ax[0], bx[0]))
    oy = max(0.0, min(ay[1], by[1]) - max(ay[0], by[0]))
    inter = ox * oy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)
