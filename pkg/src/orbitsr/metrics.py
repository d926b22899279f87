"""Image quality metrics on 2-D grayscale arrays.

PSNR values are in dB; identical inputs give ``math.inf``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, astuple, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

DEFAULT_IMAX = 255.0
# blocking grid: the HR side of the central region kept from each 48x48 LR patch
DEFAULT_BLOCK = 48


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _db(num, den):
    if den == 0:
        return math.inf
    return 10.0 * math.log10(num / den)


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, i_max: float = DEFAULT_IMAX) -> float:
    if i_max <= 0:
        raise ValueError("i_max must be positive")
    return _db(i_max ** 2, mse(a, b))


def mask_psnr(sr, hr, mask, i_max: float = DEFAULT_IMAX) -> float:
    """Masked PSNR: ``10*log10(N * i_max**2 / sum(M * (hr - sr)**2))``."""
    sr, hr = _pair(sr, hr)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != sr.shape[-2:]:
        raise ShapeError(f"mask {mask.shape} does not match {sr.shape[-2:]}")
    err = float(np.sum(mask * (hr - sr) ** 2))
    return _db(sr.size * i_max ** 2, err)


def l1_loss(sr, hr) -> float:
    sr, hr = _pair(sr, hr)
    return float(np.mean(np.abs(sr - hr)))


def _boundary_stats(img: np.ndarray, block: int):
    """Sum and count of squared neighbour differences on / off the block grid."""
    h, w = img.shape
    dh = (img[:, 1:] - img[:, :-1]) ** 2     # pair (x-1, x) sits at column x
    dv = (img[1:, :] - img[:-1, :]) ** 2
    on_x = np.arange(1, w) % block == 0
    on_y = np.arange(1, h) % block == 0
    sb = dh[:, on_x].sum() + dv[on_y, :].sum()
    nb = h * on_x.sum() + w * on_y.sum()
    sbc = dh[:, ~on_x].sum() + dv[~on_y, :].sum()
    nbc = h * (~on_x).sum() + w * (~on_y).sum()
    return sb, nb, sbc, nbc


def bef(img, block: int = DEFAULT_BLOCK) -> float:
    """Blocking effect factor of a 2-D image on a ``block`` grid."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {img.shape}")
    if block < 2:
        raise ValueError("block must be >= 2")
    h, w = img.shape
    if block > min(h, w):
        raise ValueError(f"block {block} larger than image {h}x{w}")
    sb, nb, sbc, nbc = _boundary_stats(img, block)
    if nb == 0:
        return 0.0
    d_b = sb / nb
    d_bc = sbc / nbc if nbc else 0.0
    if d_b <= d_bc:
        return 0.0
    eta = math.log2(block) / math.log2(min(h, w))
    return float(eta * (d_b - d_bc))


def psnr_b(ref, test, i_max: float = DEFAULT_IMAX, block: int = DEFAULT_BLOCK) -> float:
    """PSNR with the blocking effect factor of ``test`` added to the MSE."""
    return _db(i_max ** 2, mse(ref, test) + bef(test, block))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    k = win.shape[0]
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, (k, k)), win, optimize=True)


def ssim(a, b, i_max: float = DEFAULT_IMAX, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all fully-contained Gaussian windows."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"expected 2-D images, got shape {a.shape}")
    if min(a.shape) < win_size:
        raise ShapeError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (0.01 * i_max) ** 2, (0.03 * i_max) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    psnr: float
    psnrb: float
    ssim: float
    mse: float
    bef: float


CSV_COLUMNS = ("image_id",) + tuple(f.name for f in fields(MetricsReport))


def evaluate(ref, test, i_max: float = DEFAULT_IMAX, block: int = DEFAULT_BLOCK) -> MetricsReport:
    """All metrics of ``test`` against ``ref``; SSIM is NaN below window size."""
    ref, test = _pair(ref, test)
    try:
        s = ssim(ref, test, i_max)
    except ShapeError:
        s = math.nan
    e, f = mse(ref, test), bef(test, block)
    return MetricsReport(psnr=_db(i_max ** 2, e), psnrb=_db(i_max ** 2, e + f), ssim=s,
                         mse=e, bef=f)


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def write_csv(rows, path) -> None:
    """Write ``(image_id, MetricsReport)`` rows."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(CSV_COLUMNS)
        for image_id, rep in rows:
            out.writerow([image_id] + [format_value(v) for v in astuple(rep)])
