"""Patch grids, stitching, and the centre-weighted training mask.

Two reconstruction schemes are supported:

* non-overlapping: the image is reflect-padded on the bottom/right to a
  multiple of the patch side and cut into a plain grid;
* overlap: the image is reflect-padded by ``patch/4`` on every side and cut
  with stride ``patch/2``. Only the central ``patch/2`` square of every
  predicted patch is kept, so each output pixel comes from a patch centre.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TilePlan:
    h: int
    w: int
    patch: int
    stride: int
    pad: int                     # top/left padding (overlap mode), 0 otherwise
    padded: tuple[int, int]      # padded image size
    origins_y: tuple[int, ...]
    origins_x: tuple[int, ...]
    overlap: bool

    @property
    def grid(self) -> tuple[int, int]:
        return len(self.origins_y), len(self.origins_x)

    @property
    def count(self) -> int:
        return len(self.origins_y) * len(self.origins_x)

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(y, x) for y in self.origins_y for x in self.origins_x]

    def to_text(self) -> str:
        head = [
            f"image: {self.h}x{self.w}",
            f"mode: {'overlap' if self.overlap else 'nonoverlap'}",
            f"patch: {self.patch} stride: {self.stride} pad: {self.pad}",
            f"padded: {self.padded[0]}x{self.padded[1]}",
            f"grid: {self.grid[0]}x{self.grid[1]}",
            f"tiles: {self.count}",
        ]
        return "\n".join(head + [f"{y} {x}" for y, x in self.origins]) + "\n"


def _axis_origins(padded: int, patch: int, stride: int) -> tuple[int, ...]:
    last = padded - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return tuple(origins)


def plan_tiles(h: int, w: int, patch: int = 48, overlap: bool = False) -> TilePlan:
    if patch < 2 or patch % 2:
        raise TilingError(f"patch must be even and >= 2, got {patch}")
    if h < 1 or w < 1:
        raise TilingError(f"image size must be positive, got {h}x{w}")
    if overlap:
        if patch % 4:
            raise TilingError(f"overlap mode needs patch divisible by 4, got {patch}")
        pad, stride = patch // 4, patch // 2
        ph, pw = max(h + 2 * pad, patch), max(w + 2 * pad, patch)
    else:
        pad, stride = 0, patch
        ph, pw = -(-h // patch) * patch, -(-w // patch) * patch
    return TilePlan(h, w, patch, stride, pad, (ph, pw),
                    _axis_origins(ph, patch, stride), _axis_origins(pw, patch, stride),
                    overlap)


def pad_image(img: np.ndarray, plan: TilePlan) -> np.ndarray:
    """Reflect-pad the last two axes of ``img`` to the plan's padded size."""
    h, w = img.shape[-2:]
    if (h, w) != (plan.h, plan.w):
        raise TilingError(f"image is {h}x{w}, plan expects {plan.h}x{plan.w}")
    ph, pw = plan.padded
    widths = [(0, 0)] * (img.ndim - 2) + [(plan.pad, ph - h - plan.pad),
                                          (plan.pad, pw - w - plan.pad)]
    return np.pad(img, widths, mode="reflect")


def extract_patches(img: np.ndarray, plan: TilePlan) -> list[np.ndarray]:
    padded = pad_image(img, plan)
    p = plan.patch
    return [padded[..., y:y + p, x:x + p].copy() for y, x in plan.origins]


def _check_patches(patches, plan, scale):
    if len(patches) != plan.count:
        raise TilingError(f"got {len(patches)} patches, plan has {plan.count}")
    side = plan.patch * scale
    lead = patches[0].shape[:-2]
    for p in patches:
        if p.shape != lead + (side, side):
            raise TilingError(f"patch shape {p.shape}, expected {lead + (side, side)}")
    return lead


def stitch_nonoverlap(patches_hr, plan: TilePlan, scale: int = 1) -> np.ndarray:
    if plan.overlap:
        raise TilingError("plan is in overlap mode")
    lead = _check_patches(patches_hr, plan, scale)
    ph, pw = plan.padded
    out = np.empty(lead + (ph * scale, pw * scale), dtype=patches_hr[0].dtype)
    side = plan.patch * scale
    for (y, x), patch in zip(plan.origins, patches_hr):
        out[..., y * scale:y * scale + side, x * scale:x * scale + side] = patch
    return out[..., :plan.h * scale, :plan.w * scale]


def _centre_spans(origins, pad, half, size):
    """Per tile: (source offset inside the tile, destination start, length)."""
    spans, covered = [], 0
    for o in origins:
        start, end = o, min(o + half, size)   # centre of tile in unpadded coords
        lo = max(start, covered)
        if end > lo:
            spans.append((pad + (lo - start), lo, end - lo))
            covered = end
        else:
            spans.append(None)
    if covered != size:
        raise TilingError("tile centres do not cover the image")
    return spans


def stitch_overlap_center(patches_hr, plan: TilePlan, scale: int = 1,
                          counts: np.ndarray | None = None) -> np.ndarray:
    """Assemble the image from the central quarter of every patch.

    If ``counts`` is given (shape ``(h*scale, w*scale)``) it is incremented by
    the number of writes to each output pixel.
    """
    if not plan.overlap:
        raise TilingError("plan is not in overlap mode")
    lead = _check_patches(patches_hr, plan, scale)
    half = plan.patch // 2
    sy = _centre_spans(plan.origins_y, plan.pad, half, plan.h)
    sx = _centre_spans(plan.origins_x, plan.pad, half, plan.w)
    out = np.zeros(lead + (plan.h * scale, plan.w * scale), dtype=patches_hr[0].dtype)
    ncols = len(plan.origins_x)
    for idx, patch in enumerate(patches_hr):
        ry, rx = sy[idx // ncols], sx[idx % ncols]
        if ry is None or rx is None:
            continue
        (oy, dy, ly), (ox, dx, lx) = ry, rx
        src = patch[..., oy * scale:(oy + ly) * scale, ox * scale:(ox + lx) * scale]
        out[..., dy * scale:(dy + ly) * scale, dx * scale:(dx + lx) * scale] = src
        if counts is not None:
            counts[dy * scale:(dy + ly) * scale, dx * scale:(dx + lx) * scale] += 1
    return out


def stitch(patches_hr, plan: TilePlan, scale: int = 1) -> np.ndarray:
    if plan.overlap:
        return stitch_overlap_center(patches_hr, plan, scale)
    return stitch_nonoverlap(patches_hr, plan, scale)


def make_mask(n: int, k: int) -> np.ndarray:
    """2-D box linear decay mask of side ``n`` with a flat centre of side ``k``.

    The flat box is centred; when ``n - k`` is odd its side is ``k - 1`` so the
    mask stays symmetric. Outside the box the weight drops by ``1/(m+1)`` per
    pixel of Chebyshev distance ``d``, where ``m`` is the largest such distance,
    so the corner weight is ``1/(m+1) > 0``.
    """
    if k <= 0:
        raise TilingError(f"mask size k must be positive, got {k}")
    if n < 1:
        raise TilingError(f"mask side must be positive, got {n}")
    if k >= n:
        return np.ones((n, n))
    r = np.abs(np.arange(n) - (n - 1) / 2.0)
    d1 = np.ceil(np.maximum(r - (k - 1) / 2.0, 0.0))
    d = np.maximum.outer(d1, d1)
    m = d.max()
    return 1.0 - d / (m + 1.0)
