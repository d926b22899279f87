"""Netpbm graymap IO, bicubic degradation and synthetic training data."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import bicubic_resize


class PGMError(ValueError):
    pass


@dataclass
class GrayImage:
    samples: np.ndarray          # (h, w) unsigned integers
    maxval: int = 255

    def __post_init__(self):
        if not 1 <= self.maxval <= 65535:
            raise PGMError(f"unsupported maxval {self.maxval}")
        s = np.asarray(self.samples)
        if s.ndim != 2:
            raise PGMError(f"samples must be 2-D, got {s.shape}")
        if s.size and (s.min() < 0 or s.max() > self.maxval):
            raise PGMError("samples outside [0, maxval]")
        self.samples = s.astype(np.uint8 if self.maxval < 256 else np.uint16)

    @property
    def h(self) -> int:
        return self.samples.shape[0]

    @property
    def w(self) -> int:
        return self.samples.shape[1]

    @property
    def depth(self) -> int:
        return 8 if self.maxval < 256 else 16

    def as_float(self) -> np.ndarray:
        return self.samples.astype(np.float64)

    @classmethod
    def from_float(cls, data, maxval: int = 255) -> "GrayImage":
        return cls(quantize(data, maxval), maxval)


def quantize(data, maxval: int = 255) -> np.ndarray:
    """Round half away from zero, then clamp to ``[0, maxval]``."""
    data = np.asarray(data, dtype=np.float64)
    rounded = np.sign(data) * np.floor(np.abs(data) + 0.5)
    return np.clip(rounded, 0, maxval).astype(np.int64)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _tokens(data: bytes, count: int, pos: int):
    out = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PGMError("malformed header")
        out.append(m.group(1))
        pos = m.end()
    return out, pos


def parse_pgm(data: bytes) -> GrayImage:
    if data[:2] not in (b"P5", b"P2"):
        raise PGMError("not a P5/P2 graymap")
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PGMError(f"malformed header: {exc}") from None
    if w < 1 or h < 1:
        raise PGMError(f"bad dimensions {w}x{h}")
    if not 1 <= maxval <= 65535:
        raise PGMError(f"unsupported maxval {maxval}")
    if data[:2] == b"P2":
        body = re.sub(rb"#[^\n]*", b"", data[pos:]).split()
        if len(body) < w * h:
            raise PGMError(f"truncated payload: {len(body)} of {w * h} samples")
        samples = np.array([int(t) for t in body[:w * h]], dtype=np.int64)
    else:
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = w * h * dtype.itemsize
        if len(data) - pos < need:
            raise PGMError(f"truncated payload: {len(data) - pos} of {need} bytes")
        samples = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    if samples.max(initial=0) > maxval:
        raise PGMError("sample exceeds maxval")
    return GrayImage(samples.reshape(h, w), maxval)


def read_pgm(path) -> GrayImage:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(img: GrayImage, plain: bool = False) -> bytes:
    header = f"{'P2' if plain else 'P5'}\n{img.w} {img.h}\n{img.maxval}\n".encode()
    if plain:
        rows = [" ".join(str(v) for v in row) for row in img.samples.tolist()]
        return header + ("\n".join(rows) + "\n").encode()
    dtype = ">u2" if img.maxval > 255 else "u1"
    return header + img.samples.astype(dtype).tobytes()


def write_pgm(img: GrayImage, path, plain: bool = False) -> None:
    Path(path).write_bytes(encode_pgm(img, plain))


def degrade_pair(src: GrayImage, hr_factor: int = 1, lr_factor: int = 2):
    """HR and LR images bicubically downscaled from the same source.

    ``src`` is first cropped (bottom/right) to a multiple of ``lr_factor`` so
    that the LR image is exactly ``lr_factor / hr_factor`` times smaller.
    """
    if hr_factor < 1 or lr_factor < 1 or lr_factor % hr_factor:
        raise ValueError("lr_factor must be a positive multiple of hr_factor")
    h, w = src.h // lr_factor * lr_factor, src.w // lr_factor * lr_factor
    if h == 0 or w == 0:
        raise ValueError(f"source {src.h}x{src.w} too small for factor {lr_factor}")
    data = src.as_float()[:h, :w]
    hr = bicubic_resize(data, 1, hr_factor)
    lr = bicubic_resize(data, 1, lr_factor)
    return (GrayImage.from_float(hr, src.maxval), GrayImage.from_float(lr, src.maxval))


def _craters(rng, size, maxval):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tilt = rng.uniform(-0.3, 0.3, size=2)
    img = 0.5 + tilt[0] * (yy / size - 0.5) + tilt[1] * (xx / size - 0.5)
    for _ in range(rng.integers(4, 10)):
        cy, cx = rng.uniform(0, size, size=2)
        r = rng.uniform(size * 0.05, size * 0.25)
        dist = np.hypot(yy - cy, xx - cx) / r
        floor = -0.45 * np.clip(1 - dist ** 2, 0, None)
        rim = 0.35 * np.exp(-((dist - 1.0) ** 2) / 0.02)
        img += floor + rim
    img += rng.normal(0, 0.02, size=img.shape)
    lo, hi = np.percentile(img, [1, 99])
    img = (img - lo) / max(hi - lo, 1e-9)
    return np.clip(img, 0, 1) * maxval


def _ramps(rng, size, maxval):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    a, b = rng.uniform(-1, 1, size=2)
    img = a * yy + b * xx
    img = (img - img.min()) / max(np.ptp(img), 1e-9)
    return img * maxval


def _checkers(rng, size, maxval):
    cell = int(rng.integers(3, 9))
    yy, xx = np.mgrid[0:size, 0:size]
    lo, hi = sorted(rng.uniform(0.1, 0.9, size=2))
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return (lo + (hi - lo) * board) * maxval


SYNTH_KINDS = {"craters": _craters, "ramps": _ramps, "checkers": _checkers}


def synth_dataset(kind: str = "craters", count: int = 8, seed: int = 0,
                  hr_size: int = 96, scale: int = 2, maxval: int = 255):
    """Deterministic synthetic ``(hr, lr)`` pairs of :class:`GrayImage`."""
    try:
        gen = SYNTH_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from "
                         f"{sorted(SYNTH_KINDS)}") from None
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        src = GrayImage.from_float(gen(rng, hr_size, maxval), maxval)
        pairs.append(degrade_pair(src, 1, scale))
    return pairs


def read_manifest(path):
    """Pairs of paths from a ``hr_path<TAB>lr_path`` manifest."""
    base = Path(path).parent
    pairs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        hr, lr = line.split("\t")
        pairs.append((base / hr, base / lr))
    return pairs


def write_manifest(pairs, path) -> None:
    Path(path).write_text("".join(f"{hr}\t{lr}\n" for hr, lr in pairs))
