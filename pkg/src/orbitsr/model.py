"""Residual dense non-local attention network (RDNLA).

Dataflow for an input ``x``::

    H_-1 = SFE1(x); H_0 = SFE2(H_-1)
    H_p  = RDNLB_p(H_{p-1})                       p = 1..P
    H_GFB = Conv3x3(Conv1x1([H_1, ..., H_P]))
    H_DFB = Conv3x3((H_GFB + H_-1) * sigmoid(NLB(H_-1)))
    out  = Conv3x3(Upsample(H_DFB))

The forward pass drops every activation reference right after its last use
(``del`` and ownership hand-over through a one-element list) so that the
memory high-water mark of inference equals the liveness schedule computed
by :func:`orbitsr.pipeline.estimate_peak_activation_bytes`.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tensor import ShapeError

UPSAMPLERS = ("deconv", "subpixel")
MAGIC = b"RDNLA1\0"
_HEADER = struct.Struct("<8iQ")


# unit-range intensities are centred on zero before entering the network
INTENSITY_OFFSET = 0.5


class ConfigError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    P: int = 16
    D: int = 6
    G: int = 32
    Gb: int = 64
    scale: int = 2
    upsampler: str = "deconv"
    cm: bool = True
    lra: bool = True
    gfb: bool = True
    in_channels: int = 1

    def __post_init__(self):
        for name in ("P", "D", "G", "Gb", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.upsampler not in UPSAMPLERS:
            raise ConfigError(f"unknown upsampler {self.upsampler!r}")
        if self.scale not in (2, 3, 4):
            raise ConfigError("scale must be 2, 3 or 4")
        if self.upsampler == "deconv" and self.scale == 3:
            raise ConfigError("deconv upsampler supports scale 2 and 4 only")

    @property
    def nlb_channels(self) -> int:
        return max(1, self.Gb // 2)

    @property
    def toggle_bits(self) -> int:
        return int(self.cm) | int(self.lra) << 1 | int(self.gfb) << 2

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


TOY = ModelConfig(P=2, D=2, G=4, Gb=8)
PAPER = ModelConfig(P=16, D=6, G=32, Gb=64)


def _layer_in_channels(cfg: ModelConfig, d: int) -> int:
    if cfg.cm:
        return cfg.Gb + (d - 1) * cfg.G
    return cfg.Gb if d == 1 else (d - 1) * cfg.G


def _nlb_shapes(prefix, c, ci):
    return [
        (f"{prefix}.theta", (ci, c, 1, 1)),
        (f"{prefix}.phi", (ci, c, 1, 1)),
        (f"{prefix}.g", (ci, c, 1, 1)),
        (f"{prefix}.z", (c, ci, 1, 1)),
    ]


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, int, int, int]]]:
    """Kernel shapes ``(c_out, c_in, kh, kw)`` in registry order."""
    gb, ci = cfg.Gb, cfg.nlb_channels
    shapes = [("sfe1", (gb, cfg.in_channels, 3, 3)), ("sfe2", (gb, gb, 3, 3))]
    for p in range(cfg.P):
        for d in range(1, cfg.D + 1):
            shapes.append((f"block{p}.conv{d}", (cfg.G, _layer_in_channels(cfg, d), 3, 3)))
        lfb_in = cfg.D * cfg.G + (gb if cfg.cm else 0)
        shapes.append((f"block{p}.lfb", (gb, lfb_in, 1, 1)))
        if cfg.lra:
            shapes += _nlb_shapes(f"block{p}.nlb", gb, ci)
    if cfg.gfb:
        shapes += [("gfb.fuse", (gb, cfg.P * gb, 1, 1)), ("gfb.conv", (gb, gb, 3, 3))]
    shapes += _nlb_shapes("gra.nlb", gb, ci)
    shapes.append(("gra.conv", (gb, gb, 3, 3)))
    if cfg.upsampler == "deconv":
        for i in range(cfg.scale // 2):
            shapes.append((f"up{i}", (gb, gb, 4, 4)))
    else:
        shapes.append(("up.conv", (gb * cfg.scale ** 2, gb, 3, 3)))
    shapes.append(("out", (cfg.in_channels, gb, 3, 3)))
    return shapes


def has_bias(layer: str) -> bool:
    # a bias on phi adds a per-row constant to the attention logits, which
    # softmax cancels; it would be a parameter with identically zero gradient
    return not layer.endswith(".phi")


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter tensor as ``(name, shape)`` in weight-file order."""
    out = []
    for name, shape in layer_shapes(cfg):
        out.append((name + ".w", shape))
        if has_bias(name):
            out.append((name + ".b", (shape[0],)))
    return out


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, ad.Parameter]):
        self.config = config
        self.params = params

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def w(self, name):
        return self.params[name + ".w"], self.params.get(name + ".b")

    def flat_values(self) -> np.ndarray:
        return np.concatenate([p.value.ravel() for p in self.params.values()])

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: ad.Parameter(p.value.astype(dtype), k)
                                   for k, p in self.params.items()})


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model with He (fan-in) normal kernels and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".b"):
            value = np.zeros(shape)
        else:
            value = rng.standard_normal(shape) * np.sqrt(2.0 / np.prod(shape[1:]))
        params[name] = ad.Parameter(value.astype(dtype), name)
    return Model(config, params)


# -- graph -------------------------------------------------------------------

def _conv(model, x, name, pad=0):
    w, b = model.w(name)
    return ad.conv2d(x, w, b, pad=pad)


def nonlocal_block(model: Model, prefix: str, x: ad.Node) -> ad.Node:
    """Embedded-Gaussian non-local block with an internal residual."""
    n, c, h, w = x.shape
    ci, length = model.params[prefix + ".theta.w"].value.shape[0], h * w
    theta = _conv(model, x, prefix + ".theta")
    phi = _conv(model, x, prefix + ".phi")
    logits = ad.matmul(ad.transpose(ad.reshape(theta, (n, ci, length)), (0, 2, 1)),
                       ad.reshape(phi, (n, ci, length)))
    del theta, phi
    attn = ad.softmax(logits)
    del logits
    g = _conv(model, x, prefix + ".g")
    y = ad.matmul(ad.reshape(g, (n, ci, length)), ad.transpose(attn, (0, 2, 1)))
    del g, attn
    z = _conv(model, ad.reshape(y, (n, ci, h, w)), prefix + ".z")
    del y
    return ad.add(z, x)


def _rdnlb(model: Model, p: int, carry: list) -> ad.Node:
    cfg = model.config
    h_prev = carry.pop()
    feats = []
    for d in range(1, cfg.D + 1):
        if cfg.cm:
            inp = ad.concat([h_prev] + feats)
        else:
            inp = h_prev if d == 1 else ad.concat(feats)
        pre = _conv(model, inp, f"block{p}.conv{d}", pad=1)
        del inp
        feats.append(ad.relu(pre))
        del pre
    cat = ad.concat(([h_prev] if cfg.cm else []) + feats)
    del feats
    lf = _conv(model, cat, f"block{p}.lfb")
    del cat
    lr = ad.add(lf, h_prev)
    del lf
    if not cfg.lra:
        return lr
    nl = nonlocal_block(model, f"block{p}.nlb", h_prev)
    del h_prev
    gate = ad.sigmoid(nl)
    del nl
    return ad.mul(lr, gate)


def rdnlb_forward(model: Model, p: int, h_prev: ad.Node) -> ad.Node:
    """Residual dense non-local attention block ``p`` (0-based) applied to ``h_prev``."""
    if h_prev.shape[1] != model.config.Gb:
        raise ShapeError(f"block input has {h_prev.shape[1]} channels, "
                         f"expected {model.config.Gb}")
    return _rdnlb(model, p, [h_prev])


def _gra(model: Model, carry: list) -> ad.Node:
    h_gfb = carry.pop()
    h_m1 = carry.pop()
    t = ad.add(h_gfb, h_m1)
    del h_gfb
    nl = nonlocal_block(model, "gra.nlb", h_m1)
    del h_m1
    gate = ad.sigmoid(nl)
    del nl
    tg = ad.mul(t, gate)
    del t, gate
    return _conv(model, tg, "gra.conv", pad=1)


def gra_forward(model: Model, h_m1: ad.Node, h_gfb: ad.Node) -> ad.Node:
    """Global residual attention: ``Conv3x3((H_GFB + H_-1) * sigmoid(NLB(H_-1)))``."""
    if h_m1.shape != h_gfb.shape:
        raise ShapeError(f"shape mismatch {h_m1.shape} vs {h_gfb.shape}")
    return _gra(model, [h_m1, h_gfb])


def _upsample(model: Model, carry: list) -> ad.Node:
    cfg = model.config
    h = carry.pop()
    if cfg.upsampler == "deconv":
        for i in range(cfg.scale // 2):
            w, b = model.w(f"up{i}")
            h = ad.conv_transpose2d(h, w, b, stride=2, pad=1)
        return h
    pre = _conv(model, h, "up.conv", pad=1)
    del h
    return ad.pixel_shuffle(pre, cfg.scale)


def forward_graph(model: Model, x: ad.Node) -> ad.Node:
    """Differentiable forward pass; ``x`` has shape ``(n, in_channels, h, w)``."""
    cfg = model.config
    if x.value.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (n, {cfg.in_channels}, h, w) input, got {x.shape}")
    h_m1 = _conv(model, x, "sfe1", pad=1)
    carry = [_conv(model, h_m1, "sfe2", pad=1)]
    outs = []
    for p in range(cfg.P):
        h = _rdnlb(model, p, carry)
        if cfg.gfb:
            outs.append(h)
        carry.append(h)
        del h
    if cfg.gfb:
        carry.clear()
        cat = ad.concat(outs)
        del outs
        fused = _conv(model, cat, "gfb.fuse")
        del cat
        carry.append(_conv(model, fused, "gfb.conv", pad=1))
        del fused
    carry.insert(0, h_m1)
    del h_m1
    carry = [_gra(model, carry)]
    up = _upsample(model, carry)
    return _conv(model, up, "out", pad=1)


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Inference without gradient recording."""
    x = np.asarray(x)
    with ad.no_grad():
        return forward_graph(model, ad.constant(x.astype(model.dtype, copy=False))).value


_DIHEDRAL = [(k, flip) for flip in (False, True) for k in range(4)]


def _apply(a, k, flip):
    a = np.rot90(a, k, axes=(-2, -1))
    return a[..., ::-1] if flip else a


def _invert(a, k, flip):
    a = a[..., ::-1] if flip else a
    return np.rot90(a, -k, axes=(-2, -1))


def self_ensemble_forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Mean of the 8 dihedral-transformed predictions, each mapped back."""
    acc = None
    for k, flip in _DIHEDRAL:
        y = _invert(forward(model, np.ascontiguousarray(_apply(x, k, flip))), k, flip)
        acc = y.astype(np.float64) if acc is None else acc + y
    return (acc / len(_DIHEDRAL)).astype(model.dtype)


# -- weight files ------------------------------------------------------------

def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_weights(model: Model, path) -> None:
    cfg = model.config
    payload = model.flat_values().astype("<f4").tobytes()
    header = _HEADER.pack(cfg.P, cfg.D, cfg.G, cfg.Gb, cfg.scale,
                          UPSAMPLERS.index(cfg.upsampler), cfg.toggle_bits,
                          cfg.in_channels, len(payload) // 4)
    Path(path).write_bytes(MAGIC + header + payload + struct.pack("<Q", _checksum(payload)))


def read_config(path) -> ModelConfig:
    data = Path(path).read_bytes()
    return _parse(data)[0]


def _parse(data: bytes):
    if not data.startswith(MAGIC):
        raise WeightFileError("not an RDNLA weight file (bad magic)")
    off = len(MAGIC)
    if len(data) < off + _HEADER.size:
        raise WeightFileError("truncated header")
    P, D, G, Gb, scale, up, bits, inc, count = _HEADER.unpack_from(data, off)
    if up not in (0, 1):
        raise WeightFileError(f"unknown upsampler code {up}")
    cfg = ModelConfig(P=P, D=D, G=G, Gb=Gb, scale=scale, upsampler=UPSAMPLERS[up],
                      cm=bool(bits & 1), lra=bool(bits & 2), gfb=bool(bits & 4),
                      in_channels=inc)
    off += _HEADER.size
    end = off + 4 * count
    if len(data) != end + 8:
        raise WeightFileError(f"payload length mismatch: header says {count} values, "
                              f"file holds {(len(data) - off - 8) / 4:g}")
    payload = data[off:end]
    (stored,) = struct.unpack_from("<Q", data, end)
    if stored != _checksum(payload):
        raise WeightFileError("payload checksum mismatch")
    if count != param_count(cfg):
        raise WeightFileError(f"payload holds {count} values, config needs {param_count(cfg)}")
    return cfg, np.frombuffer(payload, dtype="<f4")


def load_weights(path, config: ModelConfig | None = None) -> Model:
    """Load a weight file; if ``config`` is given it must match the stored one."""
    cfg, flat = _parse(Path(path).read_bytes())
    if config is not None and config != cfg:
        diffs = [f"{k}: file={v} expected={getattr(config, k)}"
                 for k, v in asdict(cfg).items() if getattr(config, k) != v]
        raise ConfigError("config mismatch (" + ", ".join(diffs) + ")")
    params, off = {}, 0
    for name, shape in param_shapes(cfg):
        size = int(np.prod(shape))
        params[name] = ad.Parameter(flat[off:off + size].astype(np.float32).reshape(shape),
                                    name)
        off += size
    return Model(cfg, params)
