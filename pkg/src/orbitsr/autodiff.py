"""Tape-based reverse-mode differentiation over the kernels in :mod:`orbitsr.tensor`.

Every op returns a :class:`Node` holding its forward value. While gradient
recording is enabled (the default) a node also keeps its parents and a
closure mapping the upstream gradient to one gradient per parent; under
:func:`no_grad` nodes are bare values so intermediate activations are freed
as soon as the caller drops them.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import profiling
from . import tensor as T

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("value", "parents", "backward_fn", "op", "requires_grad", "__weakref__")

    def __init__(self, value, parents=(), backward_fn=None, op="const", requires_grad=False):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"


class Parameter(Node):
    """Trainable leaf with a stable name and a gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, value: np.ndarray, name: str):
        super().__init__(value, (), None, "param", True)
        self.name = name
        self.grad = np.zeros_like(value)


def constant(value) -> Node:
    value = np.asarray(value)
    profiling.note_alloc(value)
    return Node(value)


def _make(value, parents, backward_fn, op, view=False):
    if not view and value.base is not None:
        value = value.copy()
    profiling.note_alloc(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward_fn, op, True)
    return Node(value, op=op)


# -- ops ---------------------------------------------------------------------

def conv2d(x: Node, w: Node, b: Node | None = None, pad: int = 0, stride: int = 1) -> Node:
    out = T.conv2d(x.value, w.value, None if b is None else b.value, pad, stride)

    def back(g):
        gx, gw, gb = T.conv2d_backward(g, x.value, w.value, pad, stride)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv2d")


def conv_transpose2d(x: Node, w: Node, b: Node | None = None, stride: int = 2,
                     pad: int = 1) -> Node:
    out = T.conv_transpose2d(x.value, w.value, None if b is None else b.value, stride, pad)

    def back(g):
        gx, gw, gb = T.conv_transpose2d_backward(g, x.value, w.value, stride, pad)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, back, "conv_transpose2d")


def pixel_shuffle(x: Node, s: int) -> Node:
    return _make(T.pixel_shuffle(x.value, s), (x,),
                 lambda g: (T.pixel_unshuffle(g, s),), "pixel_shuffle")


def relu(x: Node) -> Node:
    out = T.relu(x.value)
    # subgradient at exactly 0 is 0
    return _make(out, (x,), lambda g: (g * (x.value > 0),), "relu")


def sigmoid(x: Node) -> Node:
    out = T.sigmoid(x.value)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def concat(parts) -> Node:
    parts = list(parts)
    if len(parts) == 1:
        return parts[0]
    out = T.concat_channels([p.value for p in parts])
    bounds = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, parts, back, "concat")


def add(a: Node, b: Node) -> Node:
    return _make(T.ew_add(a.value, b.value), (a, b), lambda g: (g, g), "add")


def mul(a: Node, b: Node) -> Node:
    return _make(T.ew_mul(a.value, b.value), (a, b),
                 lambda g: (g * b.value, g * a.value), "mul")


def scale(x: Node, c: float) -> Node:
    return _make(x.value * c, (x,), lambda g: (g * c,), "scale")


def reshape(x: Node, shape) -> Node:
    src = x.value.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape",
                 view=True)


def transpose(x: Node, axes) -> Node:
    inv = np.argsort(axes)
    return _make(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),),
                 "transpose", view=True)


def matmul(a: Node, b: Node) -> Node:
    out = T.matmul(a.value, b.value)

    def back(g):
        return (np.matmul(g, np.swapaxes(b.value, -1, -2)),
                np.matmul(np.swapaxes(a.value, -1, -2), g))

    return _make(out, (a, b), back, "matmul")


def softmax(x: Node) -> Node:
    out = T.softmax_rows(x.value)

    def back(g):
        dot = np.einsum("...ij,...ij->...i", g, out)
        gx = g - dot[..., None]
        gx *= out
        return (gx,)

    return _make(out, (x,), back, "softmax")


def sum_all(x: Node) -> Node:
    shape = x.value.shape
    return _make(np.asarray(x.value.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def l1_loss(sr: Node, hr) -> Node:
    """Mean absolute difference against a fixed target."""
    hr = np.asarray(hr, dtype=sr.value.dtype)
    if hr.shape != sr.value.shape:
        raise T.ShapeError(f"shape mismatch {sr.value.shape} vs {hr.shape}")
    diff = sr.value - hr
    n = diff.size
    return _make(np.asarray(np.abs(diff).mean()), (sr,),
                 lambda g: (g * np.sign(diff) / n,), "l1_loss")


def mask_psnr(sr: Node, hr, mask, i_max: float = 1.0) -> Node:
    """Masked PSNR in dB, averaged over the batch.

    Per sample: ``10*log10(N * i_max**2 / sum(M * (hr - sr)**2))`` where ``N``
    is the number of elements in the sample. Training minimises the negative.
    """
    hr = np.asarray(hr, dtype=sr.value.dtype)
    if hr.shape != sr.value.shape:
        raise T.ShapeError(f"shape mismatch {sr.value.shape} vs {hr.shape}")
    mask = np.asarray(mask, dtype=sr.value.dtype)
    if mask.shape != sr.value.shape[-2:]:
        raise T.ShapeError(f"mask {mask.shape} does not match patch {sr.value.shape[-2:]}")
    batch = sr.value.shape[0]
    per = sr.value[0].size
    err = sr.value - hr
    s = (mask * err * err).reshape(batch, -1).sum(axis=1)
    with np.errstate(divide="ignore"):
        vals = 10.0 * np.log10(per * i_max ** 2 / s)
    coef = -10.0 / math.log(10.0)

    def back(g):
        scale_ = (g * coef / (batch * s)).reshape(batch, 1, 1, 1)
        return (scale_ * 2.0 * mask * err,)

    return _make(np.asarray(vals.mean()), (sr,), back, "mask_psnr")


# -- reverse pass ------------------------------------------------------------

def _topo(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, params=None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`.

    Returns a name -> gradient map. Parameters in ``params`` that the loss
    does not depend on receive a zero gradient.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    reached = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            reached[node.name] = node
            node.grad = np.array(g, dtype=node.value.dtype).reshape(node.value.shape)
            continue
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    out = {name: p.grad for name, p in reached.items()}
    for p in params or ():
        if p.name not in reached:
            p.grad = np.zeros_like(p.value)
            out[p.name] = p.grad
    return out


def finite_diff_check(f, params, eps: float = 1e-5, max_coords: int | None = None,
                      seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable building a fresh scalar loss node from
    the current parameter values. ``max_coords`` caps the number of sampled
    coordinates per parameter (all coordinates when None).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = f()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("loss is not finite")
    backward(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().value)
                flat[i] = orig - eps
                fm = float(f().value)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite loss perturbing {p.name}[{i}]")
            cd = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - cd) / max(abs(a), abs(cd), 1e-12)
            worst = max(worst, err)
    return worst


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads: dict, state: AdamState | None = None, lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state = state or AdamState()
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for p in params:
        g = grads[p.name]
        if g.shape != p.value.shape:
            raise T.ShapeError(f"gradient for {p.name} has shape {g.shape}, "
                               f"parameter has {p.value.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if lr:
            p.value -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.value.dtype)
    return state
