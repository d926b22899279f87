"""On-board selective transmission: super-resolve, score, keep or drop.

Resource accounting is analytic. :func:`forward_schedule` lists the ops of
one forward pass in execution order with their output sizes and MAC counts;
the estimators walk that list with last-use liveness, so the numbers do not
depend on any particular accelerator or allocator.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tiling
from .model import (INTENSITY_OFFSET, ConfigError, Model, ModelConfig, forward,
                    self_ensemble_forward)

MODES = ("whole", "patch-nonoverlap", "patch-overlap")
MODE_ALIASES = {"whole": "whole", "nonoverlap": "patch-nonoverlap",
                "overlap": "patch-overlap", "patch-nonoverlap": "patch-nonoverlap",
                "patch-overlap": "patch-overlap"}


# -- analytic schedule -------------------------------------------------------

@dataclass
class Step:
    op: str
    stage: str
    inputs: tuple[int, ...]
    output: int
    elems: int          # output element count, 0 for views
    macs: int = 0
    alias: bool = False


class _Sched:
    def __init__(self, batch):
        self.n = batch
        self.steps: list[Step] = []
        self.shapes: dict[int, tuple] = {}
        self.stage = "input"
        self._next = 0

    def tensor(self, shape):
        tid = self._next
        self._next += 1
        self.shapes[tid] = shape
        return tid

    def emit(self, op, inputs, shape, macs=0, alias=False):
        out = self.tensor(shape)
        elems = 0 if alias else int(np.prod(shape))
        self.steps.append(Step(op, self.stage, tuple(inputs), out, elems, int(macs), alias))
        return out

    def conv(self, x, c_out, k, pad):
        n, c, h, w = self.shapes[x]
        oh, ow = h + 2 * pad - k + 1, w + 2 * pad - k + 1
        return self.emit("conv2d", [x], (n, c_out, oh, ow), n * c_out * oh * ow * c * k * k)

    def deconv(self, x, c_out):
        n, c, h, w = self.shapes[x]
        return self.emit("conv_transpose2d", [x], (n, c_out, 2 * h, 2 * w),
                         n * h * w * c_out * c * 16)

    def unary(self, op, x):
        return self.emit(op, [x], self.shapes[x])

    def binary(self, op, a, b):
        return self.emit(op, [a, b], self.shapes[a])

    def concat(self, parts):
        if len(parts) == 1:
            return parts[0]
        n, _, h, w = self.shapes[parts[0]]
        c = sum(self.shapes[p][1] for p in parts)
        return self.emit("concat", parts, (n, c, h, w))

    def view(self, x, shape):
        return self.emit("view", [x], shape, alias=True)

    def nlb(self, x, ci):
        n, c, h, w = self.shapes[x]
        length = h * w
        theta = self.conv(x, ci, 1, 0)
        phi = self.conv(x, ci, 1, 0)
        tv = self.view(self.view(theta, (n, ci, length)), (n, length, ci))
        pv = self.view(phi, (n, ci, length))
        logits = self.emit("matmul", [tv, pv], (n, length, length), n * length * length * ci)
        attn = self.unary("softmax", logits)
        g = self.conv(x, ci, 1, 0)
        gv = self.view(g, (n, ci, length))
        at = self.view(attn, (n, length, length))
        y = self.emit("matmul", [gv, at], (n, ci, length), n * ci * length * length)
        z = self.conv(self.view(y, (n, ci, h, w)), c, 1, 0)
        return self.binary("add", z, x)


def forward_schedule(cfg: ModelConfig, input_hw, batch: int = 1):
    """Ops of one forward pass, in the exact order the model executes them.

    Returns ``(steps, input_id, output_id, shapes)``.
    """
    s = _Sched(batch)
    h, w = input_hw
    x = s.tensor((batch, cfg.in_channels, h, w))
    gb, ci = cfg.Gb, cfg.nlb_channels
    s.stage = "sfe"
    h_m1 = s.conv(x, gb, 3, 1)
    hp = s.conv(h_m1, gb, 3, 1)
    outs = []
    s.stage = "rdnlb"
    for _ in range(cfg.P):
        feats = []
        for d in range(1, cfg.D + 1):
            if cfg.cm:
                inp = s.concat([hp] + feats)
            else:
                inp = hp if d == 1 else s.concat(feats)
            feats.append(s.unary("relu", s.conv(inp, cfg.G, 3, 1)))
        cat = s.concat(([hp] if cfg.cm else []) + feats)
        lf = s.conv(cat, gb, 1, 0)
        lr = s.binary("add", lf, hp)
        if cfg.lra:
            gate = s.unary("sigmoid", s.nlb(hp, ci))
            lr = s.binary("mul", lr, gate)
        hp = lr
        outs.append(hp)
    s.stage = "dfb"
    if cfg.gfb:
        hp = s.conv(s.conv(s.concat(outs), gb, 1, 0), gb, 3, 1)
    t = s.binary("add", hp, h_m1)
    gate = s.unary("sigmoid", s.nlb(h_m1, ci))
    dfb = s.conv(s.binary("mul", t, gate), gb, 3, 1)
    s.stage = "upscale"
    if cfg.upsampler == "deconv":
        up = dfb
        for _ in range(cfg.scale // 2):
            up = s.deconv(up, gb)
    else:
        up = s.unary("pixel_shuffle", s.conv(dfb, gb * cfg.scale ** 2, 3, 1))
        n, c, uh, uw = s.shapes[up]
        s.shapes[up] = (n, c // cfg.scale ** 2, uh * cfg.scale, uw * cfg.scale)
    out = s.conv(up, cfg.in_channels, 3, 1)
    return s.steps, x, out, s.shapes


def estimate_peak_activation_bytes(cfg: ModelConfig, input_hw, batch: int = 1,
                                   itemsize: int = 4) -> int:
    """High-water mark of live activation bytes under last-use liveness.

    The input and the final output are held for the whole pass; parameters
    and kernel-internal scratch buffers are not counted.
    """
    steps, x, out, shapes = forward_schedule(cfg, input_hw, batch)
    owner = {x: x}
    for st in steps:
        owner[st.output] = owner[st.inputs[0]] if st.alias else st.output
    last_use = {}
    for i, st in enumerate(steps):
        for t in st.inputs:
            last_use[owner[t]] = i
    pinned = {x, owner[out]}
    size = {x: int(np.prod(shapes[x])) * itemsize}
    live = peak = size[x]
    for i, st in enumerate(steps):
        if not st.alias:
            size[st.output] = st.elems * itemsize
            live += size[st.output]
            peak = max(peak, live)
        for buf in {owner[t] for t in st.inputs}:
            if last_use[buf] == i and buf not in pinned:
                live -= size[buf]
    return peak


def estimate_macs(cfg: ModelConfig, input_hw, batch: int = 1) -> int:
    """Multiply-accumulates of convolutions, transposed convolutions and attention."""
    steps, *_ = forward_schedule(cfg, input_hw, batch)
    return sum(st.macs for st in steps)


def macs_by_stage(cfg: ModelConfig, input_hw, batch: int = 1) -> dict[str, int]:
    steps, *_ = forward_schedule(cfg, input_hw, batch)
    stages: dict[str, int] = {}
    for st in steps:
        stages[st.stage] = stages.get(st.stage, 0) + st.macs
    return stages


# -- decisions ---------------------------------------------------------------

@dataclass
class ResourceLedger:
    patch_count: int = 0
    peak_activation_bytes: int = 0
    total_macs: int = 0
    stages: dict = field(default_factory=dict)

    def merge(self, other: "ResourceLedger") -> "ResourceLedger":
        stages = dict(self.stages)
        for k, v in other.stages.items():
            stages[k] = stages.get(k, 0) + v
        return ResourceLedger(self.patch_count + other.patch_count,
                              max(self.peak_activation_bytes, other.peak_activation_bytes),
                              self.total_macs + other.total_macs, stages)


@dataclass
class Decision:
    verdict: str
    score: float
    threshold: float
    resources: ResourceLedger


def decide(score: float, threshold: float) -> str:
    return "transmit" if score >= threshold else "discard"


def gradient_energy_score(img, i_max: float = 255.0, ref: float = 1e-3) -> float:
    """Placeholder usefulness score: saturating mean squared gradient energy."""
    a = np.asarray(img, dtype=np.float64) / i_max
    energy = 0.0
    if a.shape[-1] > 1:
        energy += float(np.mean(np.diff(a, axis=-1) ** 2))
    if a.shape[-2] > 1:
        energy += float(np.mean(np.diff(a, axis=-2) ** 2))
    return energy / (energy + ref)


def constant_score(value: float = 0.5):
    def score(img, i_max=255.0):
        return value
    return score


SCORERS = {"gradient": gradient_energy_score, "constant": constant_score()}


# -- super-resolution --------------------------------------------------------

def _predict(model, batch, ensemble):
    if ensemble:
        return np.concatenate([self_ensemble_forward(model, b[None]) for b in batch])
    return forward(model, batch)


def predict_patches(model: Model, patches, batch_size: int = 8, jobs: int = 1,
                    ensemble: bool = False) -> list[np.ndarray]:
    """Run the model on 2-D LR patches; returns 2-D HR patches in order."""
    dtype = model.dtype
    groups = [np.stack(patches[i:i + batch_size])[:, None].astype(dtype)
              for i in range(0, len(patches), batch_size)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda g: _predict(model, g, ensemble), groups))
    else:
        results = [_predict(model, g, ensemble) for g in groups]
    return [p[0] for r in results for p in r]


def super_resolve(model: Model, img, mode: str = "patch-overlap", patch: int = 48,
                  i_max: float = 255.0, jobs: int = 1, ensemble: bool = False,
                  batch_size: int = 8):
    """Super-resolve a 2-D image given in intensity units; returns (sr, plan)."""
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(img, dtype=np.float64) / i_max - INTENSITY_OFFSET
    scale = model.config.scale
    if mode == "whole":
        sr = _predict(model, x[None, None].astype(model.dtype), ensemble)[0, 0]
        return (sr.astype(np.float64) + INTENSITY_OFFSET) * i_max, None
    plan = tiling.plan_tiles(x.shape[0], x.shape[1], patch, overlap=mode == "patch-overlap")
    hr = predict_patches(model, tiling.extract_patches(x, plan), batch_size, jobs, ensemble)
    sr = tiling.stitch(hr, plan, scale)
    return (sr.astype(np.float64) + INTENSITY_OFFSET) * i_max, plan


def run_pipeline(lr_img, model: Model, mode: str = "patch-overlap", inference_fn=None,
                 threshold: float = 0.5, patch: int = 48, i_max: float = 255.0,
                 jobs: int = 1, ensemble: bool = False):
    """Super-resolve, score, and decide; returns ``(sr_img, Decision)``.

    The SR image is returned on both the transmit and the discard path.
    """
    if np.ndim(lr_img) != 2:
        raise ValueError("expected a 2-D grayscale image")
    if model.config.in_channels != 1:
        raise ConfigError(f"model expects {model.config.in_channels} channels, "
                         "pipeline images are grayscale")
    inference_fn = inference_fn or gradient_energy_score
    mode = MODE_ALIASES.get(mode, mode)
    sr, plan = super_resolve(model, lr_img, mode, patch, i_max, jobs, ensemble)
    cfg = model.config
    hw = np.shape(lr_img) if plan is None else (patch, patch)
    count = 1 if plan is None else plan.count
    per_pass = 8 if ensemble else 1
    stages = {k: v * count * per_pass for k, v in macs_by_stage(cfg, hw).items()}
    ledger = ResourceLedger(patch_count=count,
                            peak_activation_bytes=estimate_peak_activation_bytes(cfg, hw),
                            total_macs=sum(stages.values()), stages=stages)
    score = float(inference_fn(sr, i_max))
    if not 0.0 <= score <= 1.0 or math.isnan(score):
        raise ValueError(f"inference score {score} outside [0, 1]")
    return sr, Decision(decide(score, threshold), score, threshold, ledger)


REPORT_COLUMNS = ("mode", "patch_count", "peak_bytes", "macs", "score", "verdict")


def write_report(rows, path) -> None:
    """Write ``(mode, Decision)`` rows as CSV."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(REPORT_COLUMNS)
        for mode, d in rows:
            r = d.resources
            out.writerow([mode, r.patch_count, r.peak_activation_bytes, r.total_macs,
                          f"{d.score:.6f}", d.verdict])
