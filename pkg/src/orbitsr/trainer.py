"""Desk-scale training with Adam on random aligned LR/HR crops."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import metrics
from .model import (INTENSITY_OFFSET, Model, ModelConfig, build_model, forward,
                    forward_graph, param_count)
from .tiling import make_mask

LOSSES = ("l1", "mask_psnr")
OFFSET = INTENSITY_OFFSET


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 1e-4
    loss: str = "l1"
    mask_k: int | None = None   # None: 54/96 of the HR patch side
    batch: int = 4
    patch: int = 24             # LR crop side
    seed: int = 0
    flips: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.batch < 1 or self.patch < 1:
            raise ValueError("batch and patch must be >= 1")


@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["step", "loss", "grad_norm"])
            for i, (l, g) in enumerate(zip(self.loss, self.grad_norm)):
                out.writerow([i, repr(float(l)), repr(float(g))])


def default_mask_k(hr_side: int) -> int:
    return max(1, round(hr_side * 54 / 96))


def _as_arrays(dataset):
    pairs = []
    for hr, lr in dataset:
        maxval = getattr(hr, "maxval", 1)
        hr = hr.as_float() if hasattr(hr, "as_float") else np.asarray(hr, np.float64)
        lr = lr.as_float() if hasattr(lr, "as_float") else np.asarray(lr, np.float64)
        pairs.append((hr / maxval - OFFSET, lr / maxval - OFFSET))
    return pairs


def _crop(hr, lr, y, x, patch, scale):
    return (hr[y * scale:(y + patch) * scale, x * scale:(x + patch) * scale],
            lr[y:y + patch, x:x + patch])


def sample_batch(pairs, rng, batch, patch, scale, flips=False):
    his, los = [], []
    for i in rng.integers(len(pairs), size=batch):
        hr, lr = pairs[i]
        if lr.shape[0] < patch or lr.shape[1] < patch:
            raise ValueError(f"LR image {lr.shape} smaller than patch {patch}")
        y = int(rng.integers(lr.shape[0] - patch + 1))
        x = int(rng.integers(lr.shape[1] - patch + 1))
        h, l = _crop(hr, lr, y, x, patch, scale)
        if flips and rng.integers(2):
            h, l = h[:, ::-1], l[:, ::-1]
        his.append(h)
        los.append(l)
    return np.stack(his)[:, None], np.stack(los)[:, None]


def centre_crops(pairs, patch, scale):
    out = []
    for hr, lr in pairs:
        y, x = (lr.shape[0] - patch) // 2, (lr.shape[1] - patch) // 2
        out.append(_crop(hr, lr, y, x, patch, scale))
    return out


def evaluate_psnr(model: Model, dataset, patch: int) -> float:
    """Mean PSNR (dB, unit intensity range) on centre crops of ``dataset``."""
    vals = []
    for hr, lr in centre_crops(_as_arrays(dataset), patch, model.config.scale):
        sr = np.clip(forward(model, lr[None, None])[0, 0] + OFFSET, 0, 1)
        vals.append(metrics.psnr(hr + OFFSET, sr, 1.0))
    return float(np.mean(vals))


def train_toy(model: Model, dataset, cfg: TrainConfig) -> History:
    """Train ``model`` in place; the dataset is never modified."""
    pairs = _as_arrays(dataset)
    if not pairs:
        raise ValueError("empty dataset")
    scale = model.config.scale
    dtype = model.dtype
    rng = np.random.default_rng(cfg.seed)
    side = cfg.patch * scale
    mask = make_mask(side, cfg.mask_k or default_mask_k(side))
    params = model.parameters()
    state = ad.AdamState()
    hist = History()
    for step in range(cfg.steps):
        hr, lr = sample_batch(pairs, rng, cfg.batch, cfg.patch, scale, cfg.flips)
        out = forward_graph(model, ad.constant(lr.astype(dtype)))
        if cfg.loss == "l1":
            loss = ad.l1_loss(out, hr)
        else:
            loss = ad.scale(ad.mask_psnr(out, hr, mask, 1.0), -1.0)
        value = float(loss.value)
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss {value} at step {step}")
        grads = ad.backward(loss, params)
        hist.loss.append(value)
        hist.grad_norm.append(float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                                for g in grads.values()))))
        ad.adam_step(params, grads, state, lr=cfg.lr)
    hist.final = {"loss": hist.loss[-1], "psnr": evaluate_psnr(model, dataset, cfg.patch)}
    return hist


def lattice(base: ModelConfig, toggles=("cm", "lra", "gfb")) -> list[ModelConfig]:
    """Every on/off combination of ``toggles``, all-off first, all-on last."""
    configs = []
    for n_on in range(len(toggles) + 1):
        for on in itertools.combinations(toggles, n_on):
            configs.append(base.replace(**{t: t in on for t in toggles}))
    return configs


def config_label(cfg: ModelConfig) -> str:
    return f"CM{int(cfg.cm)}LRA{int(cfg.lra)}GFB{int(cfg.gfb)}"


@dataclass
class AblationRow:
    name: str
    cm: bool
    lra: bool
    gfb: bool
    params: int
    final_loss: float
    psnr: float


def ablate(configs, dataset, cfg: TrainConfig, eval_set=None, model_seed: int = 0):
    """Train each config from the same seed and report held-out PSNR."""
    configs = list(configs)
    if len(configs) < 2:
        raise ValueError("ablation needs at least two configs")
    eval_set = dataset if eval_set is None else eval_set
    rows = []
    for mc in configs:
        model = build_model(mc, model_seed)
        hist = train_toy(model, dataset, cfg)
        rows.append(AblationRow(config_label(mc), mc.cm, mc.lra, mc.gfb, param_count(mc),
                                hist.final["loss"], evaluate_psnr(model, eval_set, cfg.patch)))
    return rows


ABLATION_COLUMNS = ("name", "cm", "lra", "gfb", "params", "final_loss", "psnr")


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(ABLATION_COLUMNS)
        for r in rows:
            out.writerow([r.name, int(r.cm), int(r.lra), int(r.gfb), r.params,
                          f"{r.final_loss:.6f}", f"{r.psnr:.6f}"])
