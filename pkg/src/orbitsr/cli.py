"""Command-line driver: ``orbitsr <command> [flags]``.

Exit status is 0 on success and 1 on any error; ``pipeline`` exits 0 when
the verdict is transmit and 2 when it is discard.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, metrics, model, pipeline, plotting, tiling, trainer

EXIT_OK, EXIT_ERROR, EXIT_DISCARD = 0, 1, 2
SEED_ENV = "ORBITSR_SEED"
PRESETS = {"toy": model.TOY, "paper": model.PAPER}
CLI_MODES = {"whole": "whole", "nonoverlap": "patch-nonoverlap", "overlap": "patch-overlap"}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _existing(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise CliError(f"file not found: {p}")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _write_pgm(data, maxval, path):
    dataio.write_pgm(dataio.GrayImage.from_float(data, maxval), path)


# -- commands ------------------------------------------------------------------

def cmd_degrade(args):
    _existing(args.input)
    src = dataio.read_pgm(args.input)
    hr, lr = dataio.degrade_pair(src, 1, args.scale)
    dataio.write_pgm(hr, args.out_hr)
    dataio.write_pgm(lr, args.out_lr)
    print(f"hr: {hr.h}x{hr.w} lr: {lr.h}x{lr.w}")
    return EXIT_OK


def cmd_sr(args):
    _existing(args.input, args.weights)
    img = dataio.read_pgm(args.input)
    net = model.load_weights(args.weights)
    sr, _ = pipeline.super_resolve(net, img.as_float(), CLI_MODES[args.mode], args.patch,
                                   img.maxval, args.jobs, args.ensemble)
    _write_pgm(sr, img.maxval, args.out)
    print(f"sr: {sr.shape[0]}x{sr.shape[1]} mode: {args.mode}")
    return EXIT_OK


def cmd_metrics(args):
    _existing(args.a, args.b)
    a, b = dataio.read_pgm(args.a), dataio.read_pgm(args.b)
    i_max = args.imax if args.imax is not None else a.maxval
    rep = metrics.evaluate(a.as_float(), b.as_float(), i_max, args.block)
    for name in metrics.CSV_COLUMNS[1:]:
        print(f"{name}: {metrics.format_value(getattr(rep, name))}")
    if args.csv:
        rows = [(Path(args.b).stem, rep)]
        metrics.write_csv(rows, args.csv)
        plotting.plot_metrics(rows, plotting.figure_path(args.csv))
    return EXIT_OK


def cmd_tile(args):
    plan = tiling.plan_tiles(args.h, args.w, args.patch, args.overlap)
    if args.print_plan:
        sys.stdout.write(plan.to_text())
    else:
        print(f"tiles: {plan.count}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = PRESETS[args.config_preset]
    seed = _seed(args)
    net = model.build_model(cfg, seed, np.float64)
    rng = np.random.default_rng(seed)
    side = args.size
    x = ad.constant(rng.uniform(-0.5, 0.5, (1, cfg.in_channels, side, side)))
    # targets sit 0.1..0.5 away from the current output so no L1 kink lies within eps
    y0 = model.forward(net, x.value)
    hr = y0 + rng.choice([-1.0, 1.0], y0.shape) * rng.uniform(0.1, 0.5, y0.shape)
    mask = tiling.make_mask(side * cfg.scale, trainer.default_mask_k(side * cfg.scale))
    losses = trainer.LOSSES if args.loss == "both" else (args.loss,)
    worst = 0.0
    for name in losses:
        if name == "l1":
            f = lambda: ad.l1_loss(model.forward_graph(net, x), hr)  # noqa: E731
        else:
            f = lambda: ad.mask_psnr(model.forward_graph(net, x), hr, mask, 1.0)  # noqa: E731
        err = ad.finite_diff_check(f, net.parameters(), args.eps, args.max_coords, seed)
        print(f"{name}: max_rel_err {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"gradcheck: {'pass' if ok else 'FAIL'} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_ERROR


def _load_dataset(source: str, count: int, seed: int, scale: int):
    if source.startswith("synth:"):
        return dataio.synth_dataset(source[len("synth:"):], count, seed, scale=scale)
    _existing(source)
    pairs = []
    for hr_path, lr_path in dataio.read_manifest(source):
        _existing(hr_path, lr_path)
        pairs.append((dataio.read_pgm(hr_path), dataio.read_pgm(lr_path)))
    if not pairs:
        raise CliError(f"manifest {source} lists no image pairs")
    return pairs


def _train_config(args, seed):
    return trainer.TrainConfig(steps=args.steps, lr=args.lr, loss=args.loss,
                               mask_k=args.k, batch=args.batch, patch=args.patch, seed=seed)


def cmd_train(args):
    seed = _seed(args)
    cfg = PRESETS[args.preset].replace(scale=args.scale)
    data = _load_dataset(args.dataset, args.count, seed, cfg.scale)
    net = model.build_model(cfg, seed)
    hist = trainer.train_toy(net, data, _train_config(args, seed))
    print(f"final loss: {hist.final['loss']:.6f} psnr: {hist.final['psnr']:.4f}")
    if args.weights_out:
        model.save_weights(net, args.weights_out)
    if args.history:
        hist.write_csv(args.history)
        plotting.plot_history(hist, plotting.figure_path(args.history))
    return EXIT_OK


def cmd_ablate(args):
    seed = _seed(args)
    toggles = tuple(t.strip() for t in args.lattice.split(",") if t.strip())
    unknown = set(toggles) - {"cm", "lra", "gfb"}
    if unknown or not toggles:
        raise CliError(f"--lattice takes a subset of cm,lra,gfb; got {args.lattice!r}")
    base = PRESETS[args.preset]
    train = _load_dataset(args.dataset, args.count, seed, base.scale)
    held_out = _load_dataset(args.dataset, args.count, seed + 1, base.scale) \
        if args.dataset.startswith("synth:") else None
    rows = trainer.ablate(trainer.lattice(base, toggles), train, _train_config(args, seed),
                          held_out, model_seed=seed)
    for r in rows:
        print(f"{r.name}: psnr {r.psnr:.4f}")
    if args.csv:
        trainer.write_ablation_csv(rows, args.csv)
        plotting.plot_ablation(rows, plotting.figure_path(args.csv))
    return EXIT_OK


def cmd_pipeline(args):
    _existing(args.input, args.weights)
    img = dataio.read_pgm(args.input)
    net = model.load_weights(args.weights)
    sr, decision = pipeline.run_pipeline(img.as_float(), net, CLI_MODES[args.mode],
                                         pipeline.SCORERS[args.scorer], args.threshold,
                                         args.patch, img.maxval, args.jobs, args.ensemble)
    res = decision.resources
    print(f"verdict: {decision.verdict} score: {decision.score:.6f} "
          f"patches: {res.patch_count} peak_bytes: {res.peak_activation_bytes} "
          f"macs: {res.total_macs}")
    if args.out:
        _write_pgm(sr, img.maxval, args.out)
    if args.report:
        rows = [(args.mode, decision)]
        pipeline.write_report(rows, args.report)
        plotting.plot_pipeline(rows, plotting.figure_path(args.report))
    return EXIT_OK if decision.verdict == "transmit" else EXIT_DISCARD


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="orbitsr", description="Tiled super-resolution toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seed_flag(p):
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (default: ${SEED_ENV} or 0)")

    def mode_flags(p):
        p.add_argument("--mode", choices=tuple(CLI_MODES), default="overlap",
                       help="inference mode (default: overlap)")
        p.add_argument("--patch", type=_positive_int, default=48, help="LR patch side")
        p.add_argument("--jobs", type=_positive_int, default=1, help="worker threads")
        p.add_argument("--ensemble", action="store_true", help="8-way self-ensemble")

    def train_flags(p, steps):
        p.add_argument("--dataset", default="synth:craters",
                       help="synth:<craters|ramps|checkers> or a TAB-separated manifest")
        p.add_argument("--count", type=_positive_int, default=8,
                       help="synthetic image count")
        p.add_argument("--preset", choices=tuple(PRESETS), default="toy")
        p.add_argument("--loss", choices=trainer.LOSSES, default="l1")
        p.add_argument("--k", type=_positive_int, default=None,
                       help="mask box side (default: 54/96 of the HR patch)")
        p.add_argument("--steps", type=_positive_int, default=steps)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--batch", type=_positive_int, default=4)
        p.add_argument("--patch", type=_positive_int, default=24, help="LR crop side")
        seed_flag(p)

    p = sub.add_parser("degrade", help="make an HR/LR pair from a source image")
    p.add_argument("--in", dest="input", required=True, help="source PGM")
    p.add_argument("--scale", type=_positive_int, default=2)
    p.add_argument("--out-hr", required=True)
    p.add_argument("--out-lr", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("--in", dest="input", required=True, help="LR PGM")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    mode_flags(p)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("metrics", help="compare two images")
    p.add_argument("--a", required=True, help="reference PGM")
    p.add_argument("--b", required=True, help="test PGM")
    p.add_argument("--imax", type=_positive_float, default=None,
                   help="peak intensity (default: maxval of --a)")
    p.add_argument("--block", type=_positive_int, default=metrics.DEFAULT_BLOCK,
                   help="PSNR-B block size")
    p.add_argument("--csv", default=None, help="write a CSV row and a PNG chart")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("tile", help="print the tile count or plan for an image size")
    p.add_argument("--h", type=_positive_int, required=True)
    p.add_argument("--w", type=_positive_int, required=True)
    p.add_argument("--patch", type=_positive_int, default=48)
    p.add_argument("--overlap", action="store_true")
    p.add_argument("--print-plan", action="store_true", help="print every tile origin")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config-preset", choices=tuple(PRESETS), default="toy")
    p.add_argument("--eps", type=_positive_float, default=1e-5)
    p.add_argument("--loss", choices=trainer.LOSSES + ("both",), default="both")
    p.add_argument("--size", type=_positive_int, default=8, help="input side")
    p.add_argument("--max-coords", type=_positive_int, default=None,
                   help="sample at most this many coordinates per tensor")
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    seed_flag(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a model on synthetic or listed data")
    train_flags(p, steps=200)
    p.add_argument("--scale", type=int, choices=(2, 4), default=2)
    p.add_argument("--weights-out", default=None)
    p.add_argument("--history", default=None, help="history CSV (PNG written alongside)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train every toggle combination and compare")
    train_flags(p, steps=50)
    p.add_argument("--lattice", default="cm,lra,gfb", help="toggles to vary")
    p.add_argument("--csv", default=None, help="result CSV (PNG written alongside)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", help="super-resolve, score and decide")
    p.add_argument("--in", dest="input", required=True, help="LR PGM")
    p.add_argument("--weights", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--scorer", choices=tuple(pipeline.SCORERS), default="gradient")
    p.add_argument("--out", default=None, help="write the SR image")
    p.add_argument("--report", default=None, help="report CSV (PNG written alongside)")
    mode_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except model.ConfigError as exc:
        print(f"error: config mismatch: {exc}", file=sys.stderr)
    except (model.WeightFileError, dataio.PGMError) as exc:
        print(f"error: bad input file: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
