"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line with its runtime,
whether or not output capture is on. Run directly with
``python tests/test_acceptance.py`` or through pytest.
"""

import itertools
import math
import os
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from orbitsr import autodiff as ad
from orbitsr import dataio, metrics, model, pipeline, tiling, trainer

from oracles import count_oracle


@contextmanager
def criterion(request, number, title, limit_s):
    start = time.perf_counter()
    detail = {}
    status = "FAIL"
    try:
        yield detail
        elapsed = time.perf_counter() - start
        assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s}s"
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - start
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        line = f"ACCEPTANCE {number} {status}: {title} ({elapsed:.1f}s / {limit_s}s) {extra}"
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line.rstrip(), flush=True)


def test_1_tiling_arithmetic(request):
    with criterion(request, 1, "910x910 patch 48 tile counts", 1.0) as d:
        plain = tiling.plan_tiles(910, 910, 48).count
        overlap = tiling.plan_tiles(910, 910, 48, overlap=True).count
        d.update(nonoverlap=plain, overlap=overlap)
        assert (plain, overlap) == (361, 1444)


SIZES = ([(1, 1), (2, 3), (5, 7), (13, 11), (47, 47), (48, 48), (49, 50), (53, 97),
          (96, 96), (97, 89), (101, 103), (127, 131), (200, 7), (7, 200), (910, 910)]
         + [(h, w) for h in (3, 17, 31, 61, 72) for w in (2, 23, 41, 48, 64, 83, 113)])


def test_2_round_trip(request):
    with criterion(request, 2, "identity tile->stitch is bitwise lossless", 10.0) as d:
        rng = np.random.default_rng(0)
        assert len(set(SIZES)) >= 50
        checked = 0
        for h, w in SIZES:
            img = rng.integers(0, 256, (h, w)).astype(np.float32)
            for overlap in (False, True):
                plan = tiling.plan_tiles(h, w, 48, overlap)
                out = tiling.stitch(tiling.extract_patches(img, plan), plan)
                assert out.dtype == img.dtype and out.tobytes() == img.tobytes(), (h, w)
                checked += 1
        d["cases"] = checked


def test_3_metric_identities(request):
    with criterion(request, 3, "mask_psnr/psnr/psnr_b identities", 5.0) as d:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            a, b = rng.uniform(0, 255, (2, 64, 64))
            p = metrics.psnr(a, b)
            worst = max(worst, abs(metrics.mask_psnr(a, b, np.ones((64, 64)), 255) - p))
            assert metrics.psnr_b(a, b, 255, 8) <= p
        assert worst < 1e-9
        tiles = rng.permutation(64).reshape(8, 8).astype(float) * 4
        blocky = np.kron(tiles, np.ones((8, 8)))
        ref = blocky + rng.normal(0, 2, blocky.shape)
        bef = metrics.bef(blocky, 8)
        d.update(max_dev_db=f"{worst:.1e}", bef=f"{bef:.2f}")
        assert bef > 0
        assert metrics.psnr_b(ref, blocky, 255, 8) < metrics.psnr(ref, blocky)


def test_4_gradient_check(request):
    with criterion(request, 4, "toy model finite differences, both losses", 120.0) as d:
        cfg = model.TOY
        net = model.build_model(cfg, 0, np.float64)
        rng = np.random.default_rng(4)
        x = ad.constant(rng.uniform(-0.5, 0.5, (1, 1, 8, 8)))
        # keep every L1 residual at least 0.1 from the kink so eps=1e-5 probes
        # never straddle it
        y0 = model.forward(net, x.value)
        hr = y0 + rng.choice([-1.0, 1.0], y0.shape) * rng.uniform(0.1, 0.5, y0.shape)
        mask = tiling.make_mask(16, 9)
        losses = {
            "l1": lambda: ad.l1_loss(model.forward_graph(net, x), hr),
            "mask_psnr": lambda: ad.mask_psnr(model.forward_graph(net, x), hr, mask, 1.0),
        }
        for name, f in losses.items():
            err = ad.finite_diff_check(f, net.parameters(), eps=1e-5)
            d[name] = f"{err:.2e}"
            assert err < 1e-4, name
        d["params"] = model.param_count(cfg)


def test_5_shape_contract(request):
    with criterion(request, 5, "forward output is scale x input", 60.0) as d:
        sides = list(range(1, 9)) + [48]
        cases = 0
        for up, scales in (("subpixel", (2, 3, 4)), ("deconv", (2, 4))):
            for s in scales:
                net = model.build_model(model.TOY.replace(upsampler=up, scale=s), 0)
                for h, w in itertools.product(sides, sides):
                    out = model.forward(net, np.ones((1, 1, h, w), np.float32))
                    assert out.shape == (1, 1, s * h, s * w), (up, s, h, w)
                    cases += 1
        d["cases"] = cases


def test_6_ablation_lattice(request):
    with criterion(request, 6, "8-way lattice trains; full >= none on paired seeds",
                   600.0) as d:
        train = dataio.synth_dataset("craters", 8, 1, hr_size=96)
        held_out = dataio.synth_dataset("craters", 8, 3, hr_size=96)
        configs = trainer.lattice(model.TOY)
        run = lambda cfgs, seed: trainer.ablate(  # noqa: E731
            cfgs, train, trainer.TrainConfig(steps=50, lr=1e-3, patch=24, seed=seed),
            held_out, model_seed=seed)
        rows = run(configs, 0)
        assert len(rows) == 8 and all(math.isfinite(r.psnr) for r in rows)
        gaps = [rows[-1].psnr - rows[0].psnr]
        for seed in (1, 2):
            none, full = run([configs[0], configs[-1]], seed)
            gaps.append(full.psnr - none.psnr)
        d["full_minus_none_db"] = ",".join(f"{g:+.2f}" for g in gaps)
        assert np.mean(gaps) >= 0


def test_7_overlap_benefit(request):
    with criterion(request, 7, "non-overlap PSNR-B gap exceeds overlap gap", 900.0) as d:
        net = model.build_model(model.TOY, 0)
        train = dataio.synth_dataset("craters", 8, 1, hr_size=96)
        trainer.train_toy(net, train, trainer.TrainConfig(steps=300, lr=1e-3, patch=24))
        patch = 24
        block = patch * net.config.scale // 2  # HR side of each kept centre region
        wins = 0
        for hr, lr in dataio.synth_dataset("craters", 10, 2, hr_size=144):
            gap = {}
            for mode in ("patch-nonoverlap", "patch-overlap"):
                sr, _ = pipeline.super_resolve(net, lr.as_float(), mode, patch, lr.maxval)
                sr = dataio.GrayImage.from_float(sr, lr.maxval).as_float()
                rep = metrics.evaluate(hr.as_float(), sr, lr.maxval, block)
                gap[mode] = rep.psnr - rep.psnrb
            wins += gap["patch-nonoverlap"] > gap["patch-overlap"]
        d["wins"] = f"{wins}/10"
        assert wins >= 8


def test_8_resource_model(request):
    with criterion(request, 8, "patch peak < 10% of whole; estimator exact", 60.0) as d:
        patch = pipeline.estimate_peak_activation_bytes(model.PAPER, (48, 48))
        whole = pipeline.estimate_peak_activation_bytes(model.PAPER, (910, 910))
        d.update(patch_gib=f"{patch / 2 ** 30:.4f}", whole_gib=f"{whole / 2 ** 30:.1f}")
        assert patch < 0.10 * whole
        from orbitsr import profiling
        for cm, lra, gfb in itertools.product((False, True), repeat=3):
            for up, s in (("deconv", 2), ("deconv", 4), ("subpixel", 3)):
                cfg = model.TOY.replace(cm=cm, lra=lra, gfb=gfb, upsampler=up, scale=s)
                net = model.build_model(cfg, 0)
                x = np.random.default_rng(8).random((1, 1, 8, 6)).astype(np.float32)
                with ad.no_grad(), profiling.track() as t:
                    model.forward_graph(net, ad.constant(x))
                assert t.peak_bytes == pipeline.estimate_peak_activation_bytes(cfg, (8, 6))
                assert t.macs == pipeline.estimate_macs(cfg, (8, 6))


def _cli_session(workdir):
    """Run every subcommand once in ``workdir``; return stdout and file bytes."""
    env = {**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)}
    env.pop("ORBITSR_SEED", None)
    src = dataio.synth_dataset("craters", 1, 11, hr_size=64)[0][0]
    dataio.write_pgm(src, workdir / "src.pgm")
    commands = [
        ["degrade", "--in", "src.pgm", "--out-hr", "hr.pgm", "--out-lr", "lr.pgm"],
        ["train", "--steps", "5", "--patch", "12", "--count", "3", "--seed", "5",
         "--weights-out", "w.bin", "--history", "hist.csv"],
        ["sr", "--in", "lr.pgm", "--weights", "w.bin", "--out", "sr_whole.pgm",
         "--mode", "whole"],
        ["sr", "--in", "lr.pgm", "--weights", "w.bin", "--out", "sr_plain.pgm",
         "--mode", "nonoverlap", "--patch", "16"],
        ["sr", "--in", "lr.pgm", "--weights", "w.bin", "--out", "sr_overlap.pgm",
         "--patch", "16", "--jobs", "2"],
        ["sr", "--in", "lr.pgm", "--weights", "w.bin", "--out", "sr_ens.pgm",
         "--patch", "16", "--ensemble"],
        ["metrics", "--a", "hr.pgm", "--b", "sr_overlap.pgm", "--block", "16",
         "--csv", "metrics.csv"],
        ["tile", "--h", "910", "--w", "910", "--overlap", "--print-plan"],
        ["gradcheck", "--max-coords", "2", "--size", "4", "--seed", "2"],
        ["ablate", "--steps", "2", "--patch", "12", "--count", "2", "--seed", "3",
         "--csv", "ablate.csv"],
        ["pipeline", "--in", "lr.pgm", "--weights", "w.bin", "--patch", "16",
         "--report", "report.csv", "--out", "sr_pipeline.pgm"],
    ]
    stdout = []
    for argv in commands:
        res = subprocess.run([sys.executable, "-m", "orbitsr", *argv], cwd=workdir, env=env,
                             capture_output=True)
        assert res.returncode in (0, 2), (argv, res.stderr.decode())
        stdout.append((argv[0], res.returncode, res.stdout))
    files = {p.name: p.read_bytes() for p in sorted(workdir.iterdir())}
    return stdout, files


def test_9_cli_determinism(request, tmp_path):
    with criterion(request, 9, "every CLI command is byte-reproducible", 300.0) as d:
        runs = []
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            runs.append(_cli_session(tmp_path / name))
        (out_a, files_a), (out_b, files_b) = runs
        assert out_a == out_b
        assert files_a.keys() == files_b.keys()
        differing = [k for k in files_a if files_a[k] != files_b[k]]
        d["files"] = len(files_a)
        assert not differing, differing
        assert {"hist.png", "ablate.png", "report.png", "metrics.png"} <= files_a.keys()


def test_10_weight_round_trip(request, tmp_path):
    with criterion(request, 10, "save/load/forward bitwise; paper param count", 60.0) as d:
        x = np.random.default_rng(10).random((1, 1, 12, 9)).astype(np.float32)
        for cfg in (model.TOY, model.TOY.replace(upsampler="subpixel", scale=3)):
            net = model.build_model(cfg, 4)
            path = tmp_path / "w.bin"
            model.save_weights(net, path)
            before = model.forward(net, x)
            after = model.forward(model.load_weights(path, cfg), x)
            assert before.tobytes() == after.tobytes()
        count = model.param_count(model.PAPER)
        d["paper_params"] = count
        assert count == count_oracle(16, 6, 32, 64)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
