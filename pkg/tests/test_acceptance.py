"""Top-level acceptance checks; each test prints a single pass/fail line."""

import os
import shutil
import time

import numpy as np
import pytest

from latseg import cli, dirrank, imgcore, maskgen, metrics, opfit
from latseg.dirrank import SuiteSpec
from latseg.imgcore import Image, Mask, PairSample, SoftMask
from latseg.maskgen import FilterConfig, LatentMatrix
from latseg.opfit import FitConfig
from latseg.segtrain import model as seg_model
from latseg.segtrain.model import MiniUNet, ModelConfig
from latseg.segtrain.train import TrainConfig
import importlib

seg_train = importlib.import_module("latseg.segtrain.train")

STANDARD_SPEC = SuiteSpec(side=32, count=64, noise_sigma=0.01, margin_delta=0.3)


def verdict(tag, ok, detail):
    from conftest import ACCEPTANCE_LINES

    line = f"[{tag}] {'PASS' if ok else 'FAIL'} {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _assignment_iou(source, pair, indices):
    """Mean held-out IoU of assignment masks vs oracle masks, up to label swap."""
    scores = []
    for i in indices:
        s = source.fetch(i)
        m = maskgen.mask_from_assignment(s, pair)
        direct = metrics.iou(m, s.gt_mask)
        swapped = metrics.iou(Mask(1 - np.asarray(m.data)), s.gt_mask)
        scores.append(max(direct, swapped))
    return float(np.mean(scores))


def test_operator_recovery():
    t0 = time.time()
    losses, ious = [], []
    for seed in range(3):
        src = dirrank.synthetic_affine_source(STANDARD_SPEC, seed)
        res = opfit.fit_operators(src, FitConfig(seed=seed))
        losses.append(res.final_loss)
        ious.append(_assignment_iou(src, res.pair, range(1000, 1016)))
    elapsed = time.time() - t0
    limit = 5 * STANDARD_SPEC.noise_sigma
    ok = min(ious) >= 0.99 and max(losses) < limit and elapsed < 60.0
    verdict("operator recovery", ok,
            f"min IoU {min(ious):.4f} (>= 0.99), max loss {max(losses):.4f} "
            f"(< {limit}), {elapsed:.1f}s (< 60)")


def test_direction_selection():
    spec = SuiteSpec(
        side=32, count=64, noise_sigma=0.01,
        kinds=("segmenting", "global-affine", "global-affine", "global-affine",
               "identity", "identity", "warp", "warp"))
    wins = 0
    for trial in range(100):
        suite = dirrank.synthetic_direction_suite(spec, trial)
        reports = []
        for j, cand in enumerate(suite.candidates):
            fit = opfit.fit_operators(cand.source,
                                      FitConfig(seed=trial * 100003 + j))
            reports.append(dirrank.DirectionReport(
                direction_id=cand.direction.id, fit=fit))
        result = dirrank.rank_directions(reports)
        target = suite.candidates[suite.segmenting_index].direction.id
        wins += int(result.selected.direction_id == target)
    verdict("direction selection", wins >= 95, f"{wins}/100 trials (>= 95)")


def test_metric_reference_equivalence():
    def brute_max_f(pred, gt, beta_sq=0.3):
        g = gt.astype(bool)
        best = -1.0
        for t in np.arange(255) / 255.0:
            p = pred > t
            tp = int((p & g).sum())
            fp = int((p & ~g).sum())
            fn = int((~p & g).sum())
            if tp + fn == 0:
                f = 1.0 if fp == 0 else 0.0
            elif tp == 0:
                f = 0.0
            else:
                prec, rec = tp / (tp + fp), tp / (tp + fn)
                f = (1 + beta_sq) * prec * rec / (beta_sq * prec + rec)
            best = max(best, f)
        return best

    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(1000):
        pred = rng.random((8, 8))
        if i % 9 == 0:
            pred[:] = 0.0
        gt = (rng.random((8, 8)) > rng.random()).astype(np.uint8)
        sm, m = SoftMask(pred), Mask(gt)
        p, g = pred, gt
        worst = max(
            worst,
            abs(metrics.max_f_beta(sm, m)[0] - brute_max_f(p, g)),
            abs(metrics.iou(sm, m)
                - (1.0 if not ((p > 0.5) | g.astype(bool)).any()
                   else ((p > 0.5) & g.astype(bool)).sum()
                   / ((p > 0.5) | g.astype(bool)).sum())),
            abs(metrics.accuracy(sm, m)
                - float(((p > 0.5) == g.astype(bool)).mean())),
        )
    verdict("metric equivalence", worst <= 1e-12,
            f"max deviation {worst:.2e} over 1000 pairs (<= 1e-12)")


def test_filter_correctness():
    checks = []
    half = np.zeros((16, 16), dtype=np.uint8)
    half.ravel()[:128] = 1
    checks.append(maskgen.size_filter(Mask(half)) is True)
    plus_one = half.copy()
    plus_one.ravel()[128] = 1
    checks.append(maskgen.size_filter(Mask(plus_one)) is False)

    def comp_mask(sizes):
        out = np.zeros((12, 16), dtype=np.uint8)
        col = 0
        for s in sizes:
            out[:s, col] = 1
            col += 3
        return Mask(out)

    checks.append(maskgen.cc_filter(comp_mask([10, 2]), 0.2)[1] == 0)
    checks.append(maskgen.cc_filter(comp_mask([10, 1]), 0.2)[1] == 1)

    bimodal = np.zeros((16, 16, 3))
    bimodal[:8] = 0.05
    bimodal[8:] = 0.95
    checks.append(maskgen.histogram_filter(Image(bimodal)) is True)
    rng = np.random.default_rng(0)
    midgray = np.clip(0.5 + rng.normal(0, 0.03, (16, 16, 3)), 0, 1)
    checks.append(maskgen.histogram_filter(Image(midgray)) is False)

    idempotent = True
    for i in range(1000):
        r = np.random.default_rng(i)
        m = Mask((r.random((12, 12)) > 0.6).astype(np.uint8))
        once, _ = maskgen.cc_filter(m)
        twice, removed = maskgen.cc_filter(once)
        idempotent &= removed == 0 and np.array_equal(
            np.asarray(once.data), np.asarray(twice.data))
    checks.append(idempotent)
    verdict("filter correctness", all(checks),
            f"boundary table {checks[:6]}, idempotent over 1000 masks: {idempotent}")


def test_gradient_fidelity(monkeypatch):
    model = MiniUNet(ModelConfig(side=8, widths=(4, 6), depth=1, seed=0))
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 8, 8))
    t = (rng.random((2, 8, 8)) > 0.5).astype(np.float64)
    err = seg_model.gradient_check(model, x, t, n_sample=200)

    real = seg_model._kernels.conv2d_backward

    def faulty(xx, ww, dy, pad):
        dx, dw, db = real(xx, ww, dy, pad)
        return dx, dw * 1.01, db

    monkeypatch.setattr(seg_model._kernels, "conv2d_backward", faulty)
    fault_err = seg_model.gradient_check(model, x, t, n_sample=200)
    monkeypatch.undo()
    ok = err < 1e-4 and fault_err > 1e-3
    verdict("gradient fidelity", ok,
            f"max rel err {err:.2e} (< 1e-4), with x1.01 fault {fault_err:.2e} (> 1e-3)")


def test_overfit_sanity(tmp_path):
    t0 = time.time()
    spec = SuiteSpec(side=32, count=8, noise_sigma=0.01)
    src = dirrank.synthetic_affine_source(spec, 3)
    fit = opfit.fit_operators(src, FitConfig(seed=0))
    samples = []
    for i in range(8):
        s = src.fetch(i)
        mask = maskgen.mask_from_assignment(s, fit.pair)
        samples.append(PairSample(id=s.id, image=s.image, shifted=s.shifted,
                                  gt_mask=mask))
    imgcore.save_pair_dataset(samples, tmp_path / "ds")
    weights, _ = seg_train.train(
        tmp_path / "ds", ModelConfig(side=32, seed=0),
        TrainConfig(steps=500, batch=8, learning_rate=0.003, decay_step=400,
                    val_fraction=0.0, seed=0))
    x, t, _ = seg_train.load_training_arrays(tmp_path / "ds", 32)
    train_iou, _, _ = seg_train.evaluate_split(weights, x, t)
    elapsed = time.time() - t0
    ok = train_iou >= 0.95 and elapsed < 120.0
    verdict("overfit sanity", ok,
            f"train IoU {train_iou:.4f} (>= 0.95), {elapsed:.1f}s (< 120)")


def test_end_to_end(tmp_path):
    t0 = time.time()
    spec = SuiteSpec(side=32, count=320, noise_sigma=0.01)
    src = dirrank.synthetic_affine_source(spec, 11)
    fit = opfit.fit_operators(src, FitConfig(seed=0))
    kept = []
    for i in range(spec.count):
        s = src.fetch(i)
        mask = maskgen.generate_mask(s, "assignment", pair=fit.pair)
        ok, mask, _ = maskgen.run_filter_pipeline(s, mask, FilterConfig())
        if ok:
            kept.append(PairSample(id=s.id, image=s.image, shifted=s.shifted,
                                   gt_mask=mask))
    imgcore.save_pair_dataset(kept, tmp_path / "train")
    weights, _ = seg_train.train(
        tmp_path / "train", ModelConfig(side=32, seed=0),
        TrainConfig(steps=1600, batch=8, learning_rate=0.003, decay_step=1400,
                    val_fraction=0.1, seed=0))
    preds, gts = {}, {}
    for i in range(5000, 5032):
        s = src.fetch(i)
        preds[s.id] = seg_train.predict(weights, s.image)
        gts[s.id] = s.gt_mask
    report = metrics.evaluate_dataset(preds, gts, mode="per-image")
    elapsed = time.time() - t0
    ok = report.iou >= 0.90 and report.max_f_beta >= 0.90 and elapsed < 600.0
    verdict("end to end", ok,
            f"held-out IoU {report.iou:.4f} (>= 0.90), max F "
            f"{report.max_f_beta:.4f} (>= 0.90), {len(kept)} kept, "
            f"{elapsed:.0f}s (< 600)")


def test_joint_vs_per_sample_agreement():
    spec = SuiteSpec(side=32, count=128, noise_sigma=0.01)
    src = dirrank.synthetic_affine_source(spec, 7)
    joint = opfit.fit_operators(src, FitConfig(seed=0))
    samples = [src.fetch(i) for i in range(128)]
    joint_masks = [maskgen.mask_from_assignment(s, joint.pair) for s in samples]
    per_masks = []
    for i, s in enumerate(samples):
        res = opfit.fit_per_sample(s, FitConfig(seed=i))
        per_masks.append(maskgen.mask_from_assignment(s, res.pair))
    iou, acc = opfit.masks_agreement(joint_masks, per_masks)
    ok = iou >= 0.95 and acc >= 0.98
    verdict("joint vs per-sample", ok,
            f"agreement IoU {iou:.4f} (>= 0.95), accuracy {acc:.4f} (>= 0.98) "
            f"over 128 samples")


def test_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)

    def run(*argv):
        assert cli.dispatch([str(a) for a in argv]) == 0

    def tree(d):
        out = {}
        for base, _, files in os.walk(d):
            for f in files:
                p = os.path.join(base, f)
                out[os.path.relpath(p, d)] = open(p, "rb").read()
        return out

    run("synth", "dataset", "--side", 16, "--count", 12, "--seed", 5, "--out", "fix_ds")
    run("synth", "suite", "--side", 16, "--count", 8, "--seed", 5, "--out", "fix_suite")
    run("fit", "--data", "fix_ds", "--seed", 0, "--out", "fix_fit")
    run("masks", "--data", "fix_ds", "--fit", "fix_fit/fit.json",
        "--filters", "none", "--out", "fix_masked")
    run("train", "--data", "fix_masked", "--out", "fix_model", "--seed", 0,
        "--side", 16, "--widths", "4,8", "--depth", 1, "--steps", 30,
        "--batch", 4, "--val-fraction", 0)
    maskgen.save_latents(
        LatentMatrix(np.random.default_rng(0).normal(size=(8, 16))), "fix_lat.bin")
    (tmp_path / "grid.json").write_text('[{"steps": 10}, {"steps": 12}]')

    cmds = {
        "synth": ["synth", "dataset", "--side", 16, "--count", 8, "--seed", 5,
                  "--out", "O"],
        "synth suite": ["synth", "suite", "--side", 16, "--count", 6, "--seed", 5,
                        "--out", "O"],
        "fit": ["fit", "--data", "fix_ds", "--seed", 1, "--out", "O"],
        "rank": ["rank", "--suite", "fix_suite", "--seed", 1, "--steps", 40,
                 "--out", "O"],
        "masks": ["masks", "--data", "fix_ds", "--fit", "fix_fit/fit.json",
                  "--seed", 1, "--workers", 1, "--out", "O"],
        "noise-latents": ["noise-latents", "--latents", "fix_lat.bin",
                          "--alpha", 0.2, "--count", 12, "--seed", 1,
                          "--out", "O/lat.bin"],
        "emit": ["emit", "--target", 6, "--side", 16, "--count", 16, "--seed", 2,
                 "--filters", "none", "--out", "O"],
        "train": ["train", "--data", "fix_masked", "--out", "O", "--seed", 1,
                  "--side", 16, "--widths", "4,8", "--depth", 1, "--steps", 25,
                  "--batch", 4, "--val-fraction", 0],
        "eval": ["eval", "--model", "fix_model/model.bin", "--data", "fix_ds",
                 "--out", "O", "--mode", "per-image", "--curve", "--dump-masks",
                 "--workers", 1],
        "sweep": ["sweep", "--data", "fix_masked", "--out", "O", "--seed", 1,
                  "--grid", "grid.json", "--side", 16, "--widths", "4,8",
                  "--depth", 1, "--batch", 4],
    }
    stable = []
    for name, argv in cmds.items():
        snaps = []
        for _ in range(2):
            shutil.rmtree("O", ignore_errors=True)
            run(*argv)
            snaps.append(tree("O"))
        if snaps[0] == snaps[1]:
            stable.append(name)
    ok = len(stable) == len(cmds)
    verdict("determinism", ok,
            f"byte-identical reruns for {len(stable)}/{len(cmds)} subcommands")
