"""End-user command-line behavior: outputs, exit codes, reruns."""

import json
import os

import numpy as np
import pytest

from latseg import cli, maskgen
from latseg.maskgen import LatentMatrix


def run(*argv):
    return cli.dispatch(list(str(a) for a in argv))


def tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "dataset", "--side", 16, "--count", 10, "--seed", 5,
               "--out", root / "ds") == 0
    assert run("fit", "--data", root / "ds", "--seed", 0, "--out", root / "fit") == 0
    assert run("masks", "--data", root / "ds", "--fit", root / "fit" / "fit.json",
               "--filters", "none", "--out", root / "masked") == 0
    assert run("train", "--data", root / "masked", "--out", root / "model",
               "--seed", 0, "--side", 16, "--widths", "4,8", "--depth", 1,
               "--steps", 30, "--batch", 4, "--val-fraction", 0) == 0
    return root


class TestExitCodes:
    def test_no_args_is_usage_error(self, capsys):
        assert run() == 1

    def test_unknown_subcommand(self):
        assert run("frobnicate") == 1

    def test_missing_required_flag(self):
        assert run("fit", "--seed", 0) == 1

    def test_data_error_is_two(self, tmp_path):
        assert run("fit", "--data", tmp_path / "absent", "--seed", 0,
                   "--out", tmp_path / "out") == 2

    def test_help_is_zero(self):
        assert run("--help") == 0


class TestOutputs:
    def test_synth_writes_manifest_and_config(self, workdir):
        assert (workdir / "ds" / "manifest.json").exists()
        echo = json.loads((workdir / "ds" / "synth_config.json").read_text())
        assert echo["command"] == "synth"
        assert echo["options"]["seed"] == 5

    def test_synth_suite_layout(self, tmp_path):
        assert run("synth", "suite", "--side", 16, "--count", 4, "--seed", 1,
                   "--kinds", "segmenting,identity", "--out", tmp_path / "suite") == 0
        meta = json.loads((tmp_path / "suite" / "suite.json").read_text())
        assert len(meta["candidates"]) == 2
        for entry in meta["candidates"]:
            assert (tmp_path / "suite" / entry["path"] / "manifest.json").exists()

    def test_fit_writes_report(self, workdir):
        payload = json.loads((workdir / "fit" / "fit.json").read_text())
        assert set(payload) >= {"a1", "a2", "loss", "distance", "config"}

    def test_masks_writes_report_and_pngs(self, workdir):
        report = json.loads((workdir / "masked" / "filter_report.json").read_text())
        assert len(report) == 10
        manifest = json.loads((workdir / "masked" / "manifest.json").read_text())
        for entry in manifest["samples"]:
            assert (workdir / "masked" / entry["mask"]).exists()

    def test_train_writes_model_and_log(self, workdir):
        assert (workdir / "model" / "model.bin").exists()
        log = (workdir / "model" / "train_log.csv").read_text().splitlines()
        assert log[0].startswith("step,")

    def test_eval_writes_metrics(self, workdir, tmp_path):
        out = tmp_path / "eval"
        assert run("eval", "--model", workdir / "model" / "model.bin",
                   "--data", workdir / "ds", "--out", out, "--curve") == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert set(payload) >= {"max_f_beta", "iou", "accuracy", "n_images"}
        assert (out / "curve.csv").exists()

    def test_rank_selects_segmenting(self, tmp_path):
        assert run("synth", "suite", "--side", 16, "--count", 8, "--seed", 2,
                   "--kinds", "segmenting,identity,warp",
                   "--out", tmp_path / "suite") == 0
        assert run("rank", "--suite", tmp_path / "suite", "--seed", 0,
                   "--out", tmp_path / "rank") == 0
        sel = json.loads((tmp_path / "rank" / "selection.json").read_text())
        meta = json.loads((tmp_path / "suite" / "suite.json").read_text())
        assert sel["selected"] == meta["candidates"][0]["id"]

    def test_noise_latents_roundtrip(self, tmp_path):
        lat = LatentMatrix(np.random.default_rng(0).normal(size=(4, 8)))
        maskgen.save_latents(lat, tmp_path / "in.bin")
        assert run("noise-latents", "--latents", tmp_path / "in.bin",
                   "--alpha", 0.2, "--count", 6, "--seed", 1,
                   "--out", tmp_path / "out.bin") == 0
        out = maskgen.load_latents(tmp_path / "out.bin")
        assert out.values.shape == (6, 8)


class TestReruns:
    def test_synth_rerun_byte_identical(self, tmp_path):
        args = ("synth", "dataset", "--side", 16, "--count", 6, "--seed", 9,
                "--out", tmp_path / "o")
        assert run(*args) == 0
        first = tree_bytes(tmp_path / "o")
        assert run(*args) == 0
        assert tree_bytes(tmp_path / "o") == first

    def test_masks_rerun_with_workers_one(self, workdir, tmp_path):
        args = ("masks", "--data", workdir / "ds",
                "--fit", workdir / "fit" / "fit.json", "--filters", "none",
                "--workers", 1, "--out", tmp_path / "m")
        assert run(*args) == 0
        first = tree_bytes(tmp_path / "m")
        assert run(*args) == 0
        assert tree_bytes(tmp_path / "m") == first
