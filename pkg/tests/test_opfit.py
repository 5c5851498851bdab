"""Operator algebra, the fit objective, and the fitting loop."""

import numpy as np
import pytest

from latseg import dirrank, opfit
from latseg.errors import DataError
from latseg.imgcore import Mask
from latseg.opfit import AffinePixelOperator, FitConfig, OperatorPair


def _random_pair(rng):
    return OperatorPair(
        AffinePixelOperator(rng.normal(size=(3, 3)), rng.normal(size=3)),
        AffinePixelOperator(rng.normal(size=(3, 3)), rng.normal(size=3)),
    )


class TestOperator:
    def test_apply_matches_manual(self, rng):
        op = AffinePixelOperator(rng.normal(size=(3, 3)), rng.normal(size=3))
        c = rng.random((10, 3))
        expected = np.array([op.matrix @ v + op.bias for v in c])
        assert np.allclose(op.apply(c), expected)

    def test_identity(self):
        c = np.random.default_rng(1).random((5, 3))
        assert np.allclose(AffinePixelOperator.identity().apply(c), c)

    def test_rejects_nonfinite(self):
        with pytest.raises(DataError):
            AffinePixelOperator(np.full((3, 3), np.nan), np.zeros(3))

    def test_vector_roundtrip(self, rng):
        pair = _random_pair(rng)
        again = OperatorPair.from_vector(pair.as_vector())
        assert np.allclose(again.a1.matrix, pair.a1.matrix)
        assert np.allclose(again.a2.bias, pair.a2.bias)


class TestObjective:
    def test_assignment_picks_closer_operator(self):
        pair = OperatorPair(
            AffinePixelOperator(np.eye(3), np.zeros(3)),
            AffinePixelOperator(np.eye(3), np.full(3, 0.5)),
        )
        colors = np.array([[0.2, 0.2, 0.2], [0.2, 0.2, 0.2]])
        targets = np.array([[0.2, 0.2, 0.2], [0.7, 0.7, 0.7]])
        labels = opfit.assignment_labels(colors, targets, pair)
        assert labels.tolist() == [1, 2]

    def test_grad_matches_numeric(self, rng):
        colors = rng.random((40, 3))
        targets = rng.random((40, 3))
        params = rng.normal(size=24)
        loss, grad = opfit._loss_and_grad(colors, targets, params)
        eps = 1e-6
        for i in rng.choice(24, 8, replace=False):
            p = params.copy()
            p[i] += eps
            up, _ = opfit._loss_and_grad(colors, targets, p)
            p[i] -= 2 * eps
            dn, _ = opfit._loss_and_grad(colors, targets, p)
            assert abs((up - dn) / (2 * eps) - grad[i]) < 1e-5

    def test_loss_zero_on_exact_pair(self, rng):
        pair = _random_pair(rng)
        colors = rng.random((30, 3))
        targets = pair.a1.apply(colors)
        loss, _ = opfit._loss_and_grad(colors, targets, pair.as_vector())
        assert loss < 1e-12

    def test_restoration_loss_noise_floor(self, small_spec):
        # exact operators leave only the injected observation noise
        src = dirrank.synthetic_affine_source(small_spec, 3)
        samples = [src.fetch(i) for i in range(6)]
        loss = opfit.restoration_loss(samples, src.operators)
        sigma = small_spec.noise_sigma
        assert loss < 2.5 * sigma

    def test_operator_distance_zero_for_equal(self, rng, small_source):
        op = AffinePixelOperator(rng.normal(size=(3, 3)) * 0.1, rng.random(3))
        pair = OperatorPair(op, op)
        imgs = [small_source.fetch(i).image for i in range(3)]
        assert opfit.operator_distance(pair, imgs) < 1e-12


class TestLsInit:
    def test_recovers_separated_pair(self, rng):
        m1, b1 = np.eye(3) * 0.4, np.array([0.6, 0.6, 0.6])
        m2, b2 = np.eye(3) * 0.4, np.array([0.0, 0.05, 0.0])
        colors = rng.random((500, 3))
        hot = rng.random(500) > 0.5
        targets = np.where(hot[:, None], colors @ m1.T + b1, colors @ m2.T + b2)
        pair = OperatorPair.from_vector(opfit._ls_init(colors, targets))
        loss, _ = opfit._loss_and_grad(colors, targets, pair.as_vector())
        assert loss < 1e-8


class TestFit:
    def test_fit_reaches_noise_floor(self, small_source, small_fit, small_spec):
        assert small_fit.final_loss < 5 * small_spec.noise_sigma

    def test_fit_trace_has_step_per_entry(self, small_fit):
        assert len(small_fit.trace) == small_fit.config.steps

    def test_fit_deterministic(self, small_source):
        a = opfit.fit_operators(small_source, FitConfig(seed=7, steps=20))
        b = opfit.fit_operators(small_source, FitConfig(seed=7, steps=20))
        assert np.array_equal(a.pair.as_vector(), b.pair.as_vector())
        assert a.final_loss == b.final_loss

    def test_batch_larger_than_finite_pool_rejected(self, tmp_path, small_source):
        from latseg import imgcore

        samples = [small_source.fetch(i) for i in range(3)]
        man = imgcore.save_pair_dataset(samples, tmp_path / "tiny")
        finite = imgcore.PairDatasetSource(man)
        with pytest.raises(DataError):
            opfit.fit_operators(finite, FitConfig(batch=4, steps=2))

    def test_per_sample_fit(self, small_source):
        res = opfit.fit_per_sample(small_source.fetch(0), FitConfig(seed=0))
        assert res.final_loss < 0.1

    def test_config_validation(self):
        with pytest.raises(DataError):
            FitConfig(steps=0)
        with pytest.raises(DataError):
            FitConfig(learning_rate=0.0)


class TestAgreement:
    def test_perfect_agreement(self):
        m = [Mask((np.random.default_rng(i).random((6, 6)) > 0.5).astype(np.uint8))
             for i in range(4)]
        assert opfit.masks_agreement(m, m) == (1.0, 1.0)

    def test_label_swap_resolved(self):
        masks = [Mask((np.random.default_rng(i).random((6, 6)) > 0.5).astype(np.uint8))
                 for i in range(4)]
        flipped = [Mask(1 - np.asarray(m.data)) for m in masks]
        iou, acc = opfit.masks_agreement(masks, flipped)
        assert iou == 1.0 and acc == 1.0

    def test_length_mismatch(self):
        m = Mask(np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(DataError):
            opfit.masks_agreement([m], [m, m])


class TestSerialization:
    def test_fit_json_roundtrip(self, tmp_path, small_fit):
        path = tmp_path / "fit.json"
        opfit.save_fit_json(small_fit, path)
        again = opfit.load_fit_json(path)
        assert np.allclose(again.pair.as_vector(), small_fit.pair.as_vector())
        assert again.final_loss == pytest.approx(small_fit.final_loss)
        assert again.config == small_fit.config

    def test_load_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{}")
        with pytest.raises(DataError):
            opfit.load_fit_json(path)
