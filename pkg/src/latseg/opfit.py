"""Fitting the two per-pixel affine color operators of a latent direction.

The shifted image is modeled as, per pixel, one of two affine maps applied to
the original pixel. The pair is found by Adam on the restoration loss with a
hard per-pixel assignment recomputed every step; gradients flow only through
the operator selected at each pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, NumericalError
from .imgcore import Mask, PairSample, PairSource

_NORM_EPS = 1e-12


@dataclass(frozen=True)
class AffinePixelOperator:
    """Color map c -> matrix @ c + bias."""

    matrix: np.ndarray  # (3, 3)
    bias: np.ndarray  # (3,)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        b = np.asarray(self.bias, dtype=np.float64).reshape(3)
        if not (np.isfinite(m).all() and np.isfinite(b).all()):
            raise DataError("operator entries must be finite")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "bias", b)

    def apply(self, colors: np.ndarray) -> np.ndarray:
        """Apply to (..., 3) colors, unclamped."""
        return np.asarray(colors, dtype=np.float64) @ self.matrix.T + self.bias

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class OperatorPair:
    a1: AffinePixelOperator
    a2: AffinePixelOperator

    def as_vector(self) -> np.ndarray:
        """24 scalars: m1 (row-major), b1, m2, b2."""
        return np.concatenate(
            [self.a1.matrix.ravel(), self.a1.bias, self.a2.matrix.ravel(), self.a2.bias]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "OperatorPair":
        vec = np.asarray(vec, dtype=np.float64).reshape(24)
        return cls(
            AffinePixelOperator(vec[0:9].reshape(3, 3), vec[9:12]),
            AffinePixelOperator(vec[12:21].reshape(3, 3), vec[21:24]),
        )


@dataclass(frozen=True)
class FitConfig:
    steps: int = 200
    learning_rate: float = 0.005
    batch: int = 4
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    init_noise_sigma: float = 0.01
    eval_samples: int = 64

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.learning_rate <= 0:
            raise DataError("FitConfig requires steps >= 1, batch >= 1, lr > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise DataError("Adam betas must lie in [0, 1)")


@dataclass(frozen=True)
class FitResult:
    pair: OperatorPair
    final_loss: float
    distance: float
    config: FitConfig
    trace: tuple[float, ...]


def apply_operator(op: AffinePixelOperator, c) -> np.ndarray:
    return op.apply(np.asarray(c, dtype=np.float64))


def _residual_norms(colors, targets, pair):
    r1 = colors @ pair.a1.matrix.T + pair.a1.bias - targets
    r2 = colors @ pair.a2.matrix.T + pair.a2.bias - targets
    return np.linalg.norm(r1, axis=-1), np.linalg.norm(r2, axis=-1)


def assignment_labels(colors, targets, pair) -> np.ndarray:
    """Per-pixel operator index in {1, 2}; ties go to 1."""
    n1, n2 = _residual_norms(colors, targets, pair)
    return np.where(n1 <= n2, 1, 2)


def select_map(c, c_target, pair: OperatorPair):
    """Operator that maps c closer to c_target; returns (label, mapped color)."""
    c = np.asarray(c, dtype=np.float64)
    c_target = np.asarray(c_target, dtype=np.float64)
    label = int(assignment_labels(c[None, :], c_target[None, :], pair)[0])
    op = pair.a1 if label == 1 else pair.a2
    return label, op.apply(c)


def _sample_pixels(samples):
    colors = np.concatenate([s.image.data.reshape(-1, 3) for s in samples])
    targets = np.concatenate([s.shifted.data.reshape(-1, 3) for s in samples])
    return colors, targets


def restoration_loss(samples, pair: OperatorPair) -> float:
    """Per-pixel mean of the best-operator residual norm over all samples."""
    samples = list(samples)
    if not samples:
        raise DataError("restoration_loss requires at least one sample")
    colors, targets = _sample_pixels(samples)
    n1, n2 = _residual_norms(colors, targets, pair)
    return float(np.minimum(n1, n2).mean())


def operator_distance(pair: OperatorPair, images) -> float:
    """Mean over pixels of || A1(c) - A2(c) ||."""
    images = list(images)
    if not images:
        raise DataError("operator_distance requires at least one image")
    colors = np.concatenate([img.data.reshape(-1, 3) for img in images])
    diff = pair.a1.apply(colors) - pair.a2.apply(colors)
    return float(np.linalg.norm(diff, axis=-1).mean())


def _loss_and_grad(colors, targets, params):
    pair = OperatorPair.from_vector(params)
    p1 = colors @ pair.a1.matrix.T + pair.a1.bias
    p2 = colors @ pair.a2.matrix.T + pair.a2.bias
    r1 = p1 - targets
    r2 = p2 - targets
    n1 = np.linalg.norm(r1, axis=-1)
    n2 = np.linalg.norm(r2, axis=-1)
    sel1 = n1 <= n2
    m = colors.shape[0]
    loss = float(np.where(sel1, n1, n2).mean())
    # unit residuals of the selected operator; zero where the residual vanishes
    u1 = r1 / np.maximum(n1, _NORM_EPS)[:, None]
    u2 = r2 / np.maximum(n2, _NORM_EPS)[:, None]
    u1 = np.where((sel1 & (n1 > 0))[:, None], u1, 0.0) / m
    u2 = np.where((~sel1 & (n2 > 0))[:, None], u2, 0.0) / m
    grad = np.concatenate(
        [
            (u1.T @ colors).ravel(),
            u1.sum(axis=0),
            (u2.T @ colors).ravel(),
            u2.sum(axis=0),
        ]
    )
    return loss, grad


_INIT_ROUNDS = 4
_INIT_MIN_CLUSTER = 32


def _cluster_ls(design, targets, keep, fallback):
    if keep.sum() < _INIT_MIN_CLUSTER:
        return fallback
    w, *_ = np.linalg.lstsq(design[keep], targets[keep], rcond=None)
    return AffinePixelOperator(w[:3].T, w[3])


def _ls_init(colors, targets):
    """Closed-form two-operator seed: pooled least squares, then alternation.

    A single pooled affine fit is biased whenever the operator split
    correlates with color, so several candidate cuts of the pixels are each
    refined by per-cluster least squares with nearest-operator reassignment;
    the lowest-loss result seeds Adam, which then only polishes.
    """
    design = np.hstack([colors, np.ones((colors.shape[0], 1))])
    w, *_ = np.linalg.lstsq(design, targets, rcond=None)
    pooled = AffinePixelOperator(w[:3].T, w[3])
    resid = targets - design @ w
    cov = resid.T @ resid / resid.shape[0]
    _, vecs = np.linalg.eigh(cov)
    luma = targets @ np.array([0.299, 0.587, 0.114])
    cuts = (
        resid @ vecs[:, -1] > 0,
        resid.sum(axis=1) > 0,
        luma > np.median(luma),
    )
    best = None
    best_loss = np.inf
    for hi in cuts:
        pair = OperatorPair(
            _cluster_ls(design, targets, hi, pooled),
            _cluster_ls(design, targets, ~hi, pooled),
        )
        for _ in range(_INIT_ROUNDS):
            n1, n2 = _residual_norms(colors, targets, pair)
            sel1 = n1 <= n2
            pair = OperatorPair(
                _cluster_ls(design, targets, sel1, pair.a1),
                _cluster_ls(design, targets, ~sel1, pair.a2),
            )
        loss, _ = _loss_and_grad(colors, targets, pair.as_vector())
        if loss < best_loss:
            best_loss = loss
            best = pair
    return best.as_vector()


_INIT_SAMPLES = 16


def _run_fit(train_batch, eval_samples_fn, cfg: FitConfig, init_batch=None) -> FitResult:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    if init_batch is None:
        init_batch = lambda r: train_batch(0, r)
    params = _ls_init(*init_batch(rng))
    params += rng.normal(0.0, cfg.init_noise_sigma, 24)

    m_t = np.zeros(24)
    v_t = np.zeros(24)
    trace = []
    for step in range(cfg.steps):
        colors, targets = train_batch(step, rng)
        loss, grad = _loss_and_grad(colors, targets, params)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {step}", step=step)
        trace.append(loss)
        m_t = cfg.adam_beta1 * m_t + (1 - cfg.adam_beta1) * grad
        v_t = cfg.adam_beta2 * v_t + (1 - cfg.adam_beta2) * grad * grad
        m_hat = m_t / (1 - cfg.adam_beta1 ** (step + 1))
        v_hat = v_t / (1 - cfg.adam_beta2 ** (step + 1))
        params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon)

    pair = OperatorPair.from_vector(params)
    eval_samples = eval_samples_fn(rng)
    final_loss = restoration_loss(eval_samples, pair)
    if not np.isfinite(final_loss):
        raise NumericalError("non-finite loss at evaluation", step=cfg.steps)
    distance = operator_distance(pair, [s.image for s in eval_samples])
    return FitResult(
        pair=pair,
        final_loss=final_loss,
        distance=distance,
        config=cfg,
        trace=tuple(trace),
    )


def fit_operators(source: PairSource, cfg: FitConfig = FitConfig()) -> FitResult:
    """Fit the operator pair on a pair-sample stream.

    Training batches are drawn uniformly from the source's pool. The reported
    loss and distance are evaluated on held-out indices beyond the pool for
    unbounded sources, or on a fresh uniform draw for finite datasets.
    """
    pool = source.pool_size
    if pool is None:
        if not source.unbounded:
            raise DataError("finite source must declare its pool_size")
        pool = 1 << 31
    if pool < 1:
        raise DataError("source exhausted: empty pool")
    if not source.unbounded and pool < cfg.batch:
        raise DataError(
            f"source exhausted: pool of {pool} samples is smaller than batch {cfg.batch}"
        )

    def train_batch(step, rng):
        idx = rng.integers(0, pool, cfg.batch)
        return _sample_pixels([source.fetch(int(i)) for i in idx])

    def init_batch(rng):
        idx = rng.integers(0, pool, min(pool, _INIT_SAMPLES))
        return _sample_pixels([source.fetch(int(i)) for i in idx])

    def eval_samples_fn(rng):
        n = cfg.eval_samples
        if source.unbounded:
            indices = range(pool, pool + n)
        else:
            indices = [int(i) for i in rng.integers(0, pool, min(n, pool))]
        return [source.fetch(int(i)) for i in indices]

    return _run_fit(train_batch, eval_samples_fn, cfg, init_batch=init_batch)


def fit_per_sample(sample: PairSample, cfg: FitConfig = FitConfig()) -> FitResult:
    """Same procedure as fit_operators but on a single sample's pixels."""
    pixels = _sample_pixels([sample])

    def train_batch(step, rng):
        return pixels

    def eval_samples_fn(rng):
        return [sample]

    return _run_fit(train_batch, eval_samples_fn, cfg)


def masks_agreement(a, b) -> tuple[float, float]:
    """Mean mutual IoU and accuracy after resolving a global label swap on b."""
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise DataError("mask lists must have equal length")
    for ma, mb in zip(a, b):
        if ma.data.shape != mb.data.shape:
            raise DataError("mask shapes must match pairwise")
    total = sum(ma.data.size for ma in a)
    agree = sum(int((ma.data == mb.data).sum()) for ma, mb in zip(a, b))
    if agree * 2 < total:
        b = [Mask(1 - mb.data) for mb in b]
    ious = []
    accs = []
    for ma, mb in zip(a, b):
        inter = int((ma.data & mb.data).sum())
        union = int((ma.data | mb.data).sum())
        ious.append(1.0 if union == 0 else inter / union)
        accs.append(float((ma.data == mb.data).mean()))
    return float(np.mean(ious)), float(np.mean(accs))


# ---------------------------------------------------------------------------
# fit.json serialization


def fit_result_to_dict(result: FitResult) -> dict:
    return {
        "a1": {"m": result.pair.a1.matrix.tolist(), "b": result.pair.a1.bias.tolist()},
        "a2": {"m": result.pair.a2.matrix.tolist(), "b": result.pair.a2.bias.tolist()},
        "loss": result.final_loss,
        "distance": result.distance,
        "trace": list(result.trace),
        "config": {
            "steps": result.config.steps,
            "learning_rate": result.config.learning_rate,
            "batch": result.config.batch,
            "seed": result.config.seed,
            "adam_beta1": result.config.adam_beta1,
            "adam_beta2": result.config.adam_beta2,
            "adam_epsilon": result.config.adam_epsilon,
            "init_noise_sigma": result.config.init_noise_sigma,
            "eval_samples": result.config.eval_samples,
        },
    }


def save_fit_json(result: FitResult, path):
    Path(path).write_text(json.dumps(fit_result_to_dict(result), indent=2))


def load_fit_json(path) -> FitResult:
    try:
        payload = json.loads(Path(path).read_text())
        pair = OperatorPair(
            AffinePixelOperator(np.array(payload["a1"]["m"]), np.array(payload["a1"]["b"])),
            AffinePixelOperator(np.array(payload["a2"]["m"]), np.array(payload["a2"]["b"])),
        )
        return FitResult(
            pair=pair,
            final_loss=float(payload["loss"]),
            distance=float(payload["distance"]),
            config=FitConfig(**payload.get("config", {})),
            trace=tuple(payload.get("trace", ())),
        )
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed fit file {path}: {exc}") from exc
