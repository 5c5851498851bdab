"""Training loop, inference, and the hyperparameter sweep harness."""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..errors import DataError, NumericalError
from ..imgcore import (
    Image,
    Mask,
    SoftMask,
    bilinear_resize,
    center_crop_resize,
    load_manifest,
    resize_shorter_side,
)
from ..metrics import accuracy, iou, max_f_beta
from .model import (
    MiniUNet,
    ModelConfig,
    ModelWeights,
    model_from_weights,
    model_loss_and_grad,
    model_to_weights,
    snap_to_f32,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 12000
    batch: int = 95
    learning_rate: float = 0.001
    decay_factor: float = 0.2
    decay_step: int = 8000
    seed: int = 0
    val_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if not (0 < self.decay_factor <= 1):
            raise DataError("decay_factor must lie in (0, 1]")
        if self.decay_step < 1:
            raise DataError("decay_step must be >= 1")
        if self.batch < 1 or self.steps < 1:
            raise DataError("steps and batch must be >= 1")
        if not (0 <= self.val_fraction < 1):
            raise DataError("val_fraction must lie in [0, 1)")


def _prep_image(img: Image, side: int) -> np.ndarray:
    if (img.height, img.width) != (side, side):
        img = center_crop_resize(img, side)
    return img.data.transpose(2, 0, 1)


def _prep_mask(mask: Mask, side: int) -> np.ndarray:
    h, w = mask.height, mask.width
    if (h, w) == (side, side):
        return mask.data.astype(np.float64)
    s = min(h, w)
    crop = mask.data[(h - s) // 2:(h - s) // 2 + s, (w - s) // 2:(w - s) // 2 + s]
    field = bilinear_resize(crop.astype(np.float64), side, side)
    return (field > 0.5).astype(np.float64)


def load_training_arrays(dataset_dir, side: int):
    """Dataset directory -> (images (N,3,S,S), masks (N,S,S), ids)."""
    manifest = load_manifest(dataset_dir)
    xs, ts, ids = [], [], []
    for i, entry in enumerate(manifest.samples):
        if not entry.get("mask"):
            raise DataError(f"sample {entry['id']!r} has no mask; cannot train on it")
        sample = manifest.load_sample(i)
        xs.append(_prep_image(sample.image, side))
        ts.append(_prep_mask(sample.gt_mask, side))
        ids.append(sample.id)
    if not xs:
        raise DataError("dataset is empty")
    return np.stack(xs), np.stack(ts), ids


def split_validation(n: int, val_fraction: float):
    """Train/validation index split: the validation block is the tail."""
    n_val = int(round(val_fraction * n))
    return np.arange(0, n - n_val), np.arange(n - n_val, n)


def train(dataset_dir, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Run the step-based schedule; returns (ModelWeights, log rows).

    Log rows are dicts with keys step, lr, loss, val_iou (val_iou is None
    except every 500 steps and on the final step).
    """
    x, t, _ = load_training_arrays(dataset_dir, model_cfg.side)
    train_idx, val_idx = split_validation(len(x), train_cfg.val_fraction)
    if len(train_idx) < train_cfg.batch:
        raise DataError(
            f"dataset too small: {len(train_idx)} training samples for batch "
            f"{train_cfg.batch}"
        )
    model = MiniUNet(model_cfg)
    params = model.get_params()
    m_t = np.zeros_like(params)
    v_t = np.zeros_like(params)
    log = []

    def val_iou():
        if len(val_idx) == 0:
            return None
        preds = model.forward(x[val_idx], train=False)
        scores = [
            iou(SoftMask(np.clip(p, 0.0, 1.0)), Mask(t[i].astype(np.uint8)))
            for p, i in zip(preds, val_idx)
        ]
        return float(np.mean(scores))

    for step in range(1, train_cfg.steps + 1):
        lr = train_cfg.learning_rate
        if step > train_cfg.decay_step:
            lr *= train_cfg.decay_factor
        rng = np.random.default_rng(
            np.random.SeedSequence(train_cfg.seed, spawn_key=(step,))
        )
        idx = train_idx[rng.integers(0, len(train_idx), train_cfg.batch)]
        loss, grad = model_loss_and_grad(model, x[idx], t[idx])
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite training loss at step {step}", step=step)
        m_t = train_cfg.adam_beta1 * m_t + (1 - train_cfg.adam_beta1) * grad
        v_t = train_cfg.adam_beta2 * v_t + (1 - train_cfg.adam_beta2) * grad * grad
        m_hat = m_t / (1 - train_cfg.adam_beta1 ** step)
        v_hat = v_t / (1 - train_cfg.adam_beta2 ** step)
        params -= lr * m_hat / (np.sqrt(v_hat) + train_cfg.adam_epsilon)
        model.set_params(params)
        if step % 100 == 0 or step == 1 or step == train_cfg.steps:
            row = {"step": step, "lr": lr, "loss": loss, "val_iou": None}
            if step % 500 == 0 or step == train_cfg.steps:
                row["val_iou"] = val_iou()
            log.append(row)

    snap_to_f32(model)
    return model_to_weights(model), log


def predict(weights: ModelWeights, img: Image) -> SoftMask:
    """SoftMask at the original image resolution.

    Inputs already at the model size take the direct forward path bit-for-bit;
    everything else is rescaled to the model's shorter side, center-cropped to
    the model square, and the prediction is resized back bilinearly.
    """
    model = model_from_weights(weights)
    side = weights.config.side
    h, w = img.height, img.width
    if (h, w) == (side, side):
        p = model.forward(img.data.transpose(2, 0, 1)[None], train=False)[0]
        return SoftMask(np.clip(p, 0.0, 1.0))
    scaled = resize_shorter_side(img, side)
    square = center_crop_resize(scaled, side)
    p = model.forward(square.data.transpose(2, 0, 1)[None], train=False)[0]
    back = bilinear_resize(p, h, w)
    return SoftMask(np.clip(back, 0.0, 1.0))


def evaluate_split(weights: ModelWeights, x, t, beta_sq: float = 0.3):
    """Mean IoU / accuracy / per-image max F over arrays already at model size."""
    model = model_from_weights(weights)
    preds = model.forward(x, train=False)
    ious, accs, fs = [], [], []
    for p, mask in zip(preds, t):
        sm = SoftMask(np.clip(p, 0.0, 1.0))
        gt = Mask(mask.astype(np.uint8))
        ious.append(iou(sm, gt))
        accs.append(accuracy(sm, gt))
        fs.append(max_f_beta(sm, gt, beta_sq)[0])
    return float(np.mean(ious)), float(np.mean(accs)), float(np.mean(fs))


def sweep(dataset_dir, model_cfg: ModelConfig, grid):
    """Train each grid point and rank by validation IoU (ties by max F).

    Returns rows sorted best-first; failed grid points carry an 'error' field
    and sort last.
    """
    grid = list(grid)
    if not grid:
        raise DataError("sweep requires at least one grid point")
    rows = []
    for i, cfg in enumerate(grid):
        row = {
            "index": i,
            "steps": cfg.steps,
            "batch": cfg.batch,
            "learning_rate": cfg.learning_rate,
            "decay_factor": cfg.decay_factor,
            "decay_step": cfg.decay_step,
            "seed": cfg.seed,
            "val_iou": None,
            "val_accuracy": None,
            "val_max_f": None,
            "error": None,
        }
        try:
            weights, log = train(dataset_dir, model_cfg, cfg)
            x, t, _ = load_training_arrays(dataset_dir, model_cfg.side)
            _, val_idx = split_validation(len(x), cfg.val_fraction)
            if len(val_idx) == 0:
                raise DataError("sweep requires a non-empty validation split")
            vi, va, vf = evaluate_split(weights, x[val_idx], t[val_idx])
            row.update(val_iou=vi, val_accuracy=va, val_max_f=vf,
                       final_loss=log[-1]["loss"])
        except (DataError, NumericalError) as exc:
            row["error"] = str(exc)
        rows.append(row)
    rows.sort(
        key=lambda r: (
            r["error"] is not None,
            -(r["val_iou"] or 0.0),
            -(r["val_max_f"] or 0.0),
            r["index"],
        )
    )
    return rows
