"""Mask synthesis from fitted operators, mask filtering, and dataset emission.

Three mask variants are supported: the operator-assignment mask, the fast
pixel-norm heuristic, and the mean-threshold variant. Kept masks pass a
three-stage filter pipeline (size -> histogram -> connected components).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .imgcore import (
    Mask,
    PairSample,
    PairSource,
    connected_components,
    save_pair_dataset,
    to_grayscale,
)
from .opfit import OperatorPair, assignment_labels

MASK_MODES = ("assignment", "norm", "mean-threshold")

FILTER_STAGES = ("size", "histogram", "cc")


@dataclass(frozen=True)
class LatentMatrix:
    """n x d matrix of latent codes, row-major."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"latents must be a non-empty 2-d matrix, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DataError("latents must be finite")
        object.__setattr__(self, "values", arr)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class FilterConfig:
    size_threshold: float = 0.5
    histogram_bins: int = 12
    smoothing_window: int = 3
    cc_ratio: float = 0.2
    stages: tuple[str, ...] = FILTER_STAGES

    def __post_init__(self):
        if not (0 < self.size_threshold <= 1):
            raise DataError("size_threshold must lie in (0, 1]")
        if self.histogram_bins < 3:
            raise DataError("histogram needs at least 3 bins")
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise DataError("smoothing window must be odd and >= 1")
        if not (0 <= self.cc_ratio <= 1):
            raise DataError("cc_ratio must lie in [0, 1]")
        stages = tuple(self.stages)
        for stage in stages:
            if stage not in FILTER_STAGES:
                raise DataError(f"unknown filter stage {stage!r}")
        object.__setattr__(self, "stages", stages)


@dataclass
class FilterReport:
    sample_id: str
    verdicts: list[tuple[str, str]] = field(default_factory=list)  # (stage, verdict)
    cc_removed: int = 0

    @property
    def kept(self):
        return all(v != "rejected" for _, v in self.verdicts)


def foreground_operator(sample: PairSample, pair: OperatorPair) -> int:
    """Index (1 or 2) of the lightening operator: larger mean output luma."""
    colors = sample.image.data.reshape(-1, 3)
    luma = np.array([0.299, 0.587, 0.114])
    g1 = float((pair.a1.apply(colors) @ luma).mean())
    g2 = float((pair.a2.apply(colors) @ luma).mean())
    return 1 if g1 >= g2 else 2


def mask_from_assignment(sample: PairSample, pair: OperatorPair, foreground: int | None = None) -> Mask:
    """Per-pixel operator assignment mapped to foreground/background.

    ``foreground`` overrides the automatic lightening-operator detection.
    """
    colors = sample.image.data.reshape(-1, 3)
    targets = sample.shifted.data.reshape(-1, 3)
    labels = assignment_labels(colors, targets, pair)
    if foreground is None:
        foreground = foreground_operator(sample, pair)
    elif foreground not in (1, 2):
        raise DataError("foreground operator index must be 1 or 2")
    mask = (labels == foreground).astype(np.uint8)
    return Mask(mask.reshape(sample.image.height, sample.image.width))


def mask_norm_heuristic(sample: PairSample) -> Mask:
    """Foreground iff the shifted pixel's RGB norm strictly exceeds the original's."""
    n_orig = np.linalg.norm(sample.image.data, axis=-1)
    n_shift = np.linalg.norm(sample.shifted.data, axis=-1)
    return Mask((n_shift > n_orig).astype(np.uint8))


def mask_mean_threshold(sample: PairSample) -> Mask:
    """Foreground iff the shifted pixel's luma strictly exceeds the image mean luma."""
    gray = to_grayscale(sample.shifted)
    return Mask((gray > gray.mean()).astype(np.uint8))


def size_filter(mask: Mask, threshold: float = 0.5) -> bool:
    """True = keep. Rejects when the foreground ratio strictly exceeds threshold."""
    ratio = mask.foreground_count() / mask.data.size
    return ratio <= threshold


def _smoothed_histogram(gray: np.ndarray, bins: int, window: int) -> np.ndarray:
    idx = np.minimum((gray * bins).astype(np.int64), bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    hist /= gray.size
    half = window // 2
    smoothed = np.empty(bins)
    for i in range(bins):
        lo = max(0, i - half)
        hi = min(bins, i + half + 1)
        smoothed[i] = hist[lo:hi].mean()
    return smoothed


def _has_interior_maximum(s: np.ndarray) -> bool:
    """Local-maximum plateaus not anchored at the first or last bin.

    A maximal run of equal values is a local maximum when both flanking bins
    are strictly lower (array ends count as lower).
    """
    n = s.size
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        left_lower = i == 0 or s[i - 1] < s[i]
        right_lower = j == n - 1 or s[j + 1] < s[j]
        if left_lower and right_lower and i > 0 and j < n - 1:
            return True
        i = j + 1
    return False


def histogram_filter(shifted, cfg: FilterConfig = FilterConfig()) -> bool:
    """True = keep. Rejects images whose smoothed luma histogram peaks mid-range."""
    gray = to_grayscale(shifted)
    s = _smoothed_histogram(gray, cfg.histogram_bins, cfg.smoothing_window)
    return not _has_interior_maximum(s)


def cc_filter(mask: Mask, ratio: float = 0.2) -> tuple[Mask, int]:
    """Drop components smaller than ratio * largest. Returns (mask, pixels removed)."""
    comps = connected_components(mask)
    if not comps:
        return mask, 0
    cutoff = ratio * len(comps[0])
    out = mask.data.copy()
    removed = 0
    for comp in comps[1:]:
        if len(comp) < cutoff:
            for r, c in comp:
                out[r, c] = 0
            removed += len(comp)
    return Mask(out), removed


def run_filter_pipeline(sample: PairSample, mask: Mask, cfg: FilterConfig = FilterConfig()):
    """Apply enabled stages in order size -> histogram -> cc.

    Returns (kept, possibly-modified mask, FilterReport). Rejection
    short-circuits; the cc stage modifies instead of rejecting.
    """
    report = FilterReport(sample_id=sample.id)
    if "size" in cfg.stages:
        if not size_filter(mask, cfg.size_threshold):
            report.verdicts.append(("size", "rejected"))
            return False, mask, report
        report.verdicts.append(("size", "kept"))
    if "histogram" in cfg.stages:
        if not histogram_filter(sample.shifted, cfg):
            report.verdicts.append(("histogram", "rejected"))
            return False, mask, report
        report.verdicts.append(("histogram", "kept"))
    if "cc" in cfg.stages:
        mask, removed = cc_filter(mask, cfg.cc_ratio)
        report.cc_removed = removed
        report.verdicts.append(("cc", "modified" if removed else "kept"))
    return True, mask, report


def generate_mask(sample: PairSample, mode: str, pair: OperatorPair | None = None,
                  foreground: int | None = None) -> Mask:
    if mode == "assignment":
        if pair is None:
            raise DataError("assignment mode requires a fitted operator pair")
        return mask_from_assignment(sample, pair, foreground=foreground)
    if mode == "norm":
        return mask_norm_heuristic(sample)
    if mode == "mean-threshold":
        return mask_mean_threshold(sample)
    raise DataError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


def noisy_latents(latents: LatentMatrix, alpha: float, n: int, seed) -> LatentMatrix:
    """Sample n codes from Gaussian neighborhoods of the given rows.

    Row i of the output is latents[u_i] + alpha * xi_i with u_i uniform (with
    replacement) and xi_i standard normal, both deterministic per (seed, i).
    """
    if alpha < 0:
        raise DataError("alpha must be non-negative")
    if n < 1:
        raise DataError("n must be >= 1")
    out = np.empty((n, latents.d))
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        row = int(rng.integers(0, latents.n))
        out[i] = latents.values[row]
        if alpha > 0:
            out[i] += alpha * rng.standard_normal(latents.d)
    return LatentMatrix(out)


def emit_dataset(source: PairSource, mode: str, cfg: FilterConfig, target: int,
                 out_dir, pair: OperatorPair | None = None,
                 foreground: int | None = None, force_size_filter: bool = False,
                 attempt_cap_factor: int = 20, metadata=None):
    """Draw samples until `target` pass the filters, then write the dataset.

    The mean-threshold mode skips the size stage by default (it rejects most
    such masks); pass force_size_filter=True to keep it. Raises DataError with
    acceptance statistics when target * attempt_cap_factor draws are exceeded.
    """
    if target < 1:
        raise DataError("target must be >= 1")
    stages = cfg.stages
    if mode == "mean-threshold" and not force_size_filter:
        stages = tuple(s for s in stages if s != "size")
    eff_cfg = FilterConfig(
        size_threshold=cfg.size_threshold,
        histogram_bins=cfg.histogram_bins,
        smoothing_window=cfg.smoothing_window,
        cc_ratio=cfg.cc_ratio,
        stages=stages,
    )
    kept = []
    reports = []
    cap = target * attempt_cap_factor
    index = 0
    while len(kept) < target:
        if index >= cap:
            raise DataError(
                f"filter acceptance too low: kept {len(kept)}/{target} after "
                f"{index} attempts ({len(kept) / index:.1%} acceptance)"
            )
        sample = source.fetch(index)
        mask = generate_mask(sample, mode, pair=pair, foreground=foreground)
        ok, mask, report = run_filter_pipeline(sample, mask, eff_cfg)
        reports.append(report)
        if ok:
            kept.append(
                PairSample(id=sample.id, image=sample.image, shifted=sample.shifted,
                           gt_mask=mask)
            )
        index += 1
    meta = {"mask_mode": mode, "filters": ",".join(stages)}
    meta.update(metadata or {})
    manifest = save_pair_dataset(kept, out_dir, metadata=meta)
    return manifest, reports


# ---------------------------------------------------------------------------
# latents file I/O: raw little-endian float32 + JSON sidecar


def save_latents(latents: LatentMatrix, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(latents.values.astype("<f4").tobytes())
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"n": latents.n, "d": latents.d}))


def load_latents(path) -> LatentMatrix:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise DataError(f"latents file or sidecar missing: {path}")
    try:
        meta = json.loads(sidecar.read_text())
        n, d = int(meta["n"]), int(meta["d"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"malformed latents sidecar {sidecar}: {exc}") from exc
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != n * d:
        raise DataError(
            f"latents size mismatch: sidecar says {n}x{d}, file holds {raw.size} values"
        )
    return LatentMatrix(raw.reshape(n, d).astype(np.float64))
