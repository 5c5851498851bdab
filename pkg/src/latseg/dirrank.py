"""Candidate-direction evaluation, selection rule, and synthetic oracles.

The synthetic sources realize the two-operator pixel decomposition exactly
(up to additive pixel noise), so ground-truth masks and operators are known.
Confounder streams model the failure modes the selection rule must reject:
near-identical operators, a global lighting change, and a content warp that
no pixelwise color map can reproduce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .imgcore import Image, Mask, PairSample, PairSource
from .opfit import (
    AffinePixelOperator,
    FitConfig,
    FitResult,
    OperatorPair,
    fit_operators,
)

DEFAULT_DIRECTION_SCALE = 5.0

CONFOUNDER_KINDS = ("global-affine", "identity", "warp")


@dataclass(frozen=True)
class DirectionVector:
    id: str
    components: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.components, dtype=np.float64).reshape(-1)
        if arr.size < 1 or not np.isfinite(arr).all():
            raise DataError("direction components must be a non-empty finite vector")
        object.__setattr__(self, "components", arr)


@dataclass(frozen=True)
class DirectionReport:
    direction_id: str
    fit: FitResult

    @property
    def loss(self):
        return self.fit.final_loss

    @property
    def distance(self):
        return self.fit.distance


@dataclass(frozen=True)
class RankResult:
    selected: DirectionReport
    shortlist: tuple[DirectionReport, ...]
    reports: tuple[DirectionReport, ...]


def scale_direction(h: DirectionVector, factor: float = DEFAULT_DIRECTION_SCALE) -> DirectionVector:
    if not math.isfinite(factor):
        raise DataError("scale factor must be finite")
    return DirectionVector(id=h.id, components=h.components * factor, scale=h.scale * factor)


def rank_directions(reports, loss_quantile: float = 0.7) -> RankResult:
    """Best-quantile by loss, then maximal operator distance.

    The shortlist keeps the max(1, floor(quantile * n)) reports with smallest
    loss (ties by id); among them the one with the largest distance wins,
    ties broken by smaller loss then id.
    """
    reports = list(reports)
    if not reports:
        raise DataError("rank_directions requires at least one report")
    if not (0 < loss_quantile <= 1):
        raise DataError("loss_quantile must lie in (0, 1]")
    by_loss = sorted(reports, key=lambda r: (r.loss, r.direction_id))
    keep = max(1, math.floor(loss_quantile * len(reports)))
    shortlist = by_loss[:keep]
    selected = min(shortlist, key=lambda r: (-r.distance, r.loss, r.direction_id))
    return RankResult(
        selected=selected, shortlist=tuple(shortlist), reports=tuple(by_loss)
    )


@dataclass(frozen=True)
class SuiteSpec:
    """Parameters of the synthetic oracle suite."""

    side: int = 32
    count: int = 64  # training pool per candidate
    segmenting_index: int = 0
    kinds: tuple[str, ...] = ("segmenting",)
    noise_sigma: float = 0.005
    margin_delta: float = 0.3
    confounder_jitter: float = 0.08

    def __post_init__(self):
        if self.side < 4 or self.count < 1:
            raise DataError("suite spec requires side >= 4 and count >= 1")
        if self.margin_delta <= 0:
            raise DataError("margin delta must be positive")
        if self.noise_sigma < 0:
            raise DataError("noise sigma must be non-negative")
        if self.confounder_jitter < 0:
            raise DataError("confounder jitter must be non-negative")
        kinds = tuple(self.kinds)
        if not (0 <= self.segmenting_index < len(kinds)):
            raise DataError("segmenting index out of range")
        for i, kind in enumerate(kinds):
            if i == self.segmenting_index:
                if kind != "segmenting":
                    raise DataError("kind at segmenting_index must be 'segmenting'")
            elif kind not in CONFOUNDER_KINDS:
                raise DataError(f"unknown confounder kind {kind!r}")
        if kinds.count("segmenting") != 1:
            raise DataError("exactly one segmenting candidate is required")
        object.__setattr__(self, "kinds", kinds)


def _seedseq(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _child(ss: np.random.SeedSequence, *key) -> np.random.SeedSequence:
    """Stateless, order-independent child of a seed sequence."""
    return np.random.SeedSequence(ss.entropy, spawn_key=tuple(ss.spawn_key) + key)


def _base_scene(rng, side):
    """Blob field over a smooth gradient background; returns (image, blob field).

    The background interpolates two random colors along a random direction and
    every pixel gets a small color jitter, so any four images already span
    enough distinct colors to pin down an affine color map.
    """
    bg_a = rng.uniform(0.05, 0.95, 3)
    bg_b = rng.uniform(0.05, 0.95, 3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    k = int(rng.integers(1, 4))
    centers = rng.uniform(0.15, 0.85, (k, 2)) * side
    sigmas = rng.uniform(0.16, 0.28, k) * side
    amps = rng.uniform(0.7, 1.2, k)
    # objects must contrast with the background everywhere along its gradient
    blob_colors = np.empty((k, 3))
    bg_probe = bg_a + np.linspace(0.0, 1.0, 5)[:, None] * (bg_b - bg_a)
    for j in range(k):
        for _ in range(64):
            c = rng.uniform(0.0, 1.0, 3)
            if np.linalg.norm(bg_probe - c, axis=1).min() >= 0.45:
                break
        blob_colors[j] = c
    yy, xx = np.mgrid[0:side, 0:side]
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / side
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    bg = bg_a + ramp[:, :, None] * (bg_b - bg_a)
    total = np.zeros((side, side))
    color = np.zeros((side, side, 3))
    for j in range(k):
        d2 = (yy - centers[j, 0]) ** 2 + (xx - centers[j, 1]) ** 2
        f = amps[j] * np.exp(-d2 / (2.0 * sigmas[j] ** 2))
        total += f
        color += f[:, :, None] * blob_colors[j]
    color /= np.maximum(total, 1e-12)[:, :, None]
    # sharp edge right at the mask threshold so the object is visible
    wgt = 1.0 / (1.0 + np.exp(-(total - _MASK_THRESHOLD) / 0.03))[:, :, None]
    img = (1.0 - wgt) * bg + wgt * color
    # objects carry strong pixel texture, the background stays smooth
    img += wgt * rng.uniform(-0.2, 0.2, img.shape)
    img += rng.uniform(-0.06, 0.06, img.shape)
    return np.clip(img, 0.0, 1.0), total


# blob-field threshold defining the ground-truth mask
_MASK_THRESHOLD = 0.5


def _draw_operator(rng, diag_range, bias_range, off_max=0.03):
    m = np.diag(rng.uniform(*diag_range, 3))
    off = rng.uniform(0.0, off_max, (3, 3))
    np.fill_diagonal(off, 0.0)
    m += off
    b = rng.uniform(*bias_range, 3)
    return AffinePixelOperator(m, b)


def _draw_segmenting_pair(rng, delta, max_attempts=100):
    """Shared color matrix, biases split into near-black vs near-white.

    The split keeps every background luma below 2/12 and every foreground
    luma above 10/12, so shifted images populate only the outer bins of the
    12-bin luma histogram the filter stage inspects.
    """
    probes = rng.uniform(0.0, 1.0, (256, 3))
    for _ in range(max_attempts):
        a2 = _draw_operator(rng, (0.05, 0.09), (0.0, 0.02), off_max=0.01)  # darkening
        b1 = a2.bias + rng.uniform(0.84, 0.88, 3)
        a1 = AffinePixelOperator(a2.matrix, b1)  # lightening
        sep = np.linalg.norm(a1.apply(probes) - a2.apply(probes), axis=-1).mean()
        if sep >= delta:
            return OperatorPair(a1, a2)
    raise DataError(
        f"failed to draw an operator pair with mean separation >= {delta} "
        f"in {max_attempts} attempts"
    )


class SyntheticAffineSource(PairSource):
    """Oracle stream realizing the exact two-operator decomposition."""

    unbounded = True

    def __init__(self, spec: SuiteSpec, seed, operators: OperatorPair | None = None):
        self.spec = spec
        self.pool_size = spec.count
        ss = _seedseq(seed)
        self._ss = ss
        if operators is None:
            rng = np.random.default_rng(_child(ss, 0))
            operators = _draw_segmenting_pair(rng, spec.margin_delta)
        self.operators = operators
        self._cache = {}

    def fetch(self, index) -> PairSample:
        cached = self._cache.get(int(index))
        if cached is not None:
            return cached
        spec = self.spec
        rng = np.random.default_rng(_child(self._ss, 1, int(index)))
        img, blob = _base_scene(rng, spec.side)
        mask = blob > _MASK_THRESHOLD
        fg = self.operators.a1.apply(img)
        bg = self.operators.a2.apply(img)
        shifted = np.where(mask[:, :, None], fg, bg)
        if spec.noise_sigma > 0:
            shifted = shifted + rng.normal(0.0, spec.noise_sigma, shifted.shape)
        sample = PairSample(
            id=f"s{int(index):06d}",
            image=Image(img),
            shifted=Image(np.clip(shifted, 0.0, 1.0)),
            gt_mask=Mask(mask.astype(np.uint8)),
        )
        if int(index) < 4 * spec.count:
            self._cache[int(index)] = sample
        return sample


class _ConfounderSource(PairSource):
    unbounded = True

    def __init__(self, spec: SuiteSpec, seed, kind: str):
        if kind not in CONFOUNDER_KINDS:
            raise DataError(f"unknown confounder kind {kind!r}")
        self.spec = spec
        self.kind = kind
        self.pool_size = spec.count
        self._ss = _seedseq(seed)
        self.shared_map = None
        if kind == "global-affine":
            rng = np.random.default_rng(_child(self._ss, 0))
            # a strong global "lighting" map applied to every pixel
            self.shared_map = _draw_operator(rng, (0.3, 0.45), (0.2, 0.3))
        self._cache = {}

    def fetch(self, index) -> PairSample:
        cached = self._cache.get(int(index))
        if cached is not None:
            return cached
        spec = self.spec
        rng = np.random.default_rng(_child(self._ss, 1, int(index)))
        img, _ = _base_scene(rng, spec.side)
        if self.kind == "identity":
            shifted = img.copy()
        elif self.kind == "global-affine":
            shifted = self.shared_map.apply(img)
        else:  # warp: translate content by a quarter of the width
            shifted = np.roll(img, spec.side // 4, axis=1)
        if self.kind != "warp" and spec.confounder_jitter > 0:
            # per-sample flicker: no single operator pair can absorb it
            j = spec.confounder_jitter
            shifted = shifted * (1.0 + rng.uniform(-j / 2, j / 2, 3)) \
                + rng.uniform(-j, j, 3)
        if spec.noise_sigma > 0:
            shifted = shifted + rng.normal(0.0, spec.noise_sigma, shifted.shape)
        sample = PairSample(
            id=f"s{int(index):06d}",
            image=Image(img),
            shifted=Image(np.clip(shifted, 0.0, 1.0)),
        )
        if int(index) < 4 * spec.count:
            self._cache[int(index)] = sample
        return sample


def synthetic_affine_source(spec: SuiteSpec, seed, operators=None) -> SyntheticAffineSource:
    return SyntheticAffineSource(spec, seed, operators=operators)


@dataclass(frozen=True)
class SuiteCandidate:
    direction: DirectionVector
    source: PairSource
    kind: str


@dataclass(frozen=True)
class DirectionSuite:
    candidates: tuple[SuiteCandidate, ...]
    segmenting_index: int


def synthetic_direction_suite(spec: SuiteSpec, seed) -> DirectionSuite:
    """One stream per candidate direction; the segmenting index is known."""
    ss = _seedseq(seed)
    children = [_child(ss, j) for j in range(len(spec.kinds))]
    candidates = []
    d = len(spec.kinds)
    for j, kind in enumerate(spec.kinds):
        components = np.zeros(d)
        components[j] = 1.0
        direction = DirectionVector(id=f"dir{j:02d}", components=components)
        if kind == "segmenting":
            source = SyntheticAffineSource(spec, children[j])
        else:
            source = _ConfounderSource(spec, children[j], kind)
        candidates.append(SuiteCandidate(direction=direction, source=source, kind=kind))
    return DirectionSuite(
        candidates=tuple(candidates), segmenting_index=spec.segmenting_index
    )


def evaluate_suite(suite: DirectionSuite, cfg: FitConfig = FitConfig()) -> list[DirectionReport]:
    """Fit every candidate (independent seeds derived from cfg.seed)."""
    reports = []
    for j, cand in enumerate(suite.candidates):
        cand_cfg = FitConfig(
            steps=cfg.steps,
            learning_rate=cfg.learning_rate,
            batch=cfg.batch,
            seed=cfg.seed * 100003 + j,
            adam_beta1=cfg.adam_beta1,
            adam_beta2=cfg.adam_beta2,
            adam_epsilon=cfg.adam_epsilon,
            init_noise_sigma=cfg.init_noise_sigma,
            eval_samples=cfg.eval_samples,
        )
        fit = fit_operators(cand.source, cand_cfg)
        reports.append(DirectionReport(direction_id=cand.direction.id, fit=fit))
    return reports
