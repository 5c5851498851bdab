"""Mini encoder-decoder segmentation network with handwritten backprop.

All math runs in float64 on (N, C, H, W) arrays; convolutions go through the
kernel dispatch layer (compiled extension or numpy fallback). Weights are
stored on disk as float32, and trained parameters are snapped to float32
values so save/load round-trips leave predictions bitwise unchanged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import _kernels
from ..errors import DataError

BCE_CLAMP = 1e-7

WEIGHTS_MAGIC = b"MSEG"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    side: int = 32
    widths: tuple[int, ...] = (8, 16, 32)
    depth: int = 2
    skips: bool = True
    seed: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != self.depth + 1:
            raise DataError("widths must list one channel count per stage plus bottleneck")
        if any(w < 1 for w in widths):
            raise DataError("channel widths must be positive")
        if self.depth < 1:
            raise DataError("depth must be >= 1")
        if self.side % (2 ** self.depth) != 0:
            raise DataError(f"side {self.side} not divisible by 2^depth = {2 ** self.depth}")
        object.__setattr__(self, "widths", widths)


class _Conv:
    def __init__(self, cin, cout, k, pad):
        self.cin, self.cout, self.k, self.pad = cin, cout, k, pad
        self.w = np.zeros((cout, cin, k, k))
        self.b = np.zeros(cout)
        self.dw = None
        self.db = None
        self._x = None

    @property
    def n_params(self):
        return self.w.size + self.b.size

    def init(self, rng):
        fan_in = self.cin * self.k * self.k
        limit = np.sqrt(6.0 / fan_in)
        self.w = rng.uniform(-limit, limit, self.w.shape)
        self.b = np.zeros(self.cout)

    def forward(self, x, train):
        if train:
            self._x = x
        return _kernels.conv2d_forward(x, self.w, self.b, self.pad)

    def backward(self, dy):
        dx, self.dw, self.db = _kernels.conv2d_backward(self._x, self.w, dy, self.pad)
        return dx


def _relu_forward(x):
    return np.maximum(x, 0.0)


def _relu_backward(x, dy):
    return np.where(x > 0, dy, 0.0)


def _pool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dy, idx, h, w):
    n, c, h2, w2 = dy.shape
    dblocks = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
    dx = dblocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dx.reshape(n, c, h, w)


def _upsample_forward(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(dy):
    n, c, h, w = dy.shape
    return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class MiniUNet:
    """Encoder-decoder with max-pool downsampling and nearest-neighbor upsampling."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        widths = cfg.widths
        self.enc = []
        cin = 3
        for w in widths[:-1]:
            self.enc.append(_Conv(cin, w, 3, 1))
            cin = w
        self.bottleneck = _Conv(cin, widths[-1], 3, 1)
        self.dec = []
        cin = widths[-1]
        for w in reversed(widths[:-1]):
            dec_in = cin + w if cfg.skips else cin
            self.dec.append(_Conv(dec_in, w, 3, 1))
            cin = w
        self.out = _Conv(cin, 1, 1, 0)
        self._convs = [*self.enc, self.bottleneck, *self.dec, self.out]
        self._cache = None
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
        for conv in self._convs:
            conv.init(rng)

    # -- parameter vector ---------------------------------------------------

    @property
    def n_params(self):
        return sum(c.n_params for c in self._convs)

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([c.w.ravel(), c.b]) for c in self._convs])

    def set_params(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise DataError(f"parameter vector has {vec.size} entries, expected {self.n_params}")
        pos = 0
        for c in self._convs:
            c.w = vec[pos:pos + c.w.size].reshape(c.w.shape).copy()
            pos += c.w.size
            c.b = vec[pos:pos + c.b.size].copy()
            pos += c.b.size

    def get_grad(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([c.dw.ravel(), c.db]) for c in self._convs]
        )

    # -- forward / backward -------------------------------------------------

    def forward(self, x, train=False):
        """x: (N, 3, side, side) -> probabilities (N, side, side)."""
        cache = {"pre": [], "pool_idx": [], "skips": []}
        a = x
        for conv in self.enc:
            z = conv.forward(a, train)
            a = _relu_forward(z)
            cache["pre"].append(z)
            cache["skips"].append(a)
            pooled, idx = _pool_forward(a)
            cache["pool_idx"].append((idx, a.shape[2], a.shape[3]))
            a = pooled
        z = self.bottleneck.forward(a, train)
        a = _relu_forward(z)
        cache["bottleneck_pre"] = z
        cache["dec_pre"] = []
        cache["dec_in_ch"] = []
        for conv, skip in zip(self.dec, reversed(cache["skips"])):
            a = _upsample_forward(a)
            if self.cfg.skips:
                cache["dec_in_ch"].append(a.shape[1])
                a = np.concatenate([a, skip], axis=1)
            z = conv.forward(a, train)
            a = _relu_forward(z)
            cache["dec_pre"].append(z)
        logits = self.out.forward(a, train)[:, 0]
        p = 1.0 / (1.0 + np.exp(-logits))
        cache["p"] = p
        if train:
            self._cache = cache
        return p

    def backward(self, dlogits):
        """dlogits: (N, side, side); fills per-conv gradients, returns nothing."""
        cache = self._cache
        da = self.out.backward(dlogits[:, None, :, :])
        dskips = [None] * len(self.enc)
        for i in range(len(self.dec) - 1, -1, -1):
            conv = self.dec[i]
            dz = _relu_backward(cache["dec_pre"][i], da)
            da = conv.backward(dz)
            if self.cfg.skips:
                split = cache["dec_in_ch"][i]
                dskips[len(self.enc) - 1 - i] = da[:, split:]
                da = da[:, :split]
            da = _upsample_backward(da)
        dz = _relu_backward(cache["bottleneck_pre"], da)
        da = self.bottleneck.backward(dz)
        for i in range(len(self.enc) - 1, -1, -1):
            idx, h, w = cache["pool_idx"][i]
            da = _pool_backward(da, idx, h, w)
            if dskips[i] is not None:
                da = da + dskips[i]
            dz = _relu_backward(cache["pre"][i], da)
            da = self.enc[i].backward(dz)
        return da


def bce_loss(pred, target) -> float:
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))))


def model_loss(model: MiniUNet, x, t) -> float:
    return bce_loss(model.forward(x, train=False), t)


def model_loss_and_grad(model: MiniUNet, x, t):
    """Loss plus gradient w.r.t. the flattened parameter vector."""
    p = model.forward(x, train=True)
    t = np.asarray(t, dtype=np.float64)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))))
    inside = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    dp = np.where(inside, (-t / pc + (1.0 - t) / (1.0 - pc)) / p.size, 0.0)
    dlogits = dp * p * (1.0 - p)
    model.backward(dlogits)
    return loss, model.get_grad()


def gradient_check(model: MiniUNet, x, target, step: float = 1e-5,
                   n_sample: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, analytic = model_loss_and_grad(model, x, target)
    params = model.get_params()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = min(max(n_sample, 200), params.size)
    idx = rng.choice(params.size, size=n, replace=False)
    worst = 0.0
    for i in idx:
        orig = params[i]
        params[i] = orig + step
        model.set_params(params)
        lp = model_loss(model, x, target)
        params[i] = orig - step
        model.set_params(params)
        lm = model_loss(model, x, target)
        params[i] = orig
        numeric = (lp - lm) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, err)
    model.set_params(params)
    return worst


# ---------------------------------------------------------------------------
# weight container


@dataclass(frozen=True)
class ModelWeights:
    header: dict
    blob: np.ndarray  # float32 parameter vector

    def __post_init__(self):
        blob = np.ascontiguousarray(self.blob, dtype=np.float32)
        object.__setattr__(self, "blob", blob)

    @property
    def config(self) -> ModelConfig:
        h = self.header
        return ModelConfig(
            side=int(h["side"]),
            widths=tuple(h["widths"]),
            depth=int(h["depth"]),
            skips=bool(h["skips"]),
            seed=int(h.get("seed", 0)),
        )


def model_to_weights(model: MiniUNet) -> ModelWeights:
    cfg = model.cfg
    header = {
        "side": cfg.side,
        "widths": list(cfg.widths),
        "depth": cfg.depth,
        "skips": cfg.skips,
        "seed": cfg.seed,
        "n_params": model.n_params,
    }
    return ModelWeights(header=header, blob=model.get_params().astype(np.float32))


def model_from_weights(weights: ModelWeights) -> MiniUNet:
    model = MiniUNet(weights.config)
    if weights.blob.size != model.n_params:
        raise DataError(
            f"weight blob has {weights.blob.size} values, architecture needs {model.n_params}"
        )
    model.set_params(weights.blob.astype(np.float64))
    return model


def snap_to_f32(model: MiniUNet):
    """Round parameters to float32 values so saving is lossless afterwards."""
    model.set_params(model.get_params().astype(np.float32).astype(np.float64))


def save_weights(weights: ModelWeights, path):
    header_bytes = json.dumps(weights.header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", WEIGHTS_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(weights.blob.astype("<f4").tobytes())


def load_weights(path) -> ModelWeights:
    path = Path(path)
    if not path.exists():
        raise DataError(f"weights file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != WEIGHTS_MAGIC:
        raise DataError(f"not a model weights file: {path}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != WEIGHTS_VERSION:
        raise DataError(f"unsupported weights version {version}")
    hlen = struct.unpack("<I", raw[8:12])[0]
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed weights header in {path}: {exc}") from exc
    blob = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    expected = header.get("n_params")
    if expected is not None and blob.size != int(expected):
        raise DataError(
            f"weight blob length {blob.size} does not match header n_params {expected}"
        )
    return ModelWeights(header=header, blob=blob)
