"""Core image/mask types, color utilities, preprocessing and dataset I/O.

Images are float64 arrays of shape (H, W, 3) with channels in [0, 1].
On disk a pair dataset is a directory::

    manifest.json
    img/<id>.png     8-bit RGB, channel c stored as round(255*c)
    shift/<id>.png
    mask/<id>.png    optional, 8-bit grayscale with values {0, 255}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import _kernels
from .errors import DataError

MANIFEST_VERSION = 1

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def _freeze(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """RGB image, channels in [0, 1], shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"image must have shape (H, W, 3), got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("image channels must be finite and within [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass(frozen=True)
class Mask:
    """Binary foreground mask, values in {0, 1}, shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"mask must have shape (H, W), got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise DataError("mask labels must be exactly 0 or 1")
        object.__setattr__(self, "data", _freeze(arr.astype(np.uint8)))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def foreground_count(self):
        return int(self.data.sum())


@dataclass(frozen=True)
class SoftMask:
    """Per-pixel foreground confidence in [0, 1], shape (H, W)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"soft mask must have shape (H, W), got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("soft mask values must be finite and within [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    def binarize(self, threshold=0.5):
        return Mask((self.data > threshold).astype(np.uint8))


@dataclass(frozen=True)
class PairSample:
    """One (image, shifted image) observation, optionally with a reference mask."""

    id: str
    image: Image
    shifted: Image
    gt_mask: Mask | None = None

    def __post_init__(self):
        if self.image.data.shape != self.shifted.data.shape:
            raise DataError(
                f"sample {self.id!r}: image {self.image.data.shape[:2]} and "
                f"shifted {self.shifted.data.shape[:2]} dimensions differ"
            )
        if self.gt_mask is not None and self.gt_mask.data.shape != self.image.data.shape[:2]:
            raise DataError(f"sample {self.id!r}: mask dimensions differ from image")


class PairSource:
    """Deterministic indexed stream of PairSamples.

    ``pool_size`` is the number of distinct training samples; ``unbounded``
    sources additionally accept any index >= pool_size (fresh held-out draws).
    """

    pool_size: int | None = None
    unbounded: bool = False

    def fetch(self, index: int) -> PairSample:
        raise NotImplementedError


def to_grayscale(img: Image) -> np.ndarray:
    """BT.601 luma of every pixel, shape (H, W), values in [0, 1]."""
    return img.data @ _LUMA


def connected_components(mask: Mask) -> list[set[tuple[int, int]]]:
    """4-connected foreground components, largest first.

    Ties in size are broken by the smallest row-major pixel position.
    """
    labels, n = _kernels.label_components(mask.data)
    if n == 0:
        return []
    w = mask.width
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    positions = order[flat[order] > 0]
    keys = flat[positions]
    starts = np.searchsorted(keys, np.arange(1, n + 1), side="left")
    ends = np.searchsorted(keys, np.arange(1, n + 1), side="right")
    comps = [
        {(int(p) // w, int(p) % w) for p in positions[starts[k]:ends[k]]}
        for k in range(n)
    ]
    comps.sort(key=lambda c: (-len(c), min(r * w + col for r, col in c)))
    return comps


def bilinear_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with pixel-center alignment; identity when sizes match."""
    h, w = data.shape[:2]
    if (h, w) == (out_h, out_w):
        return data.copy()
    squeeze = data.ndim == 2
    if squeeze:
        data = data[:, :, None]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = data[y0][:, x0] * (1 - wx) + data[y0][:, x1] * wx
    bot = data[y1][:, x0] * (1 - wx) + data[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out[:, :, 0] if squeeze else out


def center_crop_resize(img: Image, side: int) -> Image:
    """Largest centered square crop, then bilinear resize to side x side."""
    if side < 1:
        raise DataError("side must be >= 1")
    h, w = img.height, img.width
    s = min(h, w)
    oy = (h - s) // 2
    ox = (w - s) // 2
    crop = img.data[oy:oy + s, ox:ox + s]
    out = bilinear_resize(crop, side, side)
    return Image(np.clip(out, 0.0, 1.0))


def resize_shorter_side(img: Image, target: int) -> Image:
    """Aspect-preserving bilinear resize so min(H, W) == target."""
    if target < 1:
        raise DataError("target must be >= 1")
    h, w = img.height, img.width
    if min(h, w) == target:
        return Image(img.data.copy())
    scale = target / min(h, w)
    if h <= w:
        nh, nw = target, max(1, int(round(w * scale)))
    else:
        nh, nw = max(1, int(round(h * scale))), target
    return Image(np.clip(bilinear_resize(img.data, nh, nw), 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset I/O


@dataclass
class DatasetManifest:
    version: int
    samples: list[dict]
    metadata: dict = field(default_factory=dict)
    root: Path | None = None

    def ids(self):
        return [s["id"] for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def load_sample(self, index: int) -> PairSample:
        entry = self.samples[index]
        sid = entry["id"]
        img = load_image_png(self.root / entry["image"], sid)
        shifted = load_image_png(self.root / entry["shifted"], sid)
        mask = None
        if entry.get("mask"):
            mask = load_mask_png(self.root / entry["mask"], sid)
        return PairSample(id=sid, image=img, shifted=shifted, gt_mask=mask)


class PairDatasetSource(PairSource):
    """PairSource backed by an on-disk pair dataset, with a small cache."""

    unbounded = False

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.pool_size = len(manifest)
        self._cache = {}

    def fetch(self, index):
        if index not in self._cache:
            self._cache[index] = self.manifest.load_sample(index)
        return self._cache[index]


def save_image_png(img_data: np.ndarray, path: Path):
    arr = np.round(255.0 * np.asarray(img_data)).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)


def load_image_png(path: Path, sample_id: str) -> Image:
    if not Path(path).exists():
        raise DataError(f"sample {sample_id!r}: missing file {path}")
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr)


def save_mask_png(mask: Mask, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(mask.data * np.uint8(255), mode="L").save(path)


def load_mask_png(path: Path, sample_id: str) -> Mask:
    if not Path(path).exists():
        raise DataError(f"sample {sample_id!r}: missing file {path}")
    arr = np.asarray(PILImage.open(path).convert("L"))
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DataError(
            f"sample {sample_id!r}: non-binary mask (value {int(arr[bad][0])} in {path})"
        )
    return Mask((arr == 255).astype(np.uint8))


def save_pair_dataset(samples, out_dir, metadata=None) -> DatasetManifest:
    """Write samples to the pair-dataset layout and return the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    seen = set()
    for sample in samples:
        if sample.id in seen:
            raise DataError(f"duplicate sample id {sample.id!r}")
        seen.add(sample.id)
        entry = {
            "id": sample.id,
            "image": f"img/{sample.id}.png",
            "shifted": f"shift/{sample.id}.png",
            "mask": None,
        }
        save_image_png(sample.image.data, out_dir / entry["image"])
        save_image_png(sample.shifted.data, out_dir / entry["shifted"])
        if sample.gt_mask is not None:
            entry["mask"] = f"mask/{sample.id}.png"
            save_mask_png(sample.gt_mask, out_dir / entry["mask"])
        entries.append(entry)
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        samples=entries,
        metadata=dict(metadata or {}),
        root=out_dir,
    )
    payload = {
        "version": manifest.version,
        "samples": manifest.samples,
        "metadata": manifest.metadata,
    }
    (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2))
    return manifest


def load_manifest(path) -> DatasetManifest:
    """Load manifest.json (or its directory) and validate referenced files."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(payload, dict) or "samples" not in payload:
        raise DataError(f"malformed manifest {path}: missing 'samples'")
    root = path.parent
    ids = set()
    for entry in payload["samples"]:
        sid = entry.get("id")
        if sid is None or "image" not in entry or "shifted" not in entry:
            raise DataError(f"malformed manifest entry: {entry}")
        if sid in ids:
            raise DataError(f"duplicate sample id {sid!r} in manifest")
        ids.add(sid)
        for key in ("image", "shifted", "mask"):
            rel = entry.get(key)
            if rel and not (root / rel).exists():
                raise DataError(f"sample {sid!r}: missing file {root / rel}")
    return DatasetManifest(
        version=int(payload.get("version", MANIFEST_VERSION)),
        samples=list(payload["samples"]),
        metadata=dict(payload.get("metadata", {})),
        root=root,
    )
