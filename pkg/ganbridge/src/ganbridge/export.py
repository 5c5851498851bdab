"""Pair-dataset export and image encoding in the toolkit's on-disk formats."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .model import BridgeError, GeneratorModel, load_model

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ExportSpec:
    model: str
    direction_file: str
    count: int
    out_dir: str
    scale: float = 5.0
    latent_source: str = "prior"  # "prior" or a latents file path
    direction_index: int = 0
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count < 1:
            raise BridgeError("count must be >= 1")
        if self.direction_index < 0:
            raise BridgeError("direction index must be >= 0")


def load_directions(path) -> np.ndarray:
    """Whitespace-separated vectors, one direction per line; returns (n, d)."""
    path = Path(path)
    if not path.exists():
        raise BridgeError(f"direction file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split()])
        except ValueError as exc:
            raise BridgeError(f"{path}:{lineno}: bad direction value: {exc}") from exc
    if not rows:
        raise BridgeError(f"direction file is empty: {path}")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise BridgeError(f"direction file rows differ in dimension: {path}")
    return np.asarray(rows, dtype=np.float64)


def _load_latents_file(path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not path.exists() or not sidecar.exists():
        raise BridgeError(f"latents file or sidecar missing: {path}")
    meta = json.loads(sidecar.read_text())
    values = np.frombuffer(path.read_bytes(), dtype="<f4")
    n, d = int(meta["n"]), int(meta["d"])
    if values.size != n * d:
        raise BridgeError(f"latents payload size mismatch in {path}")
    return values.reshape(n, d).astype(np.float64)


def _save_latents_file(values: np.ndarray, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(values, dtype="<f4").tobytes())
    path.with_suffix(".json").write_text(
        json.dumps({"n": int(values.shape[0]), "d": int(values.shape[1])}))


def _to_unit(img: np.ndarray) -> np.ndarray:
    # generator range [-1, 1] -> [0, 1]
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


def _save_png(img01: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.round(255.0 * img01).astype(np.uint8)).save(path)


def _draw_latents(spec: ExportSpec, model: GeneratorModel) -> np.ndarray:
    if spec.latent_source == "prior":
        out = np.empty((spec.count, model.latent_dim))
        for i in range(spec.count):
            rng = np.random.default_rng(
                np.random.SeedSequence(spec.seed, spawn_key=(i,)))
            out[i] = rng.standard_normal(model.latent_dim)
        return out
    pool = _load_latents_file(spec.latent_source)
    if pool.shape[1] != model.latent_dim:
        raise BridgeError(
            f"latents dimension {pool.shape[1]} does not match model "
            f"latent dimension {model.latent_dim}")
    out = np.empty((spec.count, model.latent_dim))
    for i in range(spec.count):
        rng = np.random.default_rng(
            np.random.SeedSequence(spec.seed, spawn_key=(i,)))
        out[i] = pool[int(rng.integers(0, pool.shape[0]))]
    return out


def export_pairs(spec: ExportSpec) -> Path:
    """Write (image, shifted) pairs for one direction; returns the dataset dir."""
    model = load_model(spec.model)
    directions = load_directions(spec.direction_file)
    if spec.direction_index >= directions.shape[0]:
        raise BridgeError(
            f"direction index {spec.direction_index} out of range "
            f"({directions.shape[0]} rows)")
    if directions.shape[1] != model.latent_dim:
        raise BridgeError(
            f"direction dimension {directions.shape[1]} does not match model "
            f"latent dimension {model.latent_dim}")
    h = directions[spec.direction_index] * spec.scale
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    latents = _draw_latents(spec, model)
    entries = []
    for i, z in enumerate(latents):
        sid = f"g{spec.seed:04d}_{i:06d}"
        entry = {"id": sid, "image": f"img/{sid}.png",
                 "shifted": f"shift/{sid}.png", "mask": None}
        _save_png(_to_unit(model.generate(z)), out_dir / entry["image"])
        _save_png(_to_unit(model.generate(z + h)), out_dir / entry["shifted"])
        entries.append(entry)
    _save_latents_file(latents, out_dir / "latents.bin")
    manifest = {
        "version": MANIFEST_VERSION,
        "samples": entries,
        "metadata": {"origin": "ganbridge", **spec.metadata},
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    (out_dir / "export_spec.json").write_text(json.dumps({
        "model": spec.model,
        "direction_file": str(spec.direction_file),
        "direction_index": spec.direction_index,
        "scale": spec.scale,
        "latent_source": spec.latent_source,
        "count": spec.count,
        "seed": spec.seed,
    }, indent=2, sort_keys=True))
    return out_dir


def encode_images(model_ref: str, image_dir, out_path) -> Path:
    """Encode every PNG under image_dir (lexicographic order) to a latents file."""
    model = load_model(model_ref)
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise BridgeError(f"image directory not found: {image_dir}")
    files = sorted(image_dir.rglob("*.png"))
    if not files:
        raise BridgeError(f"no PNG images under {image_dir}")
    rows = np.empty((len(files), model.latent_dim))
    for i, f in enumerate(files):
        try:
            img = np.asarray(PILImage.open(f).convert("RGB"), dtype=np.float64)
        except OSError as exc:
            raise BridgeError(f"cannot read image {f}: {exc}") from exc
        rows[i] = model.encode(img / 255.0 * 2.0 - 1.0)
    out_path = Path(out_path)
    _save_latents_file(rows, out_path)
    return out_path
