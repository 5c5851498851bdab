"""Generator/encoder backends behind a tiny common interface.

A model reference is either ``builtin:<seed>`` for the self-contained
procedural generator, or a path to an ``.npz`` file holding ``basis``
(3*side*side, latent_dim) and ``encoder`` (3*side*side, latent_dim) weight
matrices. Real hub-served generators can be wired in by writing such a file.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

LATENT_DIM = 120
SIDE = 32


class BridgeError(Exception):
    """Raised for model-load and data problems; maps to exit code 2."""


@dataclass(frozen=True)
class GeneratorModel:
    """Linear-basis generator with a matching linear encoder.

    Images come out in [-1, 1]; the encoder is the pseudo-inverse-style
    projection of the flattened [-1, 1] pixels back to latent space.
    """

    basis: np.ndarray  # (3*SIDE*SIDE, LATENT_DIM)
    encoder: np.ndarray  # (3*SIDE*SIDE, LATENT_DIM)

    @property
    def latent_dim(self):
        return self.basis.shape[1]

    def generate(self, z: np.ndarray) -> np.ndarray:
        """Latent (d,) -> image (SIDE, SIDE, 3) in [-1, 1]."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise BridgeError(
                f"latent has shape {z.shape}, model needs ({self.latent_dim},)")
        flat = np.tanh(self.basis @ z)
        return flat.reshape(SIDE, SIDE, 3)

    def encode(self, img: np.ndarray) -> np.ndarray:
        """Image (SIDE, SIDE, 3) in [-1, 1] -> latent (d,)."""
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (SIDE, SIDE, 3):
            raise BridgeError(
                f"image has shape {img.shape}, model needs ({SIDE}, {SIDE}, 3)")
        return img.reshape(-1) @ self.encoder


def _builtin_model(seed: int) -> GeneratorModel:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_pix = 3 * SIDE * SIDE
    # smooth spatial basis: low-frequency sinusoids mixed per latent coordinate
    yy, xx = np.mgrid[0:SIDE, 0:SIDE] / SIDE
    feats = []
    for fy in range(4):
        for fx in range(4):
            feats.append(np.cos(2 * np.pi * (fy * yy + fx * xx)))
            feats.append(np.sin(2 * np.pi * (fy * yy + fx * xx)))
    feats = np.stack(feats)  # (32, SIDE, SIDE)
    mix = rng.normal(0.0, 0.3, (3, feats.shape[0], LATENT_DIM))
    basis = np.einsum("cfl,fhw->chwl", mix, feats).reshape(n_pix, LATENT_DIM)
    # small dense component keeps the basis full rank so encoding can invert
    basis += rng.normal(0.0, 0.02, basis.shape)
    encoder = np.linalg.pinv(basis).T
    return GeneratorModel(basis=basis, encoder=encoder)


def load_model(reference: str) -> GeneratorModel:
    """Resolve a model reference to a GeneratorModel."""
    if reference.startswith("builtin:"):
        try:
            seed = int(reference.split(":", 1)[1])
        except ValueError as exc:
            raise BridgeError(f"bad builtin model seed in {reference!r}") from exc
        return _builtin_model(seed)
    path = Path(reference)
    if not path.exists():
        raise BridgeError(f"model weights not found: {path}")
    try:
        payload = np.load(path)
        basis = np.asarray(payload["basis"], dtype=np.float64)
        encoder = np.asarray(payload["encoder"], dtype=np.float64)
    except (KeyError, ValueError, OSError) as exc:
        raise BridgeError(f"cannot load model weights {path}: {exc}") from exc
    if basis.ndim != 2 or basis.shape[0] != 3 * SIDE * SIDE:
        raise BridgeError(f"basis has shape {basis.shape}, "
                          f"expected ({3 * SIDE * SIDE}, d)")
    if encoder.shape != basis.shape:
        raise BridgeError("encoder and basis shapes must match")
    return GeneratorModel(basis=basis, encoder=encoder)
