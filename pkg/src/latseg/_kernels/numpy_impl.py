"""Pure numpy implementations of the hot kernels.

Always importable; used as the fallback when the compiled extension is
unavailable. Convolutions are stride-1 "same math" as the compiled path but
realized through im2col + BLAS, so floating point results may differ from the
compiled backend at the last-ulp level (summation order).
"""

import numpy as np

NAME = "numpy"


def _im2col(x, k, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, k, k, ho, wo), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    # copy into (n, c*k*k, ho*wo)
    return np.ascontiguousarray(view).reshape(n, c * k * k, ho * wo), ho, wo


def conv2d_forward(x, w, b, pad):
    """x: (N,C,H,W), w: (F,C,K,K), b: (F,). Stride 1, zero padding."""
    f, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, pad)
    y = np.einsum("fj,njl->nfl", w.reshape(f, c * k * k), cols, optimize=True)
    y += b[None, :, None]
    return y.reshape(x.shape[0], f, ho, wo)


def conv2d_backward(x, w, dy, pad):
    """Gradients of conv2d_forward. Returns (dx, dw, db)."""
    f, c, k, _ = w.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, k, pad)
    dyf = dy.reshape(n, f, ho * wo)
    db = dyf.sum(axis=(0, 2))
    dw = np.einsum("njl,nfl->fj", cols, dyf, optimize=True).reshape(f, c, k, k)
    # dx is a full correlation of dy with the flipped kernel
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = conv2d_forward(dy, np.ascontiguousarray(w_flip),
                        np.zeros(c, dtype=x.dtype), k - 1 - pad)
    return dx, dw, db


def label_components(mask):
    """4-connected labeling of a binary (H,W) uint8 mask.

    Returns (labels int32 with 0 = background, n_components). Label values
    are assigned in first-encounter row-major order.
    """
    from scipy import ndimage

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)
    labels, n = ndimage.label(mask, structure=structure)
    return labels.astype(np.int32), int(n)
