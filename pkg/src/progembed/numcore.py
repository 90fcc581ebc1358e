"""Dense numeric kernel shared by the embedding and tree models.

Everything is float64 numpy. Randomness always flows through a seeded PCG64
generator (numpy's default_rng) so corpora and training runs reproduce
exactly. Checkpoints are a self-describing binary of named tensors.
"""

from __future__ import annotations

import struct

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the single source of randomness everywhere."""
    return np.random.default_rng(seed)


# --- primitive ops with backward contracts ----------------------------------


def affine(W: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    if W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ValueError(f"affine shape mismatch: {W.shape} @ {x.shape} + {b.shape}")
    return W @ x + b


def affine_backward(
    W: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a loss through y = Wx + b given dL/dy."""
    return np.outer(grad_out, x), W.T @ grad_out, grad_out.copy()


def tanh_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """dL/dx for y = tanh(x), expressed through the activation y."""
    return grad_out * (1.0 - y * y)


def block_softmax(x: np.ndarray, block_starts: np.ndarray) -> np.ndarray:
    """Softmax applied independently within each one-hot block.

    Works on a vector or a (batch, dim) matrix; blocks are contiguous slices
    starting at block_starts.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    starts = np.asarray(block_starts)
    sizes = np.diff(np.append(starts, x.shape[1]))
    reps = np.repeat(np.arange(len(starts)), sizes)
    mx = np.maximum.reduceat(x, starts, axis=1)
    e = np.exp(x - mx[:, reps])
    sums = np.add.reduceat(e, starts, axis=1)
    out = e / sums[:, reps]
    return out[0] if single else out


def cross_entropy(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-row sum of -log p at the one-hot target index, over all blocks."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    p = np.clip(pred, 1e-300, None)
    return -(target * np.log(p)).sum(axis=-1)


def softmax_xent(
    logits: np.ndarray, target: np.ndarray, block_starts: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Block softmax + cross entropy; returns (loss per row, probs, dlogits).

    The gradient of the combined head is probs - target, per block.
    """
    probs = block_softmax(logits, block_starts)
    return cross_entropy(probs, target), probs, probs - target


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable binary cross entropy on logits; returns (loss, dloss/dz)."""
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - y


# --- optimizer ---------------------------------------------------------------


class Adagrad:
    """Per-parameter adaptive step sizes from accumulated squared gradients.

    Keys absent from a step's gradient dict are untouched, so sparse updates
    (e.g. per-subtree matrices) come for free.
    """

    def __init__(self, lr: float, eps: float = 1e-8):
        self.lr = lr
        self.eps = eps
        self.acc: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        for key, g in grads.items():
            a = self.acc.get(key)
            if a is None:
                a = self.acc[key] = np.zeros_like(g)
            a += g * g
            params[key] -= self.lr * g / (np.sqrt(a) + self.eps)


# --- ridge regression --------------------------------------------------------


def ridge_solve(FQ: np.ndarray, FP: np.ndarray, lam: float) -> np.ndarray:
    """Solve M (FP FP^T + lam I) = FQ FP^T for M; columns are encodings."""
    m = FP.shape[0]
    A = FP @ FP.T + lam * np.eye(m)
    B = FQ @ FP.T
    return np.linalg.solve(A, B.T).T


def ridge_residual(M: np.ndarray, FQ: np.ndarray, FP: np.ndarray, lam: float) -> float:
    """Max-abs residual of the normal equations at M."""
    m = FP.shape[0]
    A = FP @ FP.T + lam * np.eye(m)
    return float(np.abs(M @ A - FQ @ FP.T).max())


# --- gradient checking -------------------------------------------------------


def grad_check(
    loss_fn,
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-5,
    max_coords: int = 200,
) -> float:
    """Max relative error between analytic grads and central differences.

    loss_fn() must evaluate the loss at the current (mutable) params; up to
    max_coords coordinates are sampled per parameter group.
    """
    worst = 0.0
    for name, p in params.items():
        g = analytic[name]
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn()
            flat[i] = orig - h
            lo = loss_fn()
            flat[i] = orig
            num = (hi - lo) / (2.0 * h)
            denom = max(abs(num) + abs(gflat[i]), 1e-8)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"PEMB"
_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 tensors: magic, version, then sorted entries."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8")
            out[name] = data.reshape(shape).copy()
    return out
