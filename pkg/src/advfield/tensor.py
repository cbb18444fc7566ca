"""Dense float64 tensors, a few differentiable primitives and the ADVF file format.

Tensors are plain ``torch.Tensor`` objects in float64; reverse-mode
differentiation is torch autograd, whose graph is built per forward pass and
freed after :func:`backward`.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
MAGIC = b"ADVF"


class NonFiniteError(FloatingPointError):
    """Raised when a public operation would publish NaN or Inf values."""


class TensorFormatError(ValueError):
    """Raised for corrupt or truncated ADVF payloads."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return t


_UNARY = {
    "neg": torch.neg,
    "exp": torch.exp,
    "log": torch.log,
    "sqrt": torch.sqrt,
    "square": torch.square,
    "relu": torch.relu,
    "tanh": torch.tanh,
    "abs": torch.abs,
}
_BINARY = {
    "add": torch.add,
    "sub": torch.sub,
    "mul": torch.mul,
    "div": torch.div,
    "max": torch.maximum,
    "min": torch.minimum,
}


def elementwise(op: str, a, b=None) -> torch.Tensor:
    """Apply a named elementwise op; binary ops need equal shapes or a scalar operand."""
    a = a if torch.is_tensor(a) else as_tensor(a)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        out = _UNARY[op](a)
    elif op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = b if torch.is_tensor(b) else as_tensor(b)
        if a.shape != b.shape and a.dim() != 0 and b.dim() != 0:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        out = _BINARY[op](a, b)
    else:
        raise ValueError(f"unknown op {op!r}")
    return check_finite(out, op)


def conv2d(x: torch.Tensor, kernel: torch.Tensor, padding: str = "zero") -> torch.Tensor:
    """Same-size 2D cross-correlation of ``x`` (H×W, C×H×W or N×C×H×W) with a 2D kernel.

    The kernel is applied to every channel independently. ``padding`` is
    ``"zero"`` or ``"replicate"``.
    """
    kernel = kernel if torch.is_tensor(kernel) else as_tensor(kernel)
    if kernel.dim() != 2:
        raise ValueError("kernel must be 2D")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if padding not in ("zero", "replicate"):
        raise ValueError(f"unknown padding mode {padding!r}")
    shape = x.shape
    if x.dim() < 2:
        raise ValueError("input must be at least 2D")
    flat = x.reshape(-1, 1, shape[-2], shape[-1])
    pad = (kw // 2, kw // 2, kh // 2, kh // 2)
    flat = F.pad(flat, pad, mode="constant" if padding == "zero" else "replicate")
    out = F.conv2d(flat, kernel.reshape(1, 1, kh, kw))
    return check_finite(out.reshape(shape), "conv2d")


def backward(loss: torch.Tensor, targets: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` with respect to the named leaf tensors.

    Leaves the loss does not depend on receive zeros. Only the requested
    leaves are differentiated.
    """
    if loss.numel() != 1:
        raise ValueError("loss must be a scalar")
    names = list(targets)
    leaves = [targets[n] for n in names]
    for n, t in zip(names, leaves):
        if not (torch.is_tensor(t) and t.requires_grad):
            raise ValueError(f"target {n!r} is not a leaf of the recorded graph")
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, leaves)}
    grads = torch.autograd.grad(loss.reshape(()), leaves, allow_unused=True)
    out = {}
    for n, t, g in zip(names, leaves, grads):
        out[n] = torch.zeros_like(t).detach() if g is None else check_finite(g.detach(), f"grad[{n}]")
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (numpy in, numpy out)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def max_relative_error(a, b, floor: float = 1e-6) -> float:
    """Max |a-b| / max(|a|, |b|, floor), the comparison used by gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def to_bytes(t) -> bytes:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.array(t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def from_bytes(buf: bytes) -> torch.Tensor:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TensorFormatError("bad magic or truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * n:
        raise TensorFormatError(f"payload size {len(buf) - off} does not match extents {shape}")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape)
    return torch.from_numpy(arr.astype(np.float64))


def save_tensor(t, path) -> None:
    Path(path).write_bytes(to_bytes(t))


def load_tensor(path) -> torch.Tensor:
    return from_bytes(Path(path).read_bytes())
