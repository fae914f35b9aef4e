"""Differentiation primitives, optimizer helpers and a finite-difference oracle.

Reverse-mode differentiation is delegated to torch autograd; the autograd
graph plays the role of the tape.  This module fixes the set of primitives the
rest of the package relies on, gives them shape-checked entry points, and
provides an independent float64 central-difference oracle used to verify every
gradient the training code depends on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible input shapes."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(list(s)) for s in self.shapes)
        super().__init__(f"{primitive}: incompatible shapes {desc}")


class NumericError(FloatingPointError):
    """Raised in checked mode when a NaN or Inf shows up."""


def set_deterministic(seed: int | None = None) -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def _broadcastable(name, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(name, a.shape, b.shape) from None


def _binary(name, op):
    def fn(a, b):
        _broadcastable(name, a, b)
        return op(a, b)

    return fn


def _matmul(a, b):
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def _conv2d(x, w, b=None, stride=1):
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    return F.conv2d(x, w, b, stride=stride, padding=w.shape[-1] // 2)


def _avgpool2(x):
    if x.dim() != 4 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError("avgpool2", x.shape)
    return F.avg_pool2d(x, 2)


def _group_norm(x, groups, weight=None, bias=None, eps=1e-5):
    if x.dim() < 2 or x.shape[1] % groups:
        raise ShapeError("group_norm", x.shape, (groups,))
    return F.group_norm(x, groups, weight, bias, eps)


def _layer_norm(x, weight=None, bias=None, eps=1e-5):
    return F.group_norm(x, 1, weight, bias, eps) if x.dim() > 2 else F.layer_norm(
        x, x.shape[-1:], weight, bias, eps
    )


def _concat(*xs, dim=-1):
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(
            p != q for i, (p, q) in enumerate(zip(ref, other)) if i != dim % len(ref)
        ):
            raise ShapeError("concat", xs[0].shape, x.shape)
    return torch.cat(xs, dim=dim)


def _slice(x, start, stop, dim=-1):
    return x.narrow(dim, start, stop - start)


def _broadcast(x, shape):
    try:
        return x.expand(*shape)
    except RuntimeError:
        raise ShapeError("broadcast", x.shape, shape) from None


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": _binary("add", torch.add),
    "sub": _binary("sub", torch.sub),
    "mul": _binary("mul", torch.mul),
    "div": _binary("div", torch.div),
    "matmul": _matmul,
    "conv2d": _conv2d,
    "avgpool2": _avgpool2,
    "relu": torch.relu,
    "silu": F.silu,
    "softplus": F.softplus,
    "sigmoid": torch.sigmoid,
    "softmax": lambda x, dim=-1: torch.softmax(x, dim=dim),
    "log_softmax": lambda x, dim=-1: torch.log_softmax(x, dim=dim),
    "exp": torch.exp,
    "expm1": torch.expm1,
    "log": torch.log,
    "sqrt": torch.sqrt,
    "sin": torch.sin,
    "cos": torch.cos,
    "sum": lambda x, dim=None: x.sum() if dim is None else x.sum(dim),
    "mean": lambda x, dim=None: x.mean() if dim is None else x.mean(dim),
    "cumsum": lambda x, dim=-1: torch.cumsum(x, dim=dim),
    "concat": _concat,
    "slice": _slice,
    "broadcast": _broadcast,
    "group_norm": _group_norm,
    "layer_norm": _layer_norm,
}


@dataclass
class TapeRecord:
    primitive: str
    input_shapes: tuple
    output_shape: tuple


@dataclass
class Tape:
    """Ordered log of primitives evaluated through :func:`forward`.

    The backward pass itself runs on torch's autograd graph; the record kept
    here is for inspection and for checked-mode NaN/Inf detection.
    """

    checked: bool = False
    records: list[TapeRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)


def forward(tape: Tape | None, primitive: str, *inputs, **kwargs) -> Tensor:
    """Evaluate ``primitive`` on ``inputs`` and record it on ``tape``."""
    try:
        fn = PRIMITIVES[primitive]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None
    out = fn(*inputs, **kwargs)
    if tape is not None:
        tape.records.append(
            TapeRecord(
                primitive,
                tuple(tuple(x.shape) for x in inputs if isinstance(x, Tensor)),
                tuple(out.shape),
            )
        )
        if tape.checked and not torch.isfinite(out).all():
            raise NumericError(f"{primitive} produced non-finite values")
    return out


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``loss`` for each of ``params``.

    Parameters the loss does not depend on get a zero gradient.
    """
    if loss.numel() != 1:
        raise ShapeError("backward", loss.shape, ())
    params = list(params)
    grads = torch.autograd.grad(loss.reshape(()), params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------


def finite_diff_grad(
    function: Callable[..., float | Tensor],
    inputs: Sequence[np.ndarray | Tensor],
    h: float = 1e-4,
    coords: Sequence[np.ndarray | None] | None = None,
) -> list[np.ndarray]:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for every input coordinate.

    ``function`` is called with float64 tensors shaped like ``inputs`` and must
    return a scalar.  ``coords`` optionally restricts each input to a set of
    flat indices; untouched coordinates are reported as NaN.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = [np.array(x.detach().cpu().numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
            for x in inputs]

    def call(arrays):
        with torch.no_grad():
            val = function(*[torch.from_numpy(a.copy()) for a in arrays])
        return float(val)

    grads = []
    for k, x in enumerate(base):
        g = np.full(x.size, np.nan)
        idx = range(x.size) if coords is None or coords[k] is None else coords[k]
        flat = x.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = call(base)
            flat[i] = orig - h
            fm = call(base)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(x.shape))
    return grads


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


def make_adam(params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    return torch.optim.Adam(list(params), lr=lr, betas=betas, eps=eps)


def adam_step(optimizer: torch.optim.Optimizer, checked: bool = False) -> None:
    """One bias-corrected Adam update.

    Missing gradients are treated as zeros so the step counter advances for
    every parameter, keeping both optimizers' states aligned with the
    iteration count.
    """
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            elif checked and not torch.isfinite(p.grad).all():
                raise NumericError("non-finite gradient passed to adam_step")
    optimizer.step()


def adam_state(optimizer: torch.optim.Optimizer, param: Tensor) -> dict:
    """First/second moments and step count for one parameter (empty before step 1)."""
    st = optimizer.state.get(param, {})
    if not st:
        return {}
    return {"m": st["exp_avg"], "v": st["exp_avg_sq"], "step": int(st["step"])}


def count_params(params) -> int:
    return sum(math.prod(p.shape) for p in params)
