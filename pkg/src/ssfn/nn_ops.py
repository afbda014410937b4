"""Differentiable tensor operations used by the network.

Thin, shape-checked wrappers over ``torch.nn.functional`` plus a hand-written
ADAM update (so optimizer state is explicit and serializable) and a central
finite-difference gradient checker.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

KINK_TOL = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check4(x, name="x"):
    if x.dim() != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {tuple(x.shape)}")


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None, pad: int | None = None):
    """Zero-padded cross-correlation; kernel layout (C_out, C_in, k, k)."""
    _check4(x)
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {c_in}")
    return F.conv2d(x, kernel, bias, padding=kh // 2 if pad is None else pad)


def deconv2d_k2s2(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None):
    """Stride-2 transposed convolution; kernel layout (C_in, C_out, 2, 2)."""
    _check4(x)
    if tuple(kernel.shape[2:]) != (2, 2):
        raise ShapeError(f"deconv kernel must be 2x2, got {tuple(kernel.shape[2:])}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[0]}")
    return F.conv_transpose2d(x, kernel, bias, stride=2)


def avg_pool_k2s2(x: torch.Tensor):
    _check4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg pool needs even spatial dims, got {tuple(x.shape[2:])}")
    return F.avg_pool2d(x, 2, 2)


def pixel_shuffle(x: torch.Tensor, r: int):
    _check4(x)
    if x.shape[1] % (r * r):
        raise ShapeError(f"{x.shape[1]} channels not divisible by r^2={r * r}")
    return x if r == 1 else F.pixel_shuffle(x, r)


def pixel_unshuffle(x: torch.Tensor, r: int):
    _check4(x)
    return x if r == 1 else F.pixel_unshuffle(x, r)


def relu(x: torch.Tensor):
    return torch.relu(x)


class _L1(torch.autograd.Function):
    # sign() gives subgradient 0 at zero difference

    @staticmethod
    def forward(ctx, pred, target):
        diff = pred - target
        ctx.save_for_backward(diff)
        return diff.abs().mean()

    @staticmethod
    def backward(ctx, grad):
        (diff,) = ctx.saved_tensors
        g = grad * torch.sign(diff) / diff.numel()
        return g, -g


def l1_loss(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return _L1.apply(pred, target)


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict, state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected ADAM update of every tensor in ``params`` in place.

    Gradients are read from ``tensor.grad``. If any gradient is non-finite the
    whole step is aborted before anything is modified.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {name!r}")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = torch.zeros_like(p)
            v = state.v[name] = torch.zeros_like(p)
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.sub_(lr * (m / bc1) / denom)
    state.step = t


# ---------------------------------------------------------------- grad check

def grad_check(fn, inputs, h: float = 1e-3, samples: int | None = None, seed: int = 0,
               skip_kinks: bool = False, details: bool = False):
    """Max relative error between autograd and central differences.

    ``fn`` maps the list ``inputs`` (tensors) to a scalar tensor. Everything is
    evaluated in float64. With ``samples`` set, that many coordinates are drawn
    uniformly over all inputs; otherwise every coordinate is checked.

    With ``skip_kinks`` a coordinate is ignored when the central differences
    at ``h`` and ``h / 2`` disagree beyond ``KINK_TOL`` (a ReLU or L1 kink
    lies inside the stencil). With ``details`` the return value is
    ``(max_error, checked, skipped)``.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(xs)
    if not torch.isfinite(out):
        raise NonFiniteError("function value is not finite")
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads)]

    sizes = [x.numel() for x in xs]
    total = sum(sizes)
    if samples is None or samples >= total:
        coords = range(total)
    else:
        coords = np.random.default_rng(seed).choice(total, size=samples, replace=False)
    offsets = np.cumsum([0] + sizes)

    def central(view, idx, orig, step):
        view[idx] = orig + step
        f_plus = fn(xs).item()
        view[idx] = orig - step
        f_minus = fn(xs).item()
        view[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"non-finite evaluation at coordinate {flat}")
        return (f_plus - f_minus) / (2 * step)

    worst, checked, skipped = 0.0, 0, 0
    with torch.no_grad():
        for flat in coords:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[k])
            view = xs[k].view(-1)
            orig = view[idx].item()
            numeric = central(view, idx, orig, h)
            if skip_kinks:
                half = central(view, idx, orig, h / 2)
                if abs(numeric - half) > KINK_TOL * max(abs(numeric), abs(half), 1e-8):
                    skipped += 1
                    continue
            analytic = grads[k].view(-1)[idx].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
    if skipped:
        log.debug("grad_check skipped %d kink coordinates", skipped)
    return (worst, checked, skipped) if details else worst
