"""Differentiable building blocks on top of torch.

Every kernel validates its shapes and raises :class:`ShapeError` naming the
kernel and the offending dims.  Spatial reductions are written so that a
circular shift along the width axis permutes nothing but the output columns,
bit for bit; that keeps the convolutional encoder exactly equivariant.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Kernel contract violation."""


def _require(cond: bool, kernel: str, msg: str):
    if not cond:
        raise ShapeError(f"{kernel}: {msg}")


def configure_threads(n: int) -> None:
    """``n == 1`` gives bit-reproducible forward and backward passes."""
    torch.set_num_threads(max(1, int(n)))


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# --------------------------------------------------------------------------
# branch recording: lets the finite-difference oracle notice when a probe
# crosses a kink (activation sign flip, clamp bound, nearest-neighbour switch)

_branch_log: Optional[list] = None


def note_branch(pattern: torch.Tensor) -> None:
    if _branch_log is not None:
        _branch_log.append(pattern.detach().clone())


@contextmanager
def track_branches():
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------
# kernels


def conv3d(x, weight, bias=None, stride=1, padding=0, padding_mode="zeros"):
    """3D convolution over ``(N, C, T, H, W)``.

    ``padding_mode="circular-width"`` wraps the width axis and zero-pads time
    and height.
    """
    _require(x.dim() == 5, "conv3d", f"input must be 5D (N,C,T,H,W), got {tuple(x.shape)}")
    _require(weight.dim() == 5, "conv3d", f"weight must be 5D, got {tuple(weight.shape)}")
    _require(x.shape[1] == weight.shape[1], "conv3d",
             f"input channels {x.shape[1]} != weight in-channels {weight.shape[1]}")
    padding = _triple(padding)
    if padding_mode == "circular-width":
        if padding[2]:
            x = F.pad(x, (padding[2], padding[2], 0, 0, 0, 0), mode="circular")
        padding = (padding[0], padding[1], 0)
    elif padding_mode != "zeros":
        raise ValueError(f"conv3d: unknown padding mode {padding_mode!r}")
    for axis, (size, k, p) in enumerate(zip(x.shape[2:], weight.shape[2:], padding)):
        _require(size + 2 * p >= k, "conv3d", f"axis {axis}: extent {size} + 2*{p} < kernel {k}")
    return F.conv3d(x, weight, bias, stride=stride, padding=padding)


def transposed_conv3d(x, weight, bias=None, stride=1):
    _require(x.dim() == 5, "transposed_conv3d", f"input must be 5D, got {tuple(x.shape)}")
    _require(x.shape[1] == weight.shape[0], "transposed_conv3d",
             f"input channels {x.shape[1]} != weight in-channels {weight.shape[0]}")
    return F.conv_transpose3d(x, weight, bias, stride=stride)


def conv2d(x, weight, bias=None, padding=0, padding_mode="zeros"):
    _require(x.dim() == 4, "conv2d", f"input must be 4D (N,C,H,W), got {tuple(x.shape)}")
    _require(x.shape[1] == weight.shape[1], "conv2d",
             f"input channels {x.shape[1]} != weight in-channels {weight.shape[1]}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if padding_mode == "circular-width":
        if pw:
            x = F.pad(x, (pw, pw, 0, 0), mode="circular")
        pw = 0
    return F.conv2d(x, weight, bias, padding=(ph, pw))


def conv1d_circular(x, weight, bias=None):
    """Odd-kernel 1D convolution with wrap-around padding, ``(N, C_in, L)``."""
    _require(x.dim() == 3, "conv1d_circular", f"input must be 3D, got {tuple(x.shape)}")
    k = weight.shape[-1]
    _require(k % 2 == 1, "conv1d_circular", f"kernel size must be odd, got {k}")
    _require(x.shape[-1] >= k // 2, "conv1d_circular",
             f"length {x.shape[-1]} too short for kernel {k}")
    if k > 1:
        x = F.pad(x, (k // 2, k // 2), mode="circular")
    return F.conv1d(x, weight, bias)


def linear(x, weight, bias=None):
    _require(x.shape[-1] == weight.shape[1], "linear",
             f"input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    return F.linear(x, weight, bias)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    note_branch(x > 0)
    return F.leaky_relu(x, slope)


def abs_(x):
    note_branch(torch.sign(x))
    return x.abs()


def clamp(x, lo, hi):
    note_branch((x > lo).to(torch.int8) - (x < hi).to(torch.int8))
    return x.clamp(lo, hi)


def sigmoid(x):
    return torch.sigmoid(x)


def softmax(x, axis: int = -1):
    return torch.softmax(x, dim=axis)


def concat(tensors: Sequence[torch.Tensor], axis: int):
    ref = tensors[0].shape
    for t in tensors[1:]:
        _require(t.dim() == len(ref), "concat", f"rank mismatch {tuple(ref)} vs {tuple(t.shape)}")
        for d, (a, b) in enumerate(zip(ref, t.shape)):
            _require(d == axis % len(ref) or a == b, "concat",
                     f"dim {d} mismatch {tuple(ref)} vs {tuple(t.shape)}")
    return torch.cat(list(tensors), dim=axis)


def add(a, b):
    _require(a.shape == b.shape, "add", f"{tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def mul(a, b):
    _require(a.shape == b.shape, "mul", f"{tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def reshape(x, shape):
    _require(math.prod(shape) == x.numel() or -1 in shape, "reshape",
             f"cannot view {tuple(x.shape)} as {tuple(shape)}")
    return x.reshape(shape)


def permute(x, dims):
    _require(sorted(dims) == list(range(x.dim())), "permute",
             f"{tuple(dims)} is not a permutation of {x.dim()} axes")
    return x.permute(*dims)


def global_avg_pool(x):
    """Mean over all axes after ``(N, C)``; shift-invariant along the last axis."""
    _require(x.dim() >= 3, "global_avg_pool", f"input must be at least 3D, got {tuple(x.shape)}")
    count = math.prod(x.shape[2:])
    if x.dim() > 3:
        x = x.sum(dim=tuple(range(2, x.dim() - 1)))
    # summing in sorted order makes the reduction independent of column order
    return x.sort(dim=-1).values.sum(dim=-1) / count


def scaled_dot_product_attention(q, k, v):
    """``(N, heads, L, d)`` inputs; plain softmax attention without masking."""
    _require(q.shape == k.shape, "scaled_dot_product_attention",
             f"query {tuple(q.shape)} vs key {tuple(k.shape)}")
    _require(k.shape[:-1] == v.shape[:-1], "scaled_dot_product_attention",
             f"key {tuple(k.shape)} vs value {tuple(v.shape)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return softmax(scores, -1) @ v


def sample_norm(x, weight, bias, eps=1e-5, mean=None, var=None):
    """Per-sample, per-channel normalisation over all spatial axes.

    Pass ``mean``/``var`` (shape ``(C,)``) to normalise with fixed statistics.
    """
    shape = (1, -1) + (1,) * (x.dim() - 2)
    if mean is None:
        mu = global_avg_pool(x)
        var_ = global_avg_pool((x - mu.view(*mu.shape, *(1,) * (x.dim() - 2))) ** 2)
        mu = mu.view(*mu.shape, *(1,) * (x.dim() - 2))
        var_ = var_.view(*var_.shape, *(1,) * (x.dim() - 2))
    else:
        mu, var_ = mean.view(shape), var.view(shape)
    return (x - mu) / torch.sqrt(var_ + eps) * weight.view(shape) + bias.view(shape)


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


# --------------------------------------------------------------------------
# modules


class Conv3d(nn.Conv3d):
    """``nn.Conv3d`` whose padding wraps the width axis when ``circular=True``."""

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, circular=True, bias=True):
        super().__init__(in_ch, out_ch, kernel_size, stride=stride, padding=padding, bias=bias)
        self.circular = circular

    def forward(self, x):
        mode = "circular-width" if self.circular else "zeros"
        return conv3d(x, self.weight, self.bias, self.stride, self.padding, mode)


class ConvTranspose3d(nn.ConvTranspose3d):
    def forward(self, x):
        return transposed_conv3d(x, self.weight, self.bias, self.stride)


class Conv2d(nn.Conv2d):
    def __init__(self, in_ch, out_ch, kernel_size, padding=0, circular=True):
        super().__init__(in_ch, out_ch, kernel_size, padding=padding)
        self.circular = circular

    def forward(self, x):
        mode = "circular-width" if self.circular else "zeros"
        return conv2d(x, self.weight, self.bias, self.padding, mode)


class SampleNorm(nn.Module):
    """Batch-norm layer that normalises each sample over its own spatial axes.

    At batch size one this coincides with batch norm; running statistics are
    tracked for evaluation mode.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        if not self.training:
            return sample_norm(x, self.weight, self.bias, self.eps, self.running_mean, self.running_var)
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"batch_norm_3d: {x.shape[1]} channels, layer has {self.weight.shape[0]}")
        out = sample_norm(x, self.weight, self.bias, self.eps)
        with torch.no_grad():
            mu = global_avg_pool(x)
            spatial = (1,) * (x.dim() - 2)
            var = global_avg_pool((x - mu.view(*mu.shape, *spatial)) ** 2)
            n = math.prod(x.shape[2:])
            unbiased = var * n / max(n - 1, 1)
            self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mu.mean(0))
            self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.mean(0))
        return out


def eca_kernel_size(channels: int, gamma: int = 2, b: int = 1) -> int:
    t = int(abs(math.log2(channels) / gamma + b / gamma))
    return t if t % 2 else t + 1


class ECA(nn.Module):
    """Efficient channel attention: pooled descriptor, circular 1D conv, sigmoid gate."""

    def __init__(self, channels: int):
        super().__init__()
        self.k = eca_kernel_size(channels)
        self.conv = nn.Conv1d(1, 1, self.k, bias=True)
        nn.init.zeros_(self.conv.bias)

    def gate(self, x):
        desc = global_avg_pool(x)  # (N, C)
        z = conv1d_circular(desc.unsqueeze(1), self.conv.weight, self.conv.bias)
        return sigmoid(z.squeeze(1))

    def forward(self, x):
        g = self.gate(x)
        return x * g.view(*g.shape, *(1,) * (x.dim() - 2))


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"attention: {heads} heads do not divide width {dim}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):  # (N, L, D)
        n, L, d = x.shape
        split = lambda t: t.view(n, L, self.heads, d // self.heads).transpose(1, 2)
        q, k, v = (split(linear(x, m.weight, m.bias)) for m in (self.q, self.k, self.v))
        mixed = scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(n, L, d)
        return linear(mixed, self.out.weight, self.out.bias)


class TransformerLayer(nn.Module):
    """Pre-norm self-attention and feed-forward sublayers, each with a residual."""

    def __init__(self, dim: int, heads: int, ff_width: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_width)
        self.ff2 = nn.Linear(ff_width, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        h = leaky_relu(linear(self.norm2(x), self.ff1.weight, self.ff1.bias))
        return x + linear(h, self.ff2.weight, self.ff2.bias)


# --------------------------------------------------------------------------
# gradients and optimisation


def backward(loss: torch.Tensor, params: Optional[Iterable[torch.Tensor]] = None) -> None:
    """Backpropagate a scalar loss; unreachable ``params`` get zero gradients."""
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must have exactly one element, got shape {tuple(loss.shape)}")
    params = list(params) if params is not None else []
    if loss.requires_grad:
        loss.backward()
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def make_adam(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@dataclass
class GradCheck:
    name: str
    rel_err: float
    n_checked: int
    tol: float
    n_retried: int = 0  # entries re-probed with a smaller step after crossing a kink

    @property
    def ok(self) -> bool:
        return bool(self.rel_err < self.tol)


def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, indices, eps=1e-4,
                       min_eps=1e-8):
    """Numerical derivative of scalar ``fn()`` w.r.t. chosen flat entries of ``tensor``.

    A probe whose recorded branch decisions differ from the unperturbed
    evaluation straddles a kink; it is repeated with a 10x smaller step until
    the branches agree.  Returns ``(derivatives, n_retried)``.
    """
    flat = tensor.data.view(-1)
    out = np.empty(len(indices))
    retried = 0
    with torch.no_grad():
        with track_branches() as base:
            fn()
        for j, i in enumerate(indices):
            orig = flat[i].item()
            h = eps
            while True:
                flat[i] = orig + h
                with track_branches() as up:
                    plus = fn().item()
                flat[i] = orig - h
                with track_branches() as down:
                    minus = fn().item()
                flat[i] = orig
                smooth = _same_branches(base, up) and _same_branches(base, down)
                if smooth or h / 10 < min_eps:
                    break
                h /= 10
            retried += h != eps
            out[j] = (plus - minus) / (2 * h)
    return out, retried


def check_gradients(name, fn, tensors: Sequence[torch.Tensor], eps=1e-4, tol=1e-3,
                    max_entries: Optional[int] = None, rng=None) -> GradCheck:
    """Compare autograd against central differences on (a sample of) entries.

    The error is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    tensors = list(tensors)
    loss = fn()
    if loss.numel() != 1:
        raise ShapeError(f"gradcheck {name}: function must return a scalar")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    analytic, numeric = [], []
    retried = 0
    sizes = [t.numel() for t in tensors]
    pool = [(ti, i) for ti, n in enumerate(sizes) for i in range(n)]
    if max_entries is not None and len(pool) > max_entries:
        pick = rng.choice(len(pool), size=max_entries, replace=False)
        pool = [pool[j] for j in sorted(pick)]
    for ti, t in enumerate(tensors):
        idx = [i for tj, i in pool if tj == ti]
        if not idx:
            continue
        g = grads[ti]
        g = torch.zeros_like(t) if g is None else g
        analytic.append(g.detach().reshape(-1)[idx].cpu().numpy())
        num, r = central_difference(fn, t, idx, eps)
        numeric.append(num)
        retried += r
    a = np.concatenate(analytic)
    n = np.concatenate(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    err = 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)
    return GradCheck(name, err, len(a), tol, retried)
