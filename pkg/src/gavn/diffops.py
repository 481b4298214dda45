"""Differentiable array operators the network is built from.

Every feature map is a ``(batch, channel, height, width)`` tensor. Gradients
come from torch autograd; :func:`grad_check` compares them against central
finite differences so each operator can be verified independently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.1


def _check_grid4(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ValueError(f"{name} must have 4 axes (B, C, H, W), got shape {tuple(x.shape)}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty axis: {tuple(x.shape)}")


@contextmanager
def _im2col_backend():
    """Route F.conv2d through PyTorch's im2col + GEMM kernel.

    oneDNN picks a different reduction order for the padded input of
    :func:`conv2d` than for the tiled input of :func:`deform_conv2d`. On the
    im2col path both build the same column matrix at zero offset, so the two
    operators agree to the bit.
    """
    prev = torch.backends.mkldnn.enabled
    torch.backends.mkldnn.enabled = False
    try:
        yield
    finally:
        torch.backends.mkldnn.enabled = prev


def reflect_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    if pad == 0:
        return x
    h, w = x.shape[-2:]
    if pad >= h or pad >= w:
        raise ValueError(f"reflect padding {pad} needs spatial size > {pad}, got {h}x{w}")
    return F.pad(x, (pad, pad, pad, pad), mode="reflect")


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int | None = None,
) -> torch.Tensor:
    """2-D convolution with reflect padding.

    ``padding`` defaults to ``k // 2``. Output size is
    ``floor((H + 2*pad - k) / stride) + 1``.
    """
    _check_grid4(x)
    if weight.dim() != 4:
        raise ValueError(f"weight must be (out_ch, in_ch, k, k), got {tuple(weight.shape)}")
    out_ch, in_ch, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != in_ch:
        raise ValueError(
            f"channel mismatch: input has {x.shape[1]} channels, weight expects {in_ch} "
            f"(x {tuple(x.shape)}, weight {tuple(weight.shape)})"
        )
    if bias is not None and bias.shape != (out_ch,):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match out_ch={out_ch}")
    pad = kh // 2 if padding is None else padding
    with _im2col_backend():
        return F.conv2d(reflect_pad(x, pad), weight, bias, stride=stride)


def bilinear_sample(feat: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``feat`` at continuous pixel coordinates.

    Args:
        feat: (B, C, H, W) feature map.
        coords: (B, 2, H', W'); channel 0 is x (column), channel 1 is y (row).
            Coordinates outside the map are clamped to the border.

    Returns:
        (B, C, H', W') sampled values, differentiable w.r.t. feat and coords.
    """
    _check_grid4(feat, "feat")
    if coords.dim() != 4 or coords.shape[1] != 2 or coords.shape[0] != feat.shape[0]:
        raise ValueError(
            f"coords must be (B, 2, H', W') with B={feat.shape[0]}, got {tuple(coords.shape)}"
        )
    b, c, h, w = feat.shape
    ho, wo = coords.shape[-2:]
    x = coords[:, 0].clamp(0, w - 1)
    y = coords[:, 1].clamp(0, h - 1)

    # the left/top neighbour stays one short of the border so the right/bottom
    # neighbour is always valid; a width-1 axis collapses to a single tap
    # NaN coordinates index tap 0 but keep NaN weights, so the output is NaN rather than a crash
    x0 = torch.nan_to_num(x.detach(), nan=0.0).floor().clamp(0, max(w - 2, 0))
    y0 = torch.nan_to_num(y.detach(), nan=0.0).floor().clamp(0, max(h - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = feat.reshape(b, c, h * w)

    def gather(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).reshape(b, 1, ho * wo).expand(b, c, ho * wo)
        return flat.gather(2, idx).reshape(b, c, ho, wo)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def deform_conv2d(
    x: torch.Tensor,
    offsets: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deformable convolution, stride 1, same-size output.

    ``offsets`` holds ``2*k*k`` channels ordered ``(dx_0, dy_0, dx_1, dy_1, ...)``
    with taps in row-major order. The input is reflect-padded before sampling,
    so zero offsets reproduce :func:`conv2d` exactly.
    """
    _check_grid4(x)
    _check_grid4(offsets, "offsets")
    out_ch, in_ch, k, kw = weight.shape
    if k != kw or k % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {k}x{kw}")
    if x.shape[1] != in_ch:
        raise ValueError(f"channel mismatch: input has {x.shape[1]} channels, weight expects {in_ch}")
    b, _, h, w = x.shape
    if offsets.shape[1] != 2 * k * k:
        raise ValueError(f"offsets must have 2*k*k = {2 * k * k} channels, got {offsets.shape[1]}")
    if offsets.shape[0] != b or offsets.shape[-2:] != (h, w):
        raise ValueError(f"offsets shape {tuple(offsets.shape)} does not match input {tuple(x.shape)}")

    pad = k // 2
    xp = reflect_pad(x, pad)
    dtype, device = x.dtype, x.device
    ys = torch.arange(h, dtype=dtype, device=device).view(1, h, 1)
    xs = torch.arange(w, dtype=dtype, device=device).view(1, 1, w)
    ty = torch.arange(k, dtype=dtype, device=device).repeat_interleave(k).view(k * k, 1, 1)
    tx = torch.arange(k, dtype=dtype, device=device).repeat(k).view(k * k, 1, 1)
    # padded-frame coordinates of every tap, (k*k, H, W)
    base_x = (xs + tx).expand(k * k, h, w)
    base_y = (ys + ty).expand(k * k, h, w)

    off = offsets.view(b, k * k, 2, h, w)
    sx = base_x + off[:, :, 0]
    sy = base_y + off[:, :, 1]
    coords = torch.stack([sx, sy], dim=1).reshape(b, 2, k * k * h, w)
    cols = bilinear_sample(xp, coords).view(b, in_ch, k, k, h, w)
    # lay each output position's k x k samples out as a k x k block; a stride-k
    # convolution then performs the same reduction as the plain convolution,
    # so zero offsets agree with conv2d to the bit
    tiles = cols.permute(0, 1, 4, 2, 5, 3).reshape(b, in_ch, h * k, w * k)
    with _im2col_backend():
        return F.conv2d(tiles, weight, bias, stride=k)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r) sub-pixel rearrangement."""
    _check_grid4(x)
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} is not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    return x.view(b, oc, r, r, h, w).permute(0, 1, 4, 2, 5, 3).reshape(b, oc, h * r, w * r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    _check_grid4(x)
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} is not divisible by r = {r}")
    return x.view(b, c, h // r, r, w // r, r).permute(0, 1, 3, 5, 2, 4).reshape(b, c * r * r, h // r, w // r)


def leaky(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def upsample_offsets(off: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 upsampling of an offset field; values are doubled to stay in pixel units."""
    return 2.0 * F.interpolate(off, scale_factor=2, mode="bilinear", align_corners=False)


class Conv(nn.Module):
    """Reflect-padded convolution layer.

    Weights are drawn from N(0, 2/fan_in); ``zero_init`` zeroes weight and bias.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, k, k))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        if zero_init:
            nn.init.zeros_(self.weight)
        else:
            nn.init.normal_(self.weight, 0.0, math.sqrt(2.0 / (in_ch * k * k)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class DeformConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, k: int = 3):
        super().__init__()
        self.k = k
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, k, k))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        nn.init.normal_(self.weight, 0.0, math.sqrt(2.0 / (in_ch * k * k)))

    def forward(self, x: torch.Tensor, offsets: torch.Tensor) -> torch.Tensor:
        return deform_conv2d(x, offsets, self.weight, self.bias)


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple[int, int] | None = None  # (input index, flat element index)
    message: str = ""


def grad_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-6,
    seed: int = 0,
    wrt: Sequence[int] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of ``op`` with central finite differences.

    The scalar probed is ``<op(*inputs), v>`` for a fixed random cotangent ``v``.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``. Inputs are
    promoted to float64.
    """
    xs = [t.detach().to(torch.float64).clone() for t in inputs]
    wrt = list(range(len(xs))) if wrt is None else list(wrt)
    for i in wrt:
        xs[i].requires_grad_(True)

    with torch.no_grad():
        out0 = op(*xs)
    gen = torch.Generator().manual_seed(seed)
    v = torch.randn(out0.shape, generator=gen, dtype=torch.float64)

    out = op(*xs)
    analytic = torch.autograd.grad((out * v).sum(), [xs[i] for i in wrt], allow_unused=True)

    worst_err, worst_loc = 0.0, None
    for pos, i in enumerate(wrt):
        a = analytic[pos]
        a = torch.zeros_like(xs[i]) if a is None else a
        if not torch.isfinite(a).all():
            bad = int(torch.nonzero(~torch.isfinite(a.flatten()))[0])
            return GradCheckReport(math.inf, False, (i, bad), f"non-finite analytic gradient in input {i} at {bad}")
        base = xs[i].detach()
        flat = base.flatten()
        numeric = torch.empty_like(flat)
        with torch.no_grad():
            for e in range(flat.numel()):
                orig = flat[e].item()
                args = [x.detach() for x in xs]
                pert = flat.clone()
                pert[e] = orig + step
                args[i] = pert.view_as(base)
                fp = (op(*args) * v).sum().item()
                pert[e] = orig - step
                args[i] = pert.view_as(base)
                fm = (op(*args) * v).sum().item()
                numeric[e] = (fp - fm) / (2 * step)
        af = a.flatten()
        denom = torch.maximum(torch.maximum(af.abs(), numeric.abs()), torch.tensor(floor, dtype=torch.float64))
        rel = (af - numeric).abs() / denom
        e = int(rel.argmax())
        if rel[e].item() > worst_err:
            worst_err, worst_loc = rel[e].item(), (i, e)
    return GradCheckReport(worst_err, worst_err <= tolerance, worst_loc)


def _frac_safe(shape, gen, lo=-2.0, hi=2.0) -> torch.Tensor:
    """Random reals whose fractional parts stay in [0.1, 0.9], off the bilinear kinks."""
    whole = torch.randint(int(lo), int(hi), shape, generator=gen).to(torch.float64)
    return whole + 0.1 + 0.8 * torch.rand(shape, generator=gen, dtype=torch.float64)


def _away_from_zero(shape, gen) -> torch.Tensor:
    x = torch.randn(shape, generator=gen, dtype=torch.float64)
    return torch.where(x.abs() < 0.05, x + 0.1 * torch.sign(x + 1e-12), x)


def oracle_cases(seed: int) -> list[tuple[str, Callable, list[torch.Tensor]]]:
    """One small random instance per operator (and per gradient target of deform_conv2d)."""
    g = torch.Generator().manual_seed(seed)
    rn = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)  # noqa: E731
    x = rn(1, 2, 5, 5)
    feat = rn(1, 2, 4, 5)
    coords = torch.stack([
        torch.rand(1, 3, 3, generator=g, dtype=torch.float64) * 2.6 + 0.2,  # x in (0.2, 2.8) on W=5
        torch.rand(1, 3, 3, generator=g, dtype=torch.float64) * 1.6 + 0.2,  # y in (0.2, 1.8) on H=4
    ], 1)
    coords = coords.floor() + 0.1 + 0.8 * (coords - coords.floor())
    dx, doff, dw = rn(1, 2, 4, 4), _frac_safe((1, 18, 4, 4), g, -1, 1), rn(3, 2, 3, 3)
    return [
        ("conv2d", lambda a, w, b: conv2d(a, w, b), [x, rn(3, 2, 3, 3), rn(3)]),
        ("conv2d_stride2", lambda a, w, b: conv2d(a, w, b, stride=2), [x, rn(3, 2, 3, 3), rn(3)]),
        ("reflect_pad", lambda a: reflect_pad(a, 2), [x]),
        ("bilinear_sample", bilinear_sample, [feat, coords]),
        ("deform_conv2d[x]", lambda a: deform_conv2d(a, doff, dw), [dx]),
        ("deform_conv2d[offsets]", lambda o: deform_conv2d(dx, o, dw), [doff]),
        ("deform_conv2d[weight]", lambda w: deform_conv2d(dx, doff, w), [dw]),
        ("pixel_shuffle", lambda a: pixel_shuffle(a, 2), [rn(1, 8, 3, 3)]),
        ("pixel_unshuffle", lambda a: pixel_unshuffle(a, 2), [rn(1, 2, 4, 6)]),
        ("leaky", leaky, [_away_from_zero((2, 3, 4, 4), g)]),
        ("sigmoid", sigmoid, [rn(2, 3, 4, 4)]),
        ("upsample_offsets", upsample_offsets, [rn(1, 4, 3, 3)]),
    ]


def oracle_suite(seeds: Sequence[int] = range(5), tolerance: float = 1e-4) -> list[tuple[str, int, GradCheckReport]]:
    """Finite-difference check of every operator over several random instances."""
    results = []
    for seed in seeds:
        for name, op, inputs in oracle_cases(seed):
            results.append((name, seed, grad_check(op, inputs, tolerance=tolerance, seed=seed)))
    return results
