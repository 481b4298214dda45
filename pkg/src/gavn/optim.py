"""Charbonnier loss and a hand-rolled, bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class NonFiniteGradient(RuntimeError):
    pass


def charbonnier_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Mean of ``sqrt((pred - gt)^2 + eps^2)``."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return torch.sqrt((pred - gt) ** 2 + eps * eps).mean()


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update, in place on ``params``.

    A parameter whose gradient is ``None`` is treated as having a zero
    gradient. Any non-finite gradient aborts before a single parameter moves.
    """
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m / bc1, denom, value=-lr)
    return state


class Adam:
    """Adam over a named parameter dict, driven by ``.grad`` fields."""

    def __init__(self, named_params: dict[str, torch.nn.Parameter], lr: float, cfg: AdamConfig = AdamConfig()):
        self.params = dict(named_params)
        self.lr = lr
        self.cfg = cfg
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
