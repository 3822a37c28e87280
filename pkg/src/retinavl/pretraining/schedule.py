"""Learning-rate schedule and parameter averaging."""

from __future__ import annotations

import math

import torch
from torch import nn


def lr_at_step(step: int, config) -> float:
    """Linear warmup to the peak, then cosine decay to zero.

    The warmup ramp is 0 at step 0 and reaches ``peak_lr`` exactly at
    ``warmup_steps``; the cosine spans the remaining steps and lands at 0
    at ``total_steps``.
    """
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if step < config.warmup_steps:
        return config.peak_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def ema_update(ema_params, params, decay: float):
    """Elementwise ema <- decay * ema + (1 - decay) * param, in place.

    Accepts parallel iterables of tensors or two name->tensor mappings.
    Returns the updated ema container.
    """
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must be in [0, 1]")
    if isinstance(ema_params, dict):
        pairs = [(ema_params[k], params[k]) for k in ema_params]
        if set(ema_params) != set(params):
            raise ValueError("parameter name sets differ")
    else:
        ema_params = list(ema_params)
        params = list(params)
        if len(ema_params) != len(params):
            raise ValueError("parameter counts differ")
        pairs = list(zip(ema_params, params))
    with torch.no_grad():
        for e, p in pairs:
            if e.shape != p.shape:
                raise ValueError(f"shape mismatch: {tuple(e.shape)} vs {tuple(p.shape)}")
            e.mul_(decay).add_(p.to(e.dtype), alpha=1.0 - decay)
    return ema_params


class EmaTracker:
    """Shadow copy of a module's parameters under exponential averaging."""

    def __init__(self, module: nn.Module, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        self.decay = decay
        self.shadow = {
            k: v.detach().clone() for k, v in module.state_dict().items()
        }

    def update(self, module: nn.Module) -> None:
        ema_update(self.shadow, dict(module.state_dict()), self.decay)

    def copy_to(self, module: nn.Module) -> None:
        module.load_state_dict(self.shadow)
