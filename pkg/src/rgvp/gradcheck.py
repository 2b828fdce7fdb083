"""Finite-difference verification of analytic gradients.

Meant to run against a float64 model (the high-precision mode) with a
deterministic loss closure: the closure must re-seed any internal rngs per
call and keep its example selection independent of the parameters (use
uniform ITM negatives, pre-built MLM masks).
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

import torch

from .model import VlmModel

# Relative error denominator floor: analytic zeros meet finite-difference
# roundoff (~1e-11 at step 1e-5 in float64) without blowing up the ratio.
DENOM_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst_param: str
    worst_analytic: float
    worst_fd: float


def finite_difference_check(
    model: VlmModel,
    loss_fn: Callable[[], torch.Tensor],
    n_samples: int = 100,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckResult:
    """Compare autograd gradients against central differences on randomly
    sampled parameter entries (only parameters the loss actually touches)."""
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    used = [(name, p, g) for (name, p), g in zip(named, grads) if g is not None]
    if not used:
        raise ValueError("loss does not depend on any model parameter")

    sizes = [p.numel() for _, p, _ in used]
    total = sum(sizes)
    rng = random.Random(seed)
    flat_picks = rng.sample(range(total), min(n_samples, total))

    result = GradCheckResult(0.0, 0, "", 0.0, 0.0)
    with torch.no_grad():
        for flat in flat_picks:
            t_idx = 0
            while flat >= sizes[t_idx]:
                flat -= sizes[t_idx]
                t_idx += 1
            name, param, grad = used[t_idx]
            view = param.data.view(-1)
            original = view[flat].item()
            view[flat] = original + step
            plus = float(loss_fn())
            view[flat] = original - step
            minus = float(loss_fn())
            view[flat] = original
            fd = (plus - minus) / (2 * step)
            analytic = float(grad.reshape(-1)[flat])
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), DENOM_FLOOR)
            result.n_checked += 1
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst_param = f"{name}[{flat}]"
                result.worst_analytic = analytic
                result.worst_fd = fd
    return result
