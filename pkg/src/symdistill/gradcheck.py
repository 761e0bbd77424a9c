"""Central finite-difference gradient checks (run in float64).

Numeric derivatives come from two levels of Richardson extrapolation over
central differences at h, h/2, h/4 (truncation error O(h^6)), which allows a
step large enough to keep float64 roundoff negligible.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch

DEFAULT_EPS = 1e-3
# below this magnitude both gradients count as zero
ABS_FLOOR = 1e-6


def relative_error(analytic: float, numeric: float, floor: float = ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def fd_check(
    fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    n_coords: int = 24,
    eps: float = DEFAULT_EPS,
    generator: torch.Generator | None = None,
    fd_fn: Callable[[], torch.Tensor] | None = None,
) -> float:
    """Max relative error between autograd and central differences of scalar ``fn()``.

    ``params`` must be float64 leaf tensors with ``requires_grad``; ``n_coords``
    coordinates are sampled uniformly over all of them. ``fd_fn``, when given,
    is differenced instead of ``fn`` (for losses built with stop-gradients).
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.dtype != torch.float64:
            raise TypeError("finite-difference checks need float64 parameters")
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    g = generator or torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(n_coords):
        which = int(torch.multinomial(sizes, 1, generator=g))
        idx = int(torch.randint(params[which].numel(), (1,), generator=g))
        flat = params[which].data.view(-1)
        f = fd_fn or fn
        d1, d2, d4 = (central_difference(f, flat, idx, eps / k) for k in (1, 2, 4))
        r1, r2 = (4 * d2 - d1) / 3, (4 * d4 - d2) / 3
        numeric = (16 * r2 - r1) / 15
        analytic = float(grads[which].reshape(-1)[idx])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def central_difference(f, flat: torch.Tensor, idx: int, h: float) -> float:
    orig = flat[idx].item()
    with torch.no_grad():
        flat[idx] = orig + h
        up = float(f())
        flat[idx] = orig - h
        down = float(f())
        flat[idx] = orig
    return (up - down) / (2 * h)


def projection(shape, generator: torch.Generator) -> torch.Tensor:
    """Fixed random weights used to reduce a tensor output to a scalar."""
    return torch.randn(shape, generator=generator, dtype=torch.float64)
