from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, checked_mode, no_grad


class ContractError(ValueError):
    """The function under test does not satisfy grad_check's preconditions."""


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-6,
    atol: float = 1e-8,
    samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max elementwise relative error between tape gradients and central differences.

    ``f`` must return a single-element tensor. ``x`` is one tensor or a list of
    tensors; all of them are perturbed. Runs in checked (64-bit) mode, so
    inputs should already be float64.

    The relative error per element is ``|a - n| / max(|a|, |n|, atol)``, where
    ``atol`` keeps exactly-zero gradients from dividing by zero.

    With ``samples`` set, at most that many randomly chosen elements of each
    tensor are perturbed (useful for whole networks).
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    rng = np.random.default_rng(seed)
    with checked_mode():
        for t in xs:
            t.requires_grad = True
            t.grad = None
        out = f(*xs)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ContractError("grad_check needs a scalar-valued function")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

        worst = 0.0
        with no_grad():
            for t, ga in zip(xs, analytic):
                flat = t.data.reshape(-1)
                gflat = ga.reshape(-1)
                idx = range(flat.size)
                if samples is not None and flat.size > samples:
                    idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f(*xs).item()
                    flat[i] = orig - eps
                    fm = f(*xs).item()
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    denom = max(abs(gflat[i]), abs(num), atol)
                    worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
