"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import GradCheckError
from .tensor import Tensor, default_dtype


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor] | Mapping[str, Tensor],
    epsilon: float | None = None,
    *,
    dtype=np.float64,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between autodiff and finite-difference gradients.

    The error for one entry is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-6)``.
    ``forward`` must rebuild the scalar output from the current parameter
    values on every call.  Parameters are promoted to ``dtype`` for the check
    and restored afterwards.  ``epsilon`` defaults to 1e-3 in single
    precision and 1e-7 in double precision, where the smaller step keeps
    probes from straddling ReLU and max-pool kinks.  ``max_entries`` caps
    the number of entries probed per parameter (sampled without replacement
    from ``seed``) for networks too large to probe exhaustively.
    """
    if epsilon is None:
        epsilon = 1e-3 if np.dtype(dtype).itemsize <= 4 else 1e-7
    plist = list(params.values()) if isinstance(params, Mapping) else list(params)
    saved = [p.data for p in plist]
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        with default_dtype(dtype):
            for p in plist:
                p.data = p.data.astype(dtype)
                p.grad = None
            out = forward()
            again = forward()
            if out.size != 1:
                raise GradCheckError(f"forward must return a scalar, got shape {out.shape}")
            if out.data.item() != again.data.item():
                raise GradCheckError("forward is not deterministic (is dropout enabled?)")
            out.backward()
            for p in plist:
                g_ad = np.zeros_like(p.data) if p.grad is None else p.grad
                flat = p.data.reshape(-1)
                n = flat.size
                idx = np.arange(n)
                if max_entries is not None and n > max_entries:
                    idx = np.sort(rng.choice(n, size=max_entries, replace=False))
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + epsilon
                    f_plus = forward().data.item()
                    flat[i] = orig - epsilon
                    f_minus = forward().data.item()
                    flat[i] = orig
                    g_fd = (f_plus - f_minus) / (2 * epsilon)
                    ga = float(g_ad.reshape(-1)[i])
                    err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), 1e-6)
                    worst = max(worst, err)
    finally:
        for p, data in zip(plist, saved):
            p.data = data
            p.grad = None
    return worst
