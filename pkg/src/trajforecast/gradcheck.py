"""Finite-difference check of the predictor's analytic gradients."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from trajforecast.model import NetSpec, init_params, loss_and_grad


def grad_check(spec: NetSpec, seed: int = 0, epsilon: float = 1e-6, n_checks: int = 40,
               batch: int = 2, return_errors: bool = False):
    """Max relative error between backprop and central differences.

    Runs at 64-bit with a random (non-zero) head so every layer has signal.
    Relative error is ``|a - f| / max(|a| + |f|, 1e-10)`` over ``n_checks``
    randomly chosen parameter entries.
    """
    spec = replace(spec, precision=64)
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed, head_scale=1.0)
    for k, a in params.arrays.items():
        if k.endswith(".b"):
            params.arrays[k] = rng.normal(0.0, 0.1, size=a.shape)
    x = rng.uniform(0.0, 1.0, size=(batch, spec.in_channels, spec.input_size, spec.input_size))
    target = rng.normal(0.0, 1.0, size=(batch, spec.out_dim))
    _, grads = loss_and_grad(params, x, target)

    names = [k for k, _ in spec.param_shapes()]
    sizes = np.array([params.arrays[k].size for k in names])
    picks = rng.choice(int(sizes.sum()), size=min(n_checks, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors = []
    for flat in np.sort(picks):
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, pos = names[li], int(flat - offsets[li])
        arr = params.arrays[name].reshape(-1)
        orig = arr[pos]
        arr[pos] = orig + epsilon
        lp, _ = loss_and_grad(params, x, target)
        arr[pos] = orig - epsilon
        lm, _ = loss_and_grad(params, x, target)
        arr[pos] = orig
        numeric = (lp - lm) / (2 * epsilon)
        analytic = grads[name].reshape(-1)[pos]
        errors.append(abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-10))
    errors = np.asarray(errors)
    worst = float(errors.max()) if errors.size else 0.0
    return (worst, errors) if return_errors else worst
