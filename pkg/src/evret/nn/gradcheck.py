"""Analytic-vs-numeric gradient verification."""

from __future__ import annotations

from typing import Callable

import numpy as np

from evret.errors import NumericError
from evret.nn.params import ParameterSet
from evret.nn.tensor import Tensor, no_grad


def gradient_check(
    loss_fn: Callable[[ParameterSet], Tensor],
    params: ParameterSet,
    step: float = 1e-4,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the loss from ``params`` on every call. For
    each parameter scalar the numeric gradient (f(x+step)-f(x-step)) /
    (2 step) is compared against the tape gradient; returns the maximum
    relative error max(|ga-gn| / max(|ga|, |gn|, 1e-8)).
    """
    params.zero_grad()
    loss = loss_fn(params)
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }
    params.zero_grad()

    max_rel = 0.0
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            ga_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(loss_fn(params).data)
                flat[i] = orig - step
                f_minus = float(loss_fn(params).data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError(f"loss non-finite while probing {name!r}[{i}]")
                gn = (f_plus - f_minus) / (2.0 * step)
                ga = ga_flat[i]
                rel = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
                if rel > max_rel:
                    max_rel = rel
    return max_rel
