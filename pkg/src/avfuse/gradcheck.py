"""Central finite-difference verification of model gradients.

`finite_diff_check` in the tensor module handles functions of one input
tensor. Model parameters live inside layers, so they are checked by running
one analytic backward pass and then re-evaluating the loss with each
parameter coordinate bumped in place.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward


def check_parameter_gradients(loss_fn: Callable[[], Tensor],
                              params: dict[str, Tensor],
                              eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per named parameter, |analytic - fd| / max(1, |fd|).

    `loss_fn` must be deterministic and re-evaluable (it may update batch-norm
    running statistics; those do not feed the train-mode loss).
    """
    for p in params.values():
        p.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            fp = float(loss_fn().data)
            flat[i] = saved - eps
            fm = float(loss_fn().data)
            flat[i] = saved
            fd = (fp - fm) / (2 * eps)
            err = abs(analytic[name].reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
        errors[name] = worst
    return errors
