"""Client-side update rules.

Strategies whose local objective is `data term + (1/2) sum_k w_k (m_k - c_k)^2`
use forward-backward splitting: an explicit gradient step on the data term
followed by the exact proximal step of the quadratic. This minimizes the same
objective as plain SGD and coincides with it up to O((lr*w)^2) when lr*w is
small, but stays stable for arbitrarily stiff quadratic weights (the
hierarchical-posterior penalty weight scales with the parameter count and can
exceed 2/lr by orders of magnitude, where explicit SGD diverges).
"""

from __future__ import annotations

import numpy as np

from . import nn


def prox_quadratic_step(
    params: np.ndarray,
    data_grad: np.ndarray,
    lr: float,
    center: np.ndarray,
    quad_diag: np.ndarray | float,
) -> np.ndarray:
    """One splitting step for data-term gradient + quadratic penalty.

    Equivalent to `prox_{lr*penalty}(params - lr*data_grad)` with
    penalty(m) = (1/2) sum_k quad_diag_k (m_k - center_k)^2.
    """
    half = nn.sgd_step(params, data_grad, lr)
    return (half + lr * quad_diag * center) / (1.0 + lr * quad_diag)
