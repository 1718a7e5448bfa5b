"""FedAvg / FedProx primitives the hierarchical strategies reduce to."""

from __future__ import annotations

import numpy as np

from . import nn


def fedavg_aggregate(client_params: list[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of the client parameter vectors."""
    if len(client_params) == 0:
        raise ValueError("participant list is empty")
    total = np.zeros_like(client_params[0])
    for p in client_params:
        total += p
    return total / len(client_params)


def fedprox_client_loss_grad(
    m_i: np.ndarray,
    batch: nn.Batch,
    global_params: np.ndarray,
    mu_prox: float,
    arch: nn.MlpArch,
) -> tuple[float, np.ndarray]:
    """mean-CE + (mu_prox/2) ||m_i - global||^2 and its gradient."""
    if mu_prox < 0:
        raise ValueError(f"mu_prox must be >= 0, got {mu_prox}")
    ce_loss, grad = nn.loss_and_grad(m_i, arch, batch)
    diff = m_i - global_params
    return ce_loss + 0.5 * mu_prox * float(diff @ diff), grad + mu_prox * diff
