"""Adadelta parameter updates.

The update keeps two exponential accumulators per parameter, a squared
gradient average and a squared update average, and needs no learning rate:

    E[g^2]  <- rho * E[g^2] + (1 - rho) * g^2
    delta    = - sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    p       <- p + delta
    E[dx^2] <- rho * E[dx^2] + (1 - rho) * delta^2

rho and eps default to 0.95 / 1e-6 and are configurable; they are choices,
not reproduced values.
"""

from __future__ import annotations

import numpy as np

from .autodiff import DTYPE, Tensor
from .errors import ContractViolation


def adadelta_step(
    param: np.ndarray,
    grad: np.ndarray,
    sq_grad: np.ndarray,
    sq_update: np.ndarray,
    rho: float,
    eps: float,
) -> None:
    """One in-place update of a single parameter array and its accumulators."""
    if grad.shape != param.shape or sq_grad.shape != param.shape \
            or sq_update.shape != param.shape:
        raise ContractViolation(
            f"adadelta_step shape mismatch: param {param.shape}, grad {grad.shape}"
        )
    sq_grad *= rho
    sq_grad += (1.0 - rho) * grad * grad
    delta = -np.sqrt(sq_update + eps) / np.sqrt(sq_grad + eps) * grad
    param += delta
    sq_update *= rho
    sq_update += (1.0 - rho) * delta * delta


class Adadelta:
    """Optimizer over a named parameter dict; missing grads count as zero."""

    def __init__(self, params: dict[str, Tensor], rho: float = 0.95, eps: float = 1e-6):
        if not 0.0 < rho < 1.0:
            raise ContractViolation(f"rho must lie in (0,1), got {rho}")
        if eps <= 0.0:
            raise ContractViolation(f"eps must be positive, got {eps}")
        self.params = params
        self.rho = float(rho)
        self.eps = float(eps)
        self.sq_grad = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.sq_update = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        zero = None
        for name, p in self.params.items():
            grad = p.grad
            if grad is None:
                # accumulators still decay toward zero, parameter unchanged
                grad = np.zeros_like(p.data) if zero is None else zero
            adadelta_step(p.data, grad, self.sq_grad[name], self.sq_update[name],
                          self.rho, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_entries(self) -> dict[str, np.ndarray]:
        """Accumulator arrays under stable names, for checkpointing."""
        out = {}
        for name in self.params:
            out[f"opt/{name}/sq_grad"] = self.sq_grad[name]
            out[f"opt/{name}/sq_update"] = self.sq_update[name]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray]):
        for name, p in self.params.items():
            for store, key in ((self.sq_grad, f"opt/{name}/sq_grad"),
                               (self.sq_update, f"opt/{name}/sq_update")):
                arr = entries.get(key)
                if arr is None:
                    raise ContractViolation(f"checkpoint is missing {key}")
                if arr.shape != p.data.shape:
                    raise ContractViolation(
                        f"{key} has shape {arr.shape}, parameter is {p.data.shape}"
                    )
                store[name] = arr.astype(DTYPE)
