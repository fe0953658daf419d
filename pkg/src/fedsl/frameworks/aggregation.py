from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsl.errors import DimensionError, ValidationError
from fedsl.nn_core import Params


@dataclass
class Update:
    client_id: int
    params: Params
    n_samples: int
    staleness: int = 0

    def __post_init__(self):
        if self.staleness < 0:
            raise ValidationError("staleness cannot be negative")
        if self.n_samples <= 0:
            raise ValidationError("update must carry at least one sample")


def staleness_weight(tau: int, a: float = 0.5) -> float:
    """Polynomial decay ``(1 + tau) ** -a``."""
    if tau < 0 or a < 0:
        raise ValidationError("staleness and exponent must be non-negative")
    return (1.0 + tau) ** (-a)


def aggregation_weights(updates: list[Update], a: float = 0.5) -> list[float]:
    raw = [u.n_samples * staleness_weight(u.staleness, a) for u in updates]
    total = sum(raw)
    return [w / total for w in raw]


def fedavg(updates: list[Update], a: float = 0.5) -> Params:
    """Weighted elementwise mean of client parameters.

    Weights are proportional to ``n_i * staleness_weight(tau_i)``; with all
    staleness zero this is plain sample-count FedAvg.
    """
    if not updates:
        raise ValidationError("cannot aggregate an empty update set")
    weights = aggregation_weights(updates, a)
    first = updates[0].params
    for u in updates[1:]:
        if len(u.params) != len(first) or any(
            w.shape != w0.shape or b.shape != b0.shape
            for (w, b), (w0, b0) in zip(u.params, first)
        ):
            raise DimensionError(f"update from client {u.client_id} has mismatched shapes")
    if len(updates) > 1 and all(_same(u.params, first) for u in updates[1:]):
        return [(w.copy(), b.copy()) for w, b in first]
    out = []
    for j in range(len(first)):
        w_acc = np.zeros_like(first[j][0])
        b_acc = np.zeros_like(first[j][1])
        for wt, u in zip(weights, updates):
            w_acc += wt * u.params[j][0]
            b_acc += wt * u.params[j][1]
        out.append((w_acc, b_acc))
    return out


def _same(a: Params, b: Params) -> bool:
    return all(np.array_equal(wa, wb) and np.array_equal(ba, bb) for (wa, ba), (wb, bb) in zip(a, b))
