"""Central finite-difference checks for the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsl import nn_core
from fedsl.frameworks.distill import distill_loss

H = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return 0.0 if den == 0 else float(num / den)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float


def random_model(rng: np.random.Generator):
    d = int(rng.integers(2, 6))
    hidden = [int(w) for w in rng.integers(2, 7, size=int(rng.integers(1, 4)))]
    classes = int(rng.integers(2, 5))
    spec = nn_core.mlp_spec(d, hidden, classes)
    params = nn_core.init_params(spec, int(rng.integers(2**31)))
    # Nonzero biases so the bias gradients are exercised away from init.
    params = [(w, rng.normal(0, 0.1, size=b.shape)) for w, b in params]
    batch = int(rng.integers(1, 5))
    x = rng.normal(size=(batch, d))
    y = rng.integers(0, classes, size=batch)
    return spec, params, x, y


def check_xent(spec, params, x, y, h: float = H) -> float:
    logits, cache = nn_core.forward(spec, params, x)
    _, g = nn_core.softmax_xent(logits, y)
    grads, _ = nn_core.backward(spec, params, cache, g)
    worst = 0.0
    for (w, b), (gw, gb) in zip(params, grads):
        for p, ga in ((w, gw), (b, gb)):
            gn = numeric_grad(lambda: nn_core.loss_and_grad(spec, params, x, y)[0], p, h)
            worst = max(worst, rel_error(ga, gn))
    return worst


def check_distill(rng: np.random.Generator, h: float = H) -> float:
    n = int(rng.integers(1, 6))
    c = int(rng.integers(2, 6))
    s = rng.normal(size=(n, c)) * 2
    t = rng.normal(size=(n, c)) * 2
    T = float(rng.uniform(0.5, 4.0))
    lam = float(rng.uniform(0.0, 1.0))
    worst = 0.0
    for labels in (None, rng.integers(0, c, size=n)):
        _, ga = distill_loss(s, t, labels, T, lam)
        gn = numeric_grad(lambda: distill_loss(s, t, labels, T, lam)[0], s, h)
        worst = max(worst, rel_error(ga, gn))
    return worst


def run_suite(trials: int = 20, seed: int = 0, h: float = H) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(trials):
        spec, params, x, y = random_model(rng)
        out.append(CheckResult(f"xent/{i}", check_xent(spec, params, x, y, h)))
        out.append(CheckResult(f"distill/{i}", check_distill(rng, h)))
    return out
