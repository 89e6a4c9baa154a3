"""Shared oracles and tiny fixtures for the test suite."""

import numpy as np

from fedhenn import nn
from fedhenn.config import ExperimentConfig


def fd_grad(f, params: nn.ModelParams, h: float = 1e-5) -> nn.ModelParams:
    """Central finite differences of scalar ``f(params)`` for every weight and bias."""
    out = []
    for l, (w, b) in enumerate(params.layers):
        pair = []
        for which, arr in ((0, w), (1, b)):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                vals = []
                for sign in (1.0, -1.0):
                    p = params.copy()
                    p.layers[l][which][idx] += sign * h
                    vals.append(f(p))
                g[idx] = (vals[0] - vals[1]) / (2 * h)
            pair.append(g)
        out.append(tuple(pair))
    return nn.ModelParams(params.arch, out)


def max_rel_error(analytic: nn.ModelParams, numeric: nn.ModelParams) -> float:
    a, n = analytic.flat(), numeric.flat()
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
    return float(np.abs(a - n).max() / scale)


def hsic_oracle(Ki, Kj) -> float:
    """Literal trace(Ki H Kj H) / (L-1)^2 with explicit loops."""
    L = Ki.shape[0]
    H = [[(1.0 if p == q else 0.0) - 1.0 / L for q in range(L)] for p in range(L)]

    def matmul(A, B):
        return [[sum(A[p][k] * B[k][q] for k in range(L)) for q in range(L)] for p in range(L)]

    M = matmul(matmul(matmul(Ki.tolist(), H), Kj.tolist()), H)
    return sum(M[p][p] for p in range(L)) / (L - 1) ** 2


def small_config(**overrides) -> ExperimentConfig:
    base = dict(
        mode="fedhenn_homo",
        n_clients=4,
        classes_per_client=2,
        seed=11,
        n_per_class=40,
        hidden=(6,),
        arch_family=((4,), (7,), (5, 3)),
        rounds=4,
        local_epochs=2,
        client_fraction=0.5,
        eta0=1.0,
        rad_size=12,
        rad_pool_size=24,
        lr=0.05,
        momentum=0.5,
    )
    base.update(overrides)
    return ExperimentConfig(**base)
