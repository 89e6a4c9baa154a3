"""Kernel matrices, HSIC and centered kernel alignment.

All activation matrices are column-centred before a kernel is built from
them (see :func:`activation_kernel`). For the linear kernel this makes the
closed-form :func:`linear_cka` agree exactly with the HSIC route; for the
RBF kernel it is a no-op because pairwise distances ignore translation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# relative size of ||HKH||_F below which a kernel counts as constant
_DEGENERATE_RTOL = 1e-10
_CLAMP_TOL = 1e-12


class DegenerateRepresentationError(ValueError):
    """Raised when a representation carries no centred signal (all rows equal)."""


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is ``"linear"`` or ``"rbf"``.

    For RBF, ``sigma_mode`` is ``"fixed"`` (``value`` is sigma) or
    ``"median_fraction"`` (sigma is ``value`` times the median non-zero
    pairwise distance).
    """

    kind: str = "linear"
    sigma_mode: str = "median_fraction"
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf":
            if self.sigma_mode not in ("fixed", "median_fraction"):
                raise ValueError(f"unknown sigma mode {self.sigma_mode!r}")
            if not self.value > 0:
                raise ValueError(f"RBF sigma/fraction must be > 0, got {self.value}")


LINEAR = KernelSpec("linear")


def _as_activations(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"activation matrix must be 2-D, got shape {A.shape}")
    if A.shape[0] < 2:
        raise ValueError(f"need at least 2 rows to build a kernel, got {A.shape[0]}")
    return A


def _as_kernel(K) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"kernel matrix must be square, got shape {K.shape}")
    if K.shape[0] < 2:
        raise ValueError(f"kernel matrix must be at least 2 x 2, got {K.shape}")
    return K


def center_columns(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    return A - A.mean(axis=0, keepdims=True)


def _sq_distances(A: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - A[None, :, :]
    return np.einsum("pqk,pqk->pq", diff, diff)


def _median_pairs(dist: np.ndarray) -> tuple[float, list[tuple[int, int, float]]]:
    """Median of the non-zero upper-triangle distances and the pairs that define it."""
    iu, ju = np.triu_indices(dist.shape[0], k=1)
    vals = dist[iu, ju]
    nz = np.flatnonzero(vals > 0)
    if nz.size == 0:
        raise DegenerateRepresentationError(
            "all pairwise distances are zero; median heuristic for sigma is undefined"
        )
    order = nz[np.argsort(vals[nz], kind="stable")]
    n = order.size
    if n % 2:
        picks = [(order[n // 2], 1.0)]
    else:
        picks = [(order[n // 2 - 1], 0.5), (order[n // 2], 0.5)]
    median = sum(w * vals[k] for k, w in picks)
    return float(median), [(int(iu[k]), int(ju[k]), w) for k, w in picks]


def resolve_sigma(A, spec: KernelSpec) -> float:
    A = _as_activations(A)
    if spec.sigma_mode == "fixed":
        return float(spec.value)
    median, _ = _median_pairs(np.sqrt(_sq_distances(A)))
    return spec.value * median


def gram(A, spec: KernelSpec = LINEAR) -> np.ndarray:
    """Kernel matrix over the rows of ``A`` (no centring applied here)."""
    A = _as_activations(A)
    if spec.kind == "linear":
        return A @ A.T
    D = _sq_distances(A)
    sigma = resolve_sigma(A, spec)
    return np.exp(-D / (2.0 * sigma * sigma))


def activation_kernel(A, spec: KernelSpec = LINEAR) -> np.ndarray:
    """Kernel of the column-centred activations; the form used for alignment."""
    return gram(center_columns(_as_activations(A)), spec)


def centering_matrix(L: int) -> np.ndarray:
    if L < 2:
        raise ValueError(f"centering matrix needs L >= 2, got {L}")
    return np.eye(L) - np.full((L, L), 1.0 / L)


def _double_center(K: np.ndarray) -> np.ndarray:
    # H K H without forming H
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def hsic(Ki, Kj) -> float:
    """Biased estimator ``tr(Ki H Kj H) / (L - 1)^2``."""
    Ki, Kj = _as_kernel(Ki), _as_kernel(Kj)
    if Ki.shape != Kj.shape:
        raise ValueError(f"kernel size mismatch: {Ki.shape} vs {Kj.shape}")
    L = Ki.shape[0]
    return float(np.sum(_double_center(Ki) * Kj.T)) / (L - 1) ** 2


def _check_nondegenerate(K: np.ndarray, Kc: np.ndarray, name: str):
    scale = np.linalg.norm(K)
    if scale == 0.0 or np.linalg.norm(Kc) <= _DEGENERATE_RTOL * scale:
        raise DegenerateRepresentationError(f"{name} has zero self-HSIC (constant representation)")


def _clamp(value: float) -> float:
    if value < -_CLAMP_TOL or value > 1.0 + _CLAMP_TOL:
        raise ArithmeticError(f"CKA value {value!r} outside [0, 1] beyond rounding tolerance")
    return min(max(value, 0.0), 1.0)


def cka(Ki, Kj) -> float:
    Ki, Kj = _as_kernel(Ki), _as_kernel(Kj)
    if Ki.shape != Kj.shape:
        raise ValueError(f"kernel size mismatch: {Ki.shape} vs {Kj.shape}")
    _check_nondegenerate(Ki, _double_center(Ki), "first kernel")
    _check_nondegenerate(Kj, _double_center(Kj), "second kernel")
    raw = hsic(Ki, Kj) / np.sqrt(hsic(Ki, Ki) * hsic(Kj, Kj))
    return _clamp(raw)


def linear_cka(Ai, Aj) -> float:
    """Closed form ``||Aj^T Ai||_F^2 / (||Ai^T Ai||_F ||Aj^T Aj||_F)`` on centred columns."""
    Ai = center_columns(_as_activations(Ai))
    Aj = center_columns(_as_activations(Aj))
    if Ai.shape[0] != Aj.shape[0]:
        raise ValueError(f"row count mismatch: {Ai.shape[0]} vs {Aj.shape[0]}")
    ni = np.linalg.norm(Ai.T @ Ai)
    nj = np.linalg.norm(Aj.T @ Aj)
    if ni == 0.0 or nj == 0.0:
        raise DegenerateRepresentationError("activation matrix is zero after centring")
    return _clamp(np.linalg.norm(Aj.T @ Ai) ** 2 / (ni * nj))


def aggregate_kernels(kernels, weights) -> np.ndarray:
    """Weighted entrywise sum ``sum_j w_j K_j``."""
    kernels = [_as_kernel(K) for K in kernels]
    weights = np.asarray(weights, dtype=np.float64)
    if not kernels or len(kernels) != weights.size:
        raise ValueError(f"got {len(kernels)} kernels and {weights.size} weights")
    if any(K.shape != kernels[0].shape for K in kernels):
        raise ValueError("kernel size mismatch in aggregation")
    if np.any(weights < 0) or not weights.sum() > 0:
        raise ValueError("aggregation weights must be nonnegative with a positive sum")
    out = np.zeros_like(kernels[0])
    for w, K in zip(weights, kernels):
        out += w * K
    return out


def alignment_and_grad(A, K_target, spec: KernelSpec = LINEAR) -> tuple[float, np.ndarray]:
    """CKA between ``activation_kernel(A)`` and ``K_target``, with d(CKA)/dA.

    The returned similarity is clamped like :func:`cka`; the gradient is that
    of the unclamped expression.
    """
    A = _as_activations(A)
    T = _as_kernel(K_target)
    L = A.shape[0]
    if T.shape[0] != L:
        raise ValueError(f"target kernel is {T.shape} but activations have {L} rows")
    Ac = center_columns(A)
    Tc = _double_center(T)
    _check_nondegenerate(T, Tc, "target kernel")

    if spec.kind == "linear":
        K = Ac @ Ac.T
    else:
        D = _sq_distances(Ac)
        dist = np.sqrt(D)
        if spec.sigma_mode == "fixed":
            sigma, picks = float(spec.value), []
        else:
            median, picks = _median_pairs(dist)
            sigma = spec.value * median
        K = np.exp(-D / (2.0 * sigma * sigma))
    Kc = _double_center(K)
    _check_nondegenerate(K, Kc, "client kernel")

    nk, nt = np.linalg.norm(Kc), np.linalg.norm(Tc)
    raw = float(np.sum(Kc * Tc)) / (nk * nt)
    # d(CKA)/dK; already doubly centred since Kc and Tc are
    G = Tc / (nk * nt) - raw * Kc / (nk * nk)

    if spec.kind == "linear":
        dAc = (G + G.T) @ Ac
    else:
        S = -G * K / (2.0 * sigma * sigma)  # d/dD through the exponent
        if picks:
            d_sigma = float(np.sum(G * K * D)) / sigma**3
            for p, q, w in picks:
                # sigma = c * median(dist), dist = sqrt(D)
                S[p, q] += d_sigma * spec.value * w / (2.0 * dist[p, q])
        M = S + S.T
        dAc = 2.0 * (np.diag(M.sum(axis=1)) - M) @ Ac
    dA = dAc - dAc.mean(axis=0, keepdims=True)
    return _clamp(raw), dA
