"""Global covariance pooling: centered feature covariance and its matrix
square root via the coupled Newton-Schulz iteration.

The iteration only converges locally, so the input is pre-normalized and
the result compensated by the square root of the normalization constant.
Both Frobenius-norm and trace pre-normalization are supported; Frobenius
is the default because the normalized spectrum it produces sits much
closer to 1, which the fixed five-iteration budget needs (a trace-
normalized spectrum is bounded by 1/D, leaving the iteration visibly
unconverged at D >= 8).

An eigendecomposition-based square root is provided as a test oracle; it
is not part of the production path.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, matmul
from .errors import ContractError

SYMMETRY_TOL = 1e-10
DEGENERATE_TRACE = 1e-12


def centered_covariance(x: Tensor) -> Tensor:
    """Covariance of an (N, D) feature matrix: x^T @ C @ x with the scaled
    centering matrix C = (1/N)(I - (1/N) ones)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"expected an (N, D) feature matrix, got shape {x.data.shape}")
    n = x.data.shape[0]
    if n < 2:
        raise ContractError(f"covariance needs at least 2 rows, got {n}")
    centering = Tensor((np.eye(n) - 1.0 / n) / n)
    product = matmul(matmul(x.T, centering), x)
    # exactly symmetric in exact arithmetic; scrub the accumulation noise
    return (product + product.T) * 0.5


def _trace(a: Tensor) -> Tensor:
    mask = Tensor(np.eye(a.data.shape[0]))
    return (a * mask).sum()


def newton_schulz_sqrt(
    sigma: Tensor,
    iterations: int = 5,
    pre_normalization: str = "frobenius",
) -> tuple[Tensor, bool]:
    """Matrix square root of a symmetric PSD matrix by coupled iteration.

    Pre-normalizes by the chosen norm, runs ``iterations`` coupled updates
    from Y0 = sigma/norm, Z0 = I, and compensates the magnitude with
    sqrt(norm).  Fully differentiable by unrolling.

    Returns (square root, degenerate flag); a near-zero trace (covariance
    of constant features) yields a zero matrix and a True flag instead of
    an error so that dead activations cannot abort training.
    """
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(sigma)
    d = sigma.data.shape[0]
    if sigma.data.ndim != 2 or sigma.data.shape[1] != d:
        raise ContractError(f"expected a square matrix, got shape {sigma.data.shape}")
    if iterations < 1:
        raise ContractError(f"iteration count must be >= 1, got {iterations}")
    if pre_normalization not in ("frobenius", "trace"):
        raise ContractError(f"unknown pre-normalization '{pre_normalization}'")
    scale = max(1.0, float(np.abs(sigma.data).max()))
    if np.abs(sigma.data - sigma.data.T).max() > SYMMETRY_TOL * scale:
        raise ContractError("input matrix is not symmetric within 1e-10 (relative)")
    if float(np.trace(sigma.data)) <= DEGENERATE_TRACE:
        return Tensor(np.zeros((d, d))), True
    sym = (sigma + sigma.T) * 0.5          # scrub accumulation noise before iterating
    if pre_normalization == "trace":
        scale = _trace(sym)
    else:
        scale = (sym * sym).sum().sqrt()
    a = sym / scale
    eye3 = Tensor(3.0 * np.eye(d))
    y, z = a, Tensor(np.eye(d))
    for _ in range(iterations):
        t = (eye3 - matmul(z, y)) * 0.5
        y, z = matmul(y, t), matmul(t, z)
    return y * scale.sqrt(), False


def newton_schulz_trajectory(
    sigma: np.ndarray, iterations: int, pre_normalization: str = "frobenius"
) -> list[np.ndarray]:
    """Normalized-domain iterates Y_k (numpy only), for convergence checks."""
    a = np.asarray(sigma, dtype=np.float64)
    a = (a + a.T) / 2.0
    a = a / (np.trace(a) if pre_normalization == "trace" else np.linalg.norm(a))
    y, z = a, np.eye(a.shape[0])
    history = [y]
    for _ in range(iterations):
        t = (3.0 * np.eye(a.shape[0]) - z @ y) / 2.0
        y, z = y @ t, t @ z
        history.append(y)
    return history


def matrix_sqrt_oracle(sigma: np.ndarray) -> np.ndarray:
    """Principal square root via symmetric eigendecomposition (test oracle).

    Eigenvalues within numerical slack of zero are clamped; anything below
    -1e-6 means the input was not PSD.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.abs(sigma - sigma.T).max() > SYMMETRY_TOL:
        raise ContractError("oracle input is not symmetric within 1e-10")
    vals, vecs = np.linalg.eigh((sigma + sigma.T) / 2.0)
    if vals.min() < -1e-6:
        raise ContractError(f"input is not PSD: smallest eigenvalue {vals.min():.3e}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def random_spd_suite(rng: np.random.Generator, dim: int, count: int) -> list[np.ndarray]:
    """Random unit-trace SPD matrices with spectrum drawn from U[0.5, 1],
    i.e. condition number at most 2 (what a five-iteration square-root
    budget can actually resolve)."""
    out = []
    for _ in range(count):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        spectrum = rng.uniform(0.5, 1.0, size=dim)
        sigma = (q * spectrum) @ q.T
        sigma = (sigma + sigma.T) / 2.0
        out.append(sigma / np.trace(sigma))
    return out
