"""Equipartitioned soft assignments by Sinkhorn-Knopp scaling.

Codes have prototypes on rows and observations on columns. Every column is a
distribution over prototypes and every row carries mass B / K.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

DEFAULT_EPSILON = 0.05
DEFAULT_ITERS = 3


def _check_codes_input(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or 0 in scores.shape:
        raise ValueError(f"expected a non-empty K x B matrix, got shape {scores.shape}")
    if np.any(np.isnan(scores)) or np.any(scores == np.inf):
        raise ValueError("scores must not contain NaN or +inf")
    if np.any(np.all(scores == -np.inf, axis=0)):
        raise ValueError("a column of scores is entirely -inf")
    return scores


def codes_from_logits(logits, epsilon: float = DEFAULT_EPSILON, n_iters: int | None = DEFAULT_ITERS,
                      tol: float = 1e-10, max_iters: int = 1_000_000) -> np.ndarray:
    """Sinkhorn codes Q = Diag(u) exp(logits / epsilon) Diag(v).

    Args:
        logits: K x B similarity matrix.
        epsilon: entropic smoothing; smaller values give harder codes.
        n_iters: number of row/column scaling rounds. ``None`` solves for the
            scaling vectors until both marginal residuals are at most ``tol``.
        tol: convergence threshold for ``n_iters=None``.
        max_iters: cap on solver steps for ``n_iters=None``.

    Returns:
        K x B array whose columns sum to one (exactly up to rounding, since the
        last half-step normalizes columns) and whose rows sum to B / K at
        convergence.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    logits = _check_codes_input(logits)
    k, b = logits.shape
    row_target = b / k

    def column_step(q):
        return q / q.sum(axis=0, keepdims=True)

    if n_iters is None:
        return _converged_codes(logits, epsilon, tol, max_iters)
    scaled = logits / epsilon
    q = column_step(np.exp(scaled - np.max(scaled)))
    for _ in range(n_iters):
        q *= (row_target / q.sum(axis=1))[:, None]
        q = column_step(q)
    return q


def _converged_codes(logits, epsilon, tol, max_iters):
    # Scaling-vector iteration stalls for small epsilon (kernel underflow, near-tied
    # assignments), so potentials are solved in log space: an epsilon-continuation
    # schedule, each stage finished by damped Newton steps on the entropic dual with
    # a Sinkhorn round after every step. The fixed point is the same scaled matrix.
    k, b = logits.shape
    finite = logits[np.isfinite(logits)]
    log_rows = np.log(b / k)
    rows = np.full(k, b / k)
    cols = np.ones(b)
    f = np.zeros(k)
    g = np.zeros(b)
    schedule = []
    eps = max(float(finite.max() - finite.min()), epsilon)
    while eps > epsilon:
        schedule.append(eps)
        eps /= 4.0
    schedule.append(epsilon)
    rounds = 0
    for eps in schedule:
        def sinkhorn_round(f, g):
            g = -eps * logsumexp((logits + f[:, None]) / eps, axis=0)
            f = eps * (log_rows - logsumexp((logits + g[None, :]) / eps, axis=1))
            return f, g

        def dual(f, g):
            # an overshooting trial step overflows to -inf and is rejected by the line search
            with np.errstate(over="ignore"):
                mass = np.exp((logits + f[:, None] + g[None, :]) / eps).sum()
            return rows @ f + cols @ g - eps * mass

        f, g = sinkhorn_round(f, g)
        while True:
            q = np.exp((logits + f[:, None] + g[None, :]) / eps)
            grad = np.concatenate([rows - q.sum(axis=1), cols - q.sum(axis=0)])
            if np.max(np.abs(grad)) <= tol:
                break
            rounds += 1
            if rounds > max_iters:
                raise RuntimeError(f"Sinkhorn did not reach marginal residual {tol}")
            hess = np.block([[np.diag(q.sum(axis=1)), q], [q.T, np.diag(q.sum(axis=0))]]) / eps
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            base = dual(f, g)
            t = 1.0
            while t > 1e-10:
                nf, ng = f + t * step[:k], g + t * step[k:]
                if dual(nf, ng) >= base + 1e-4 * t * (grad @ step):
                    break
                t *= 0.5
            f, g = sinkhorn_round(nf, ng)
    return q / q.sum(axis=0, keepdims=True)


def codes_from_distances(distances, epsilon: float = DEFAULT_EPSILON,
                         n_iters: int | None = DEFAULT_ITERS, **kwargs) -> np.ndarray:
    """Sinkhorn codes from a K x B distance matrix, i.e. logits = -distances."""
    distances = np.asarray(distances, dtype=np.float64)
    if np.any(~np.isfinite(distances)) or np.any(distances < 0):
        raise ValueError("distances must be finite and nonnegative")
    return codes_from_logits(-distances, epsilon, n_iters, **kwargs)


def code_entropy(q) -> float:
    """Mean per-column entropy of a code matrix, in nats."""
    q = np.asarray(q)
    safe = np.where(q > 0, q, 1.0)
    return float(-np.sum(q * np.log(safe)) / q.shape[1])
