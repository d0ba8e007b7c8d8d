"""Soft Q-iteration on the history-augmented state space and Boltzmann policies.

The augmented kernel is kept as a sparse (H*A, H) matrix so that one Bellman
sweep is a single sparse mat-vec; row ``h*A + a`` holds ``P(h' | h, a)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Spaces, log_softmax

DEFAULT_ITERS = 200
DEFAULT_TOL = 1e-8


@dataclass(frozen=True)
class QTable:
    values: np.ndarray  # (H, A)
    iterations_run: int
    residual: float
    # per-sweep policies, only kept when an unrolled gradient is requested
    trace: tuple = ()


@dataclass(frozen=True)
class PolicyTable:
    log_probs: np.ndarray  # (H, A)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


def logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def augmented_env_kernel(env: np.ndarray, spaces: Spaces) -> sp.csr_matrix:
    """Transition matrix over augmented states, shape (H*A, H).

    The successor of ``h`` under ``a`` drops the oldest state of ``h`` and
    appends ``s' ~ P(. | last(h), a)``.
    """
    S, A, L = spaces.num_states, spaces.num_actions, spaces.history_len
    H = spaces.num_augmented
    prefix = S ** (L - 1)
    by_last = np.arange(H).reshape(prefix, S)  # by_last[:, s] = all h ending in s
    s, a, s2 = np.nonzero(env)
    hs = by_last[:, s]  # (prefix, nnz)
    rows = hs * A + a
    cols = (hs % prefix) * S + s2 if L > 1 else np.broadcast_to(s2, hs.shape)
    data = np.broadcast_to(env[s, a, s2], hs.shape)
    mat = sp.csr_matrix(
        (data.ravel(), (rows.ravel(), cols.ravel())), shape=(H * A, H)
    )
    mat.sum_duplicates()
    return mat


def _soft_value(q, alpha):
    return alpha * logsumexp(q / alpha, axis=1)


def _policy_matrix(pi: np.ndarray) -> sp.csr_matrix:
    """Sparse (H, H*A) matrix with entries pi(a|h) at (h, h*A + a)."""
    H, A = pi.shape
    indptr = np.arange(0, H * A + 1, A)
    return sp.csr_matrix((pi.ravel(), np.arange(H * A), indptr), shape=(H, H * A))


def soft_q_iterate(
    reward: np.ndarray,
    aug_env: sp.spmatrix,
    gamma: float,
    alpha: float,
    max_iters: int = DEFAULT_ITERS,
    tol: float = DEFAULT_TOL,
    method: str = "sweep",
    init: np.ndarray | None = None,
    keep_trace: bool = False,
) -> QTable:
    """Solve the soft Bellman equation for one mode's reward table (H, A).

    ``method="sweep"`` applies

        Q <- r + gamma * E_{h'|h,a}[ alpha * logsumexp(Q(h', .) / alpha) ]

    from ``Q = 0`` until the sup-norm change drops below ``tol`` or
    ``max_iters`` sweeps ran. ``method="newton"`` runs soft policy iteration
    (exact soft policy evaluation followed by Boltzmann improvement), which is
    Newton's method on the same fixed-point equation and converges in a
    handful of iterations.
    """
    reward = np.asarray(reward, dtype=float)
    if not np.all(np.isfinite(reward)):
        raise ValueError("reward table has non-finite entries")
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    H, A = reward.shape
    q = np.zeros((H, A)) if init is None else np.array(init, dtype=float)
    trace = []
    residual = np.inf
    it = 0
    if method == "sweep":
        for it in range(1, max_iters + 1):
            if keep_trace:
                trace.append(np.exp(log_softmax(q / alpha, axis=1)))
            q_new = reward + gamma * (aug_env @ _soft_value(q, alpha)).reshape(H, A)
            residual = float(np.max(np.abs(q_new - q)))
            q = q_new
            if residual < tol:
                break
    elif method == "newton":
        eye = sp.identity(H, format="csc")
        for it in range(1, max_iters + 1):
            log_pi = log_softmax(q / alpha, axis=1)
            pi = np.exp(log_pi)
            r_pi = np.sum(pi * (reward - alpha * log_pi), axis=1)
            m_pi = (_policy_matrix(pi) @ aug_env).tocsc()
            v = spla.spsolve(eye - gamma * m_pi, r_pi)
            q_new = reward + gamma * (aug_env @ v).reshape(H, A)
            residual = float(np.max(np.abs(q_new - q)))
            q = q_new
            if residual < tol:
                break
    else:
        raise ValueError(f"unknown soft-Q method {method!r}")
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("soft-Q iteration produced non-finite values")
    return QTable(q, it, residual, tuple(trace))


def boltzmann_policy(q: QTable | np.ndarray, alpha: float) -> PolicyTable:
    values = q.values if isinstance(q, QTable) else np.asarray(q, dtype=float)
    return PolicyTable(log_softmax(values / alpha, axis=1))


def policy_score_gradient(policy: PolicyTable, weights: np.ndarray, alpha: float) -> np.ndarray:
    """Gradient of sum_{h,a} weights(h,a) * log pi(a|h) with respect to Q."""
    pi = policy.probs
    return (weights - pi * weights.sum(axis=1, keepdims=True)) / alpha


def reward_vjp(
    q: QTable, grad_q: np.ndarray, aug_env: sp.spmatrix, gamma: float, alpha: float
) -> np.ndarray:
    """Pull a gradient with respect to the solved Q table back to the reward table.

    When ``q`` carries a sweep trace the unrolled sweeps are differentiated
    exactly. Otherwise ``q`` is treated as the fixed point and the gradient
    comes from the implicit function theorem, which needs one sparse solve
    with the policy-induced augmented chain.
    """
    H, A = grad_q.shape
    if q.trace:
        g = grad_q
        g_r = np.zeros_like(grad_q)
        for pi in reversed(q.trace):
            g_r += g
            g_v = gamma * (aug_env.T @ g.ravel())
            g = g_v[:, None] * pi
        return g_r
    pi = np.exp(log_softmax(q.values / alpha, axis=1))
    pol = _policy_matrix(pi)
    m_pi = (pol @ aug_env).tocsc()
    rhs = aug_env.T @ grad_q.ravel()
    y = spla.spsolve((sp.identity(H, format="csc") - gamma * m_pi).T.tocsc(), rhs)
    return grad_q + gamma * pi * y[:, None]
