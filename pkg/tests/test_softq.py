import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp as sp_logsumexp

from conftest import random_kernel
from swirl.model import AugmentedSpace, Spaces
from swirl.softq import (
    augmented_env_kernel,
    boltzmann_policy,
    logsumexp,
    policy_score_gradient,
    reward_vjp,
    soft_q_iterate,
)


def dense_aug_kernel(env, S, A, L):
    """Loop-built reference: P(h'|h,a) by decoding every history."""
    aug = AugmentedSpace(S, L)
    H = S**L
    out = np.zeros((H, A, H))
    for h in range(H):
        last = aug.decode(h)[-1]
        for a in range(A):
            for s2 in range(S):
                out[h, a, aug.shift(h, s2)] += env[last, a, s2]
    return out


def reference_soft_q(r, P, gamma, alpha, sweeps=4000):
    """Plain dense value iteration run far past convergence."""
    q = np.zeros_like(r)
    for _ in range(sweeps):
        v = alpha * sp_logsumexp(q / alpha, axis=1)
        q = r + gamma * np.einsum("hag,g->ha", P, v)
    return q


def test_logsumexp_handles_neg_inf():
    x = np.array([[-np.inf, -np.inf], [0.0, -np.inf], [1.0, 2.0]])
    out = logsumexp(x, axis=1)
    assert out[0] == -np.inf
    assert out[1] == 0.0
    assert out[2] == pytest.approx(np.log(np.e + np.e**2), abs=1e-12)


@pytest.mark.parametrize("L", [1, 2, 3])
def test_augmented_kernel_matches_loop_reference(rng, L):
    S, A = 3, 2
    env = random_kernel(rng, S, A)
    mat = augmented_env_kernel(env, Spaces(1, S, A, L)).toarray().reshape(S**L, A, S**L)
    assert np.allclose(mat, dense_aug_kernel(env, S, A, L), atol=1e-15)
    assert np.allclose(mat.sum(axis=2), 1.0, atol=1e-12)


def test_single_state_closed_form():
    # one state, actions with rewards r_a: V = alpha * lse(r / alpha) / (1 - gamma)
    r = np.array([[0.3, -1.0, 0.7]])
    gamma, alpha = 0.9, 0.4
    env = np.ones((1, 3, 1))
    P = augmented_env_kernel(env, Spaces(1, 1, 3))
    q = soft_q_iterate(r, P, gamma, alpha, max_iters=50, method="newton").values
    v = alpha * sp_logsumexp(r[0] / alpha) / (1 - gamma)
    assert np.allclose(q, r + gamma * v, atol=1e-10)


@pytest.mark.parametrize("method", ["sweep", "newton"])
def test_fixed_point_matches_dense_reference(rng, method):
    S, A, L = 3, 2, 2
    gamma, alpha = 0.8, 0.3
    env = random_kernel(rng, S, A)
    r = rng.normal(size=(S**L, A))
    P = augmented_env_kernel(env, Spaces(1, S, A, L))
    q = soft_q_iterate(r, P, gamma, alpha, max_iters=2000, tol=1e-12, method=method)
    ref = reference_soft_q(r, dense_aug_kernel(env, S, A, L), gamma, alpha)
    assert np.max(np.abs(q.values - ref)) < 1e-9


@given(st.integers(0, 10_000), st.floats(0.0, 0.99), st.floats(0.05, 2.0))
def test_bellman_contraction(seed, gamma, alpha):
    rng = np.random.default_rng(seed)
    S, A = 3, 2
    P = augmented_env_kernel(random_kernel(rng, S, A), Spaces(1, S, A))
    r = rng.normal(size=(S, A))
    q1, q2 = rng.normal(scale=3, size=(2, S, A))
    t1 = soft_q_iterate(r, P, gamma, alpha, max_iters=1, init=q1).values
    t2 = soft_q_iterate(r, P, gamma, alpha, max_iters=1, init=q2).values
    assert np.max(np.abs(t1 - t2)) <= gamma * np.max(np.abs(q1 - q2)) + 1e-12


def test_sweep_residual_follows_gamma_envelope(rng):
    S, A = 4, 3
    gamma = 0.95
    P = augmented_env_kernel(random_kernel(rng, S, A), Spaces(1, S, A))
    r = rng.uniform(0, 1, size=(S, A))
    q = soft_q_iterate(r, P, gamma, 0.1, max_iters=200, tol=0.0)
    # |Q_{k+1} - Q_k| <= gamma^k |Q_1 - Q_0| and |Q_1 - Q_0| = |r|
    assert q.iterations_run == 200
    assert q.residual <= gamma**199 * np.max(np.abs(r)) * (1 + 1e-9)


@given(st.integers(0, 10_000), st.floats(-5, 5))
def test_policy_invariant_to_constant_reward_shift(seed, c):
    rng = np.random.default_rng(seed)
    S, A = 3, 3
    P = augmented_env_kernel(random_kernel(rng, S, A), Spaces(1, S, A))
    r = rng.normal(size=(S, A))
    pi1 = boltzmann_policy(soft_q_iterate(r, P, 0.9, 0.5, method="newton"), 0.5).probs
    pi2 = boltzmann_policy(soft_q_iterate(r + c, P, 0.9, 0.5, method="newton"), 0.5).probs
    assert np.max(np.abs(pi1 - pi2)) < 1e-8


def test_policy_rows_normalised(rng):
    q = rng.normal(scale=10, size=(6, 4))
    pi = boltzmann_policy(q, 0.05)
    assert np.allclose(pi.probs.sum(axis=1), 1.0, atol=1e-12)


def test_soft_q_rejects_bad_inputs(rng):
    P = augmented_env_kernel(random_kernel(rng, 2, 2), Spaces(1, 2, 2))
    r = np.zeros((2, 2))
    with pytest.raises(ValueError):
        soft_q_iterate(r, P, 1.0, 0.1)
    with pytest.raises(ValueError):
        soft_q_iterate(r, P, 0.9, 0.0)
    with pytest.raises(ValueError):
        soft_q_iterate(r * np.nan, P, 0.9, 0.1)
    with pytest.raises(ValueError):
        soft_q_iterate(r, P, 0.9, 0.1, method="other")


def _objective(r, P, W, gamma, alpha, method, iters):
    q = soft_q_iterate(r, P, gamma, alpha, max_iters=iters, tol=0.0 if method == "sweep" else 1e-13,
                       method=method)
    return float(np.sum(W * boltzmann_policy(q, alpha).log_probs))


@pytest.mark.parametrize("method,iters", [("sweep", 60), ("newton", 50)])
def test_reward_vjp_matches_finite_differences(rng, method, iters):
    S, A, L = 3, 2, 2
    gamma, alpha = 0.85, 0.5
    P = augmented_env_kernel(random_kernel(rng, S, A), Spaces(1, S, A, L))
    r = rng.normal(size=(S**L, A))
    W = rng.uniform(0, 3, size=(S**L, A))
    q = soft_q_iterate(r, P, gamma, alpha, max_iters=iters, tol=0.0 if method == "sweep" else 1e-13,
                       method=method, keep_trace=method == "sweep")
    pol = boltzmann_policy(q, alpha)
    grad = reward_vjp(q, policy_score_gradient(pol, W, alpha), P, gamma, alpha)
    eps = 1e-5
    fd = np.zeros_like(r)
    for idx in np.ndindex(r.shape):
        e = np.zeros_like(r)
        e[idx] = eps
        fd[idx] = (_objective(r + e, P, W, gamma, alpha, method, iters)
                   - _objective(r - e, P, W, gamma, alpha, method, iters)) / (2 * eps)
    assert np.max(np.abs(grad - fd)) / np.max(np.abs(fd)) < 1e-6


def test_unrolled_and_implicit_gradients_agree_at_convergence(rng):
    S, A = 3, 2
    gamma, alpha = 0.7, 0.5
    P = augmented_env_kernel(random_kernel(rng, S, A), Spaces(1, S, A))
    r = rng.normal(size=(S, A))
    g = rng.normal(size=(S, A))
    q_sweep = soft_q_iterate(r, P, gamma, alpha, max_iters=400, tol=0.0, keep_trace=True)
    q_newton = soft_q_iterate(r, P, gamma, alpha, method="newton", tol=1e-14)
    a = reward_vjp(q_sweep, g, P, gamma, alpha)
    b = reward_vjp(q_newton, g, P, gamma, alpha)
    assert np.max(np.abs(a - b)) < 1e-8
