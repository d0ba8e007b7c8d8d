"""Log-space forward-backward inference of hidden-mode posteriors.

Generative convention: ``z_{t+1} ~ P_z(. | z_t, s_t)`` and
``a_t ~ pi_{z_t}(. | h_t)`` where ``h_t`` is the augmented history at ``t``.
The environment factors ``p(s_1)`` and ``P(s_{t+1} | s_t, a_t)`` do not depend
on the mode; they only shift the log-likelihood.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import AugmentedSpace, DiscreteHmMdp, ModeTransition, Trajectory
from .softq import PolicyTable, logsumexp


def with_errstate():
    return np.errstate(divide="ignore", invalid="ignore")


@dataclass(frozen=True)
class ModePosteriors:
    gamma_marginals: np.ndarray  # (T, Z)
    xi_pairs: np.ndarray  # (T-1, Z, Z)
    log_likelihood: float
    degenerate: bool = False


def _stack_log_policies(policies) -> np.ndarray:
    if isinstance(policies, np.ndarray):
        return policies
    return np.stack([p.log_probs if isinstance(p, PolicyTable) else np.log(p) for p in policies])


def _log_mode_trans(mode_trans) -> np.ndarray:
    if isinstance(mode_trans, ModeTransition):
        return mode_trans.log_probs
    with with_errstate():
        return np.log(np.asarray(mode_trans, dtype=float))


def env_log_factor(
    traj: Trajectory, env: np.ndarray, init_state: np.ndarray | None = None, skip_impossible: bool = False
) -> float:
    """log p(s_1) + sum_t log P(s_{t+1} | s_t, a_t); the mode-free part of the likelihood.

    With ``skip_impossible`` the transitions the kernel rules out (corrupted
    data) contribute nothing instead of ``-inf``.
    """
    s, a = traj.states, traj.actions
    with with_errstate():
        logp = np.log(env[s[:-1], a[:-1], s[1:]])
        if skip_impossible:
            logp = logp[logp > -np.inf]
        total = float(np.sum(logp))
        if init_state is not None:
            total += float(np.log(init_state[s[0]]))
    return total


def batch_forward_backward(log_init, log_trans, log_emit):
    """Forward-backward over a batch of equal-length sequences.

    log_init  (Z,)               log p(z_1)
    log_trans (N, T-1, Z, Z)     log p(z_{t+1} = j | z_t = i, ...)
    log_emit  (N, T, Z)          log p(observation_t | z_t)

    Returns (gamma (N, T, Z), xi (N, T-1, Z, Z), loglik (N,)); sequences with
    zero probability get uniform posteriors and ``-inf`` log-likelihood.
    """
    N, T, Z = log_emit.shape
    la = np.empty((N, T, Z))
    lb = np.zeros((N, T, Z))
    with with_errstate():
        la[:, 0] = log_init + log_emit[:, 0]
        for t in range(1, T):
            la[:, t] = logsumexp(la[:, t - 1, :, None] + log_trans[:, t - 1], axis=1) + log_emit[:, t]
        for t in range(T - 2, -1, -1):
            lb[:, t] = logsumexp(log_trans[:, t] + (log_emit[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
        loglik = logsumexp(la[:, -1], axis=1)
        ok = np.isfinite(loglik)
        safe_ll = np.where(ok, loglik, 0.0)
        gamma = np.exp(la + lb - safe_ll[:, None, None])
        xi = np.exp(
            la[:, :-1, :, None]
            + log_trans
            + (log_emit[:, 1:] + lb[:, 1:])[:, :, None, :]
            - safe_ll[:, None, None, None]
        )
    if not ok.all():
        gamma[~ok] = 1.0 / Z
        xi[~ok] = 1.0 / Z**2
    return gamma, xi, loglik


def mode_log_potentials(traj: Trajectory, log_policies, log_mode_trans, aug: AugmentedSpace):
    """Per-step emission (T, Z) and transition (T-1, Z, Z) log-potentials."""
    h = aug.histories(traj.states)
    log_emit = log_policies[:, h, traj.actions].T
    log_trans = np.transpose(log_mode_trans[:, traj.states[:-1], :], (1, 0, 2))
    return log_emit, log_trans


def forward_backward(
    traj: Trajectory,
    policies,
    mode_trans,
    init_mode,
    aug: AugmentedSpace,
    env: np.ndarray | None = None,
    init_state: np.ndarray | None = None,
) -> ModePosteriors:
    """Posterior mode marginals, pairwise posteriors and log p(traj).

    When ``env`` (and optionally ``init_state``) is given, the environment
    factors are added to the log-likelihood; posteriors are unaffected.
    """
    log_pol = _stack_log_policies(policies)
    log_mt = _log_mode_trans(mode_trans)
    with with_errstate():
        log_init = np.log(np.asarray(init_mode, dtype=float))
    log_emit, log_trans = mode_log_potentials(traj, log_pol, log_mt, aug)
    gamma, xi, ll = batch_forward_backward(log_init, log_trans[None], log_emit[None])
    loglik = float(ll[0])
    degenerate = not np.isfinite(loglik)
    if env is not None and not degenerate:
        loglik += env_log_factor(traj, env, init_state)
    return ModePosteriors(gamma[0], xi[0], loglik, degenerate)


def batch_posteriors(
    trajs: Sequence[Trajectory], log_policies, log_mode_trans, log_init_mode, aug: AugmentedSpace
) -> list[ModePosteriors]:
    """Forward-backward for many trajectories, batching equal-length ones.

    Results come back in input order and do not depend on the grouping.
    """
    groups = defaultdict(list)
    for i, tr in enumerate(trajs):
        groups[len(tr)].append(i)
    out: list[ModePosteriors | None] = [None] * len(trajs)
    for T in sorted(groups):
        idx = groups[T]
        pots = [mode_log_potentials(trajs[i], log_policies, log_mode_trans, aug) for i in idx]
        log_emit = np.stack([p[0] for p in pots])
        log_trans = np.stack([p[1] for p in pots])
        gamma, xi, ll = batch_forward_backward(log_init_mode, log_trans, log_emit)
        for k, i in enumerate(idx):
            out[i] = ModePosteriors(gamma[k], xi[k], float(ll[k]), not np.isfinite(ll[k]))
    return out


def sequence_log_likelihood(traj: Trajectory, model: DiscreteHmMdp, policies) -> float:
    """log p(traj | model), environment factors included."""
    return forward_backward(
        traj, policies, model.mode_transition, model.init_mode, model.spaces.augmented(),
        env=model.env, init_state=model.init_state,
    ).log_likelihood


def map_segments(post: ModePosteriors) -> np.ndarray:
    """Pointwise MAP mode label per step; ties go to the smallest mode index."""
    return np.argmax(post.gamma_marginals, axis=1)


def viterbi(traj: Trajectory, policies, mode_trans, init_mode, aug: AugmentedSpace) -> np.ndarray:
    """Most likely joint mode sequence (alternative to pointwise MAP decoding)."""
    log_pol = _stack_log_policies(policies)
    log_emit, log_trans = mode_log_potentials(traj, log_pol, _log_mode_trans(mode_trans), aug)
    T, Z = log_emit.shape
    with with_errstate():
        score = np.log(np.asarray(init_mode, dtype=float)) + log_emit[0]
    back = np.zeros((T, Z), dtype=np.intp)
    for t in range(1, T):
        cand = score[:, None] + log_trans[t - 1]
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(Z)] + log_emit[t]
    path = np.empty(T, dtype=np.intp)
    path[-1] = int(np.argmax(score))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path
