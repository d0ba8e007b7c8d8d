"""Comparison models: single-mode MaxEnt IRL and (recurrent) categorical ARHMMs.

An ARHMM here is a hidden Markov model over discrete states whose emission
at step t is the next state, ``s_{t+1} ~ p(. | s_t, z_t)``. The recurrent
variant lets the mode transition depend on ``s_t``, with the same softmax
parameterisation SWIRL uses.

In a deterministic environment where each action leads to a distinct next
state, a state sequence ``s_1..s_T`` corresponds to the trajectory
``(s_t, a_t)_{t<T}`` with ``a_t`` the action taking ``s_t`` to ``s_{t+1}``,
and SWIRL without history is an ARHMM with emission ``pi_z(a | s)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .em import FitConfig, FitResult, closed_form_transitions, fit
from .inference import batch_forward_backward
from .model import Trajectory, log_softmax, softmax

LAPLACE = 1e-6


def fit_maxent(data: Sequence[Trajectory], env: np.ndarray, config: FitConfig) -> FitResult:
    """Single-mode IRL on the current state: SWIRL with one mode and no history."""
    return fit(data, env, replace(config, num_modes=1, history_len=1))


@dataclass
class ArhmmModel:
    emission: np.ndarray  # (Z, S, S) p(s' | s, z)
    mode_logits: np.ndarray  # (Z, S, Z); constant over s unless recurrent
    init_mode: np.ndarray  # (Z,)
    init_state: np.ndarray  # (S,)
    recurrent: bool = False

    @property
    def num_modes(self) -> int:
        return self.emission.shape[0]

    @property
    def log_trans(self) -> np.ndarray:
        return log_softmax(self.mode_logits, axis=-1)


@dataclass
class ArhmmFit:
    model: ArhmmModel
    train_ll_trace: list = field(default_factory=list)


def _potentials(model: ArhmmModel, states: np.ndarray):
    with np.errstate(divide="ignore"):
        log_emit = np.log(model.emission[:, states[:-1], states[1:]]).T  # (T-1, Z)
    log_trans = np.transpose(model.log_trans[:, states[:-2], :], (1, 0, 2))  # (T-2, Z, Z)
    return log_emit, log_trans


def _posteriors(model: ArhmmModel, sequences):
    with np.errstate(divide="ignore"):
        log_init = np.log(model.init_mode)
    out = []
    for states in sequences:
        if len(states) < 2:
            out.append(None)
            continue
        log_emit, log_trans = _potentials(model, states)
        g, xi, ll = batch_forward_backward(log_init, log_trans[None], log_emit[None])
        out.append((g[0], xi[0], float(ll[0])))
    return out


def arhmm_log_likelihood(model: ArhmmModel, states) -> float:
    """log p(s_1..s_T) under the ARHMM, including log p(s_1)."""
    states = np.asarray(states, dtype=np.intp)
    with np.errstate(divide="ignore"):
        ll = float(np.log(model.init_state[states[0]]))
    post = _posteriors(model, [states])[0]
    return ll if post is None else ll + post[2]


def _total_ll(model, sequences, posts):
    with np.errstate(divide="ignore"):
        ll = float(np.sum(np.log(model.init_state[[s[0] for s in sequences]])))
    return ll + sum(p[2] for p in posts if p is not None)


def _expected_counts(model: ArhmmModel, sequences, posts):
    Z, S = model.num_modes, model.emission.shape[1]
    emit = np.zeros((Z, S, S))
    trans = np.zeros((Z, S, Z))
    init = np.zeros(Z)
    for states, post in zip(sequences, posts):
        if post is None:
            continue
        g, xi, _ = post
        for z in range(Z):
            np.add.at(emit[z], (states[:-1], states[1:]), g[:, z])
        if len(xi):
            for z in range(Z):
                for z2 in range(Z):
                    trans[z, :, z2] += np.bincount(states[:-2], weights=xi[:, z, z2], minlength=S)
        init += g[0]
    return emit, trans, init


def _xlogy(x, logy):
    return float(np.sum(np.where(x > 0, x * logy, 0.0)))


def fit_arhmm(
    sequences,
    num_states: int,
    num_modes: int,
    recurrent: bool = False,
    em_iters: int = 100,
    seed: int = 0,
    tol: float = 1e-8,
) -> ArhmmFit:
    """Baum-Welch for a categorical AR(1) hidden Markov model over state sequences.

    ``sequences`` may be raw state sequences or trajectories. Each M-step
    block is replaced by its smoothed closed-form maximiser only when that
    does not lower the expected complete-data log-likelihood, so the
    training log-likelihood never decreases.
    """
    seqs = [np.asarray(getattr(s, "states", s), dtype=np.intp) for s in sequences]
    Z, S = num_modes, num_states
    rng = np.random.default_rng(seed)
    emission = softmax(rng.normal(0.0, 1.0, size=(Z, S, S)), axis=-1)
    logits = rng.normal(0.0, 1.0, size=(Z, S, Z) if recurrent else (Z, Z))
    if not recurrent:
        logits = np.broadcast_to(logits[:, None, :], (Z, S, Z)).copy()
    init_state = np.bincount([s[0] for s in seqs], minlength=S) / len(seqs)
    model = ArhmmModel(emission, logits, softmax(rng.normal(size=Z)), init_state, recurrent)

    trace = []
    for _ in range(em_iters):
        posts = _posteriors(model, seqs)
        trace.append(_total_ll(model, seqs, posts))
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < tol:
            break
        emit, trans, init = _expected_counts(model, seqs, posts)
        new_emission = (emit + LAPLACE) / (emit + LAPLACE).sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore"):
            if _xlogy(emit, np.log(new_emission)) > _xlogy(emit, np.log(model.emission)):
                model.emission = new_emission
        counts = _Counts(init, trans)
        init_logits, trans_logits = closed_form_transitions(counts, tied=not recurrent)
        if not recurrent:
            trans_logits = np.broadcast_to(trans_logits[:, None, :], (Z, S, Z)).copy()
        if _xlogy(trans, log_softmax(trans_logits)) > _xlogy(trans, model.log_trans):
            model.mode_logits = trans_logits
        new_init = softmax(init_logits)
        with np.errstate(divide="ignore"):
            if _xlogy(init, np.log(new_init)) > _xlogy(init, np.log(model.init_mode)):
                model.init_mode = new_init
    return ArhmmFit(model, trace)


@dataclass
class _Counts:
    init: np.ndarray
    trans: np.ndarray


def emission_from_policy(log_policies: np.ndarray, env: np.ndarray) -> np.ndarray:
    """ARHMM emission implied by SWIRL policies without history:
    ``p(s' | s, z) = sum_a P(s' | s, a) pi_z(a | s)``."""
    return np.einsum("sat,zsa->zst", env, np.exp(log_policies))


def unique_actions(env: np.ndarray) -> np.ndarray:
    """For an injective deterministic kernel, ``table[s, s']`` is the action taking s to s' (or -1)."""
    S, A, _ = env.shape
    if not np.all((env == 0) | (env == 1)) or not np.allclose(env.sum(axis=2), 1):
        raise ValueError("environment kernel is not deterministic")
    table = np.full((S, S), -1, dtype=np.intp)
    for s in range(S):
        for a in range(A):
            s2 = int(np.argmax(env[s, a]))
            if table[s, s2] != -1:
                raise ValueError(f"actions {table[s, s2]} and {a} both take state {s} to {s2}")
            table[s, s2] = a
    return table


def states_to_trajectory(states, env: np.ndarray) -> Trajectory:
    """Trajectory ``(s_t, a_t)_{t<T}`` whose actions reproduce the state sequence."""
    states = np.asarray(states, dtype=np.intp)
    actions = unique_actions(env)[states[:-1], states[1:]]
    if np.any(actions < 0):
        raise ValueError("state sequence contains an impossible transition")
    return Trajectory(states[:-1], actions)
