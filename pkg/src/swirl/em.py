"""EM training of switching IRL models.

The E-step solves soft-Q for every mode, turns the Q tables into Boltzmann
policies and runs forward-backward on every trajectory. The M-step takes
gradient-ascent steps on the expected complete-data log-likelihood ``G``
with respect to the reward tables (through the soft-Q solution), the mode
transition logits and the initial-mode logits.

Variants: ``"S"`` models condition the mode transition on the current state,
``"I"`` models tie it across states. ``history_len`` sets the size of the
augmented state space the rewards and policies live on.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .inference import ModePosteriors, batch_posteriors, env_log_factor
from .model import (
    DiscreteHmMdp,
    ModelError,
    Spaces,
    Trajectory,
    check_trajectories,
    log_softmax,
    softmax,
)
from .softq import (
    PolicyTable,
    augmented_env_kernel,
    boltzmann_policy,
    policy_score_gradient,
    reward_vjp,
    soft_q_iterate,
)

log = logging.getLogger(__name__)

FIT_FORMAT = "swirl-fit/1"


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FitConfig:
    variant: str = "S"
    history_len: int = 2
    num_modes: int = 2
    gamma: float = 0.95
    alpha: float = 0.1
    em_iters: int = 50
    softq_iters: int = 200
    softq_tol: float = 1e-8
    softq_method: str = "newton"
    learning_rate: float = 0.05
    m_step_steps: int = 2
    optimizer: str = "lbfgs"
    transition_update: str = "closed_form"
    seed: int = 0
    tol: float = 1e-6  # on the per-timestep change of train LL
    patience: int = 3
    action_rewards: bool = False
    init_reward_std: float = 0.01
    init_logit_std: float = 1.0
    init_stickiness: float = 3.0  # added to the self-transition logits at init

    def __post_init__(self):
        if self.variant not in ("I", "S"):
            raise ValueError(f"variant must be 'I' or 'S', got {self.variant!r}")
        if self.em_iters < 1:
            raise ValueError("em_iters must be >= 1")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")
        if self.num_modes < 1:
            raise ValueError("num_modes must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.transition_update not in ("gradient", "closed_form"):
            raise ValueError(f"unknown transition update {self.transition_update!r}")
        if self.optimizer not in ("gd", "adam", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.gamma < 1 or not self.alpha > 0:
            raise ValueError("need 0 <= gamma < 1 and alpha > 0")

    @property
    def label(self) -> str:
        return f"{self.variant}-{self.history_len}"


@dataclass
class Params:
    """Unconstrained parameters optimised in the M-step."""

    reward: np.ndarray  # (Z, H, A), or (Z, H) when rewards ignore the action
    mode_logits: np.ndarray  # (Z, Z) for tied variants, (Z, S, Z) otherwise
    init_logits: np.ndarray  # (Z,)

    def blocks(self):
        return {"reward": self.reward, "mode_logits": self.mode_logits, "init_logits": self.init_logits}

    def copy(self) -> "Params":
        return Params(self.reward.copy(), self.mode_logits.copy(), self.init_logits.copy())


@dataclass(frozen=True)
class SuffStats:
    init: np.ndarray  # (Z,) expected initial-mode counts
    policy: np.ndarray  # (Z, H, A) expected (mode, history, action) counts
    trans: np.ndarray  # (Z, S, Z) expected transition counts keyed by the current state
    constant: float  # mode-independent part of G: log p(s_1) and env kernel terms
    num_steps: int
    num_trajs: int


@dataclass(frozen=True)
class EStep:
    qtables: tuple
    policies: tuple
    posteriors: list
    stats: SuffStats
    G: float
    log_likelihood: float


@dataclass
class FitResult:
    model: DiscreteHmMdp
    config: FitConfig
    train_ll_trace: list = field(default_factory=list)
    aux_trace: list = field(default_factory=list)
    seed: int = 0
    converged: bool = False

    @property
    def train_ll(self) -> float:
        return self.train_ll_trace[-1] if self.train_ll_trace else -np.inf

    def to_dict(self) -> dict:
        return {
            "format": FIT_FORMAT,
            "config": asdict(self.config),
            "seed": self.seed,
            "converged": self.converged,
            "train_ll_trace": [float(x) for x in self.train_ll_trace],
            "aux_trace": [float(x) for x in self.aux_trace],
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FitResult":
        if doc.get("format") != FIT_FORMAT:
            raise ModelError(f"expected format {FIT_FORMAT!r}, got {doc.get('format')!r}")
        return cls(
            model=DiscreteHmMdp.from_dict(doc["model"]),
            config=FitConfig(**doc["config"]),
            train_ll_trace=list(doc["train_ll_trace"]),
            aux_trace=list(doc["aux_trace"]),
            seed=int(doc["seed"]),
            converged=bool(doc["converged"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FitResult":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# parameters <-> model


def model_from_params(params: Params, base: DiscreteHmMdp) -> DiscreteHmMdp:
    Z, S = base.spaces.num_modes, base.spaces.num_states
    A = base.spaces.num_actions
    reward = params.reward
    if reward.ndim == 2:
        reward = np.repeat(reward[:, :, None], A, axis=2)
    logits = params.mode_logits
    if logits.ndim == 2:
        logits = np.broadcast_to(logits[:, None, :], (Z, S, Z)).copy()
    return base.replace(rewards=reward, mode_logits=logits, init_mode=softmax(params.init_logits))


def params_from_model(model: DiscreteHmMdp, config: FitConfig) -> Params:
    reward = model.rewards if config.action_rewards else model.rewards.mean(axis=2)
    logits = model.mode_logits if config.variant == "S" else model.mode_logits[:, 0, :]
    with np.errstate(divide="ignore"):
        init_logits = np.log(model.init_mode)
    return Params(reward.copy(), logits.copy(), init_logits)


def init_params(spaces: Spaces, config: FitConfig, rng: np.random.Generator) -> Params:
    Z, S, A, H = spaces.num_modes, spaces.num_states, spaces.num_actions, spaces.num_augmented
    reward_shape = (Z, H, A) if config.action_rewards else (Z, H)
    reward = rng.normal(0.0, config.init_reward_std, size=reward_shape)
    logit_shape = (Z, S, Z) if config.variant == "S" else (Z, Z)
    mode_logits = rng.normal(0.0, config.init_logit_std, size=logit_shape)
    eye = np.eye(Z)
    mode_logits += config.init_stickiness * (eye[:, None, :] if len(logit_shape) == 3 else eye)
    init_logits = rng.normal(0.0, config.init_logit_std, size=Z)
    return Params(reward, mode_logits, init_logits)


def empirical_init_state(data: Sequence[Trajectory], num_states: int, pseudo_count: float = 1.0) -> np.ndarray:
    """Initial-state frequencies with add-one smoothing, so unseen start states keep mass."""
    counts = np.bincount([tr.states[0] for tr in data], minlength=num_states) + pseudo_count
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# E-step


def solve_policies(model: DiscreteHmMdp, aug_env=None, iters=200, tol=1e-8, method="newton", init=None):
    """Soft-Q table and Boltzmann policy for every mode of ``model``.

    Sweep solves keep their trace so reward gradients differentiate the
    unrolled sweeps; Newton solves use the implicit gradient at the fixed point.
    """
    if aug_env is None:
        aug_env = augmented_env_kernel(model.env, model.spaces)
    qs, pols = [], []
    for z in range(model.spaces.num_modes):
        q = soft_q_iterate(
            model.rewards[z], aug_env, model.gamma, model.alpha, iters, tol, method=method,
            init=None if init is None else init[z], keep_trace=method == "sweep",
        )
        qs.append(q)
        pols.append(boltzmann_policy(q, model.alpha))
    return tuple(qs), tuple(pols)


def sufficient_stats(
    data: Sequence[Trajectory], posteriors: Sequence[ModePosteriors], model: DiscreteHmMdp
) -> SuffStats:
    sp = model.spaces
    Z, S, A, H = sp.num_modes, sp.num_states, sp.num_actions, sp.num_augmented
    aug = sp.augmented()
    if len(data) != len(posteriors):
        raise ValueError(f"{len(data)} trajectories but {len(posteriors)} posteriors")
    for i, (tr, post) in enumerate(zip(data, posteriors)):
        if post.gamma_marginals.shape[0] != len(tr):
            raise ValueError(
                f"trajectory {i}: posterior length {post.gamma_marginals.shape[0]} != {len(tr)}"
            )
    hidx = np.concatenate([aug.histories(tr.states) * A + tr.actions for tr in data])
    gam = np.concatenate([p.gamma_marginals for p in posteriors])
    policy = np.stack([np.bincount(hidx, weights=gam[:, z], minlength=H * A) for z in range(Z)])
    s_prev = np.concatenate([tr.states[:-1] for tr in data])
    xi = np.concatenate([p.xi_pairs.reshape(-1, Z * Z) for p in posteriors])
    trans = np.stack([np.bincount(s_prev, weights=xi[:, k], minlength=S) for k in range(Z * Z)])
    trans = trans.reshape(Z, Z, S).transpose(0, 2, 1)
    init = np.sum([p.gamma_marginals[0] for p in posteriors], axis=0)
    # corrupted transitions the kernel rules out carry no mode information
    constant = float(sum(env_log_factor(tr, model.env, model.init_state, skip_impossible=True) for tr in data))
    return SuffStats(
        init=init,
        policy=policy.reshape(Z, H, A),
        trans=trans,
        constant=constant,
        num_steps=int(sum(len(tr) for tr in data)),
        num_trajs=len(data),
    )


def _xlogy(x, logy):
    # expected counts multiply log-probabilities; zero counts never contribute
    return float(np.sum(np.where(x > 0, x * logy, 0.0)))


def _optimizable_G(model: DiscreteHmMdp, log_policies: np.ndarray, stats: SuffStats) -> float:
    with np.errstate(divide="ignore"):
        log_init = np.log(model.init_mode)
    return (
        _xlogy(stats.init, log_init)
        + _xlogy(stats.policy, log_policies)
        + _xlogy(stats.trans, model.mode_transition.log_probs)
    )


def auxiliary_G(
    theta: DiscreteHmMdp,
    policies: Sequence[PolicyTable],
    posteriors: Sequence[ModePosteriors],
    data: Sequence[Trajectory],
) -> float:
    """Expected complete-data log-likelihood summed over trajectories.

    Includes the constant ``log p(s_1)`` and environment-kernel terms; those
    carry no gradient.
    """
    stats = sufficient_stats(data, posteriors, theta)
    log_pol = np.stack([p.log_probs for p in policies])
    return _optimizable_G(theta, log_pol, stats) + stats.constant


def e_step(theta: DiscreteHmMdp, data: Sequence[Trajectory], config: FitConfig | None = None, aug_env=None) -> EStep:
    config = config or FitConfig(history_len=theta.spaces.history_len, num_modes=theta.spaces.num_modes)
    qs, pols = solve_policies(theta, aug_env, config.softq_iters, config.softq_tol, config.softq_method)
    log_pol = np.stack([p.log_probs for p in pols])
    with np.errstate(divide="ignore"):
        log_init = np.log(theta.init_mode)
    posts = batch_posteriors(data, log_pol, theta.mode_transition.log_probs, log_init, theta.spaces.augmented())
    stats = sufficient_stats(data, posts, theta)
    G = _optimizable_G(theta, log_pol, stats) + stats.constant
    ll = float(sum(p.log_likelihood for p in posts)) + stats.constant
    return EStep(qs, pols, posts, stats, G, ll)


# ---------------------------------------------------------------------------
# M-step


def g_gradient(params: Params, model: DiscreteHmMdp, qtables, policies, stats: SuffStats, aug_env, config: FitConfig):
    """Gradient of the optimisable part of G with respect to every parameter block."""
    Z = model.spaces.num_modes
    g_init = stats.init - stats.num_trajs * softmax(params.init_logits)
    probs = model.mode_transition.probs
    g_trans = stats.trans - probs * stats.trans.sum(axis=2, keepdims=True)
    if params.mode_logits.ndim == 2:
        g_trans = g_trans.sum(axis=1)
    g_reward = np.empty_like(model.rewards)
    for z in range(Z):
        g_q = policy_score_gradient(policies[z], stats.policy[z], model.alpha)
        g_reward[z] = reward_vjp(qtables[z], g_q, aug_env, model.gamma, model.alpha)
    if params.reward.ndim == 2:
        g_reward = g_reward.sum(axis=2)
    grads = Params(g_reward, g_trans, g_init)
    for name, g in grads.blocks().items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
    return grads


def m_step(
    theta: DiscreteHmMdp,
    posteriors: Sequence[ModePosteriors],
    data: Sequence[Trajectory],
    config: FitConfig,
    params: Params | None = None,
    aug_env=None,
    stats: SuffStats | None = None,
) -> DiscreteHmMdp:
    """Ascent steps on G for fixed posteriors; returns the updated model.

    Every update is accepted only if it does not decrease G, so EM keeps
    its monotone likelihood guarantee.
    """
    if aug_env is None:
        aug_env = augmented_env_kernel(theta.env, theta.spaces)
    if stats is None:
        stats = sufficient_stats(data, posteriors, theta)
    return _m_step(theta, stats, config, params, aug_env)[0]


def _trans_G(logits, stats: SuffStats) -> float:
    if logits.ndim == 2:
        return _xlogy(stats.trans.sum(axis=1), log_softmax(logits, axis=-1))
    return _xlogy(stats.trans, log_softmax(logits, axis=-1))


def _init_G(logits, stats: SuffStats) -> float:
    return _xlogy(stats.init, log_softmax(logits))


def closed_form_transitions(stats: SuffStats, tied: bool, pseudo_count: float = 1e-6):
    """Maximisers of the initial-mode and mode-transition terms of G.

    A tiny pseudo-count keeps unvisited (mode, state) rows uniform and every
    log-probability finite.
    """
    counts = stats.trans.sum(axis=1) if tied else stats.trans
    trans_logits = np.log(counts + pseudo_count)
    trans_logits -= trans_logits.max(axis=-1, keepdims=True)
    init_logits = np.log(stats.init + pseudo_count)
    return init_logits - init_logits.max(), trans_logits


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def _direction(grads: Params, scale: float, config: FitConfig, opt_state):
    """Ascent direction from the per-step gradient of G (plain, or Adam-scaled)."""
    g = {k: v * scale for k, v in grads.blocks().items()}
    if config.optimizer == "gd":
        return Params(**g), opt_state
    b1, b2 = ADAM_BETAS
    if opt_state is None:
        opt_state = {"t": 0, "m": {k: np.zeros_like(v) for k, v in g.items()},
                     "v": {k: np.zeros_like(v) for k, v in g.items()}}
    opt_state["t"] += 1
    t = opt_state["t"]
    out = {}
    for k, v in g.items():
        opt_state["m"][k] = b1 * opt_state["m"][k] + (1 - b1) * v
        opt_state["v"][k] = b2 * opt_state["v"][k] + (1 - b2) * v**2
        m_hat = opt_state["m"][k] / (1 - b1**t)
        v_hat = opt_state["v"][k] / (1 - b2**t)
        out[k] = m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return Params(**out), opt_state


def _m_step(theta, stats, config, params=None, aug_env=None, opt_state=None):
    if params is None:
        params = params_from_model(theta, config)
    if config.learning_rate == 0 or config.m_step_steps == 0:
        return theta, params, opt_state
    params = params.copy()
    scale = 1.0 / max(stats.num_steps, 1)
    solve = dict(iters=config.softq_iters, tol=config.softq_tol, method=config.softq_method)

    if config.transition_update == "closed_form":
        init_logits, trans_logits = closed_form_transitions(stats, params.mode_logits.ndim == 2)
        if _init_G(init_logits, stats) >= _init_G(params.init_logits, stats):
            params.init_logits = init_logits
        if _trans_G(trans_logits, stats) >= _trans_G(params.mode_logits, stats):
            params.mode_logits = trans_logits
        blocks = ("reward",)
    else:
        blocks = ("reward", "mode_logits", "init_logits")

    def evaluate(p, warm=None):
        model = model_from_params(p, theta)
        qs, pols = solve_policies(model, aug_env, init=warm, **solve)
        log_pol = np.stack([pl.log_probs for pl in pols])
        return model, qs, pols, _optimizable_G(model, log_pol, stats) * scale

    model, qs, pols, obj = evaluate(params)
    if config.optimizer == "lbfgs":
        params, model = _lbfgs_rewards(params, model, qs, obj, stats, aug_env, config, evaluate)
        return model, params, opt_state

    for _ in range(config.m_step_steps):
        grads = g_gradient(params, model, qs, pols, stats, aug_env, config)
        direction, opt_state = _direction(grads, scale, config, opt_state)
        step = config.learning_rate
        warm = [q.values for q in qs] if config.softq_method == "newton" else None
        for _halving in range(20):
            trial = params.copy()
            for name in blocks:
                setattr(trial, name, getattr(params, name) + step * getattr(direction, name))
            t_model, t_qs, t_pols, t_obj = evaluate(trial, warm)
            if t_obj >= obj:
                break
            step *= 0.5
        else:
            # no ascent along this direction at any tested step size
            break
        params, model, qs, pols, obj = trial, t_model, t_qs, t_pols, t_obj
    return model, params, opt_state


def _lbfgs_rewards(params, model, qs, obj, stats, aug_env, config, evaluate):
    """Quasi-Newton ascent on the policy term of G over the reward block only."""
    from scipy.optimize import minimize

    shape = params.reward.shape
    cache = {}
    warm = [[q.values for q in qs]]

    def fun(x):
        trial = params.copy()
        trial.reward = x.reshape(shape)
        t_model, t_qs, t_pols, t_obj = evaluate(trial, warm[0] if config.softq_method == "newton" else None)
        warm[0] = [q.values for q in t_qs]
        grads = g_gradient(trial, t_model, t_qs, t_pols, stats, aug_env, config)
        cache[x.tobytes()] = (trial, t_model, t_obj)
        return -t_obj, -grads.reward.ravel() / max(stats.num_steps, 1)

    res = minimize(fun, params.reward.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": config.m_step_steps, "gtol": 1e-12, "ftol": 1e-15})
    hit = cache.get(res.x.tobytes())
    if hit is None or hit[2] < obj:
        return params, model
    return hit[0], hit[1]


# ---------------------------------------------------------------------------
# fitting


def base_model(spaces: Spaces, env: np.ndarray, data, config: FitConfig) -> DiscreteHmMdp:
    Z, S, H, A = spaces.num_modes, spaces.num_states, spaces.num_augmented, spaces.num_actions
    return DiscreteHmMdp(
        spaces=spaces,
        env=env,
        rewards=np.zeros((Z, H, A)),
        mode_logits=np.zeros((Z, S, Z)),
        init_state=empirical_init_state(data, S),
        init_mode=np.full(Z, 1.0 / Z),
        gamma=config.gamma,
        alpha=config.alpha,
    )


def fit(
    data: Sequence[Trajectory],
    env: np.ndarray,
    config: FitConfig,
    init: DiscreteHmMdp | None = None,
) -> FitResult:
    """Run EM from a seeded random start (or from ``init``)."""
    env = np.asarray(env, dtype=float)
    S, A = env.shape[0], env.shape[1]
    spaces = Spaces(config.num_modes, S, A, config.history_len)
    check_trajectories(data, spaces)
    aug_env = augmented_env_kernel(env, spaces)
    base = base_model(spaces, env, data, config)
    if init is None:
        params = init_params(spaces, config, np.random.default_rng(config.seed))
    else:
        params = params_from_model(init, config)
    theta = model_from_params(params, base)

    result = FitResult(model=theta, config=config, seed=config.seed)
    opt_state = None
    quiet = 0
    for k in range(config.em_iters):
        est = e_step(theta, data, config, aug_env)
        if not np.isfinite(est.log_likelihood):
            raise NumericalError(f"EM iteration {k}: training log-likelihood is not finite")
        if result.train_ll_trace:
            delta = est.log_likelihood - result.train_ll_trace[-1]
            quiet = quiet + 1 if abs(delta) < config.tol * max(est.stats.num_steps, 1) else 0
        result.train_ll_trace.append(est.log_likelihood)
        result.aux_trace.append(est.G)
        result.model = theta
        log.debug("seed %d iter %d: train LL %.6f", config.seed, k, est.log_likelihood)
        if quiet >= config.patience:
            result.converged = True
            break
        if k == config.em_iters - 1:
            break
        theta, params, opt_state = _m_step(theta, est.stats, config, params, aug_env, opt_state)
    return result


def _fit_seed(args):
    data, env, config, seed = args
    return fit(data, env, replace(config, seed=seed))


def multi_seed_fit(
    data: Sequence[Trajectory],
    env: np.ndarray,
    config: FitConfig,
    num_seeds: int = 20,
    keep_top: int = 10,
    workers: int = 1,
) -> list[FitResult]:
    """Fit with seeds ``0..num_seeds-1`` and keep the ``keep_top`` best by train LL."""
    if not num_seeds >= keep_top >= 1:
        raise ValueError("need num_seeds >= keep_top >= 1")
    jobs = [(data, env, config, seed) for seed in range(num_seeds)]
    if workers > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_fit_seed)(j) for j in jobs)
    else:
        results = [_fit_seed(j) for j in jobs]
    results.sort(key=lambda r: (-r.train_ll, r.seed))
    return results[:keep_top]
