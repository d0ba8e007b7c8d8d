"""Ground-truth generators and trajectory data handling.

The gridworld benchmark: a 5x5 grid, five actions, an agent switching
between a home-seeking mode (reward for being at home) and a water-seeking
mode whose reward depends on the previous location as well (reward for
arriving at the water port, and for leaving it).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import DiscreteHmMdp, InvalidStateError, ModelError, Spaces, Trajectory
from .softq import augmented_env_kernel, boltzmann_policy, soft_q_iterate

TRAJ_FORMAT = "swirl-traj/1"

ACTIONS = ("up", "down", "left", "right", "stay")
MOVES = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1), "stay": (0, 0)}
HOME, WATER = 0, 1


@dataclass(frozen=True)
class GridworldSpec:
    width: int = 5
    height: int = 5
    home_state: int = 0
    water_state: int = 24
    # P(switch mode) at the mode's trigger state and anywhere else
    p_switch: float = 0.8
    p_switch_elsewhere: float = 0.02
    reward: float = 1.0
    gamma: float = 0.95
    alpha: float = 0.1
    history_len: int = 2

    @property
    def num_states(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class GroundTruth:
    true_rewards: np.ndarray  # (Z, H, A)
    true_mode_logits: np.ndarray  # (Z, S, Z)
    feasible: np.ndarray  # (H,) bool, histories the environment can produce
    spec: GridworldSpec | None = None
    policies: tuple = ()


def step(spec: GridworldSpec, s: int, a: int) -> int:
    row, col = divmod(s, spec.width)
    dr, dc = MOVES[ACTIONS[a]]
    r, c = row + dr, col + dc
    if not (0 <= r < spec.height and 0 <= c < spec.width):
        return s
    return r * spec.width + c


def gridworld_kernel(spec: GridworldSpec) -> np.ndarray:
    S, A = spec.num_states, len(ACTIONS)
    env = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            env[s, a, step(spec, s, a)] = 1.0
    return env


def feasible_histories(env: np.ndarray, spaces: Spaces) -> np.ndarray:
    """Augmented states that can occur: consecutive states reachable in one step.

    Replicate-padded windows (a repeated first state) are feasible too, since
    they also describe the first steps of a trajectory.
    """
    aug = spaces.augmented()
    reach = env.sum(axis=1) > 0  # (S, S)
    out = np.zeros(spaces.num_augmented, dtype=bool)
    for h in range(spaces.num_augmented):
        window = aug.decode(h)
        ok = True
        for prev, cur in zip(window[:-1], window[1:]):
            if not reach[prev, cur] and prev != cur:
                ok = False
                break
        out[h] = ok
    return out


def gridworld_rewards(spec: GridworldSpec, spaces: Spaces) -> np.ndarray:
    aug = spaces.augmented()
    H, A = spaces.num_augmented, spaces.num_actions
    rewards = np.zeros((2, H, A))
    for h in range(H):
        window = aug.decode(h)
        cur = window[-1]
        prev = window[-2] if len(window) > 1 else cur
        if cur == spec.home_state:
            rewards[HOME, h] = spec.reward
        arrived = cur == spec.water_state and prev != spec.water_state
        left = prev == spec.water_state and cur != spec.water_state
        if arrived or left:
            rewards[WATER, h] = spec.reward
    return rewards


def build_gridworld(spec: GridworldSpec = GridworldSpec()) -> tuple[DiscreteHmMdp, GroundTruth]:
    """Gridworld HM-MDP with the true rewards, mode dynamics and optimal policies."""
    S = spec.num_states
    if spec.width < 1 or spec.height < 1:
        raise ModelError("grid dimensions must be positive")
    for name in ("home_state", "water_state"):
        if not 0 <= getattr(spec, name) < S:
            raise ModelError(f"{name} outside the grid")
    if spec.home_state == spec.water_state:
        raise ModelError("home and water states must differ")
    if not (0 <= spec.p_switch <= 1 and 0 <= spec.p_switch_elsewhere <= 1):
        raise ModelError("switch probabilities must lie in [0, 1]")
    spaces = Spaces(2, S, len(ACTIONS), spec.history_len)
    env = gridworld_kernel(spec)
    probs = np.empty((2, S, 2))
    for z, trigger in ((HOME, spec.home_state), (WATER, spec.water_state)):
        p = np.full(S, spec.p_switch_elsewhere)
        p[trigger] = spec.p_switch
        probs[z, :, 1 - z] = p
        probs[z, :, z] = 1 - p
    with np.errstate(divide="ignore"):
        logits = np.log(probs)
    # keep logits finite for degenerate switch probabilities
    logits = np.maximum(logits, -1e3)
    rewards = gridworld_rewards(spec, spaces)
    model = DiscreteHmMdp(
        spaces=spaces,
        env=env,
        rewards=rewards,
        mode_logits=logits,
        init_state=np.full(S, 1.0 / S),
        init_mode=np.full(2, 0.5),
        gamma=spec.gamma,
        alpha=spec.alpha,
    )
    aug_env = augmented_env_kernel(env, spaces)
    policies = tuple(
        boltzmann_policy(soft_q_iterate(rewards[z], aug_env, spec.gamma, spec.alpha, method="newton"), spec.alpha)
        for z in range(2)
    )
    truth = GroundTruth(rewards, logits, feasible_histories(env, spaces), spec, policies)
    return model, truth


def _categorical(cdf_rows, u):
    return int(np.searchsorted(cdf_rows, u * cdf_rows[-1], side="right"))


def sample_trajectory(model: DiscreteHmMdp, policies, length: int, rng: np.random.Generator) -> Trajectory:
    aug = model.spaces.augmented()
    pol_cdf = np.cumsum(np.stack([p.probs for p in policies]), axis=-1)
    env_cdf = np.cumsum(model.env, axis=-1)
    mode_cdf = np.cumsum(model.mode_transition.probs, axis=-1)
    states = np.empty(length, dtype=np.intp)
    actions = np.empty(length, dtype=np.intp)
    modes = np.empty(length, dtype=np.intp)
    u = rng.random((length, 4))
    z = _categorical(np.cumsum(model.init_mode), u[0, 0])
    s = _categorical(np.cumsum(model.init_state), u[0, 1])
    window = [s]
    for t in range(length):
        states[t], modes[t] = s, z
        h = aug.encode(window)
        a = _categorical(pol_cdf[z, h], u[t, 2])
        actions[t] = a
        if t == length - 1:
            break
        s_next = _categorical(env_cdf[s, a], u[t, 3])
        z = _categorical(mode_cdf[z, s], u[t + 1, 0])
        s = s_next
        window = (window + [s])[-model.spaces.history_len:]
    return Trajectory(states, actions, modes)


def sample_trajectories(
    model: DiscreteHmMdp, policies, num: int, length: int, seed: int
) -> tuple[list[Trajectory], list[np.ndarray]]:
    """Ancestral sampling; trajectory ``i`` uses its own stream seeded by ``(seed, i)``."""
    if isinstance(policies, GroundTruth):
        policies = policies.policies
    trajs = [sample_trajectory(model, policies, length, np.random.default_rng([seed, i])) for i in range(num)]
    return trajs, [tr.labels for tr in trajs]


def perturb_trajectories(
    data: Sequence[Trajectory], fraction: float, seed: int, num_states: int, num_actions: int
) -> list[Trajectory]:
    """Replace ``floor(fraction * entries)`` states and, separately, actions by random indices."""
    if not 0 <= fraction <= 0.5:
        raise ValueError(f"perturbation fraction {fraction} outside [0, 0.5]")
    rng = np.random.default_rng(seed)
    lengths = [len(tr) for tr in data]
    total = sum(lengths)
    states = np.concatenate([tr.states for tr in data])
    actions = np.concatenate([tr.actions for tr in data])
    k = math.floor(fraction * total + 1e-9)
    for arr, n in ((states, num_states), (actions, num_actions)):
        where = rng.choice(total, size=k, replace=False)
        arr[where] = rng.integers(0, n, size=k)
    out = []
    start = 0
    for tr, T in zip(data, lengths):
        out.append(Trajectory(states[start:start + T], actions[start:start + T], tr.labels))
        start += T
    return out


def train_test_split(data: Sequence, fraction: float = 0.8, seed: int = 0):
    """Seeded shuffle, then the first ``floor(fraction * N)`` items are training data."""
    if not 0 < fraction < 1:
        raise ValueError("split fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(data))
    n_train = math.floor(round(fraction * len(data), 9))
    return [data[i] for i in order[:n_train]], [data[i] for i in order[n_train:]]


# ---------------------------------------------------------------------------
# swirl-traj/1 files


@dataclass
class TrajectoryFile:
    trajectories: list
    num_states: int
    num_actions: int
    split: str | None = None

    def spaces(self, num_modes: int = 1, history_len: int = 1) -> Spaces:
        return Spaces(num_modes, self.num_states, self.num_actions, history_len)


def dumps_trajectories(trajs, num_states=None, num_actions=None, split=None) -> str:
    header = {"format": TRAJ_FORMAT}
    if num_states is not None:
        header["num_states"] = int(num_states)
    if num_actions is not None:
        header["num_actions"] = int(num_actions)
    if split is not None:
        header["split"] = split
    lines = [json.dumps(header, separators=(",", ":"))]
    for tr in trajs:
        row = {"states": tr.states.tolist(), "actions": tr.actions.tolist()}
        if tr.labels is not None:
            row["labels"] = tr.labels.tolist()
        lines.append(json.dumps(row, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def export_trajectories(path, trajs, num_states=None, num_actions=None, split=None) -> None:
    Path(path).write_text(dumps_trajectories(trajs, num_states, num_actions, split), encoding="utf-8")


class TrajectoryFormatError(ValueError):
    pass


def parse_trajectories(text: str, source: str = "<string>") -> TrajectoryFile:
    header = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrajectoryFormatError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise TrajectoryFormatError(f"{source}:{lineno}: expected a JSON object")
        if "format" in obj:
            if rows or header:
                raise TrajectoryFormatError(f"{source}:{lineno}: header must be the first line")
            if obj["format"] != TRAJ_FORMAT:
                raise TrajectoryFormatError(f"{source}:{lineno}: unsupported format {obj['format']!r}")
            unknown = set(obj) - {"format", "num_states", "num_actions", "split"}
            if unknown:
                raise TrajectoryFormatError(f"{source}:{lineno}: unknown header keys {sorted(unknown)}")
            if obj.get("split") not in (None, "train", "test"):
                raise TrajectoryFormatError(f"{source}:{lineno}: split must be 'train' or 'test'")
            header = obj
            continue
        try:
            tr = Trajectory(obj["states"], obj["actions"], obj.get("labels"))
        except (KeyError, TypeError, ValueError) as exc:
            raise TrajectoryFormatError(f"{source}:{lineno}: malformed trajectory ({exc})") from None
        if tr.states.min() < 0 or tr.actions.min() < 0:
            raise TrajectoryFormatError(f"{source}:{lineno}: negative index")
        rows.append((lineno, tr))
    if not rows:
        raise TrajectoryFormatError(f"{source}: no trajectories")
    S = header.get("num_states", max(int(tr.states.max()) for _, tr in rows) + 1)
    A = header.get("num_actions", max(int(tr.actions.max()) for _, tr in rows) + 1)
    for lineno, tr in rows:
        try:
            tr.check(S, A)
        except InvalidStateError as exc:
            raise InvalidStateError(f"{source}:{lineno}: {exc}") from None
    return TrajectoryFile([tr for _, tr in rows], int(S), int(A), header.get("split"))


def ingest_trajectories(path) -> TrajectoryFile:
    path = Path(path)
    return parse_trajectories(path.read_text(encoding="utf-8"), str(path))
