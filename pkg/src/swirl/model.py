"""Model spaces, parameter tables, trajectories and history augmentation.

Notation used throughout the package:

    Z  number of hidden modes
    S  number of environment states
    A  number of actions
    L  history length; rewards and policies live on S^L augmented states
    H  = S^L, number of augmented states

Tables are plain numpy arrays. The layout conventions are

    env kernel         (S, A, S)   P(s' | s, a)
    rewards            (Z, H, A)   r_z(h, a)
    mode logits        (Z, S, Z)   logit of P_z(z' | z, s), softmax over last axis
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MODEL_FORMAT = "swirl-model/1"
ROW_TOL = 1e-9


class InvalidStateError(ValueError):
    pass


class ModelError(ValueError):
    """Raised when a model document or table is malformed."""


@dataclass(frozen=True)
class Spaces:
    num_modes: int
    num_states: int
    num_actions: int
    history_len: int = 1

    def __post_init__(self):
        for name in ("num_modes", "num_states", "num_actions", "history_len"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ModelError(f"{name} must be a positive integer, got {value!r}")
        # python ints do not overflow; guard against numpy index overflow instead
        if self.num_states ** self.history_len > np.iinfo(np.intp).max:
            raise ModelError(
                f"augmented space S^L = {self.num_states}^{self.history_len} overflows the index range"
            )

    @property
    def num_augmented(self) -> int:
        return self.num_states ** self.history_len

    def augmented(self) -> "AugmentedSpace":
        return AugmentedSpace(self.num_states, self.history_len)


@dataclass(frozen=True)
class AugmentedSpace:
    """Bijective index over S^L history tuples.

    Tuples are ordered oldest-first, ``(s_{t-L+1}, ..., s_t)``, and laid out
    row-major with the oldest state as the most significant digit, so for
    ``L == 1`` the index is the state itself. Windows shorter than ``L`` (the
    first steps of a trajectory) are left-padded by repeating their oldest
    entry.
    """

    base_size: int
    history_len: int = 1

    @property
    def total_size(self) -> int:
        return self.base_size ** self.history_len

    def encode(self, window: Sequence[int]) -> int:
        window = list(window)
        if not window:
            raise InvalidStateError("history window must be non-empty")
        if len(window) > self.history_len:
            raise InvalidStateError(
                f"history window has {len(window)} entries, expected at most {self.history_len}"
            )
        for s in window:
            if not 0 <= s < self.base_size:
                raise InvalidStateError(f"state index {s} outside [0, {self.base_size})")
        window = [window[0]] * (self.history_len - len(window)) + window
        index = 0
        for s in window:
            index = index * self.base_size + int(s)
        return index

    def decode(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.total_size:
            raise InvalidStateError(f"augmented index {index} outside [0, {self.total_size})")
        digits = []
        for _ in range(self.history_len):
            index, s = divmod(index, self.base_size)
            digits.append(s)
        return tuple(reversed(digits))

    def last_state(self, index):
        """Current (most recent) state of augmented index/indices."""
        return np.asarray(index) % self.base_size

    def shift(self, index, next_state):
        """Augmented index after dropping the oldest state and appending ``next_state``."""
        index = np.asarray(index)
        if self.history_len == 1:
            return np.asarray(next_state) + 0 * index
        return (index % (self.base_size ** (self.history_len - 1))) * self.base_size + next_state

    def histories(self, states) -> np.ndarray:
        """Augmented index at every step of a state sequence (vectorised encode)."""
        states = np.asarray(states, dtype=np.intp)
        if states.size and (states.min() < 0 or states.max() >= self.base_size):
            raise InvalidStateError(f"state index outside [0, {self.base_size})")
        out = np.zeros_like(states)
        for lag in range(self.history_len - 1, -1, -1):
            # state `lag` steps back, replicate-padded with the first state
            idx = np.maximum(np.arange(len(states)) - lag, 0)
            out = out * self.base_size + states[idx]
        return out


def encode_history(window: Sequence[int], spaces: Spaces) -> int:
    return spaces.augmented().encode(window)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", np.asarray(self.states, dtype=np.intp))
        object.__setattr__(self, "actions", np.asarray(self.actions, dtype=np.intp))
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.intp))
        if self.states.ndim != 1 or self.states.shape != self.actions.shape:
            raise ModelError("states and actions must be 1-d sequences of equal length")
        if len(self.states) < 1:
            raise ModelError("trajectory must have at least one step")
        if self.labels is not None and self.labels.shape != self.states.shape:
            raise ModelError("labels must match the trajectory length")

    def __len__(self):
        return len(self.states)

    def check(self, num_states: int, num_actions: int) -> None:
        for name, arr, n in (("state", self.states, num_states), ("action", self.actions, num_actions)):
            bad = np.flatnonzero((arr < 0) | (arr >= n))
            if bad.size:
                raise InvalidStateError(
                    f"{name} index {arr[bad[0]]} at step {bad[0]} outside [0, {n})"
                )


def softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    m = np.max(logits, axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


@dataclass(frozen=True)
class ModeTransition:
    """State-dependent mode transition ``P_z(z' | z, s)`` as logits of shape (Z, S, Z).

    State-independent models store one (Z, Z) block broadcast over states,
    which keeps the derived probabilities exactly equal across ``s``.
    """

    logits: np.ndarray

    @classmethod
    def tied(cls, logits_zz, num_states: int) -> "ModeTransition":
        logits_zz = np.asarray(logits_zz, dtype=float)
        z = logits_zz.shape[0]
        return cls(np.broadcast_to(logits_zz[:, None, :], (z, num_states, z)).copy())

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=-1)


@dataclass(frozen=True)
class DiscreteHmMdp:
    spaces: Spaces
    env: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (Z, H, A)
    mode_logits: np.ndarray  # (Z, S, Z)
    init_state: np.ndarray  # (S,)
    init_mode: np.ndarray  # (Z,)
    gamma: float = 0.95
    alpha: float = 0.1

    def __post_init__(self):
        for name in ("env", "rewards", "mode_logits", "init_state", "init_mode"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def mode_transition(self) -> ModeTransition:
        return ModeTransition(self.mode_logits)

    def replace(self, **changes) -> "DiscreteHmMdp":
        fields = dict(
            spaces=self.spaces, env=self.env, rewards=self.rewards, mode_logits=self.mode_logits,
            init_state=self.init_state, init_mode=self.init_mode, gamma=self.gamma, alpha=self.alpha,
        )
        fields.update(changes)
        return DiscreteHmMdp(**fields)

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        sp = self.spaces
        return {
            "format": MODEL_FORMAT,
            "spaces": {
                "num_modes": sp.num_modes,
                "num_states": sp.num_states,
                "num_actions": sp.num_actions,
                "history_len": sp.history_len,
            },
            "gamma": float(self.gamma),
            "alpha": float(self.alpha),
            "env": self.env.ravel().tolist(),
            "rewards": self.rewards.ravel().tolist(),
            "mode_logits": self.mode_logits.ravel().tolist(),
            "init_state": self.init_state.tolist(),
            "init_mode": self.init_mode.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscreteHmMdp":
        if doc.get("format") != MODEL_FORMAT:
            raise ModelError(f"expected format {MODEL_FORMAT!r}, got {doc.get('format')!r}")
        sp = Spaces(**doc["spaces"])
        Z, S, A, H = sp.num_modes, sp.num_states, sp.num_actions, sp.num_augmented
        try:
            return cls(
                spaces=sp,
                env=np.reshape(doc["env"], (S, A, S)),
                rewards=np.reshape(doc["rewards"], (Z, H, A)),
                mode_logits=np.reshape(doc["mode_logits"], (Z, S, Z)),
                init_state=np.asarray(doc["init_state"], dtype=float).reshape(S),
                init_mode=np.asarray(doc["init_mode"], dtype=float).reshape(Z),
                gamma=float(doc["gamma"]),
                alpha=float(doc["alpha"]),
            )
        except (KeyError, ValueError) as exc:
            raise ModelError(f"malformed model document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "DiscreteHmMdp":
        return cls.from_dict(json.loads(text))


def validate_model(model: DiscreteHmMdp) -> list[str]:
    """Return every invariant violation of ``model``; an empty list means ok."""
    problems = []
    sp = model.spaces
    Z, S, A, H = sp.num_modes, sp.num_states, sp.num_actions, sp.num_augmented

    def shape(name, arr, expected):
        if arr.shape != expected:
            problems.append(f"{name}: shape {arr.shape}, expected {expected}")
            return False
        return True

    if shape("env", model.env, (S, A, S)):
        if not np.all(np.isfinite(model.env)) or model.env.min() < 0 or model.env.max() > 1:
            problems.append("env: entries must lie in [0, 1]")
        sums = model.env.sum(axis=2)
        for s, a in zip(*np.nonzero(np.abs(sums - 1) > ROW_TOL)):
            problems.append(f"env: row (s={s}, a={a}) sums to {sums[s, a]:.12g}")
    if shape("rewards", model.rewards, (Z, H, A)):
        if not np.all(np.isfinite(model.rewards)):
            problems.append("rewards: non-finite entries")
    if shape("mode_logits", model.mode_logits, (Z, S, Z)):
        if not np.all(np.isfinite(model.mode_logits)):
            problems.append("mode_logits: non-finite entries")
    for name, vec, n in (("init_state", model.init_state, S), ("init_mode", model.init_mode, Z)):
        if shape(name, vec, (n,)):
            if np.any(vec < 0) or abs(vec.sum() - 1) > ROW_TOL:
                problems.append(f"{name}: not a probability vector (sum {vec.sum():.12g})")
    if not 0 <= model.gamma < 1:
        problems.append(f"gamma: {model.gamma} outside [0, 1)")
    if not model.alpha > 0:
        problems.append(f"alpha: {model.alpha} must be positive")
    return problems


def check_trajectories(trajs: Sequence[Trajectory], spaces: Spaces) -> None:
    if not trajs:
        raise ModelError("no trajectories")
    for i, tr in enumerate(trajs):
        try:
            tr.check(spaces.num_states, spaces.num_actions)
        except InvalidStateError as exc:
            raise InvalidStateError(f"trajectory {i}: {exc}") from None
