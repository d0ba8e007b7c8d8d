"""Metrics and statistical reporting for fitted models."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import spearmanr

from .em import FitConfig, FitResult, multi_seed_fit, solve_policies
from .envs import GroundTruth, perturb_trajectories
from .inference import batch_posteriors, env_log_factor, map_segments
from .model import DiscreteHmMdp, Trajectory

REPORT_FORMAT = "swirl-report/1"
CSV_COLUMNS = (
    "model", "variant", "L", "Z", "seed", "fraction",
    "test_ll_per_traj", "test_ll_per_step", "reward_corr_mean", "reward_corr", "segmentation_accuracy",
    "reward_corr_invariant",
)
CORRELATION_COLUMNS = ("reward_corr", "reward_corr_mean", "reward_corr_invariant")


@dataclass(frozen=True)
class HeldoutLL:
    per_trajectory: float
    per_timestep: float
    values: tuple


def heldout_ll(model: DiscreteHmMdp, policies, test: Sequence[Trajectory]) -> HeldoutLL:
    """Mean held-out log-likelihood per trajectory and per timestep."""
    if not test:
        raise ValueError("empty test set")
    posts = infer(model, policies, test)
    lls = [p.log_likelihood + env_log_factor(tr, model.env, model.init_state) for p, tr in zip(posts, test)]
    steps = sum(len(tr) for tr in test)
    return HeldoutLL(float(np.mean(lls)), float(np.sum(lls) / steps), tuple(float(x) for x in lls))


def infer(model: DiscreteHmMdp, policies, data: Sequence[Trajectory]):
    log_pol = np.stack([p.log_probs for p in policies])
    with np.errstate(divide="ignore"):
        log_init = np.log(model.init_mode)
    return batch_posteriors(data, log_pol, model.mode_transition.log_probs, log_init, model.spaces.augmented())


# ---------------------------------------------------------------------------
# reward recovery


def lift_rewards(rewards: np.ndarray, num_states: int, history_len: int) -> np.ndarray:
    """Express a (Z, S^l, A) reward table on the longer history space S^L.

    A history ``(s_1, ..., s_L)`` gets the reward of its last ``l`` states.
    """
    Z, H_small, A = rewards.shape
    l = round(np.log(H_small) / np.log(num_states)) if H_small > 1 else 1
    if num_states ** l != H_small or l > history_len:
        raise ValueError(f"cannot lift a table over {H_small} histories to L={history_len}")
    idx = np.arange(num_states ** history_len) % H_small
    return rewards[:, idx, :]


def pearson(x, y) -> tuple[float, bool]:
    """Pearson correlation; zero-variance input gives ``(0.0, True)``."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if denom <= 1e-300 * max(len(x), 1):
        return 0.0, True
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0)), False


@dataclass(frozen=True)
class ModeAlignment:
    """``mapping[k]`` is the learned mode matched to true mode ``k``."""

    mapping: tuple

    def relabel(self, learned_labels) -> np.ndarray:
        """Translate learned mode labels into true-mode labels (-1 when unmatched)."""
        lookup = np.full(max(max(self.mapping) + 1, int(np.max(learned_labels, initial=0)) + 1), -1)
        for true_mode, learned in enumerate(self.mapping):
            if lookup[learned] == -1:
                lookup[learned] = true_mode
        return lookup[np.asarray(learned_labels)]


def correlation_matrix(learned: np.ndarray, truth: np.ndarray, mask=None) -> np.ndarray:
    """Pearson correlation between every (true mode, learned mode) pair."""
    if learned.shape[1:] != truth.shape[1:]:
        raise ValueError(f"reward tables differ in shape: {learned.shape} vs {truth.shape}")
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    out = np.empty((truth.shape[0], learned.shape[0]))
    for k in range(truth.shape[0]):
        for j in range(learned.shape[0]):
            out[k, j] = pearson(learned[j][sel], truth[k][sel])[0]
    return out


def align_by_matrix(score: np.ndarray) -> ModeAlignment:
    """Score-maximising assignment of learned modes (columns) to true modes (rows).

    With fewer learned than true modes, each true mode takes its best learned mode.
    """
    n_true, n_learned = score.shape
    if n_learned >= n_true:
        rows, cols = linear_sum_assignment(-score)
        mapping = [0] * n_true
        for r, c in zip(rows, cols):
            mapping[r] = int(c)
    else:
        mapping = [int(np.argmax(score[k])) for k in range(n_true)]
    return ModeAlignment(tuple(mapping))


def reward_correlation(
    learned: np.ndarray, truth: np.ndarray, alignment: ModeAlignment | None = None, mask=None
) -> tuple[list[float], ModeAlignment, list[bool]]:
    """Per-true-mode Pearson correlation with the matched learned reward map.

    ``mask`` selects the augmented histories to compare (e.g. the ones the
    environment can actually produce). Returns (correlations, alignment,
    degenerate flags).
    """
    learned = np.asarray(learned, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if learned.shape[1:] != truth.shape[1:]:
        raise ValueError(f"reward tables differ in shape: {learned.shape} vs {truth.shape}")
    if alignment is None:
        alignment = align_by_matrix(correlation_matrix(learned, truth, mask))
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    corrs, flags = [], []
    for k, j in enumerate(alignment.mapping):
        r, flag = pearson(learned[j][sel], truth[k][sel])
        corrs.append(r)
        flags.append(flag)
    return corrs, alignment, flags


def shaping_basis(num_states: int, history_len: int, gamma: float) -> np.ndarray:
    """Columns span the rewards that leave every soft-optimal policy unchanged.

    For a potential ``c`` over the first (respectively last) ``L-1`` states of a
    history, ``r(h) + c(h[:-1]) - gamma * c(h[1:])`` shifts Q by ``c(h[:-1])``
    for every action, so the Boltzmann policy is the same. With ``L = 1`` this
    is the constant shift.
    """
    H = num_states ** history_len
    G = num_states ** (history_len - 1)
    h = np.arange(H)
    basis = np.zeros((H, G))
    np.add.at(basis, (h, h // num_states), 1.0)
    np.add.at(basis, (h, h % G), -gamma)
    return basis


def shaping_residual(values: np.ndarray, basis: np.ndarray, mask=None) -> np.ndarray:
    """Least-squares residual of per-history rewards after removing the shaping span."""
    sel = slice(None) if mask is None else np.asarray(mask, dtype=bool)
    B = basis[sel]
    v = np.asarray(values, dtype=float)[sel]
    coef, *_ = np.linalg.lstsq(B, v, rcond=None)
    return v - B @ coef


def invariant_correlation_matrix(learned, truth, num_states: int, history_len: int, gamma: float, mask=None):
    """Correlation matrix of rewards compared modulo potential shaping.

    Action columns are averaged first, which is exact for state-only rewards.
    """
    basis = shaping_basis(num_states, history_len, gamma)
    lr = [shaping_residual(np.mean(x, axis=-1), basis, mask) for x in np.asarray(learned, dtype=float)]
    tr = [shaping_residual(np.mean(x, axis=-1), basis, mask) for x in np.asarray(truth, dtype=float)]
    return np.array([[pearson(l, t)[0] for l in lr] for t in tr])


def segmentation_accuracy(predicted, true, alignment: ModeAlignment | None = None, num_true_modes=None) -> float:
    """Fraction of correctly labelled steps after mode alignment, averaged over trajectories.

    Without an alignment the accuracy-maximising one is used.
    """
    predicted = [np.asarray(p) for p in predicted]
    true = [np.asarray(t) for t in true]
    if len(predicted) != len(true):
        raise ValueError("different numbers of predicted and true label sequences")
    for p, t in zip(predicted, true):
        if p.shape != t.shape:
            raise ValueError(f"label length mismatch: {p.shape} vs {t.shape}")
    if alignment is None:
        n_true = num_true_modes or int(max(t.max() for t in true)) + 1
        n_learned = int(max(p.max() for p in predicted)) + 1
        confusion = np.zeros((n_true, n_learned))
        for p, t in zip(predicted, true):
            np.add.at(confusion, (t, p), 1.0)
        alignment = align_by_matrix(confusion)
    return float(np.mean([np.mean(alignment.relabel(p) == t) for p, t in zip(predicted, true)]))


# ---------------------------------------------------------------------------
# boxplot statistics


@dataclass(frozen=True)
class Summary:
    median: float
    q1: float
    q3: float
    iqr: float
    outliers: tuple

    @classmethod
    def of(cls, values) -> "Summary":
        values = np.asarray(values, dtype=float)
        q1, med, q3 = np.percentile(values, [25, 50, 75])
        _, out = iqr_outliers(values) if len(values) >= 4 else (values, np.array([]))
        return cls(float(med), float(q1), float(q3), float(q3 - q1), tuple(float(x) for x in out))


def iqr_outliers(values) -> tuple[np.ndarray, np.ndarray]:
    """Split values into (kept, outliers) with the 1.5 IQR boxplot rule.

    Quartiles use linear interpolation between order statistics.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 4:
        raise ValueError("need at least 4 values")
    q1, q3 = np.percentile(values, [25, 75])
    iqr = q3 - q1
    out = (values > q3 + 1.5 * iqr) | (values < q1 - 1.5 * iqr)
    return values[~out], values[out]


# ---------------------------------------------------------------------------
# reports


@dataclass
class SeedRecord:
    model: str
    variant: str
    L: int
    Z: int
    seed: int
    fraction: float
    test_ll_per_traj: float
    test_ll_per_step: float
    reward_corr: list | None = None
    segmentation_accuracy: float | None = None
    reward_corr_invariant: list | None = None

    @property
    def reward_corr_mean(self):
        return None if self.reward_corr is None else float(np.mean(self.reward_corr))


@dataclass
class MetricReport:
    records: list = field(default_factory=list)

    def values(self, metric: str) -> list:
        out = [getattr(r, metric) for r in self.records]
        return [x for x in out if x is not None]

    def aggregate(self) -> dict:
        agg = {}
        for metric in ("test_ll_per_traj", "test_ll_per_step", "reward_corr_mean", "segmentation_accuracy"):
            vals = self.values(metric)
            if vals:
                agg[metric] = asdict(Summary.of(vals))
        return agg

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "records": [asdict(r) for r in self.records],
            "aggregate": self.aggregate(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        if doc.get("format") != REPORT_FORMAT:
            raise ValueError(f"expected format {REPORT_FORMAT!r}")
        return cls([SeedRecord(**r) for r in doc["records"]])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_csv(self, include_correlation: bool = True) -> str:
        cols = [c for c in CSV_COLUMNS if include_correlation or c not in CORRELATION_COLUMNS]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.records:
            row = {**asdict(r), "reward_corr_mean": r.reward_corr_mean}
            for key in ("reward_corr", "reward_corr_invariant"):
                if row[key] is not None:
                    row[key] = ";".join(f"{x:.10g}" for x in row[key])
            writer.writerow(["" if row[c] is None else row[c] for c in cols])
        return buf.getvalue()


def model_name(config: FitConfig) -> str:
    if config.num_modes == 1 and config.history_len == 1:
        return "MaxEnt"
    return config.label


def evaluate_fit(
    result: FitResult,
    test: Sequence[Trajectory],
    truth: GroundTruth | None = None,
    fraction: float = 0.0,
    name: str | None = None,
) -> SeedRecord:
    """Held-out metrics for one fit; reward and segmentation metrics need ground truth."""
    model, cfg = result.model, result.config
    _, policies = solve_policies(model, iters=cfg.softq_iters, tol=cfg.softq_tol, method=cfg.softq_method)
    ll = heldout_ll(model, policies, test)
    rec = SeedRecord(
        model=name or model_name(cfg), variant=cfg.variant, L=cfg.history_len, Z=cfg.num_modes,
        seed=result.seed, fraction=fraction, test_ll_per_traj=ll.per_trajectory, test_ll_per_step=ll.per_timestep,
    )
    if truth is not None:
        true_rewards = truth.true_rewards
        S = model.spaces.num_states
        L_true = round(np.log(true_rewards.shape[1]) / np.log(S)) if S > 1 else 1
        if cfg.history_len > L_true:
            raise ValueError("learned history length exceeds the ground-truth table")
        learned = lift_rewards(model.rewards, S, L_true)
        inv = invariant_correlation_matrix(learned, true_rewards, S, L_true, model.gamma, truth.feasible)
        alignment = align_by_matrix(inv)
        rec.reward_corr = reward_correlation(learned, true_rewards, alignment, truth.feasible)[0]
        rec.reward_corr_invariant = [float(inv[k, j]) for k, j in enumerate(alignment.mapping)]
        if all(tr.labels is not None for tr in test):
            posts = infer(model, policies, test)
            predicted = [map_segments(p) for p in posts]
            rec.segmentation_accuracy = segmentation_accuracy(predicted, [tr.labels for tr in test], alignment)
    return rec


def evaluate_fits(results, test, truth=None, fraction=0.0, name=None) -> MetricReport:
    return MetricReport([evaluate_fit(r, test, truth, fraction, name) for r in results])


def compare_models(reports: Sequence[MetricReport]) -> list[dict]:
    """One row per model: median held-out LL and its IQR, best model first."""
    rows = []
    for rep in reports:
        if not rep.records:
            continue
        first = rep.records[0]
        s = Summary.of(rep.values("test_ll_per_traj"))
        rows.append({
            "model": first.model, "variant": first.variant, "L": first.L, "Z": first.Z,
            "median_test_ll": s.median, "iqr": s.iqr,
        })
    rows.sort(key=lambda r: (-r["median_test_ll"], r["model"]))
    return rows


COMPARISON_COLUMNS = ("model", "variant", "L", "Z", "median_test_ll", "iqr")


def comparison_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# robustness


@dataclass
class SweepPoint:
    fraction: float
    report: MetricReport


def robustness_sweep(
    fractions: Sequence[float],
    train: Sequence[Trajectory],
    test: Sequence[Trajectory],
    env: np.ndarray,
    config: FitConfig,
    truth: GroundTruth | None = None,
    num_seeds: int = 20,
    keep_top: int = 10,
    perturb_seed: int = 0,
    workers: int = 1,
) -> list[SweepPoint]:
    """Perturb the training data at each fraction, refit, and evaluate on clean test data."""
    S, A = env.shape[0], env.shape[1]
    points = []
    for frac in fractions:
        if not 0 <= frac <= 0.5:
            raise ValueError(f"perturbation fraction {frac} outside [0, 0.5]")
        data = list(train) if frac == 0 else perturb_trajectories(train, frac, perturb_seed, S, A)
        results = multi_seed_fit(data, env, config, num_seeds, keep_top, workers)
        points.append(SweepPoint(float(frac), evaluate_fits(results, test, truth, fraction=float(frac))))
    return points


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fraction", "median_test_ll", "median_reward_corr", "median_accuracy", "accuracy_iqr"])
    for p in points:
        agg = p.report.aggregate()
        get = lambda k, f="median": agg[k][f] if k in agg else ""
        writer.writerow([p.fraction, get("test_ll_per_traj"), get("reward_corr_mean"),
                         get("segmentation_accuracy"), get("segmentation_accuracy", "iqr")])
    return buf.getvalue()


def sweep_trend(points: Sequence[SweepPoint], metric: str = "segmentation_accuracy") -> float:
    """Spearman correlation between perturbation fraction and the metric's median."""
    fr = [p.fraction for p in points]
    med = [Summary.of(p.report.values(metric)).median for p in points]
    return float(spearmanr(fr, med).correlation)
