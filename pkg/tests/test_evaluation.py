import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_model
from swirl.em import FitConfig, FitResult, multi_seed_fit, solve_policies
from swirl.envs import GridworldSpec, build_gridworld, gridworld_kernel, sample_trajectories
from swirl.evaluation import (
    COMPARISON_COLUMNS,
    CSV_COLUMNS,
    MetricReport,
    ModeAlignment,
    SeedRecord,
    SweepPoint,
    align_by_matrix,
    compare_models,
    comparison_csv,
    correlation_matrix,
    evaluate_fit,
    evaluate_fits,
    heldout_ll,
    invariant_correlation_matrix,
    iqr_outliers,
    lift_rewards,
    pearson,
    reward_correlation,
    robustness_sweep,
    segmentation_accuracy,
    shaping_basis,
    shaping_residual,
    sweep_csv,
    sweep_trend,
)
from swirl.model import DiscreteHmMdp, Spaces
from swirl.softq import augmented_env_kernel, boltzmann_policy, soft_q_iterate


def sampled(model, n, T, seed):
    _, pols = solve_policies(model)
    return sample_trajectories(model, pols, n, T, seed)[0]


# ---------------------------------------------------------------------------
# held-out likelihood


def test_truth_beats_perturbed_models(rng):
    truth = random_model(rng, Z=2, S=4, A=3, L=1, deterministic=True, alpha=0.5)
    test = sampled(truth, 40, 60, seed=1)
    _, pols = solve_policies(truth)
    best = heldout_ll(truth, pols, test).per_trajectory
    for k in range(5):
        noisy = truth.replace(
            rewards=truth.rewards + rng.normal(0, 0.5, truth.rewards.shape),
            mode_logits=truth.mode_logits + rng.normal(0, 0.5, truth.mode_logits.shape),
        )
        _, npols = solve_policies(noisy)
        assert heldout_ll(noisy, npols, test).per_trajectory < best


def test_uniform_policy_closed_form():
    spec = GridworldSpec()
    S, A, T = 25, 5, 500
    init = np.arange(1, S + 1) / np.arange(1, S + 1).sum()
    model = DiscreteHmMdp(
        spaces=Spaces(1, S, A, 1), env=gridworld_kernel(spec), rewards=np.zeros((1, S, A)),
        mode_logits=np.zeros((1, S, 1)), init_state=init, init_mode=np.ones(1), gamma=0.9, alpha=1.0,
    )
    test = sampled(model, 3, T, seed=0)
    _, pols = solve_policies(model)
    ll = heldout_ll(model, pols, test)
    expected = [T * np.log(1 / A) + np.log(init[tr.states[0]]) for tr in test]
    assert np.allclose(ll.values, expected, atol=1e-8)
    assert ll.per_trajectory == pytest.approx(np.mean(expected), abs=1e-8)
    assert ll.per_timestep == pytest.approx(np.sum(expected) / (3 * T), abs=1e-10)


def test_heldout_ll_order_invariant_and_nonempty(rng):
    m = random_model(rng, Z=2, S=3, A=2, deterministic=True)
    test = sampled(m, 6, 20, seed=4)
    _, pols = solve_policies(m)
    a = heldout_ll(m, pols, test)
    b = heldout_ll(m, pols, test[::-1])
    assert a.per_trajectory == pytest.approx(b.per_trajectory, abs=1e-10)
    with pytest.raises(ValueError):
        heldout_ll(m, pols, [])


# ---------------------------------------------------------------------------
# correlation and alignment


def test_pearson_against_numpy(rng):
    x, y = rng.normal(size=(2, 50))
    assert pearson(x, y)[0] == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).normal(size=30)
    r, flag = pearson(a * x + b, x)
    assert r == pytest.approx(1.0, abs=1e-9) and not flag


def test_pearson_degenerate_and_shapes():
    assert pearson(np.ones(5), np.arange(5)) == (0.0, True)
    with pytest.raises(ValueError):
        pearson(np.ones(5), np.ones(4))


def test_reward_correlation_identity_and_noise():
    rng = np.random.default_rng(7)
    truth = rng.normal(size=(2, 250, 5))  # 1250 entries per mode
    corrs, align, flags = reward_correlation(truth.copy(), truth)
    assert np.allclose(corrs, 1.0) and align.mapping == (0, 1) and flags == [False, False]
    big = [abs(pearson(rng.normal(size=1250), truth[0])[0]) for _ in range(300)]
    assert max(big) < 0.2
    with pytest.raises(ValueError):
        reward_correlation(truth[:, :10], truth)


def test_alignment_recovers_permutation(rng):
    truth = rng.normal(size=(3, 20, 2))
    perm = [2, 0, 1]
    learned = truth[perm] * 3.0 + 1.0
    corrs, align, _ = reward_correlation(learned, truth)
    # true mode k is learned mode perm.index(k)
    assert align.mapping == tuple(perm.index(k) for k in range(3))
    assert np.allclose(corrs, 1.0)
    assert align.relabel([0, 1, 2]).tolist() == perm


def test_alignment_with_fewer_learned_modes():
    score = np.array([[0.9], [0.3]])
    assert align_by_matrix(score).mapping == (0, 0)


def test_correlation_matrix_respects_mask(rng):
    truth = rng.normal(size=(1, 6, 1))
    learned = truth.copy()
    learned[0, 5] = 100.0
    mask = np.arange(6) < 5
    assert correlation_matrix(learned, truth, mask)[0, 0] == pytest.approx(1.0)
    assert correlation_matrix(learned, truth)[0, 0] < 0.9


def test_lift_rewards():
    r = np.arange(6, dtype=float).reshape(1, 3, 2)
    lifted = lift_rewards(r, 3, 2)
    assert lifted.shape == (1, 9, 2)
    for prev in range(3):
        for cur in range(3):
            assert np.array_equal(lifted[0, prev * 3 + cur], r[0, cur])
    assert lift_rewards(r, 3, 1) is not r and np.array_equal(lift_rewards(r, 3, 1), r)
    with pytest.raises(ValueError):
        lift_rewards(np.zeros((1, 9, 2)), 3, 1)


# ---------------------------------------------------------------------------
# shaping invariance


@given(st.integers(0, 10_000), st.integers(1, 3))
def test_shaping_leaves_policy_unchanged(seed, L):
    # the oracle is the soft-optimal policy itself, solved for both rewards
    rng = np.random.default_rng(seed)
    S, A, gamma, alpha = 3, 2, 0.8, 0.5
    env = rng.dirichlet(np.ones(S), size=(S, A))
    P = augmented_env_kernel(env, Spaces(1, S, A, L))
    r = rng.normal(size=(S**L, A))
    c = rng.normal(size=S ** (L - 1))
    shaped = r + (shaping_basis(S, L, gamma) @ c)[:, None]
    pi1 = boltzmann_policy(soft_q_iterate(r, P, gamma, alpha, method="newton", tol=1e-12), alpha).probs
    pi2 = boltzmann_policy(soft_q_iterate(shaped, P, gamma, alpha, method="newton", tol=1e-12), alpha).probs
    assert np.max(np.abs(pi1 - pi2)) < 1e-8


def test_shaping_residual_removes_span(rng):
    S, L, gamma = 4, 2, 0.9
    B = shaping_basis(S, L, gamma)
    v = B @ rng.normal(size=S)
    assert np.max(np.abs(shaping_residual(v, B))) < 1e-10
    base = rng.normal(size=S**L)
    res = shaping_residual(base, B)
    assert np.max(np.abs(B.T @ res)) < 1e-10


def test_invariant_correlation_ignores_shaping(rng):
    S, L, gamma = 4, 2, 0.9
    truth = np.repeat(rng.normal(size=(2, S**L, 1)), 3, axis=2)
    c = rng.normal(size=(2, S))
    learned = truth + (shaping_basis(S, L, gamma) @ c.T).T[:, :, None]
    inv = invariant_correlation_matrix(learned, truth, S, L, gamma)
    assert inv[0, 0] == pytest.approx(1.0, abs=1e-10) and inv[1, 1] == pytest.approx(1.0, abs=1e-10)
    assert pearson(learned[0], truth[0])[0] < 0.999


# ---------------------------------------------------------------------------
# segmentation


def test_segmentation_accuracy_cases():
    rng = np.random.default_rng(3)
    true = [rng.integers(0, 2, 200) for _ in range(10)]
    assert segmentation_accuracy(true, true) == 1.0
    assert segmentation_accuracy([1 - t for t in true], true) == 1.0
    assert segmentation_accuracy([1 - t for t in true], true, ModeAlignment((0, 1))) == 0.0
    rand = [rng.integers(0, 2, 200) for _ in range(10)]
    # fixed alignment, so the binomial mean of 0.5 applies
    acc = segmentation_accuracy(rand, true, ModeAlignment((0, 1)))
    assert abs(acc - 0.5) < 3 * np.sqrt(0.25 / 2000)
    with pytest.raises(ValueError):
        segmentation_accuracy([np.zeros(3)], [np.zeros(4)])
    with pytest.raises(ValueError):
        segmentation_accuracy([np.zeros(3)], [])


def test_segmentation_averages_over_trajectories():
    pred = [np.array([0, 0]), np.array([0, 1, 1, 1])]
    true = [np.array([0, 1]), np.array([0, 1, 1, 1])]
    assert segmentation_accuracy(pred, true, ModeAlignment((0, 1))) == pytest.approx(0.75)


def test_evaluate_fit_uses_one_alignment():
    spec = GridworldSpec(width=3, height=3, home_state=0, water_state=8, gamma=0.9, alpha=0.2)
    model, truth = build_gridworld(spec)
    test, _ = sample_trajectories(model, truth, 6, 80, seed=5)
    swapped = model.replace(rewards=model.rewards[::-1].copy(), mode_logits=model.mode_logits[::-1, :, ::-1].copy(),
                            init_mode=model.init_mode[::-1].copy())
    cfg = FitConfig(variant="S", history_len=2, num_modes=2, gamma=0.9, alpha=0.2)
    direct = evaluate_fit(FitResult(model, cfg, [0.0]), test, truth)
    rec = evaluate_fit(FitResult(swapped, cfg, [0.0]), test, truth)
    assert np.allclose(rec.reward_corr, 1.0) and np.allclose(rec.reward_corr_invariant, 1.0)
    assert rec.segmentation_accuracy == pytest.approx(direct.segmentation_accuracy, abs=1e-12)
    assert rec.test_ll_per_traj == pytest.approx(direct.test_ll_per_traj, abs=1e-8)
    assert 0.0 <= rec.segmentation_accuracy <= 1.0
    plain = evaluate_fit(FitResult(model, cfg, [0.0]), test)
    assert plain.reward_corr is None and plain.segmentation_accuracy is None


# ---------------------------------------------------------------------------
# outliers and reports


def quartiles_by_hand(values):
    v = sorted(values)
    out = []
    for p in (0.25, 0.75):
        pos = (len(v) - 1) * p
        lo = int(pos)
        hi = min(lo + 1, len(v) - 1)
        out.append(v[lo] + (v[hi] - v[lo]) * (pos - lo))
    return out


def test_iqr_examples():
    kept, out = iqr_outliers([1, 2, 3, 4, 100])
    assert out.tolist() == [100.0] and kept.tolist() == [1, 2, 3, 4]
    assert iqr_outliers([5, 5, 5, 5])[1].size == 0
    assert iqr_outliers([-2, -1, 0, 1, 2])[1].size == 0
    with pytest.raises(ValueError):
        iqr_outliers([1, 2, 3])


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=30))
def test_iqr_matches_hand_quartiles(values):
    q1, q3 = quartiles_by_hand(values)
    iqr = q3 - q1
    want = sorted(x for x in values if x > q3 + 1.5 * iqr or x < q1 - 1.5 * iqr)
    got = sorted(iqr_outliers(values)[1].tolist())
    # exact boundary ties may differ by interpolation round-off
    tight = [x for x in values if abs(x - (q3 + 1.5 * iqr)) < 1e-9 or abs(x - (q1 - 1.5 * iqr)) < 1e-9]
    if not tight:
        assert got == want


def record(model="S-2", seed=0, ll=-10.0, corr=(0.5, 0.7), acc=0.9, frac=0.0):
    return SeedRecord(model, model[0], int(model[-1]), 2, seed, frac, ll, ll / 100,
                      list(corr) if corr else None, acc, list(corr) if corr else None)


def test_report_roundtrip_and_csv():
    rep = MetricReport([record(seed=k, ll=-10.0 - k) for k in range(5)])
    back = MetricReport.from_dict(json.loads(rep.to_json()))
    assert back.records == rep.records
    assert json.loads(rep.to_json())["format"] == "swirl-report/1"
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == 6
    assert rows[1][CSV_COLUMNS.index("reward_corr")] == "0.5;0.7"
    assert float(rows[1][CSV_COLUMNS.index("reward_corr_mean")]) == pytest.approx(0.6)
    no_corr = list(csv.reader(io.StringIO(rep.to_csv(include_correlation=False))))[0]
    assert "reward_corr" not in no_corr and "segmentation_accuracy" in no_corr
    agg = rep.aggregate()
    assert agg["test_ll_per_traj"]["median"] == -12.0
    with pytest.raises(ValueError):
        MetricReport.from_dict({"format": "x", "records": []})


def test_compare_models():
    one = compare_models([MetricReport([record()])])
    assert len(one) == 1 and tuple(one[0]) == COMPARISON_COLUMNS
    a = MetricReport([record("S-2", ll=-5.0)])
    b = MetricReport([record("I-2", ll=-5.0)])
    c = MetricReport([record("S-1", ll=-1.0)])
    rows = compare_models([a, b, c])
    assert [r["model"] for r in rows] == ["S-1", "I-2", "S-2"]
    text = comparison_csv(rows)
    assert text.splitlines()[0] == ",".join(COMPARISON_COLUMNS)


def test_sweep_trend_and_csv():
    pts = [SweepPoint(f, MetricReport([record(seed=s, acc=0.9 - f + 0.01 * s, frac=f) for s in range(4)]))
           for f in (0.0, 0.1, 0.3, 0.5)]
    assert sweep_trend(pts) == pytest.approx(-1.0)
    rows = list(csv.reader(io.StringIO(sweep_csv(pts))))
    assert len(rows) == 5 and rows[0][0] == "fraction"


def test_robustness_sweep_zero_reproduces_plain_fit(rng):
    m = random_model(rng, Z=2, S=3, A=2, L=1, deterministic=True)
    train = sampled(m, 6, 15, seed=1)
    test = sampled(m, 3, 15, seed=2)
    cfg = FitConfig(history_len=1, em_iters=2, alpha=0.5, gamma=0.9)
    pts = robustness_sweep([0.0, 0.2], train, test, m.env, cfg, num_seeds=2, keep_top=1)
    assert [p.fraction for p in pts] == [0.0, 0.2]
    direct = evaluate_fits(multi_seed_fit(train, m.env, cfg, 2, 1), test)
    assert pts[0].report.records == direct.records
    with pytest.raises(ValueError):
        robustness_sweep([0.6], train, test, m.env, cfg, num_seeds=1, keep_top=1)
