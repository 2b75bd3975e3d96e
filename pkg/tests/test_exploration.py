import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softreach.exploration import (
    PRESSURE_FLOOR_KPA,
    ExplorationConfig,
    PressureSequence,
    explore_step,
    generate_batch,
    generate_sequence,
    smoothness,
)
from softreach.rng import stream

CFG = ExplorationConfig()


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def oracle_step(prev, draws, cfg):
    """Scalar re-derivation of one walk update, plain Python arithmetic."""
    s = [max(cfg.alpha * p + (1.0 - cfg.alpha) * d, PRESSURE_FLOOR_KPA) for p, d in zip(prev, draws)]
    total = sum(s)
    scale = min(sigmoid(cfg.beta * total), 1.0 - 1e-9)
    return [cfg.p_max * scale * sj / total for sj in s]


class TestExploreStep:
    def test_alpha_one_keeps_direction(self):
        # With alpha=1 the draw is weighted zero, so the starred vector is
        # prev itself and the output is prev rescaled onto the budget curve.
        cfg = replace(CFG, alpha=1.0)
        prev = np.array([3.0, 1.0, 0.5])
        out, _ = explore_step(prev, cfg, stream(4))
        total = prev.sum()
        expected = cfg.p_max * sigmoid(cfg.beta * total) * prev / total
        np.testing.assert_allclose(out, expected, rtol=1e-14)

    def test_tiny_beta_total_is_half_budget(self):
        cfg = replace(CFG, beta=1e-12)
        out, _ = explore_step(np.array([2.0, 2.0, 2.0]), cfg, stream(0))
        assert out.sum() == pytest.approx(cfg.p_max / 2, rel=1e-9)

    def test_matches_scalar_oracle_with_pinned_draws(self):
        cfg = ExplorationConfig(alpha=0.5, beta=0.1, p_max=13.0, p_b=2.0, n_valves=3, noise_std=1.0)
        prev = [2.0, 2.0, 2.0]
        rng = stream(123)
        draws = stream(123).normal(cfg.p_b, cfg.noise_std, 3)  # same stream, recorded
        out, _ = explore_step(np.array(prev), cfg, rng)
        np.testing.assert_allclose(out, oracle_step(prev, draws, cfg), rtol=1e-13)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            explore_step(np.array([1.0, np.nan, 1.0]), CFG, stream(0))
        with pytest.raises(ValueError):
            explore_step(np.array([1.0, -0.5, 1.0]), CFG, stream(0))
        with pytest.raises(ValueError):
            explore_step(np.array([1.0, 1.0]), CFG, stream(0))


@pytest.mark.parametrize(
    "bad",
    [
        dict(alpha=1.5),
        dict(alpha=-0.1),
        dict(beta=0.0),
        dict(p_max=0.0),
        dict(p_b=0.0),
        dict(p_b=20.0),
        dict(n_valves=0),
        dict(n_steps=0),
        dict(noise_std=-1.0),
        dict(p_b=5.0, n_valves=3, p_max=13.0),  # preload row would break the budget
    ],
)
def test_config_validation_rejects(bad):
    with pytest.raises(ValueError):
        replace(CFG, **bad).validate()


class TestGenerateSequence:
    def test_single_step_is_preload_row(self):
        seq = generate_sequence(replace(CFG, n_steps=1))
        assert seq.steps.shape == (1, 3)
        np.testing.assert_array_equal(seq.steps[0], [2.0, 2.0, 2.0])
        assert seq.steps[0].sum() < CFG.p_max

    def test_default_regime_stays_inside_budget(self):
        # P_max 13, p_b 2, 3 valves, 50 steps: diverse draws, never over budget.
        for seed in range(8):
            seq = generate_sequence(replace(CFG, seed=seed))
            seq.validate()
            assert seq.steps.std() > 0.1

    def test_seed_determinism(self):
        a = generate_sequence(CFG).steps
        b = generate_sequence(CFG).steps
        c = generate_sequence(replace(CFG, seed=1)).steps
        np.testing.assert_array_equal(a, b)
        assert (a != c).any()

    def test_walk_follows_scalar_oracle(self):
        cfg = replace(CFG, n_steps=5, seed=7)
        seq = generate_sequence(cfg)
        noise = stream(7).normal(cfg.p_b, cfg.noise_std, (4, 3))
        row = [cfg.p_b] * 3
        for t in range(1, 5):
            row = oracle_step(row, noise[t - 1], cfg)
            np.testing.assert_allclose(seq.steps[t], row, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    alpha=st.floats(0.0, 1.0),
    beta=st.floats(0.01, 5.0),
    p_max=st.floats(1.0, 50.0),
    frac=st.floats(0.05, 0.8),
    n_valves=st.integers(1, 6),
    seed=st.integers(0, 2**31 - 1),
)
def test_budget_and_positivity_invariants(alpha, beta, p_max, frac, n_valves, seed):
    p_b = frac * p_max / n_valves  # keeps the preload row legal
    cfg = ExplorationConfig(
        alpha=alpha, beta=beta, p_max=p_max, p_b=p_b,
        n_valves=n_valves, n_steps=40, noise_std=1.0, seed=seed,
    )
    steps = generate_sequence(cfg).steps
    assert (steps > 0.0).all()
    assert (steps.sum(axis=1) <= p_max * (1.0 - 1e-12)).all()


def test_mean_reversion_toward_preload():
    # The blend residual s_t - alpha*p_{t-1} is (1-alpha) times a draw
    # centered on p_b; its running mean must sit within 3 standard errors.
    cfg = replace(CFG, alpha=0.7, n_steps=10_001, seed=11)
    steps = generate_sequence(cfg).steps
    noise = stream(11).normal(cfg.p_b, cfg.noise_std, (cfg.n_steps - 1, 3))
    starred = np.maximum(cfg.alpha * steps[:-1] + (1 - cfg.alpha) * noise, PRESSURE_FLOOR_KPA)
    residual = starred - cfg.alpha * steps[:-1]
    se = (1 - cfg.alpha) * cfg.noise_std / math.sqrt(residual.size)
    assert abs(residual.mean() - (1 - cfg.alpha) * cfg.p_b) < 3 * se


def test_smoothness_ordering_in_alpha():
    alphas = [0.0, 0.5, 0.9, 0.99]
    seeds = range(6)
    means = []
    for alpha in alphas:
        vals = [
            smoothness(generate_sequence(replace(CFG, alpha=alpha, n_steps=300, seed=s)).steps)
            for s in seeds
        ]
        means.append(np.mean(vals))
    assert all(a > b for a, b in zip(means, means[1:]))


def test_smoothness_hand_value():
    steps = np.array([[0.0, 0.0], [1.0, 3.0]])
    assert smoothness(steps) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        smoothness(steps[:1])


def test_generate_batch_matches_per_seed_path():
    seeds = [0, 3, 9]
    batch = generate_batch(replace(CFG, n_steps=30), seeds)
    assert batch.shape == (3, 30, 3)
    for k, s in enumerate(seeds):
        np.testing.assert_array_equal(
            batch[k], generate_sequence(replace(CFG, n_steps=30, seed=s)).steps
        )


class TestPressureSequenceCsv:
    def test_round_trip(self, tmp_path):
        seq = generate_sequence(replace(CFG, n_steps=20))
        path = tmp_path / "p.csv"
        seq.to_csv(path)
        back = PressureSequence.from_csv(path)
        np.testing.assert_array_equal(back.steps, seq.steps)
        assert back.n_valves == 3

    def test_header_is_validated(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("step,q1,q2\n0,1,2\n")
        with pytest.raises(ValueError, match="line 1"):
            PressureSequence.from_csv(path)

    def test_validate_flags_budget_violation(self):
        seq = PressureSequence(steps=np.array([[5.0, 5.0, 5.0]]))
        with pytest.raises(ValueError, match="budget"):
            seq.validate(p_max=13.0)
