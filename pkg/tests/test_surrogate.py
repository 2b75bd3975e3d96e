import math
from dataclasses import replace

import numpy as np
import pytest

from softreach.rng import stream
from softreach.surrogate import (
    SurrogateConfig,
    chamber_axes,
    collect_run,
    rollout,
    surrogate_step,
    tip_position,
)

NOISELESS = SurrogateConfig(sensor_noise_std=0.0)


def test_chamber_axes_are_unit_vectors_at_120_degrees():
    axes = chamber_axes(3)
    np.testing.assert_allclose(np.linalg.norm(axes, axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(axes[0], [1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(axes[1], [math.cos(2 * math.pi / 3), math.sin(2 * math.pi / 3)])
    # the three directions cancel, which is what makes equal inflation pure-z
    np.testing.assert_allclose(axes.sum(axis=0), [0.0, 0.0], atol=1e-14)


def test_equal_pressures_move_only_z():
    q = np.array([4.0, 4.0, 4.0])
    pos = tip_position(q, NOISELESS)
    np.testing.assert_allclose(pos[:2], [0.0, 0.0], atol=1e-12)
    assert pos[2] == pytest.approx(NOISELESS.z0 - NOISELESS.compression_gain * 12.0)


def test_single_step_hand_values():
    # q=(0,0,0), p=(1,0,0), dt/tau=0.5, gain=1, zero noise -> q'=(.5,0,0), x=.5, y=0
    cfg = SurrogateConfig(tau=1.0, dt=0.5, gain=1.0, z0=100.0, compression_gain=2.0, sensor_noise_std=0.0)
    q_next, pos = surrogate_step(np.zeros(3), np.array([1.0, 0.0, 0.0]), cfg)
    np.testing.assert_allclose(q_next, [0.5, 0.0, 0.0], rtol=1e-15)
    assert pos[0] == pytest.approx(0.5)
    assert pos[1] == pytest.approx(0.0, abs=1e-15)
    assert pos[2] == pytest.approx(100.0 - 2.0 * 0.5)


def test_first_order_lag_converges_to_command():
    cfg = NOISELESS
    q = np.zeros(3)
    p = np.array([3.0, 1.0, 2.0])
    for _ in range(int(10 * cfg.tau / cfg.dt) + 1):
        q, _ = surrogate_step(q, p, cfg)
    np.testing.assert_allclose(q, p, atol=1e-3)


def test_lag_recursion_matches_scalar_oracle():
    cfg = NOISELESS
    rng = stream(3)
    pressures = rng.uniform(0, 10, (7, 3))
    positions, q_final = rollout(pressures, cfg, q0=np.zeros(3))
    q = [0.0, 0.0, 0.0]
    k = cfg.dt / cfg.tau
    for t in range(7):
        q = [qi + (pi - qi) * k for qi, pi in zip(q, pressures[t])]
        expected = tip_position(np.array(q), cfg)
        np.testing.assert_allclose(positions[t], expected, rtol=1e-13)
    np.testing.assert_allclose(q_final, q, rtol=1e-13)


def test_noiseless_rollout_is_reproducible():
    pressures = stream(1).uniform(0, 10, (50, 3))
    a, _ = rollout(pressures, NOISELESS)
    b, _ = rollout(pressures, NOISELESS)
    np.testing.assert_array_equal(a, b)


def test_noise_requires_rng_and_changes_with_seed():
    cfg = SurrogateConfig(sensor_noise_std=0.1)
    with pytest.raises(ValueError, match="rng"):
        surrogate_step(np.zeros(3), np.ones(3), cfg)
    pressures = np.full((20, 3), 2.0)
    a = collect_run(pressures, replace(cfg, seed=0)).pos
    b = collect_run(pressures, replace(cfg, seed=0)).pos
    c = collect_run(pressures, replace(cfg, seed=1)).pos
    np.testing.assert_array_equal(a, b)
    assert (a != c).any()


def test_noise_is_additive_on_true_position():
    cfg = SurrogateConfig(sensor_noise_std=0.5, seed=9)
    pressures = stream(2).uniform(0, 8, (30, 3))
    noisy = collect_run(pressures, cfg).pos
    clean, _ = rollout(pressures, replace(cfg, sensor_noise_std=0.0))
    draws = stream(9).normal(0.0, 0.5, (30, 3))
    np.testing.assert_allclose(noisy, clean + draws, rtol=1e-12, atol=1e-12)


def test_rollout_settles_at_preload_by_default():
    # q0 defaults to the first command, so a constant schedule is a fixed point
    pressures = np.full((5, 3), 2.0)
    positions, q = rollout(pressures, NOISELESS)
    np.testing.assert_allclose(q, pressures[0], rtol=1e-15)
    for t in range(5):
        np.testing.assert_allclose(positions[t], positions[0], rtol=1e-15)


def test_position_is_lipschitz_on_pressure_box():
    # bounded input perturbation produces bounded output perturbation: the
    # lag is a contraction (|dq| never exceeds max |dp|), and the read-out is
    # linear with coefficient sums gain * 3 and compression_gain * 3
    cfg = NOISELESS
    lipschitz = 3.0 * (cfg.gain + cfg.compression_gain)
    rng = stream(7)
    base = rng.uniform(0, 13, (40, 3))
    delta = rng.uniform(-1, 1, (40, 3)) * 0.05
    pos_a, _ = rollout(base, cfg, q0=base[0])
    pos_b, _ = rollout(base + delta, cfg, q0=base[0])
    assert np.abs(pos_b - pos_a).max() <= lipschitz * np.abs(delta).max() + 1e-9


def test_collect_run_grid_and_shapes():
    pressures = np.full((12, 3), 2.0)
    run = collect_run(pressures, NOISELESS, run_id="r0")
    assert run.run_id == "r0"
    np.testing.assert_allclose(run.t, np.arange(12) * NOISELESS.dt)
    assert run.p.shape == (12, 3)
    assert run.pos.shape == (12, 3)


def test_rejects_non_finite_and_bad_config():
    with pytest.raises(ValueError):
        surrogate_step(np.array([np.inf, 0, 0]), np.ones(3), NOISELESS)
    with pytest.raises(ValueError):
        surrogate_step(np.zeros(3), np.array([1.0, np.nan, 0.0]), NOISELESS)
    with pytest.raises(ValueError):
        SurrogateConfig(tau=0.0).validate()
    with pytest.raises(ValueError):
        SurrogateConfig(dt=-1.0).validate()
