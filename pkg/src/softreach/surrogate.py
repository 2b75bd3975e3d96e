"""Synthetic stand-in for the physical arm plus motion capture.

Real data collection drives valve pressures on hardware and records the tip
position with an external tracker. This module provides a cheap plant with
the same interface so the full pipeline can run end to end: each chamber's
internal pressure lags the command through a first-order filter, and the tip
position is a fixed linear read-out of the chamber states. Three chambers
spaced 120 degrees apart bend the arm toward their own axis, and the total
inflation shortens it, so x/y come from a cosine/sine-weighted sum and z
drops with the pressure total. Gaussian sensor noise models tracker jitter.

None of this pretends to be physics; it is a plant with the right shape
(linear, low-pass, fully known) so that learned-model quality and
downstream control can be judged against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_array, require, require_finite
from .dataset import Run
from .rng import stream


@dataclass(frozen=True)
class SurrogateConfig:
    """Plant constants.

    tau                chamber pressure time constant, s
    dt                 control/logging period, s
    gain               mm of lateral tip motion per kPa of chamber pressure
    z0                 resting tip height, mm
    compression_gain   mm of height lost per kPa of total chamber pressure
    sensor_noise_std   tracker noise std per axis, mm (0 = noiseless)
    """

    tau: float = 1.5
    dt: float = 0.5
    gain: float = 1.2
    z0: float = 120.0
    compression_gain: float = 0.8
    sensor_noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        require(self.tau > 0.0, f"tau must be > 0, got {self.tau}")
        require(self.dt > 0.0, f"dt must be > 0, got {self.dt}")
        require(self.sensor_noise_std >= 0.0, "sensor_noise_std must be >= 0")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "dt": self.dt,
            "gain": self.gain,
            "z0": self.z0,
            "compression_gain": self.compression_gain,
            "sensor_noise_std": self.sensor_noise_std,
            "seed": self.seed,
        }


def chamber_axes(n_chambers: int) -> np.ndarray:
    """Unit bending directions in the horizontal plane, (n_chambers, 2)."""
    angles = 2.0 * np.pi * np.arange(n_chambers) / n_chambers
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def tip_position(q: np.ndarray, cfg: SurrogateConfig) -> np.ndarray:
    """Noise-free tip position (mm) for chamber pressures q (kPa).

    Supports leading batch axes on q.
    """
    q = np.asarray(q, dtype=np.float64)
    axes = chamber_axes(q.shape[-1])
    x = cfg.gain * (q @ axes[:, 0])
    y = cfg.gain * (q @ axes[:, 1])
    z = cfg.z0 - cfg.compression_gain * q.sum(axis=-1)
    return np.stack([x, y, z], axis=-1)


def surrogate_step(
    q: np.ndarray,
    commanded: np.ndarray,
    cfg: SurrogateConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the plant one control period.

    Chamber pressures relax toward the command: q' = q + (p - q) * dt / tau.
    Returns (q', measured_position). When sensor_noise_std > 0 exactly one
    ``rng.normal(0, sensor_noise_std, 3)`` call is consumed; in noiseless
    mode no draws happen and the step is a pure function.
    """
    cfg.validate()
    q = as_float_array(q, "q")
    commanded = as_float_array(commanded, "commanded", q.shape)
    require_finite(q, "q")
    require_finite(commanded, "commanded")
    q_next = q + (commanded - q) * (cfg.dt / cfg.tau)
    pos = tip_position(q_next, cfg)
    if cfg.sensor_noise_std > 0.0:
        require(rng is not None, "an rng is required when sensor_noise_std > 0")
        pos = pos + rng.normal(0.0, cfg.sensor_noise_std, pos.shape)
    return q_next, pos


def rollout(
    pressures: np.ndarray,
    cfg: SurrogateConfig,
    q0: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the plant over a pressure schedule (T, n_chambers).

    q0 defaults to the first commanded row, i.e. the arm has settled at the
    preload before logging starts. Returns (positions (T, 3), final chamber
    state).
    """
    pressures = as_float_array(pressures, "pressures")
    require(pressures.ndim == 2 and pressures.shape[0] >= 1, "pressures must be (T, n_chambers)")
    q = pressures[0].copy() if q0 is None else as_float_array(q0, "q0", (pressures.shape[1],)).copy()
    positions = np.empty((pressures.shape[0], 3), dtype=np.float64)
    for t in range(pressures.shape[0]):
        q, positions[t] = surrogate_step(q, pressures[t], cfg, rng)
    return positions, q


def collect_run(pressures: np.ndarray, cfg: SurrogateConfig, run_id: str = "") -> Run:
    """Simulate logging one run: timestamps on the dt grid, sensor noise from
    the stream keyed by cfg.seed."""
    cfg.validate()
    pressures = as_float_array(pressures, "pressures")
    rng = stream(cfg.seed) if cfg.sensor_noise_std > 0.0 else None
    positions, _ = rollout(pressures, cfg, rng=rng)
    t = np.arange(pressures.shape[0], dtype=np.float64) * cfg.dt
    return Run(t=t, p=pressures.copy(), pos=positions, run_id=run_id)
