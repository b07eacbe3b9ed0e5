"""Court coordinates, velocity actions, and single-integrator propagation.

Positions are (l, w) in meters: l runs along the court length (0 at the left
basket, positive right), w across its width (0 at the bottom sideline,
positive up). Actions are center-of-mass velocities capped at SPEED_CAP, the
fastest recorded human footspeed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_CAP = 12.42  # m/s


@dataclass(frozen=True)
class CourtSpec:
    length_m: float = 28.65
    width_m: float = 15.24


@dataclass(frozen=True)
class CourtState:
    l: float
    w: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l, self.w])


@dataclass(frozen=True)
class CourtAction:
    dl: float
    dw: float

    @property
    def speed(self) -> float:
        return math.hypot(self.dl, self.dw)

    def as_array(self) -> np.ndarray:
        return np.array([self.dl, self.dw])


def propagate(x: CourtState, u: CourtAction, dt: float) -> CourtState:
    """Explicit-Euler single-integrator step: position moves by velocity*dt."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    return CourtState(x.l + u.dl * dt, x.w + u.dw * dt)


def clamp_speed(u: CourtAction, cap: float = SPEED_CAP) -> CourtAction:
    """Rescale an over-cap action onto the cap, preserving heading.

    The scale factor is nudged down by ulps until the recomputed speed is
    really at or below the cap, which makes clamping exactly idempotent.
    """
    s = u.speed
    if s <= cap:
        return u
    k = cap / s
    out = CourtAction(u.dl * k, u.dw * k)
    while out.speed > cap:
        k = math.nextafter(k, 0.0)
        out = CourtAction(u.dl * k, u.dw * k)
    return out


def clamp_speed_rows(u: np.ndarray, cap: float = SPEED_CAP) -> np.ndarray:
    """Vectorized clamp for an (n, 2) action array; same nudge as clamp_speed."""
    u = np.asarray(u, dtype=np.float64)
    s = np.sqrt(np.sum(u * u, axis=-1, keepdims=True))
    k = np.where(s > cap, cap / np.maximum(s, 1e-300), 1.0)
    out = u * k
    over = np.sqrt(np.sum(out * out, axis=-1, keepdims=True)) > cap
    while np.any(over):
        k = np.where(over, np.nextafter(k, 0.0), k)
        out = u * k
        over = np.sqrt(np.sum(out * out, axis=-1, keepdims=True)) > cap
    return out


def actions_from_positions(
    positions: list[CourtState], dt: float, cap: float = SPEED_CAP
) -> list[CourtAction]:
    """Recover velocities by forward difference, then clamp each to the cap.

    The action at index t moves positions[t] to positions[t+1].
    """
    if len(positions) < 2:
        raise ValueError("need at least 2 positions to recover actions")
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = []
    for a, b in zip(positions, positions[1:]):
        out.append(clamp_speed(CourtAction((b.l - a.l) / dt, (b.w - a.w) / dt), cap))
    return out


@dataclass
class Trajectory:
    """A state sequence with the actions that produced each transition."""

    dt: float
    states: list[CourtState]
    actions: list[CourtAction]

    def __post_init__(self):
        if len(self.actions) != len(self.states) - 1:
            raise ValueError(
                f"{len(self.states)} states need {len(self.states) - 1} actions, "
                f"got {len(self.actions)}"
            )

    def max_propagation_error(self) -> float:
        """Largest deviation (m) between stored states and replayed dynamics."""
        err = 0.0
        for x, u, x_next in zip(self.states, self.actions, self.states[1:]):
            pred = propagate(x, u, self.dt)
            err = max(err, abs(pred.l - x_next.l), abs(pred.w - x_next.w))
        return err
