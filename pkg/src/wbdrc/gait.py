"""Contact schedules and swing-foot reference trajectories."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# schedule arithmetic runs on an integer nanosecond clock so that periodicity is exact
_NS = 1_000_000_000


class LegInStance(ValueError):
    pass


def _ns(t: float) -> int:
    return int(round(t * _NS))


@dataclass(frozen=True)
class ContactSchedule:
    """Periodic stance/swing pattern.

    Leg ``i`` is in stance while its phase ((t - start)/cycle + offset_i) mod 1 is
    below ``stance / cycle``.  Before ``start`` every leg stands.
    """

    name: str
    legs: tuple
    offsets: tuple
    stance: float
    cycle: float
    start: float = 0.0
    velocity: tuple = field(default=(0.0, 0.0, 0.0))  # vx, vy, yaw rate of the nominal gait

    def __post_init__(self):
        if len(self.legs) != len(self.offsets):
            raise ValueError("one phase offset per leg")
        if self.cycle <= 0 or self.stance <= 0:
            raise ValueError("cycle and stance durations must be positive")

    @property
    def is_static(self) -> bool:
        return self.stance >= self.cycle

    @property
    def swing_duration(self) -> float:
        return max(self.cycle - self.stance, 0.0)

    def _phase_ns(self, i: int, t: float) -> int:
        cyc = _ns(self.cycle)
        return (_ns(t) - _ns(self.start) + _ns(self.offsets[i] * self.cycle)) % cyc

    def contact_state(self, t: float) -> np.ndarray:
        """Flags per leg, 1 = stance, 0 = swing."""
        if self.is_static or t < self.start:
            return np.ones(len(self.legs), dtype=int)
        st = _ns(self.stance)
        return np.array([1 if self._phase_ns(i, t) < st else 0 for i in range(len(self.legs))], dtype=int)

    def leg_index(self, leg) -> int:
        return leg if isinstance(leg, (int, np.integer)) else self.legs.index(leg)

    def swing_window(self, leg, t: float):
        """(liftoff time, touchdown time) of the swing phase containing ``t``."""
        i = self.leg_index(leg)
        if self.contact_state(t)[i]:
            raise LegInStance(f"leg {self.legs[i]} is in stance at t={t:g}")
        into = self._phase_ns(i, t) - _ns(self.stance)
        t0 = (_ns(t) - into) / _NS
        return t0, t0 + self.swing_duration

    def next_touchdown(self, leg, t: float) -> float:
        """Time of the next stance onset of ``leg`` at or after ``t`` (t itself if standing)."""
        i = self.leg_index(leg)
        if self.is_static:
            return t
        if t < self.start:
            t = self.start
        ph = self._phase_ns(i, t)
        cyc = _ns(self.cycle)
        if ph < _ns(self.stance):
            return t if ph == 0 else (_ns(t) - ph + cyc) / _NS
        return (_ns(t) - ph + cyc) / _NS

    def swing_phase(self, leg, t: float) -> float:
        t0, t1 = self.swing_window(leg, t)
        return float(np.clip((t - t0) / (t1 - t0), 0.0, 1.0))


def _smooth(s):
    return s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s)


def swing_reference(schedule: ContactSchedule, leg, t: float, lift_height: float, start, end):
    """Desired swing-foot position and velocity.

    Horizontal motion follows a cubic smoothstep from ``start`` to ``end``; the
    height rises along a cubic to ``lift_height`` above the higher endpoint at
    mid-swing and descends along a mirrored cubic, so velocity vanishes at
    liftoff, apex and touchdown.
    """
    t0, t1 = schedule.swing_window(leg, t)
    T = t1 - t0
    s = float(np.clip((t - t0) / T, 0.0, 1.0))
    return swing_profile(s, T, lift_height, start, end)


def swing_profile(s: float, T: float, lift_height: float, start, end):
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    b, db = _smooth(s)
    pos = start + (end - start) * b
    vel = (end - start) * db / T
    apex = max(start[2], end[2]) + lift_height
    if s <= 0.5:
        b2, db2 = _smooth(2.0 * s)
        pos[2] = start[2] + (apex - start[2]) * b2
        vel[2] = (apex - start[2]) * db2 * 2.0 / T
    else:
        b2, db2 = _smooth(2.0 * s - 1.0)
        pos[2] = apex + (end[2] - apex) * b2
        vel[2] = (end[2] - apex) * db2 * 2.0 / T
    return pos, vel


def swing_height(s: float, lift_height: float) -> float:
    """Clearance profile for a swing starting and ending at ground level."""
    s = float(np.clip(s, 0.0, 1.0))
    u = 2.0 * s if s <= 0.5 else 2.0 - 2.0 * s
    return lift_height * u * u * (3.0 - 2.0 * u)


GAIT_TABLE = {
    # name: (offsets for up to 4 legs in model leg order, stance, cycle)
    "trot": ((0.0, 0.5, 0.5, 0.0), 0.35, 0.70),
    "step-in-place": ((0.0, 0.5, 0.5, 0.0), 0.35, 0.70),
    "walk": ((0.0, 0.5, 0.75, 0.25), 0.90, 1.20),
}
BIPED_TABLE = {
    "trot": ((0.0, 0.5), 0.35, 0.70),
    "step-in-place": ((0.0, 0.5), 0.35, 0.70),
    "walk": ((0.0, 0.5), 0.60, 1.00),
}


def make_schedule(name: str, legs, start: float = 0.0, velocity=(0.0, 0.0, 0.0),
                  stance: float | None = None, cycle: float | None = None, offsets=None) -> ContactSchedule:
    """Build one of the bundled gaits (stand, step-in-place, trot, walk) for ``legs``."""
    legs = tuple(legs)
    if name == "stand":
        return ContactSchedule("stand", legs, tuple(0.0 for _ in legs), 1.0, 1.0, start, (0.0, 0.0, 0.0))
    table = BIPED_TABLE if len(legs) == 2 else GAIT_TABLE
    if name not in table:
        raise ValueError(f"unknown gait {name!r}")
    offs, st, cyc = table[name]
    if len(legs) not in (1, 2, 4):
        raise ValueError("bundled gaits support 1, 2 or 4 legs")
    offs = tuple(offsets) if offsets is not None else tuple(offs[:len(legs)])
    if name == "step-in-place":
        velocity = (0.0, 0.0, 0.0)
    return ContactSchedule(name, legs, offs, stance or st, cycle or cyc, start, tuple(velocity))


def raibert_foothold(hip_xy, base_velocity, stance_duration, command_velocity, gain=0.03):
    """Touchdown point under the hip shifted by half a stance of travel plus velocity feedback."""
    hip_xy = np.asarray(hip_xy, float)
    v = np.asarray(base_velocity, float)[:2]
    vc = np.asarray(command_velocity, float)[:2]
    return hip_xy + 0.5 * stance_duration * vc + gain * (v - vc)
