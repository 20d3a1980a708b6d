"""Progressive deceleration segment (PDS) in the rightmost lane before the gore.

Positions are distances remaining to the gore, ``s`` in metres. A vehicle
tracking the profile decelerates at the constant rate ``a_o`` from the lane
entry speed down to the ramp safe speed, reached exactly at the gore.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .units import kmh_to_ms, ms_to_kmh


@dataclass(frozen=True)
class PdsProfile:
    v_entry: float  # km/h, lane speed when entering the PDS
    v_ramp: float  # km/h, target speed at the gore
    a_o: float  # m/s^2

    @property
    def length(self) -> float:
        return pds_length(self.v_entry, self.v_ramp, self.a_o)

    def speed(self, s):
        return pds_guidance_speed(s, self)

    def mean_speed(self, span):
        """Mean guidance speed (km/h) over the last ``span`` metres before the gore."""
        if span <= 0:
            return self.v_ramp
        ld = self.length
        vr = kmh_to_ms(self.v_ramp)
        if ld <= 0:
            return self.v_entry
        inside = min(span, ld)
        integral = ((vr**2 + 2 * self.a_o * inside) ** 1.5 - vr**3) / (3 * self.a_o)
        integral += max(span - ld, 0.0) * kmh_to_ms(self.v_entry)
        return ms_to_kmh(integral / span)


def pds_length(v_entry, v_ramp, a_o):
    """Length (m) to decelerate from ``v_entry`` to ``v_ramp`` (km/h) at ``a_o`` m/s^2."""
    if a_o <= 0:
        raise ValueError(f"deceleration must be > 0, got {a_o}")
    if v_ramp > v_entry:
        raise ValueError(f"no deceleration needed: ramp speed {v_ramp} exceeds entry speed {v_entry}")
    ve, vr = kmh_to_ms(v_entry), kmh_to_ms(v_ramp)
    return (ve * ve - vr * vr) / (2.0 * a_o)


def pds_guidance_speed(s, profile: PdsProfile):
    """Guidance speed (km/h) at ``s`` metres before the gore. Vectorises over ``s``."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise ValueError("distance to gore must be >= 0")
    vr = kmh_to_ms(profile.v_ramp)
    v = ms_to_kmh(np.sqrt(vr * vr + 2.0 * profile.a_o * s_arr))
    v = np.minimum(v, profile.v_entry)
    if profile.v_entry >= profile.v_ramp:
        v = np.where(s_arr >= profile.length, profile.v_entry, v)
    return float(v) if v.ndim == 0 else v


def size_pds(env, v_entry, a_o=None) -> PdsProfile:
    """Profile for the envelope's ramp speed; ``a_o`` defaults to the envelope ceiling.

    An entry speed already at or below the ramp speed yields a zero-length
    profile that holds the entry speed.
    """
    a = env.a_max if a_o is None else a_o
    if a <= 0 or a > env.a_max + 1e-12:
        raise ValueError(f"a_o={a} outside (0, {env.a_max}]")
    if v_entry <= env.v_ramp:
        return PdsProfile(v_entry=v_entry, v_ramp=v_entry, a_o=a)
    return PdsProfile(v_entry=v_entry, v_ramp=env.v_ramp, a_o=a)


def start_position(profile: PdsProfile, gore_position):
    """Road coordinate (m from the upstream end) where deceleration begins."""
    return gore_position - profile.length


def write_profile_csv(path, profile: PdsProfile, step=10.0, extra=50.0):
    n = int(math.ceil((profile.length + extra) / step))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "v_g"])
        for k in range(n + 1):
            s = k * step
            w.writerow([f"{s:.1f}", f"{pds_guidance_speed(s, profile):.4f}"])
