"""Rain safety envelope: water film, adhesion, ramp and main-line safe speeds.

All functions are pure. Inputs and outputs follow the units in each
signature; speeds leaving this module are km/h, distances m, decelerations
m/s^2. Rainfall arrives in mm/h and is converted to mm/min for the water
film and visibility power laws.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

from scipy.optimize import brentq

from .domain import RampGeometry, ScenarioConfig, rainfall_at
from .units import G, kmh_to_ms, mm_per_h_to_mm_per_min, ms_to_kmh

log = logging.getLogger(__name__)

PHI_MAX = 0.8256


class NumericError(ArithmeticError):
    """A safety computation left its valid numeric domain."""


def water_film_depth(l, i, d, td):
    """Water film depth in mm.

    ``l`` slope length (m), ``i`` longitudinal gradient (%), ``d`` rainfall
    intensity (mm/min), ``td`` texture depth (mm).
    """
    if i <= 0 or td <= 0 or l <= 0:
        raise ValueError(f"water film needs l, i, TD > 0 (got l={l}, i={i}, TD={td})")
    if d < 0:
        raise ValueError(f"rainfall intensity must be >= 0, got {d}")
    if d == 0:
        return 0.0
    return 0.1258 * l**0.6715 * i**-0.3147 * d**0.7786 * td**0.7261


def adhesion_coefficient(v, h, phi_min=0.05):
    """Tyre-pavement adhesion at speed ``v`` (km/h) over a film of ``h`` mm."""
    phi = PHI_MAX - 0.0043 * v - 0.0072 * h
    if phi < phi_min:
        log.debug("adhesion clamped: %.4f -> %.4f (v=%.2f, h=%.3f)", phi, phi_min, v, h)
        return phi_min
    return phi


def ramp_curve_speed(R, phi):
    """Critical cornering speed (km/h) on a ramp curve of radius ``R`` m."""
    v = 0.782 * R + (68.457 + 0.247 * R) * phi - 0.00335 * R**2 - 32.171 * phi**2 - 5.272
    if v < 0:
        log.debug("ramp curve speed clamped at 0 (R=%.1f, phi=%.3f)", R, phi)
        return 0.0
    return v


def ramp_fixed_point(R, h, v0, phi_min=0.05, damping=0.5, tol=0.01, max_iter=200):
    """Solve v = ramp_curve_speed(R, adhesion(v, h)) by damped iteration from ``v0``."""
    v = v0
    for _ in range(max_iter):
        target = ramp_curve_speed(R, adhesion_coefficient(v, h, phi_min))
        nxt = v + damping * (target - v)
        if abs(nxt - v) < tol:
            return nxt
        v_prev, v = v, nxt
    raise NumericError(f"ramp speed did not converge in {max_iter} iterations "
                       f"(last iterates {v_prev:.6f}, {v:.6f})")


def ramp_safe_speed(ramp: RampGeometry, d, phi_min=0.05):
    """Hydroplaning-limited ramp speed (km/h) for rainfall ``d`` in mm/h."""
    h = water_film_depth(ramp.slope_length, ramp.gradient, mm_per_h_to_mm_per_min(d), ramp.texture_depth)
    v = ramp_fixed_point(ramp.curve_radius, h, ramp.legal_limit, phi_min)
    return min(v, ramp.legal_limit)


def visibility(d, cap=10000.0):
    """Visibility in m for rainfall ``d`` in mm/min; clear weather returns ``cap``."""
    if d < 0:
        raise ValueError(f"rainfall intensity must be >= 0, got {d}")
    if d == 0 or d <= (294.8 / cap) ** (1 / 1.1):
        return cap
    return min(294.8 * d**-1.1, cap)


def mainline_safe_speed(phi, t_r, L_v, l_s):
    """Largest speed (km/h) that stops within visibility ``L_v`` m.

    Positive root of v^2 / (2 g phi) + v t_r + l_s = L_v.
    """
    room = L_v - l_s
    if room <= 0:
        return 0.0
    gp = G * phi
    v = -gp * t_r + math.sqrt((gp * t_r) ** 2 + 2.0 * gp * room)
    return ms_to_kmh(v)


def stopping_distance(v, phi, t_r, l_s):
    """Reaction + braking + safety gap distance (m) from speed ``v`` (km/h)."""
    u = kmh_to_ms(v)
    return u * u / (2.0 * G * phi) + u * t_r + l_s


def mainline_speed_coupled(h, t_r, L_v, l_s, phi_min=0.05):
    """Stopping-sight speed when adhesion itself depends on that speed.

    Returns ``(v_kmh, phi)``. The distance needed is increasing in v because
    adhesion falls with speed, so the root is unique.
    """
    if L_v <= l_s:
        return 0.0, adhesion_coefficient(0.0, h, phi_min)

    def excess(v):
        return stopping_distance(v, adhesion_coefficient(v, h, phi_min), t_r, l_s) - L_v

    hi = 50.0
    while excess(hi) < 0:
        hi *= 2.0
    v = brentq(excess, 0.0, hi, xtol=1e-10, rtol=1e-14)
    return v, adhesion_coefficient(v, h, phi_min)


def mainline_safe_speed_closed_form(h, d):
    """Printed closed-form main-line speed; diagnostic only, never used for control.

    ``h`` water film (mm), ``d`` rainfall (mm/min).
    """
    if d <= 0:
        raise ValueError(f"closed form needs d > 0, got {d}")
    dv = d**-1.1
    radicand = (0.353 * h - 1.268 * dv - 40.43) ** 2 - 3.156 * (294.8 * dv - 5.0) * (0.0072 * h - 0.826)
    if radicand < 0:
        err = NumericError(f"negative radicand {radicand!r}")
        err.radicand = radicand
        raise err
    return (0.224 * h - 0.804 * dv - 25.63) + 0.634 * math.sqrt(radicand)


@dataclass(frozen=True)
class SafetyEnvelope:
    t: float
    rain: tuple[float, ...]  # mm/h per segment
    film: tuple[float, ...]  # mm per segment (main line)
    phi: tuple[float, ...]  # adhesion per segment at its safe speed
    visibility: tuple[float, ...]  # m per segment
    v_ssd: tuple[float, ...]  # km/h, stopping-sight speed before the legal cap
    v_max: tuple[float, ...]  # km/h, min(stopping-sight speed, legal limit)
    v_ramp: float  # km/h
    a_max: float  # m/s^2
    ramp_rain: float  # mm/h on the off-ramp segment
    ramp_film: float  # mm on the ramp


def envelope_for_rain(cfg: ScenarioConfig, rain, t=0.0) -> SafetyEnvelope:
    """Envelope for explicit per-segment rainfall (mm/h)."""
    sp = cfg.safety
    film, phi, vis, v_ssd, v_max = [], [], [], [], []
    for seg, d in zip(cfg.segments, rain):
        d_min = mm_per_h_to_mm_per_min(d)
        dr = seg.drainage
        h = water_film_depth(dr.slope_length, dr.gradient, d_min, dr.texture_depth)
        L_v = visibility(d_min, sp.visibility_cap)
        v, p = mainline_speed_coupled(h, sp.reaction_time, L_v, sp.safety_gap, sp.phi_min)
        film.append(h)
        vis.append(L_v)
        v_ssd.append(v)
        v_max.append(min(v, seg.legal_limit))
        phi.append(adhesion_coefficient(min(v, seg.legal_limit), h, sp.phi_min))
    k = cfg.ramp_index
    ramp = cfg.ramp
    d_r = rain[k]
    v_r = ramp_safe_speed(ramp, d_r, sp.phi_min)
    ramp_h = water_film_depth(ramp.slope_length, ramp.gradient, mm_per_h_to_mm_per_min(d_r), ramp.texture_depth)
    a_max = min(sp.a_max, G * phi[k])
    return SafetyEnvelope(
        t=t, rain=tuple(rain), film=tuple(film), phi=tuple(phi), visibility=tuple(vis),
        v_ssd=tuple(v_ssd), v_max=tuple(v_max), v_ramp=v_r, a_max=a_max,
        ramp_rain=d_r, ramp_film=ramp_h,
    )


def build_envelope(cfg: ScenarioConfig, t) -> SafetyEnvelope:
    """Envelope from the rain gauge reading at time ``t`` (s)."""
    rain = [rainfall_at(cfg.rainfall, s.id, t) for s in cfg.segments]
    return envelope_for_rain(cfg, rain, t)
