"""Unit conversions at the macro (km, h) / micro (m, s) boundary.

Macroscopic quantities (METANET, controller) use km, h, km/h, veh/km, veh/h.
Safety physics and the cellular automaton use SI. Conversions happen only here.
"""

KMH_PER_MS = 3.6
G = 9.8  # m/s^2, as printed in the stopping-distance term


def kmh_to_ms(v):
    return v / KMH_PER_MS


def ms_to_kmh(v):
    return v * KMH_PER_MS


def s_to_h(t):
    return t / 3600.0


def m_to_km(x):
    return x / 1000.0


def mm_per_h_to_mm_per_min(d):
    return d / 60.0


RAIN_UNITS = {
    "mm/h": 1.0,
    "mm/min": 60.0,
}


def rain_to_mm_per_h(value, unit):
    """Convert a rainfall intensity declared in ``unit`` to canonical mm/h."""
    try:
        return value * RAIN_UNITS[unit]
    except KeyError:
        raise ValueError(f"unknown rainfall unit {unit!r}; expected one of {sorted(RAIN_UNITS)}")
