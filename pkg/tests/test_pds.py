import mpmath as mp
import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given
from hypothesis import strategies as st

from rainvsl.pds import PdsProfile, pds_guidance_speed, pds_length, size_pds, write_profile_csv
from rainvsl.safety import build_envelope

mp.mp.dps = 40


def length_oracle(ve, vr, a):
    ve, vr = mp.mpf(ve) / mp.mpf("3.6"), mp.mpf(vr) / mp.mpf("3.6")
    return (ve**2 - vr**2) / (2 * mp.mpf(a))


def speed_oracle(s, ve, vr, a):
    vr_ms = mp.mpf(vr) / mp.mpf("3.6")
    v = mp.sqrt(vr_ms**2 + 2 * mp.mpf(a) * mp.mpf(s)) * mp.mpf("3.6")
    return min(v, mp.mpf(ve))


RNG = np.random.default_rng(77)
CASES = [(float(ve), float(vr), float(a)) for ve, vr, a in
         zip(RNG.uniform(60, 120, 25), RNG.uniform(20, 60, 25), RNG.uniform(0.25, 3, 25))]


@pytest.mark.parametrize("ve,vr,a", CASES)
def test_length_oracle(ve, vr, a):
    ref = length_oracle(ve, vr, a)
    assert abs(pds_length(ve, vr, a) - ref) / ref < 1e-12


@pytest.mark.parametrize("ve,vr,a", CASES)
def test_profile_oracle(ve, vr, a):
    prof = PdsProfile(ve, vr, a)
    for frac in (0.0, 0.1, 0.37, 0.5, 0.93):
        s = frac * prof.length
        ref = speed_oracle(s, ve, vr, a)
        assert abs(pds_guidance_speed(s, prof) - ref) / ref < 1e-12


def test_examples():
    assert pds_length(80, 50, 1.0) == pytest.approx(150.46, abs=5e-3)
    assert pds_length(80, 40, 2.0) == pytest.approx(92.59, abs=5e-3)
    assert pds_length(70, 70, 0.7) == 0.0
    prof = PdsProfile(80, 50, 1.0)
    assert pds_guidance_speed(0.0, prof) == pytest.approx(50.0, rel=1e-14)
    assert pds_guidance_speed(prof.length, prof) == pytest.approx(80.0, rel=1e-12)
    assert pds_guidance_speed(75.23, prof) == pytest.approx(66.7, abs=0.05)


def test_bad_inputs():
    with pytest.raises(ValueError):
        pds_length(80, 50, 0.0)
    with pytest.raises(ValueError):
        pds_length(50, 80, 1.0)
    with pytest.raises(ValueError):
        pds_guidance_speed(-1.0, PdsProfile(80, 50, 1.0))


@given(st.floats(40, 130), st.floats(10, 39), st.floats(0.1, 3), st.floats(0.1, 3))
def test_length_decreases_with_deceleration(ve, vr, a1, a2):
    lo, hi = sorted((a1, a2))
    assert pds_length(ve, vr, hi) <= pds_length(ve, vr, lo)


@given(st.floats(40, 130), st.floats(10, 39), st.floats(0.1, 3), st.floats(0, 2000), st.floats(0, 50))
def test_profile_monotone_and_bounded(ve, vr, a, s, ds):
    prof = PdsProfile(ve, vr, a)
    v1, v2 = pds_guidance_speed(s, prof), pds_guidance_speed(s + ds, prof)
    assert vr - 1e-9 <= v1 <= v2 <= ve + 1e-9


def test_vectorised_matches_scalar():
    prof = PdsProfile(90, 45, 0.75)
    s = np.linspace(0, 500, 17)
    np.testing.assert_array_equal(pds_guidance_speed(s, prof), [pds_guidance_speed(x, prof) for x in s])


def test_mean_speed_integral():
    prof = PdsProfile(90, 45, 0.75)
    for span in (10.0, prof.length, prof.length + 120):
        s = np.linspace(0, span, 200001)
        numeric = trapezoid(pds_guidance_speed(s, prof), s) / span
        assert prof.mean_speed(span) == pytest.approx(numeric, rel=1e-8)


def test_size_pds_uses_envelope(ref):
    env = build_envelope(ref, 3000)
    prof = size_pds(env, 75.4)
    assert prof.a_o == env.a_max and prof.v_ramp == env.v_ramp
    with pytest.raises(ValueError):
        size_pds(env, 75.4, a_o=env.a_max * 1.01)
    assert size_pds(env, 75.4, a_o=env.a_max).a_o == env.a_max
    assert size_pds(env, env.v_ramp - 1).length == 0.0


def test_peak_rain_lengthens_pds(ref):
    dry, wet = build_envelope(ref, 0), build_envelope(ref, 3000)
    assert size_pds(wet, 75.4).length > size_pds(dry, 75.4).length


def test_profile_csv(tmp_path):
    p = tmp_path / "pds.csv"
    write_profile_csv(p, PdsProfile(80, 50, 1.0))
    rows = p.read_text().splitlines()
    assert rows[0] == "s,v_g"
    assert rows[1] == "0.0,50.0000"
