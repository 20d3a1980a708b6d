import dataclasses

import pytest
from hypothesis import settings

from rainvsl.domain import RainfallSchedule, reference_scenario

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ref():
    return reference_scenario()


def dry_variant(cfg):
    rain = RainfallSchedule(cfg.rainfall.intervals,
                            {sid: tuple(0.0 for _ in v) for sid, v in cfg.rainfall.intensity.items()})
    return cfg.replace(rainfall=rain)


def with_segments(cfg, **changes):
    return cfg.replace(segments=tuple(dataclasses.replace(s, **changes) for s in cfg.segments))


@pytest.fixture(scope="session")
def dry(ref):
    return dry_variant(ref)


def tiny_scenario(ref, rain=(0.0, 0.0), horizon=300.0):
    """Two segments, one lane (the ramp lane), one control cycle."""
    from rainvsl.domain import loads_scenario, scenario_to_dict
    import yaml

    doc = scenario_to_dict(ref)
    segs = []
    for n, s in enumerate(doc["segments"][2:]):
        s = dict(s)
        s["id"] = n + 1
        s["lane_count"] = 1
        for key in ("free_flow_speed", "critical_density", "capacity"):
            s[key] = s[key][-1:]
        segs.append(s)
    doc["segments"] = segs
    doc["rainfall"] = {"unit": "mm/h", "intervals": [[0.0, horizon]],
                       "intensity": {1: [rain[0]], 2: [rain[1]]}}
    doc["demand"] = {"inflow": [ref.demand.inflow[-1]], "exit_fraction": ref.demand.exit_fraction}
    doc["time"]["horizon"] = horizon
    return loads_scenario(yaml.safe_dump(doc))


def homogeneous(cfg, exit_fraction=0.0):
    """Every segment copies the first one's lanes; optionally no off-ramp demand."""
    from rainvsl.domain import Demand

    first = cfg.segments[0]
    segs = tuple(dataclasses.replace(first, id=s.id, has_off_ramp=s.has_off_ramp, ramp=s.ramp)
                 for s in cfg.segments)
    return cfg.replace(segments=segs, demand=Demand(cfg.demand.inflow, exit_fraction))


def synthetic_detector_rows(seed=0, n=60, noise=0.0, vf=120.0, kc=30.0, a=2.0, rain=(0.29, 0.17, -43.76)):
    """Rows for two cells that follow the speed-density curve, with visibility from the rain model."""
    import numpy as np

    rng = np.random.default_rng(seed)
    A, B, C = rain
    rows = []
    for seg, lane in ((1, 0), (2, 1)):
        k = np.linspace(2.0, 90.0, n)
        v = vf * np.exp(-(1 / a) * (k / kc) ** a) * (1 + noise * rng.standard_normal(n))
        # visibility that makes the rain model reproduce v exactly
        L = (np.log(v / A) - B * k) / C
        for t, (kk, vv, ll) in enumerate(zip(k, v, L)):
            rows.append((float(t * 60), seg, lane, float(kk * vv), float(kk), float(vv), float(ll)))
    return rows


def write_detector_csv(path, rows, header="timestamp,segment,lane,q,k,v,visibility"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(repr(x) if isinstance(x, float) else str(x) for x in r) + "\n")
    return path


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
