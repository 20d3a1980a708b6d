import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binom

from rainvsl.controller import GuidancePlan, legal_limit_plan
from rainvsl.domain import Demand
from rainvsl.microsim import (CollisionError, Vehicle, World, ca_step, collect_metrics, detect,
                              run_simulation, spawn_vehicles, write_event_log, write_station_csv)
from rainvsl.pds import pds_guidance_speed
from rainvsl.safety import build_envelope

from conftest import homogeneous


def quiet(cfg, p_slow=0.0, inflow=None, exit_fraction=None, compliance=None, horizon=None):
    demand = Demand(tuple(inflow) if inflow is not None else (0.0,) * cfg.n_lanes,
                    cfg.demand.exit_fraction if exit_fraction is None else exit_fraction)
    out = cfg.replace(demand=demand, ca=dataclasses.replace(cfg.ca, p_slow=p_slow))
    if compliance is not None:
        out = out.replace(compliance=compliance)
    if horizon is not None:
        out = out.replace(time=dataclasses.replace(cfg.time, horizon=horizon))
    return out


def world_with_plan(cfg, plan=None, seed=1):
    w = World(cfg, seed)
    env = build_envelope(cfg, 0)
    w.set_plan(plan or legal_limit_plan(cfg, env), env)
    return w


def put(w, lane, pos, speed=0, compliant=False, exiting=False):
    v = Vehicle(w.next_id, lane, pos, speed, compliant, exiting, w.t)
    w.next_id += 1
    w.spawned += 1
    w.lanes[lane].append(v)
    w.lanes[lane].sort(key=lambda x: -x.pos)
    return v


# -- ca_step ----------------------------------------------------------------

def test_lone_vehicle_reaches_lane_max_and_holds(ref):
    cfg = quiet(homogeneous(ref))
    w = world_with_plan(cfg)
    v = put(w, 0, w.veh_cells - 1)
    vmax = int(w.lane_vmax[0, 0])
    pos = v.pos
    for n in range(1, vmax + 5):
        ca_step(w)
        pos += min(n, vmax)
        assert v.speed == min(n, vmax)
        assert v.pos == pos


def test_follower_behind_stopped_leader_capped_by_gap(ref):
    w = world_with_plan(quiet(homogeneous(ref)))
    put(w, 0, 3000, speed=0)
    follower = put(w, 0, 3000 - w.veh_cells - 5, speed=40)
    w._speed_update()
    assert follower.speed == 5


def test_compliant_exiter_inside_pds_obeys_profile(ref):
    cfg = quiet(ref)
    env = build_envelope(cfg, 0)
    base = legal_limit_plan(cfg, env)
    lane = cfg.n_lanes - 1
    plan = GuidancePlan(0, base.v_g, 0.5, env.v_ramp, cfg.segments[-1].free_flow_speed[lane])
    w = world_with_plan(cfg, plan)
    prof = plan.profile
    s = prof.length / 2
    pos = w.n_cells - 1 - int(round(s / w.cell))
    v = put(w, lane, pos, speed=int(w.lane_vmax[-1, lane]), compliant=True, exiting=True)
    w._speed_update()
    s_actual = w.dist_to_gore(pos)
    cap = w.to_cells(pds_guidance_speed(s_actual, prof))
    assert cap < w.lane_vmax[-1, lane]
    assert v.speed == cap  # p_slow = 0 and nothing else binds here


def test_collision_check_panics(ref):
    w = world_with_plan(quiet(ref))
    put(w, 0, 100)
    put(w, 0, 100 + w.veh_cells - 1)
    with pytest.raises(CollisionError, match="lane 0"):
        w._check_no_overlap()


def test_exiters_stay_in_last_lane(ref):
    res = run_simulation(quiet(ref, p_slow=0.25, inflow=ref.demand.inflow, horizon=600),
                         mode="baseline", record_events=True)
    exiters = {e[1] for e in res.world.events if e[5] in ("ramp_exit", "overspeed_exit")}
    changes = {e[1] for e in res.world.events if e[5] == "lane_change"}
    assert exiters and not exiters & changes
    assert all(e[2] == ref.n_lanes - 1 for e in res.world.events if e[1] in exiters)


# -- spawn_vehicles ---------------------------------------------------------

def test_zero_demand_spawns_nothing(ref):
    w = world_with_plan(quiet(ref))
    for _ in range(500):
        spawn_vehicles(w)
    assert w.spawned == 0 and not any(w.queues)


def test_arrival_count_within_three_sigma(ref):
    cfg = quiet(ref, inflow=(1800.0, 0.0, 0.0))
    w = world_with_plan(cfg, seed=7)
    arrivals = 0
    for _ in range(10_000):
        before = w.spawned + len(w.queues[0])
        spawn_vehicles(w)
        arrivals += w.spawned + len(w.queues[0]) - before
        w.lanes[0].clear()  # keep the entry free so only the draw matters
    n, p = 10_000, 0.5
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(arrivals - n * p) <= 3 * sigma
    # the bound above is the exact binomial tail to within a fraction of a percent
    assert binom.cdf(n * p + 3 * sigma, n, p) - binom.cdf(n * p - 3 * sigma - 1, n, p) > 0.997


def test_full_compliance_makes_everyone_compliant(ref):
    res = run_simulation(quiet(ref, p_slow=0.25, inflow=ref.demand.inflow, compliance=1.0, horizon=600),
                         mode="baseline")
    vs = res.world.vehicles()
    assert vs and all(v.compliant for v in vs)
    assert all(c for q in res.world.queues for c, _, _ in q)


def test_blocked_entry_queues(ref):
    cfg = quiet(ref, inflow=(3600.0, 0.0, 0.0))
    w = world_with_plan(cfg)
    put(w, 0, w.veh_cells - 1)  # occupies the entry cells
    spawn_vehicles(w)
    assert len(w.queues[0]) == 1 and w.max_queue == 1


def test_demand_above_one_per_step_rejected(ref):
    with pytest.raises(ValueError, match="demand"):
        World(quiet(ref, inflow=(4000.0, 0.0, 0.0)))


# -- detect -----------------------------------------------------------------

def test_detect_empty_world(ref):
    w = world_with_plan(quiet(ref))
    st_ = detect(w)
    assert np.all(st_.k == 0)
    assert np.all(st_.q == 0)
    np.testing.assert_array_equal(st_.v, [s.free_flow_speed for s in ref.segments])


def test_detect_density_and_flow(ref):
    w = world_with_plan(quiet(ref))
    start = w.seg_start_cell[1]
    for n in range(10):
        put(w, 2, start + w.veh_cells * (n + 1), speed=20 + n)
    st_ = detect(w)
    assert st_.k[1, 2] == pytest.approx(20.0)
    assert st_.v[1, 2] == pytest.approx(np.mean([w.to_kmh(20 + n) for n in range(10)]))
    np.testing.assert_array_equal(st_.q, st_.k * st_.v)


# -- metrics ----------------------------------------------------------------

def test_one_vehicle_hour(ref):
    w = world_with_plan(quiet(ref))
    put(w, 0, 1000)
    for _ in range(3600):
        w._observe()
    assert collect_metrics(w).ttt == pytest.approx(1.0, abs=1e-12)


def test_two_vehicle_kilometres(ref):
    cfg = quiet(homogeneous(ref))
    w = world_with_plan(cfg)
    assert w.n_cells * w.cell == 2000.0
    put(w, 0, 0)
    while w.vehicles():
        w.step()
    assert collect_metrics(w).ttd == pytest.approx(2.0, abs=1e-12)


def test_equal_speeds_give_zero_dispersion(ref):
    w = world_with_plan(quiet(ref))
    for i in range(len(ref.segments)):
        for j in range(ref.n_lanes):
            w.records[(i, j)] = [72.0] * 5
    rep = collect_metrics(w)
    assert rep.sd == 0 and rep.sd_lane == [0.0] * ref.n_lanes


def test_zero_demand_metrics_are_zero(ref):
    rep = run_simulation(quiet(ref, horizon=600), mode="control").report
    assert (rep.ttt, rep.ttd, rep.sd, rep.spawned, rep.exited, rep.n_station_samples) == (0, 0, 0, 0, 0, 0)


def test_metrics_json_round_trips(ref):
    rep = run_simulation(quiet(ref, p_slow=0.25, inflow=ref.demand.inflow, horizon=600), mode="baseline").report
    doc = json.loads(rep.to_json())
    assert doc["ttt"] == pytest.approx(rep.ttt)
    assert 0 <= doc["adherence"] <= 1
    assert doc["ttt"] >= 0 and doc["ttd"] >= 0


# -- runs -------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["baseline", "control"])
def test_same_seed_same_bytes(ref, mode):
    cfg = ref.replace(time=dataclasses.replace(ref.time, horizon=900))
    a = run_simulation(cfg, mode=mode, seed=3).report.to_json()
    b = run_simulation(cfg, mode=mode, seed=3).report.to_json()
    assert a == b


def test_unknown_mode(ref):
    with pytest.raises(ValueError, match="unknown mode"):
        run_simulation(ref, mode="fast")


def test_logs_written(ref, tmp_path):
    res = run_simulation(ref.replace(time=dataclasses.replace(ref.time, horizon=600)), mode="baseline")
    write_event_log(tmp_path / "events.log", res.world)
    write_station_csv(tmp_path / "stations.csv", res.world)
    lines = (tmp_path / "events.log").read_text().splitlines()
    assert lines[0] == "t vehicle lane position_m speed_kmh event"
    assert len(lines) == len(res.world.events) + 1
    rows = (tmp_path / "stations.csv").read_text().splitlines()
    assert rows[0] == "station_m,t,v,v_g,compliant"
    assert len(rows) == res.report.n_station_samples + 1


# -- invariants ---------------------------------------------------------------

class CheckedWorld(World):
    """Asserts the guidance cap right after the speed rules, at the positions they used."""

    def _speed_update(self):
        super()._speed_update()
        for j, lane in enumerate(self.lanes):
            for v in lane:
                if v.compliant:
                    cap = self.guidance_kmh(self.segment_of(v.pos), j, self.dist_to_gore(v.pos), v.exiting)
                    assert v.speed <= self.to_cells(cap)


@given(seed=st.integers(0, 2**31 - 1), compliance=st.sampled_from([0.0, 0.5, 1.0]),
       scale=st.floats(0.2, 2.5))
def test_run_invariants(ref, seed, compliance, scale):
    cfg = quiet(ref, p_slow=0.25, inflow=[min(q * scale, 3000.0) for q in ref.demand.inflow],
                compliance=compliance)
    w = CheckedWorld(cfg, seed, record_events=False)
    env = build_envelope(cfg, 0)
    base = legal_limit_plan(cfg, env)
    v_g = base.v_g - 10.0 * (np.arange(cfg.n_lanes) % 2)
    w.set_plan(GuidancePlan(0, v_g, 0.5, env.v_ramp, float(v_g[-1, -1])), env)
    for _ in range(300):
        w.step()  # overlap is checked inside every step
        for lane in w.lanes:
            assert all(0 <= v.pos < w.n_cells and v.speed >= 0 for v in lane)
    assert w.spawned == w.exited + len(w.vehicles())
    assert w.ramp_exits <= w.exited


@given(st.floats(0.0, 200.0))
def test_quantisation_error_below_half_cell_bound(ref, v):
    w = World(quiet(ref))
    err = v - w.to_kmh(w.to_cells(v))
    assert -1e-9 <= err < 1.8 + 1e-9
