"""Multi-lane cellular-automaton plant for evaluating guidance plans.

Road cells are ``ca.cell_size`` metres long; a vehicle occupies
``ca.vehicle_cells`` consecutive cells ending at its front cell. Speeds are
integer cells per step. Each step runs: arrivals, lane changes, then the
speed rules (accelerate, guidance cap, gap, random slowdown) and movement.

The off-ramp gore sits at the downstream end of the road. Exiting vehicles
stay in the rightmost lane and leave there; everyone else leaves through
the downstream boundary at the same point.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .controller import (ControlRun, GuidancePlan, legal_limit_plan, run_control_loop,
                         speed_dispersion)
from .domain import ScenarioConfig
from .metanet import LaneSegmentState
from .pds import pds_guidance_speed
from .safety import build_envelope
from .units import kmh_to_ms, ms_to_kmh

log = logging.getLogger(__name__)


class CollisionError(AssertionError):
    """Two vehicles overlap; the update rules must never allow this."""


@dataclass(slots=True)
class Vehicle:
    id: int
    lane: int
    pos: int  # front cell index
    speed: int  # cells per step
    compliant: bool
    exiting: bool
    entry_time: float


@dataclass
class StationSample:
    station: float  # m from the gore
    t: float
    v: float  # km/h
    v_g: float  # km/h
    compliant: bool


@dataclass
class MetricsReport:
    ttt: float  # veh*h, on-road plus waiting at the entry
    ttd: float  # veh*km
    sd_lane: list[float]
    sd: float
    adherence: float  # share of station samples within tolerance of guidance
    adherence_compliant: list[float]  # per station; NaN if no samples
    adherence_noncompliant: list[float]
    n_station_samples: int
    mean_speed: list  # [cycle][segment][lane] km/h, NaN where empty
    segment_mean_speed: list  # [cycle][segment] km/h, vehicle-weighted over lanes
    spawned: int
    exited: int
    ramp_exits: int
    overspeed_exits: int
    present: int
    queued: int
    max_queue: int

    def to_json(self) -> str:
        return json.dumps(_json_safe(asdict(self)), indent=2, sort_keys=True)


def _json_safe(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else round(obj, 10)
    if isinstance(obj, list):
        return [_json_safe(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    return obj


class World:
    """Mutable CA state plus the logs needed for metrics."""

    def __init__(self, cfg: ScenarioConfig, seed: int | None = None, record_events: bool = True):
        self.cfg = cfg
        ca = cfg.ca
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cell = ca.cell_size
        self.veh_cells = ca.vehicle_cells
        self.n_lanes = cfg.n_lanes
        self.dt = cfg.time.sim_step
        bounds = np.cumsum([0.0] + [s.length for s in cfg.segments])
        self.seg_bounds_m = bounds
        self.n_cells = int(round(bounds[-1] / self.cell))
        self.seg_start_cell = [int(round(b / self.cell)) for b in bounds]
        self.ramp_seg = cfg.ramp_index
        self.lanes: list[list[Vehicle]] = [[] for _ in range(self.n_lanes)]  # sorted by pos, descending
        self.queues: list[list[tuple[bool, bool, float]]] = [[] for _ in range(self.n_lanes)]
        self.t = 0.0
        self.step_index = 0
        self.next_id = 0
        self.plan: GuidancePlan | None = None
        self.env = None
        self.record_events = record_events
        self.events: list[tuple] = []
        self.station_samples: list[StationSample] = []
        self.observed: list[LaneSegmentState] = []  # detector state at each cycle end

        # lane speed limits (cells/step) per segment and lane: driver free speed capped by the legal limit
        self.lane_vmax = np.array([[self.to_cells(min(vf, s.legal_limit)) for vf in s.free_flow_speed]
                                   for s in cfg.segments], dtype=int)
        self.inflow_p = [q * self.dt / 3600.0 for q in cfg.demand.inflow]
        if any(p > 1 for p in self.inflow_p):
            raise ValueError("per-lane demand exceeds one arrival per simulation step")

        M = len(cfg.segments)
        self._speed_sum = np.zeros((M, self.n_lanes))
        self._speed_n = np.zeros((M, self.n_lanes))
        self.cycle_means: list[np.ndarray] = []
        self.cycle_counts: list[np.ndarray] = []
        self.records: dict[tuple[int, int], list[float]] = {}
        self.vehicle_seconds = 0.0
        self.distance_m = 0.0
        self.spawned = 0
        self.exited = 0
        self.ramp_exits = 0
        self.overspeed_exits = 0
        self.max_queue = 0

    # -- unit helpers -------------------------------------------------
    def to_cells(self, v_kmh) -> int:
        """Floor a km/h speed to whole cells per step."""
        return int(math.floor(kmh_to_ms(v_kmh) * self.dt / self.cell + 1e-9))

    def to_kmh(self, cells) -> float:
        return ms_to_kmh(cells * self.cell / self.dt)

    def segment_of(self, pos) -> int:
        k = int(np.searchsorted(self.seg_start_cell, pos, side="right")) - 1
        return min(max(k, 0), len(self.cfg.segments) - 1)

    def dist_to_gore(self, pos) -> float:
        return (self.n_cells - 1 - pos) * self.cell

    def log_event(self, v: Vehicle, event: str):
        if self.record_events:
            self.events.append((self.t, v.id, v.lane, v.pos * self.cell, self.to_kmh(v.speed), event))

    # -- plan ---------------------------------------------------------
    def set_plan(self, plan: GuidancePlan, env):
        self.plan = plan
        self.env = env
        self._gcap = np.vectorize(self.to_cells)(plan.v_g).astype(int)
        prof = plan.profile
        self._pds = prof if prof.length > 0 else None

    def guidance_kmh(self, seg, lane, s, exiting):
        """Active guidance speed for a vehicle, before quantisation."""
        if exiting and lane == self.n_lanes - 1 and self._pds is not None and s < self._pds.length:
            return min(float(pds_guidance_speed(s, self._pds)), float(self.plan.v_g[seg, lane]))
        return float(self.plan.v_g[seg, lane])

    # -- dynamics -----------------------------------------------------
    def _arrivals(self):
        ef = self.cfg.demand.exit_fraction
        gamma = self.cfg.compliance
        for j in range(self.n_lanes):
            if self.rng.random() < self.inflow_p[j]:
                compliant = bool(self.rng.random() < gamma)
                exiting = bool(j == self.n_lanes - 1 and self.rng.random() < ef)
                self.queues[j].append((compliant, exiting, self.t))
            lane = self.lanes[j]
            if self.queues[j]:
                rear_free = (lane[-1].pos - self.veh_cells) if lane else self.n_cells
                front = self.veh_cells - 1
                if rear_free >= front:
                    compliant, exiting, t0 = self.queues[j].pop(0)
                    gap = rear_free - front
                    v = min(self.lane_vmax[0, j], gap)
                    if compliant:
                        v = min(v, self._gcap[0, j])
                    veh = Vehicle(self.next_id, j, front, v, compliant, exiting, t0)
                    self.next_id += 1
                    lane.append(veh)
                    self.spawned += 1
                    self.log_event(veh, "spawn")
            self.max_queue = max(self.max_queue, len(self.queues[j]))

    @staticmethod
    def _gap_ahead(lane, pos, veh_cells, n_cells):
        """Free cells ahead of a front at ``pos`` in a descending-sorted lane; exclusive of self."""
        best = None
        for other in lane:
            if other.pos > pos:
                best = other
            else:
                break
        if best is None:
            return n_cells  # open road through the downstream boundary
        return best.pos - veh_cells - pos

    @staticmethod
    def _back_info(lane, pos, veh_cells):
        """(gap, speed) of the nearest vehicle at or behind ``pos``, or None."""
        for other in lane:
            if other.pos <= pos:
                return pos - veh_cells - other.pos, other.speed
        return None

    def _cells_free(self, lane, pos):
        for other in lane:
            if other.pos - self.veh_cells < pos and pos - self.veh_cells < other.pos:
                return False
        return True

    def _lane_changes(self):
        ca = self.cfg.ca
        vc = self.veh_cells
        moves = []
        for j in range(self.n_lanes):
            for v in self.lanes[j]:
                if v.exiting:
                    continue
                seg = self.segment_of(v.pos)
                want = min(v.speed + 1, self.lane_vmax[seg, j])
                gap = self._gap_ahead(self.lanes[j], v.pos, vc, self.n_cells)
                if gap >= want:
                    continue
                best = None
                for tj in (j - 1, j + 1):
                    if not 0 <= tj < self.n_lanes:
                        continue
                    tl = self.lanes[tj]
                    if not self._cells_free(tl, v.pos):
                        continue
                    tgap = self._gap_ahead(tl, v.pos, vc, self.n_cells)
                    if tgap <= gap:
                        continue
                    back = self._back_info(tl, v.pos, vc)
                    if back is not None and back[0] < back[1]:
                        continue
                    if best is None or tgap > best[1]:
                        best = (tj, tgap)
                if best is not None:
                    moves.append((v, best[0]))
        # decisions draw in a fixed order, then apply; conflicting targets are dropped
        for v, tj in moves:
            if self.rng.random() >= ca.lane_change_prob:
                continue
            tl = self.lanes[tj]
            if not self._cells_free(tl, v.pos):
                continue
            back = self._back_info(tl, v.pos, vc)
            if back is not None and back[0] < back[1]:
                continue
            self.lanes[v.lane].remove(v)
            v.lane = tj
            tl.append(v)
            tl.sort(key=lambda x: -x.pos)
            self.log_event(v, "lane_change")

    def _speed_update(self):
        ca = self.cfg.ca
        ramp_legal = self.cfg.ramp.legal_limit
        vr_ms = kmh_to_ms(ramp_legal)
        vc = self.veh_cells
        for j in range(self.n_lanes):
            lane = self.lanes[j]
            for idx, v in enumerate(lane):
                seg = self.segment_of(v.pos)
                s = self.dist_to_gore(v.pos)
                nv = min(v.speed + 1, self.lane_vmax[seg, j])
                if v.exiting:
                    # every driver respects the ramp limit, braking late at a firm rate
                    late = math.sqrt(vr_ms * vr_ms + 2.0 * ca.late_brake_decel * s)
                    nv = min(nv, int(math.floor(late * self.dt / self.cell + 1e-9)))
                if v.compliant:
                    nv = min(nv, self.to_cells(self.guidance_kmh(seg, j, s, v.exiting)))
                if idx > 0:
                    leader = lane[idx - 1]
                    nv = min(nv, leader.pos - vc - v.pos)
                if nv > 0 and self.rng.random() < ca.p_slow:
                    nv -= 1
                v.speed = max(nv, 0)

    def _move(self):
        stations = self.cfg.ca.stations
        v_r = self.env.v_ramp if self.env is not None else self.cfg.ramp.legal_limit
        tol = self.cfg.ca.exit_speed_tolerance
        last = self.n_lanes - 1
        for j in range(self.n_lanes):
            keep = []
            for v in self.lanes[j]:
                old = v.pos
                v.pos += v.speed
                # distance past the downstream boundary is off the network
                self.distance_m += (min(v.pos, self.n_cells) - old) * self.cell
                if v.exiting and j == last:
                    s_old, s_new = self.dist_to_gore(old), self.dist_to_gore(v.pos)
                    for st in stations:
                        if s_new <= st < s_old:
                            seg = self.segment_of(min(v.pos, self.n_cells - 1))
                            self.station_samples.append(StationSample(
                                st, self.t, self.to_kmh(v.speed),
                                self.guidance_kmh(seg, j, st, True), v.compliant))
                if v.pos >= self.n_cells:
                    self.exited += 1
                    if v.exiting:
                        self.ramp_exits += 1
                        if self.to_kmh(v.speed) > v_r + tol:
                            self.overspeed_exits += 1
                            self.log_event(v, "overspeed_exit")
                        else:
                            self.log_event(v, "ramp_exit")
                    else:
                        self.log_event(v, "exit")
                    continue
                keep.append(v)
            self.lanes[j] = keep

    def _check_no_overlap(self):
        for j, lane in enumerate(self.lanes):
            for a, b in zip(lane, lane[1:]):
                if a.pos - b.pos < self.veh_cells:
                    raise CollisionError(f"overlap in lane {j} at t={self.t}: vehicles {a.id} and {b.id}")

    def _observe(self):
        present = 0
        for j, lane in enumerate(self.lanes):
            for v in lane:
                seg = self.segment_of(v.pos)
                kmh = self.to_kmh(v.speed)
                self.records.setdefault((seg, j), []).append(kmh)
                self._speed_sum[seg, j] += kmh
                self._speed_n[seg, j] += 1
                present += 1
        queued = sum(len(q) for q in self.queues)
        self.vehicle_seconds += (present + queued) * self.dt

    def step(self):
        if self.plan is None:
            raise RuntimeError("no guidance plan set")
        self._arrivals()
        self._lane_changes()
        self._speed_update()
        self._move()
        self._check_no_overlap()
        self.t += self.dt
        self.step_index += 1
        self._observe()

    def close_cycle(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            self.cycle_means.append(self._speed_sum / self._speed_n)
        self.cycle_counts.append(self._speed_n.copy())
        self.observed.append(detect(self))
        self._speed_sum[:] = 0
        self._speed_n[:] = 0

    # -- plant protocol -----------------------------------------------
    @property
    def time(self):
        return self.t

    def observe(self) -> LaneSegmentState:
        return detect(self)

    def advance(self, plan: GuidancePlan, duration: float):
        self.set_plan(plan, build_envelope(self.cfg, self.t))
        for _ in range(int(round(duration / self.dt))):
            self.step()
        self.close_cycle()

    def vehicles(self):
        return [v for lane in self.lanes for v in lane]


def spawn_vehicles(world: World):
    """Draw arrivals for one step and admit queued vehicles where the entry is free."""
    world._arrivals()
    return world


def ca_step(world: World, plan: GuidancePlan | None = None):
    if plan is not None and plan is not world.plan:
        world.set_plan(plan, world.env or build_envelope(world.cfg, world.t))
    world.step()
    return world


def detect(world: World) -> LaneSegmentState:
    """Per-(segment, lane) density, mean speed and flow from vehicle positions."""
    cfg = world.cfg
    M, N = len(cfg.segments), cfg.n_lanes
    count = np.zeros((M, N))
    ssum = np.zeros((M, N))
    for j, lane in enumerate(world.lanes):
        for v in lane:
            i = world.segment_of(v.pos)
            count[i, j] += 1
            ssum[i, j] += world.to_kmh(v.speed)
    lengths_km = np.array([s.length for s in cfg.segments])[:, None] / 1000.0
    k = count / lengths_km
    vf = np.array([s.free_flow_speed for s in cfg.segments], dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        v = np.where(count > 0, ssum / np.maximum(count, 1), vf)
    return LaneSegmentState(k=k, v=v, lam=int(world.t // cfg.time.prediction_step))


def collect_metrics(world: World) -> MetricsReport:
    cfg = world.cfg
    M, N = len(cfg.segments), cfg.n_lanes
    sd = speed_dispersion(world.records, M, N)
    tol = cfg.ca.station_tolerance
    samples = world.station_samples
    ok = [abs(s.v - s.v_g) <= tol for s in samples]
    adherence = float(np.mean(ok)) if ok else 0.0

    def by_station(flag):
        out = []
        for st in cfg.ca.stations:
            sel = [o for s, o in zip(samples, ok) if s.station == st and s.compliant == flag]
            out.append(float(np.mean(sel)) if sel else float("nan"))
        return out

    seg_means = []
    for means, counts in zip(world.cycle_means, world.cycle_counts):
        tot = counts.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            seg_means.append(np.where(tot > 0, np.nansum(means * counts, axis=1) / tot, np.nan).tolist())
    return MetricsReport(
        ttt=world.vehicle_seconds / 3600.0,
        ttd=world.distance_m / 1000.0,
        sd_lane=list(sd.per_lane),
        sd=sd.aggregate,
        adherence=adherence,
        adherence_compliant=by_station(True),
        adherence_noncompliant=by_station(False),
        n_station_samples=len(samples),
        mean_speed=[m.tolist() for m in world.cycle_means],
        segment_mean_speed=seg_means,
        spawned=world.spawned,
        exited=world.exited,
        ramp_exits=world.ramp_exits,
        overspeed_exits=world.overspeed_exits,
        present=len(world.vehicles()),
        queued=sum(len(q) for q in world.queues),
        max_queue=world.max_queue,
    )


@dataclass
class SimulationResult:
    report: MetricsReport
    world: World
    control: ControlRun | None = None
    plans: list = field(default_factory=list)


def run_simulation(cfg: ScenarioConfig, mode: str = "control", seed: int | None = None,
                   record_events: bool = True) -> SimulationResult:
    """Run the full horizon under the fixed-limit baseline or joint guidance control."""
    world = World(cfg, seed, record_events=record_events)
    if mode == "baseline":
        T = cfg.time.control_period
        plans = []
        for c in range(cfg.time.n_cycles):
            env = build_envelope(cfg, c * T)
            plan = legal_limit_plan(cfg, env, cycle=c)
            world.advance(plan, T)
            plans.append(plan)
        return SimulationResult(collect_metrics(world), world, None, plans)
    if mode == "control":
        run = run_control_loop(cfg, world)
        return SimulationResult(collect_metrics(world), world, run, run.plans)
    raise ValueError(f"unknown mode {mode!r}; expected 'baseline' or 'control'")


def write_event_log(path, world: World):
    with open(path, "w") as fh:
        fh.write("t vehicle lane position_m speed_kmh event\n")
        for t, vid, lane, pos, spd, ev in world.events:
            fh.write(f"{t:.1f} {vid} {lane} {pos:.1f} {spd:.2f} {ev}\n")


def write_station_csv(path, world: World):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_m", "t", "v", "v_g", "compliant"])
        for s in world.station_samples:
            w.writerow([f"{s.station:.1f}", f"{s.t:.1f}", f"{s.v:.4f}", f"{s.v_g:.4f}", int(s.compliant)])
