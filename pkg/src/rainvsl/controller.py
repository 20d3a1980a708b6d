"""Rolling-horizon lane-level guidance optimiser.

Each control cycle the plant state seeds a METANET prediction over one
control period. Guidance speeds (one per segment and lane) and the PDS
deceleration are chosen by projected coordinate descent on a fixed grid so
every plan is reproducible and can be checked by brute force on small
instances.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .domain import ScenarioConfig
from .metanet import BoundaryConditions, LaneSegmentState, MetanetModel
from .pds import PdsProfile
from .safety import SafetyEnvelope, build_envelope
from .units import s_to_h

log = logging.getLogger(__name__)

_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GuidancePlan:
    cycle: int
    v_g: np.ndarray  # km/h, (M, N)
    a_o: float  # m/s^2
    v_ramp: float  # km/h, PDS target at the gore
    v_entry: float  # km/h, rightmost-lane speed entering the PDS

    @property
    def profile(self) -> PdsProfile:
        if self.v_entry <= self.v_ramp:
            return PdsProfile(self.v_entry, self.v_entry, self.a_o)
        return PdsProfile(self.v_entry, self.v_ramp, self.a_o)

    def __eq__(self, other):
        return (isinstance(other, GuidancePlan) and self.cycle == other.cycle
                and np.array_equal(self.v_g, other.v_g) and self.a_o == other.a_o
                and self.v_ramp == other.v_ramp and self.v_entry == other.v_entry)


@dataclass(frozen=True)
class Violation:
    constraint: str  # "cap", "segment_band", "cycle_band" or "decel"
    index: tuple
    lhs: float
    bound: float


@dataclass
class ConstraintReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.feasible


# --------------------------------------------------------------------------
# objective pieces


def objective(k, v, weights, sd, lengths_km, dt_h):
    """Weighted travel time minus weighted travel distance plus dispersion.

    ``k`` and ``v`` have shape (..., n_steps, M, N); the result has shape (...).
    """
    x = np.asarray(lengths_km, dtype=float)[:, None]
    per_cell = x * (weights.ttt * k - weights.ttd * k * v)
    return dt_h * per_cell.sum(axis=(-3, -2, -1)) + weights.sd * np.asarray(sd)


@dataclass(frozen=True)
class SpeedDispersion:
    per_lane: tuple[float, ...]
    aggregate: float
    empty: bool = False


def speed_dispersion(records: Mapping[tuple[int, int], Sequence[float]], n_segments: int, n_lanes: int):
    """Per-lane dispersion sqrt(mean over segments of the in-cell speed variance).

    ``records`` maps (segment, lane) to the spot speeds observed there. Cells
    without records contribute zero variance. The mean is over all
    ``n_segments`` segments.
    """
    if not any(len(r) for r in records.values()):
        return SpeedDispersion(per_lane=(0.0,) * n_lanes, aggregate=0.0, empty=True)
    per_lane = []
    for j in range(n_lanes):
        total = 0.0
        for i in range(n_segments):
            speeds = np.asarray(records.get((i, j), ()), dtype=float)
            if speeds.size:
                total += float(np.mean((speeds - speeds.mean()) ** 2))
        per_lane.append(math.sqrt(total / n_segments))
    return SpeedDispersion(per_lane=tuple(per_lane), aggregate=float(np.mean(per_lane)))


def dispersion_proxy(v):
    """Predicted-speed dispersion from model speeds of shape (..., n_steps, M, N).

    Time-averaged cell speeds stand in for vehicle records: per lane, the
    squared deviation from the lane mean across segments, averaged and
    square-rooted, then averaged over lanes.
    """
    vbar = v.mean(axis=-3)
    dev = (vbar - vbar.mean(axis=-2, keepdims=True)) ** 2
    return np.sqrt(dev.mean(axis=-2)).mean(axis=-1)


# --------------------------------------------------------------------------
# constraints


def segment_caps(env: SafetyEnvelope, cfg: ScenarioConfig):
    return np.array([min(vm, s.legal_limit) for vm, s in zip(env.v_max, cfg.segments)])


def check_constraints(plan: GuidancePlan, prev: GuidancePlan | None, env: SafetyEnvelope,
                      cfg: ScenarioConfig) -> ConstraintReport:
    rep = ConstraintReport()
    band = cfg.control.max_band
    vg = plan.v_g
    M, N = vg.shape
    if (M, N) != (len(cfg.segments), cfg.n_lanes):
        raise ValueError(f"plan shape {vg.shape} does not match the geometry")
    caps = segment_caps(env, cfg)
    for i in range(M):
        for j in range(N):
            if vg[i, j] > caps[i] + _TOL:
                rep.violations.append(Violation("cap", (i, j), float(vg[i, j]), float(caps[i])))
    for i in range(M - 1):
        for j in range(N):
            d = abs(vg[i + 1, j] - vg[i, j])
            if d > band + _TOL:
                rep.violations.append(Violation("segment_band", (i, j), float(d), band))
    if prev is not None:
        for i in range(M):
            for j in range(N):
                d = abs(vg[i, j] - prev.v_g[i, j])
                if d > band + _TOL:
                    rep.violations.append(Violation("cycle_band", (i, j), float(d), band))
    if not (0 < plan.a_o <= env.a_max + _TOL):
        rep.violations.append(Violation("decel", (), float(plan.a_o), float(env.a_max)))
    return rep


def _lipschitz_upper(u, band):
    out = u.copy()
    M = u.shape[0]
    for i in range(M):
        for m in range(M):
            out[i] = np.minimum(out[i], u[m] + band * abs(i - m))
    return out


def _lipschitz_lower(lo, band):
    out = lo.copy()
    M = lo.shape[0]
    for i in range(M):
        for m in range(M):
            out[i] = np.maximum(out[i], lo[m] - band * abs(i - m))
    return out


def feasible_box(env, prev, cfg):
    """Per-cell bounds implied by the cap, lane-band and segment-band constraints.

    Returns (lower, upper, feasible).
    """
    cp = cfg.control
    N = cfg.n_lanes
    caps = segment_caps(env, cfg)
    upper = np.repeat(caps[:, None], N, axis=1).astype(float)
    lower = np.full_like(upper, min(cp.min_speed, float(caps.min())))
    if prev is not None:
        upper = np.minimum(upper, prev.v_g + cp.max_band)
        lower = np.maximum(lower, prev.v_g - cp.max_band)
    upper = _lipschitz_upper(upper, cp.max_band)
    lower = _lipschitz_lower(lower, cp.max_band)
    return lower, upper, bool(np.all(lower <= upper + _TOL))


def decel_grid(a_max, step):
    n = int(math.floor(a_max / step + 1e-9))
    vals = [step * k for k in range(1, n + 1)]
    if not vals or a_max - vals[-1] > 1e-9:
        vals.append(a_max)
    return np.array(vals)


def speed_candidates(lo, hi, step):
    start = math.ceil(lo / step - 1e-9) * step
    vals = list(np.arange(start, hi + 1e-9, step))
    vals = [v for v in vals if lo - 1e-9 <= v <= hi + 1e-9]
    for end in (lo, hi):
        if not any(abs(end - v) < 1e-9 for v in vals):
            vals.append(end)
    return np.array(sorted(vals))


# --------------------------------------------------------------------------
# optimiser


class _Scorer:
    """Evaluates J for batches of (guidance grid, a_o) candidates."""

    def __init__(self, model: MetanetModel, state, env, bc, cfg: ScenarioConfig):
        self.model = model
        self.state = state
        self.env = env
        self.bc = bc
        self.cfg = cfg
        self.n = cfg.time.n_pred
        self.dt_h = s_to_h(cfg.time.prediction_step)
        self.ramp = (cfg.ramp_index, cfg.n_lanes - 1)
        seg = cfg.segments[cfg.ramp_index]
        self.ramp_len = seg.length
        self.v_f_ramp_lane = seg.free_flow_speed[-1]

    def entry_speed(self, v_g_ramp_lane):
        return min(v_g_ramp_lane, self.v_f_ramp_lane)

    def prediction_guidance(self, vg, a_o):
        """Guidance matrix for the prediction, folding the PDS into the ramp cell."""
        out = np.array(vg, dtype=float, copy=True)
        i, j = self.ramp
        flat = out.reshape(-1, *out.shape[-2:])
        a = np.broadcast_to(np.asarray(a_o, dtype=float), flat.shape[:1])
        for b in range(flat.shape[0]):
            g = flat[b, i, j]
            entry = self.entry_speed(g)
            if entry > self.env.v_ramp:
                prof = PdsProfile(entry, self.env.v_ramp, float(a[b]))
                ld = min(prof.length, self.ramp_len)
                inside = prof.mean_speed(ld) if ld > 0 else 0.0
                flat[b, i, j] = (inside * ld + g * (self.ramp_len - ld)) / self.ramp_len
        return flat.reshape(out.shape)

    def score(self, vgs, a_os):
        G = self.prediction_guidance(vgs, a_os)
        k, v = self.model.predict_batch(self.state, G, self.bc, self.env, self.n)
        sd = dispersion_proxy(v)
        J = objective(k, v, self.cfg.weights, sd, self.model.lengths_km, self.dt_h)
        J = np.where(np.isfinite(J), J, np.inf)
        return J


def _make_plan(cycle, vg, a_o, env, scorer):
    i, j = scorer.ramp
    return GuidancePlan(cycle=cycle, v_g=np.array(vg, dtype=float), a_o=float(a_o),
                        v_ramp=float(env.v_ramp), v_entry=float(scorer.entry_speed(vg[i, j])))


@dataclass
class CycleResult:
    plan: GuidancePlan
    J: float
    feasible: bool
    J_start: dict
    trajectory: list


def optimize_cycle(state: LaneSegmentState, env: SafetyEnvelope, prev: GuidancePlan | None,
                   bc: BoundaryConditions | None, cfg: ScenarioConfig, model: MetanetModel | None = None,
                   cycle: int | None = None) -> CycleResult:
    """Choose the cycle's guidance grid and PDS deceleration."""
    model = MetanetModel(cfg) if model is None else model
    bc = model.default_bc() if bc is None else bc
    cp = cfg.control
    cycle = (0 if prev is None else prev.cycle + 1) if cycle is None else cycle
    scorer = _Scorer(model, state, env, bc, cfg)
    lower, upper, ok = feasible_box(env, prev, cfg)
    a_grid = decel_grid(env.a_max, cp.decel_step)

    if not ok:
        log.warning("cycle %d: no plan satisfies the band constraints; using the projected cap", cycle)
        caps = segment_caps(env, cfg)
        vg = _lipschitz_upper(np.repeat(caps[:, None], cfg.n_lanes, axis=1).astype(float), cp.max_band)
        a_o = float(a_grid[-1])
        J = float(scorer.score(vg[None], np.array([a_o]))[0])
        plan = _make_plan(cycle, vg, a_o, env, scorer)
        return CycleResult(plan, J, False, {"cap": J}, _trajectory(model, state, plan, scorer, bc, env))

    starts = []
    if prev is not None:
        a_prev = float(a_grid[np.argmin(np.abs(a_grid - min(prev.a_o, env.a_max)))])
        starts.append(("prev", np.clip(prev.v_g, lower, upper), a_prev))
    starts.append(("cap", upper.copy(), float(a_grid[-1])))
    # uniform plans clipped to the box stay band-feasible and let the descent
    # start past moves that only pay off when every segment shifts together
    for c in speed_candidates(float(lower.min()), float(upper.max()), cp.speed_step)[::-1]:
        starts.append((f"uniform {c:g}", np.clip(np.full_like(upper, c), lower, upper), float(a_grid[-1])))
    Js = scorer.score(np.stack([s[1] for s in starts]), np.array([s[2] for s in starts]))
    J_start = {name: float(J0) for (name, _, _), J0 in zip(starts, Js)}
    best = float(np.min(Js))
    k0 = next(n for n, J0 in enumerate(Js) if _tie(J0, best, cp.tie_rtol))
    _, vg, a_o = starts[k0]
    vg = vg.copy()
    J = float(Js[k0])

    M, N = vg.shape
    band = cp.max_band
    for _ in range(cp.max_passes):
        changed = False
        for i in range(M):
            for j in range(N):
                lo = lower[i, j]
                hi = upper[i, j]
                if i > 0:
                    lo, hi = max(lo, vg[i - 1, j] - band), min(hi, vg[i - 1, j] + band)
                if i < M - 1:
                    lo, hi = max(lo, vg[i + 1, j] - band), min(hi, vg[i + 1, j] + band)
                cands = speed_candidates(lo, hi, cp.speed_step)
                batch = np.repeat(vg[None], len(cands), axis=0)
                batch[:, i, j] = cands
                Js = scorer.score(batch, np.full(len(cands), a_o))
                pick = _pick(Js, cands, True, cp.tie_rtol)
                if _better(Js[pick], cands[pick], J, vg[i, j], True, cp.tie_rtol):
                    vg[i, j] = cands[pick]
                    J = float(Js[pick])
                    changed = True
        batch = np.repeat(vg[None], len(a_grid), axis=0)
        Js = scorer.score(batch, a_grid)
        pick = _pick(Js, a_grid, False, cp.tie_rtol)
        if _better(Js[pick], a_grid[pick], J, a_o, False, cp.tie_rtol):
            a_o = float(a_grid[pick])
            J = float(Js[pick])
            changed = True
        if not changed:
            break

    plan = _make_plan(cycle, vg, a_o, env, scorer)
    return CycleResult(plan, J, True, J_start, _trajectory(model, state, plan, scorer, bc, env))


def _tie(a, b, rtol):
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


def _pick(Js, values, prefer_high, rtol):
    best = np.min(Js)
    ties = [k for k in range(len(Js)) if _tie(Js[k], best, rtol)]
    return max(ties, key=lambda k: values[k]) if prefer_high else min(ties, key=lambda k: values[k])


def _better(J_new, x_new, J_cur, x_cur, prefer_high, rtol):
    if _tie(J_new, J_cur, rtol):
        return x_new > x_cur + 1e-12 if prefer_high else x_new < x_cur - 1e-12
    return J_new < J_cur


def _trajectory(model, state, plan, scorer, bc, env):
    G = scorer.prediction_guidance(plan.v_g, plan.a_o)
    return model.predict_horizon(state, G, bc, env, scorer.n)


def plan_objective(plan: GuidancePlan, state, env, bc, cfg, model=None) -> float:
    model = MetanetModel(cfg) if model is None else model
    scorer = _Scorer(model, state, env, model.default_bc() if bc is None else bc, cfg)
    return float(scorer.score(plan.v_g[None], np.array([plan.a_o]))[0])


def legal_limit_plan(cfg: ScenarioConfig, env: SafetyEnvelope, cycle=0) -> GuidancePlan:
    """Static plan at the legal limits with no PDS (the fixed-limit baseline)."""
    vg = np.repeat(np.array([[s.legal_limit] for s in cfg.segments]), cfg.n_lanes, axis=1).astype(float)
    return GuidancePlan(cycle=cycle, v_g=vg, a_o=float(env.a_max), v_ramp=float(env.v_ramp),
                        v_entry=float(env.v_ramp))


# --------------------------------------------------------------------------
# closed loop


class Plant(Protocol):
    time: float

    def observe(self) -> LaneSegmentState: ...

    def advance(self, plan: GuidancePlan, duration: float) -> None: ...


class MetanetPlant:
    """The prediction model itself used as the controlled process."""

    def __init__(self, cfg: ScenarioConfig, state: LaneSegmentState | None = None):
        self.cfg = cfg
        self.model = MetanetModel(cfg)
        self.state = self.model.equilibrium_state() if state is None else state
        self.time = 0.0
        self.history = [self.state]

    def observe(self):
        return self.state

    def advance(self, plan, duration):
        env = build_envelope(self.cfg, self.time)
        scorer = _Scorer(self.model, self.state, env, self.model.default_bc(), self.cfg)
        G = scorer.prediction_guidance(plan.v_g, plan.a_o)
        n = int(round(duration / self.cfg.time.prediction_step))
        traj = self.model.predict_horizon(self.state, G, None, env, n)
        self.state = traj[-1]
        self.history.extend(traj)
        self.time += duration


@dataclass
class ControlRun:
    plans: list[GuidancePlan] = field(default_factory=list)
    envelopes: list[SafetyEnvelope] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)
    feasible: list[bool] = field(default_factory=list)
    baselines: list[dict] = field(default_factory=list)
    predictions: list[list] = field(default_factory=list)
    reports: list[ConstraintReport] = field(default_factory=list)


def run_control_loop(cfg: ScenarioConfig, plant: Plant, on_cycle=None) -> ControlRun:
    """Observe, build the envelope, optimise and apply, once per control period."""
    model = MetanetModel(cfg)
    T = cfg.time.control_period
    run = ControlRun()
    prev = None
    for c in range(cfg.time.n_cycles):
        try:
            state = plant.observe()
            env = build_envelope(cfg, c * T)
            res = optimize_cycle(state, env, prev, model.default_bc(), cfg, model, cycle=c)
            report = check_constraints(res.plan, prev, env, cfg)
            plant.advance(res.plan, T)
        except Exception as e:
            raise RuntimeError(f"control cycle {c} failed: {e}") from e
        run.plans.append(res.plan)
        run.envelopes.append(env)
        run.objectives.append(res.J)
        run.feasible.append(res.feasible and report.feasible)
        run.baselines.append(res.J_start)
        run.predictions.append(res.trajectory)
        run.reports.append(report)
        if on_cycle is not None:
            on_cycle(c, res, env)
        prev = res.plan
    return run


def write_plan_log(path, run: ControlRun):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cycle", "i", "j", "v_g", "a_o", "l_d", "v_entry", "v_ramp", "J", "feasible"])
        for plan, J, ok in zip(run.plans, run.objectives, run.feasible):
            M, N = plan.v_g.shape
            for i in range(M):
                for j in range(N):
                    w.writerow([plan.cycle, i, j, f"{plan.v_g[i, j]:.4f}", f"{plan.a_o:.4f}",
                                f"{plan.profile.length:.4f}", f"{plan.v_entry:.4f}", f"{plan.v_ramp:.4f}",
                                f"{J:.6f}", int(ok)])
