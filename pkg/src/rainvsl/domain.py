"""Scenario configuration: road geometry, rainfall, time grid and model parameters.

A scenario is a YAML document (see ``docs/scenario_schema.md``). Every type
here is a frozen dataclass; ``load_scenario`` validates all invariants and
``dump_scenario`` writes a document that loads back to an equal object.
"""

from __future__ import annotations

import bisect
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .units import rain_to_mm_per_h


class ScenarioError(ValueError):
    """Base class for scenario problems."""


class SchemaError(ScenarioError):
    """Document does not parse or does not match the schema."""


class ValidationError(ScenarioError):
    """Document parses but violates an invariant."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class RampGeometry:
    curve_radius: float  # m
    slope_length: float  # m
    gradient: float  # percent
    texture_depth: float  # mm
    superelevation: float = 0.0  # degrees; stored, not used by the fitted speed surface
    legal_limit: float = 60.0  # km/h


@dataclass(frozen=True)
class Drainage:
    """Drainage path used for the main-line water film."""

    slope_length: float = 15.0  # m, cross-slope flow path over three lanes plus shoulder
    gradient: float = 2.0  # percent
    texture_depth: float = 0.8  # mm


@dataclass(frozen=True)
class SegmentGeometry:
    id: int
    length: float  # m
    lane_count: int
    free_flow_speed: tuple[float, ...]  # km/h per lane
    critical_density: tuple[float, ...]  # veh/km per lane
    capacity: tuple[float, ...]  # veh/h per lane
    legal_limit: float  # km/h
    has_off_ramp: bool = False
    ramp: RampGeometry | None = None
    drainage: Drainage = field(default_factory=Drainage)


@dataclass(frozen=True)
class RainfallSchedule:
    """Piecewise-constant rainfall in mm/h over half-open intervals [start, end)."""

    intervals: tuple[tuple[float, float], ...]
    intensity: Mapping[int, tuple[float, ...]]  # segment id -> one value per interval

    def __hash__(self):
        return hash((self.intervals, tuple(sorted(self.intensity.items()))))


@dataclass(frozen=True)
class TimeGrid:
    sim_step: float = 1.0  # s
    prediction_step: float = 20.0  # s
    control_period: float = 300.0  # s
    horizon: float = 3600.0  # s

    @property
    def n_pred(self) -> int:
        """Prediction steps per control period (300 / 20 = 15)."""
        return int(round(self.control_period / self.prediction_step))

    @property
    def n_cycles(self) -> int:
        return int(round(self.horizon / self.control_period))

    @property
    def sim_steps_per_cycle(self) -> int:
        return int(round(self.control_period / self.sim_step))


@dataclass(frozen=True)
class Demand:
    inflow: tuple[float, ...]  # veh/h per lane at the upstream boundary
    exit_fraction: float  # share of rightmost-lane flow that leaves at the off-ramp


@dataclass(frozen=True)
class MetanetParams:
    tau: float = 73.2  # s
    kappa: float = 42.0  # veh/km
    omega: float = 0.16
    a_fd: float = 2.0  # exponent of the calibrated speed-density curve
    h_rain: float = 2.0  # rain exponent of the desired-speed curve
    k_cr_d: float = 40.0  # veh/km, critical density under guidance
    gamma_margin: float = 0.7  # drivers exceed guidance by this fraction in prediction
    rain_cap: bool = False  # include the visibility speed-density cap in the desired speed
    v_cap_max: float = 200.0  # km/h
    substeps: int = 1  # explicit sub-updates per prediction step


@dataclass(frozen=True)
class RainSpeedDensityParams:
    A: float = 0.29
    B: float = 0.17  # per veh/km
    C: float = -43.76  # per m


@dataclass(frozen=True)
class ObjectiveWeights:
    ttt: float = 3.0
    ttd: float = 2.0
    sd: float = 5.0


@dataclass(frozen=True)
class SafetyParams:
    reaction_time: float = 1.5  # s
    safety_gap: float = 5.0  # m
    a_max: float = 0.5  # m/s^2, design ceiling for progressive deceleration
    phi_min: float = 0.05
    visibility_cap: float = 10000.0  # m


@dataclass(frozen=True)
class ControlParams:
    speed_step: float = 5.0  # km/h grid quantum
    decel_step: float = 0.25  # m/s^2 grid quantum
    min_speed: float = 30.0  # km/h, lowest guidance considered
    max_band: float = 20.0  # km/h, widest allowed lane-to-lane and segment-to-segment spread
    max_passes: int = 20
    tie_rtol: float = 1e-6  # relative J difference treated as a tie


@dataclass(frozen=True)
class CAConfig:
    cell_size: float = 0.5  # m
    vehicle_length: float = 4.3  # m
    p_slow: float = 0.25
    lane_change_prob: float = 0.8
    late_brake_decel: float = 3.0  # m/s^2, unguided drivers braking for the ramp limit
    exit_speed_tolerance: float = 5.0  # km/h above V_r before an exit counts as overspeed
    stations: tuple[float, ...] = (0.0, 100.0, 200.0, 300.0, 400.0)  # m from the gore
    station_tolerance: float = 5.0  # km/h, adherence band

    @property
    def vehicle_cells(self) -> int:
        return int(math.ceil(self.vehicle_length / self.cell_size - 1e-9))


@dataclass(frozen=True)
class ScenarioConfig:
    segments: tuple[SegmentGeometry, ...]
    rainfall: RainfallSchedule
    time: TimeGrid
    demand: Demand
    metanet: MetanetParams = MetanetParams()
    rain_model: RainSpeedDensityParams = RainSpeedDensityParams()
    weights: ObjectiveWeights = ObjectiveWeights()
    safety: SafetyParams = SafetyParams()
    control: ControlParams = ControlParams()
    ca: CAConfig = CAConfig()
    compliance: float = 0.7
    seed: int = 1

    @property
    def n_lanes(self) -> int:
        return self.segments[0].lane_count

    @property
    def ramp_index(self) -> int:
        return next(i for i, s in enumerate(self.segments) if s.has_off_ramp)

    @property
    def ramp(self) -> RampGeometry:
        return self.segments[self.ramp_index].ramp

    @property
    def lengths_m(self) -> tuple[float, ...]:
        return tuple(s.length for s in self.segments)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


def rainfall_at(schedule: RainfallSchedule, segment: int, t: float) -> float:
    """Rainfall in mm/h on ``segment`` at time ``t`` (half-open intervals)."""
    starts = [a for a, _ in schedule.intervals]
    k = bisect.bisect_right(starts, t) - 1
    if k < 0 or t >= schedule.intervals[k][1]:
        lo, hi = schedule.intervals[0][0], schedule.intervals[-1][1]
        raise ValueError(f"t={t} outside rainfall horizon [{lo}, {hi})")
    try:
        return schedule.intensity[segment][k]
    except KeyError:
        raise KeyError(f"no rainfall defined for segment {segment}") from None


# --------------------------------------------------------------------------
# validation


def _check(cond, field_name, message):
    if not cond:
        raise ValidationError(field_name, message)


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    _check(len(cfg.segments) > 0, "segments", "at least one segment is required")
    n = cfg.segments[0].lane_count
    ids = [s.id for s in cfg.segments]
    _check(len(set(ids)) == len(ids), "segments", "duplicate segment ids")
    for k, s in enumerate(cfg.segments):
        p = f"segments[{k}]"
        _check(s.length > 0, f"{p}.length", "must be > 0")
        _check(s.lane_count >= 1, f"{p}.lane_count", "must be >= 1")
        _check(s.lane_count == n, f"{p}.lane_count", "all segments must have the same lane count")
        for name in ("free_flow_speed", "critical_density", "capacity"):
            vals = getattr(s, name)
            _check(len(vals) == s.lane_count, f"{p}.{name}", f"expected {s.lane_count} values")
            _check(all(v > 0 for v in vals), f"{p}.{name}", "values must be > 0")
        _check(s.legal_limit > 0, f"{p}.legal_limit", "must be > 0")
        d = s.drainage
        _check(d.slope_length > 0 and d.gradient > 0 and d.texture_depth > 0,
               f"{p}.drainage", "slope_length, gradient, texture_depth must be > 0")
        if s.has_off_ramp:
            _check(s.ramp is not None, f"{p}.ramp", "required when has_off_ramp is true")
        if s.ramp is not None:
            r = s.ramp
            _check(r.curve_radius > 0, f"{p}.ramp.curve_radius", "must be > 0")
            _check(r.slope_length > 0, f"{p}.ramp.slope_length", "must be > 0")
            _check(r.gradient > 0, f"{p}.ramp.gradient", "must be > 0")
            _check(r.texture_depth > 0, f"{p}.ramp.texture_depth", "must be > 0")
            _check(r.legal_limit > 0, f"{p}.ramp.legal_limit", "must be > 0")
    ramps = [k for k, s in enumerate(cfg.segments) if s.has_off_ramp]
    _check(len(ramps) == 1, "segments", "exactly one segment must have has_off_ramp = true")
    _check(ramps[0] == len(cfg.segments) - 1, "segments", "the off-ramp segment must be the most downstream")

    tg = cfg.time
    for name in ("sim_step", "prediction_step", "control_period", "horizon"):
        _check(getattr(tg, name) > 0, f"time.{name}", "must be > 0")
    _check(_is_multiple(tg.control_period, tg.prediction_step), "time.control_period",
           "must be an integer multiple of prediction_step")
    _check(_is_multiple(tg.horizon, tg.control_period), "time.horizon",
           "must be an integer multiple of control_period")
    _check(_is_multiple(tg.prediction_step, tg.sim_step), "time.prediction_step",
           "must be an integer multiple of sim_step")

    rf = cfg.rainfall
    _check(len(rf.intervals) > 0, "rainfall.intervals", "at least one interval is required")
    prev_end = 0.0
    for k, (a, b) in enumerate(rf.intervals):
        _check(b > a, f"rainfall.intervals[{k}]", "end must exceed start")
        _check(math.isclose(a, prev_end), f"rainfall.intervals[{k}]",
               f"uncovered interval [{prev_end}, {a})" if a > prev_end else "overlapping interval")
        prev_end = b
    _check(prev_end >= tg.horizon, "rainfall.intervals",
           f"uncovered interval [{prev_end}, {tg.horizon})")
    for sid in ids:
        _check(sid in rf.intensity, "rainfall.intensity", f"missing segment {sid}")
    for sid, vals in rf.intensity.items():
        _check(sid in ids, "rainfall.intensity", f"unknown segment {sid}")
        _check(len(vals) == len(rf.intervals), f"rainfall.intensity[{sid}]",
               f"expected {len(rf.intervals)} values")
        _check(all(v >= 0 for v in vals), f"rainfall.intensity[{sid}]", "values must be >= 0")

    dm = cfg.demand
    _check(len(dm.inflow) == n, "demand.inflow", f"expected {n} values")
    _check(all(q >= 0 for q in dm.inflow), "demand.inflow", "values must be >= 0")
    _check(0.0 <= dm.exit_fraction <= 1.0, "demand.exit_fraction", "must be in [0, 1]")

    mp = cfg.metanet
    _check(mp.tau > 0, "metanet.tau", "must be > 0")
    _check(mp.kappa > 0, "metanet.kappa", "must be > 0")
    _check(0 < mp.omega <= 1, "metanet.omega", "must be in (0, 1]")
    _check(1.3 <= mp.h_rain <= 2.0, "metanet.h_rain", "must be in [1.3, 2]")
    _check(mp.a_fd > 0, "metanet.a_fd", "must be > 0")
    _check(mp.k_cr_d > 0, "metanet.k_cr_d", "must be > 0")
    _check(mp.gamma_margin >= 0, "metanet.gamma_margin", "must be >= 0")
    _check(mp.v_cap_max > 0, "metanet.v_cap_max", "must be > 0")
    _check(mp.substeps >= 1, "metanet.substeps", "must be >= 1")

    w = cfg.weights
    _check(min(w.ttt, w.ttd, w.sd) >= 0, "weights", "all weights must be >= 0")
    sp = cfg.safety
    _check(sp.reaction_time >= 0, "safety.reaction_time", "must be >= 0")
    _check(sp.safety_gap >= 0, "safety.safety_gap", "must be >= 0")
    _check(sp.a_max > 0, "safety.a_max", "must be > 0")
    _check(0 < sp.phi_min < 0.8256, "safety.phi_min", "must be in (0, 0.8256)")
    _check(sp.visibility_cap > 0, "safety.visibility_cap", "must be > 0")
    cp = cfg.control
    _check(cp.speed_step > 0 and cp.decel_step > 0, "control", "grid steps must be > 0")
    _check(cp.min_speed >= 0, "control.min_speed", "must be >= 0")
    _check(cp.max_band > 0, "control.max_band", "must be > 0")
    _check(cp.tie_rtol >= 0, "control.tie_rtol", "must be >= 0")
    ca = cfg.ca
    _check(ca.cell_size > 0, "ca.cell_size", "must be > 0")
    _check(ca.vehicle_length > 0, "ca.vehicle_length", "must be > 0")
    _check(0 <= ca.p_slow <= 1, "ca.p_slow", "must be in [0, 1]")
    _check(0 <= ca.lane_change_prob <= 1, "ca.lane_change_prob", "must be in [0, 1]")
    _check(ca.late_brake_decel > 0, "ca.late_brake_decel", "must be > 0")
    _check(0.0 <= cfg.compliance <= 1.0, "compliance", "must be in [0, 1]")
    _check(0 <= cfg.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
    return cfg


def _is_multiple(a, b):
    r = a / b
    return abs(r - round(r)) < 1e-9 and round(r) >= 1


# --------------------------------------------------------------------------
# document <-> object

_FLAT_SECTIONS = {
    "time": TimeGrid,
    "metanet": MetanetParams,
    "rain_model": RainSpeedDensityParams,
    "weights": ObjectiveWeights,
    "safety": SafetyParams,
    "control": ControlParams,
    "ca": CAConfig,
}
_TOP_KEYS = {"segments", "rainfall", "demand", "compliance", "seed", *_FLAT_SECTIONS}


def _strict_keys(doc, allowed, where, required=()):
    if not isinstance(doc, Mapping):
        raise SchemaError(f"{where}: expected a mapping, got {type(doc).__name__}")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = [k for k in required if k not in doc]
    if missing:
        raise SchemaError(f"{where}: missing key(s) {missing}")


def _coerce(cls, doc, where):
    """Build a flat dataclass from a mapping, casting to the default's type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    _strict_keys(doc, fields, where)
    kwargs = {}
    for k, v in doc.items():
        default = fields[k].default
        try:
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise TypeError
                kwargs[k] = v
            elif isinstance(default, int):
                if isinstance(v, bool) or int(v) != v:
                    raise TypeError
                kwargs[k] = int(v)
            elif isinstance(default, tuple):
                kwargs[k] = tuple(float(x) for x in v)
            else:
                kwargs[k] = float(v)
        except (TypeError, ValueError):
            raise SchemaError(f"{where}.{k}: bad value {v!r}") from None
    return cls(**kwargs)


def _floats(v, where):
    try:
        return tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: expected a list of numbers, got {v!r}") from None


def _num(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {v!r}")
    return float(v)


def scenario_from_dict(doc: Mapping[str, Any]) -> ScenarioConfig:
    _strict_keys(doc, _TOP_KEYS, "<root>", required=("segments", "rainfall", "demand"))
    segs = []
    seg_docs = doc["segments"]
    if not isinstance(seg_docs, list):
        raise SchemaError("segments: expected a list")
    seg_keys = {"id", "length", "lane_count", "free_flow_speed", "critical_density", "capacity",
                "legal_limit", "has_off_ramp", "ramp", "drainage"}
    for k, sd in enumerate(seg_docs):
        w = f"segments[{k}]"
        _strict_keys(sd, seg_keys, w, required=("id", "length", "free_flow_speed",
                                                "critical_density", "capacity", "legal_limit"))
        ramp = None
        if sd.get("ramp") is not None:
            _strict_keys(sd["ramp"], {f.name for f in dataclasses.fields(RampGeometry)}, f"{w}.ramp",
                         required=("curve_radius", "slope_length", "gradient", "texture_depth"))
            ramp = _coerce(RampGeometry, sd["ramp"], f"{w}.ramp")
        drainage = _coerce(Drainage, sd["drainage"], f"{w}.drainage") if "drainage" in sd else Drainage()
        ffs = _floats(sd["free_flow_speed"], f"{w}.free_flow_speed")
        segs.append(SegmentGeometry(
            id=int(sd["id"]),
            length=_num(sd["length"], f"{w}.length"),
            lane_count=int(sd.get("lane_count", len(ffs))),
            free_flow_speed=ffs,
            critical_density=_floats(sd["critical_density"], f"{w}.critical_density"),
            capacity=_floats(sd["capacity"], f"{w}.capacity"),
            legal_limit=_num(sd["legal_limit"], f"{w}.legal_limit"),
            has_off_ramp=bool(sd.get("has_off_ramp", False)),
            ramp=ramp,
            drainage=drainage,
        ))

    rd = doc["rainfall"]
    _strict_keys(rd, {"unit", "intervals", "intensity"}, "rainfall", required=("intervals", "intensity"))
    unit = rd.get("unit", "mm/h")
    try:
        intervals = tuple((float(a), float(b)) for a, b in rd["intervals"])
    except (TypeError, ValueError):
        raise SchemaError("rainfall.intervals: expected a list of [start, end] pairs") from None
    if not isinstance(rd["intensity"], Mapping):
        raise SchemaError("rainfall.intensity: expected a mapping of segment id to values")
    try:
        intensity = {int(sid): tuple(rain_to_mm_per_h(x, unit)
                                     for x in _floats(vals, f"rainfall.intensity[{sid}]"))
                     for sid, vals in rd["intensity"].items()}
    except ValueError as e:
        raise SchemaError(f"rainfall.unit: {e}") from None

    dd = doc["demand"]
    _strict_keys(dd, {"inflow", "exit_fraction"}, "demand", required=("inflow", "exit_fraction"))
    demand = Demand(inflow=_floats(dd["inflow"], "demand.inflow"),
                    exit_fraction=_num(dd["exit_fraction"], "demand.exit_fraction"))

    sections = {name: _coerce(cls, doc[name], name) if name in doc else cls()
                for name, cls in _FLAT_SECTIONS.items()}
    seed = doc.get("seed", 1)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise SchemaError(f"seed: expected an integer, got {seed!r}")
    cfg = ScenarioConfig(
        segments=tuple(segs),
        rainfall=RainfallSchedule(intervals=intervals, intensity=intensity),
        demand=demand,
        compliance=_num(doc.get("compliance", 0.7), "compliance"),
        seed=seed,
        **sections,
    )
    return validate(cfg)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    if isinstance(obj, Mapping):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    doc = {
        "seed": cfg.seed,
        "compliance": cfg.compliance,
        "segments": [],
        "rainfall": {
            "unit": "mm/h",
            "intervals": [list(iv) for iv in cfg.rainfall.intervals],
            "intensity": {sid: list(v) for sid, v in sorted(cfg.rainfall.intensity.items())},
        },
        "demand": _plain(cfg.demand),
    }
    for s in cfg.segments:
        sd = _plain(s)
        if s.ramp is None:
            del sd["ramp"]
        doc["segments"].append(sd)
    for name in _FLAT_SECTIONS:
        doc[name] = _plain(getattr(cfg, name))
    return doc


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_to_dict(cfg), sort_keys=False)


def loads_scenario(text: str) -> ScenarioConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise SchemaError(f"parse error at {where}: {e.problem}") from None
    if not isinstance(doc, Mapping):
        raise SchemaError("<root>: expected a mapping")
    return scenario_from_dict(doc)


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario document. Raises OSError if unreadable."""
    text = Path(path).read_text(encoding="utf-8")
    return loads_scenario(text)


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(dump_scenario(cfg).encode("utf-8")).hexdigest()


def bundled_scenario_path(name: str = "reference.cfg") -> Path:
    return Path(__file__).parent / "data" / name


def reference_scenario() -> ScenarioConfig:
    return load_scenario(bundled_scenario_path())
