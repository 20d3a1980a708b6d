"""Lane-level METANET prediction with rain-aware desired speed.

State arrays are indexed ``[segment, lane]``. Internally every update is
vectorised over an optional leading batch axis so the optimiser can score
many candidate guidance grids in one pass.

Units: density veh/km, speed km/h, flow veh/h. Segment lengths are held in
km and the time step in h; ``_Grid`` is the only place those conversions
happen.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import MetanetParams, RainSpeedDensityParams, ScenarioConfig
from .units import m_to_km, s_to_h

log = logging.getLogger(__name__)


class MetanetNumericError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class LaneSegmentState:
    k: np.ndarray  # veh/km, shape (M, N)
    v: np.ndarray  # km/h
    lam: int = 0

    @property
    def q(self) -> np.ndarray:
        return flow(self.k, self.v)

    def total_vehicles(self, lengths_km) -> float:
        return float(np.sum(self.k * np.asarray(lengths_km)[:, None]))

    def __eq__(self, other):
        return (isinstance(other, LaneSegmentState) and self.lam == other.lam
                and np.array_equal(self.k, other.k) and np.array_equal(self.v, other.v))


@dataclass(frozen=True, eq=False)
class BoundaryConditions:
    q_in: np.ndarray  # veh/h per lane entering segment 0
    k_down: np.ndarray | None = None  # veh/km per lane beyond the last segment; None = zero gradient
    ramp: np.ndarray | None = None  # veh/h per (segment, lane); negative extracts
    exit_fraction: float = 0.0  # share of rightmost-lane flow leaving at the off-ramp segment


def flow(k, v):
    return k * v


def rain_speed_cap(k, L_v, p: RainSpeedDensityParams, v_cap_max=200.0):
    """Visibility speed-density cap A exp(B k + C L_v), bounded by ``v_cap_max``."""
    expo = p.B * np.asarray(k, dtype=float) + p.C * np.asarray(L_v, dtype=float)
    limit = np.log(v_cap_max / p.A)
    out = np.where(expo > limit, v_cap_max, p.A * np.exp(np.minimum(expo, limit)))
    return out if out.ndim else float(out)


def fd_speed(k, v_f, k_c, exponent):
    """Exponential speed-density curve v_f exp(-(1/a)(k/k_c)^a)."""
    return v_f * np.exp(-(1.0 / exponent) * (k / k_c) ** exponent)


def desired_speed(k, v_f, k_c, v_g, L_v, mp: MetanetParams, rp: RainSpeedDensityParams, raining=None):
    """Desired speed: the smallest of the rain-shaped density curve, the
    inflated guidance speed and (when raining) the visibility cap.

    ``v_g`` may be NaN (or None) where no guidance applies. ``raining`` marks
    cells with d > 0; the visibility term only enters there and only when
    ``mp.rain_cap`` is set.
    """
    out = fd_speed(np.asarray(k, dtype=float), v_f, k_c, mp.h_rain)
    if v_g is not None:
        g = (1.0 + mp.gamma_margin) * np.asarray(v_g, dtype=float)
        out = np.where(np.isnan(g), out, np.fmin(out, g))
    if mp.rain_cap and raining is not None:
        cap = rain_speed_cap(k, L_v, rp, mp.v_cap_max)
        out = np.where(raining, np.minimum(out, cap), out)
    return out if np.ndim(out) else float(out)


def eta_correction(v_g, k, mp: MetanetParams):
    """Guidance-dependent anticipation coefficient (km^2/h, non-positive)."""
    a = mp.a_fd
    k = np.asarray(k, dtype=float)
    out = -np.asarray(v_g, dtype=float) * k ** (a - 1.0) / mp.k_cr_d**a * np.exp(-(k**a) / (a * mp.k_cr_d))
    return out if out.ndim else float(out)


@dataclass
class _Grid:
    """Per-cell constants pulled out of a scenario."""

    v_f: np.ndarray
    k_c: np.ndarray
    x_km: np.ndarray  # (M, 1)
    dt_h: float  # one sub-update
    tau_h: float
    substeps: int
    ramp_cell: tuple[int, int]
    mp: MetanetParams
    rp: RainSpeedDensityParams

    @classmethod
    def from_config(cls, cfg: ScenarioConfig):
        mp = cfg.metanet
        return cls(
            v_f=np.array([s.free_flow_speed for s in cfg.segments], dtype=float),
            k_c=np.array([s.critical_density for s in cfg.segments], dtype=float),
            x_km=np.array([[m_to_km(s.length)] for s in cfg.segments]),
            dt_h=s_to_h(cfg.time.prediction_step) / mp.substeps,
            tau_h=s_to_h(mp.tau),
            substeps=mp.substeps,
            ramp_cell=(cfg.ramp_index, cfg.n_lanes - 1),
            mp=mp,
            rp=cfg.rain_model,
        )


@dataclass
class Flux:
    """Vehicles crossing the boundaries during one prediction step."""

    inflow: float = 0.0
    outflow: float = 0.0
    ramp: float = 0.0  # signed; negative = extracted

    def net(self):
        return self.inflow - self.outflow + self.ramp


class MetanetModel:
    """Prediction model bound to one scenario's geometry and parameters."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.grid = _Grid.from_config(cfg)
        self.lengths_km = self.grid.x_km[:, 0]

    def default_bc(self) -> BoundaryConditions:
        return BoundaryConditions(q_in=np.array(self.cfg.demand.inflow, dtype=float),
                                  exit_fraction=self.cfg.demand.exit_fraction)

    def equilibrium_state(self, q_in=None) -> LaneSegmentState:
        """Uncongested state carrying ``q_in`` per lane (default: demand)."""
        g = self.grid
        q = np.broadcast_to(np.asarray(self.cfg.demand.inflow if q_in is None else q_in, dtype=float),
                            g.v_f.shape)
        k = np.zeros_like(g.v_f)
        for _ in range(200):
            v = fd_speed(k, g.v_f, g.k_c, g.mp.h_rain)
            k = q / np.maximum(v, 1e-9)
        v = fd_speed(k, g.v_f, g.k_c, g.mp.h_rain)
        return LaneSegmentState(k=k, v=v)

    # ------------------------------------------------------------------
    def _env_terms(self, env):
        M = self.grid.v_f.shape[0]
        if env is None:
            return np.full((M, 1), np.inf), np.zeros((M, 1), dtype=bool)
        return (np.asarray(env.visibility, dtype=float)[:, None],
                (np.asarray(env.rain, dtype=float) > 0)[:, None])

    def _sub_update(self, k, v, vg, bc: BoundaryConditions, L_v, raining, check=True):
        """One explicit update on arrays of shape (..., M, N). Returns k', v', flux arrays."""
        g = self.grid
        mp = g.mp
        dt, x = g.dt_h, g.x_km
        q = k * v

        q_up = np.concatenate([np.broadcast_to(bc.q_in, q[..., :1, :].shape), q[..., :-1, :]], axis=-2)
        v_up = np.concatenate([v[..., :1, :], v[..., :-1, :]], axis=-2)
        k_last = k[..., -1:, :] if bc.k_down is None else np.broadcast_to(bc.k_down, k[..., -1:, :].shape)
        k_dn = np.concatenate([k[..., 1:, :], k_last], axis=-2)

        r = np.zeros_like(k) if bc.ramp is None else np.broadcast_to(bc.ramp, k.shape).copy()
        if bc.exit_fraction:
            i, j = g.ramp_cell
            r[..., i, j] -= bc.exit_fraction * q[..., i, j]

        V = desired_speed(k, g.v_f, g.k_c, vg, L_v, mp, g.rp, raining)
        eta = eta_correction(np.where(np.isnan(vg), g.v_f, vg), k, mp)

        relax = dt / g.tau_h * (V - v)
        conv = mp.omega * dt / x * v * (v_up - v)
        antic = eta * dt / (g.tau_h * x) * (k_dn - k) / (k + mp.kappa)

        k_new = k + dt / x * (q_up - q + r)
        v_new = v + relax + conv - antic
        if check:
            self._check_finite(k_new, v_new, relax, conv, antic)
        neg_k, neg_v = k_new < 0, v_new < 0
        if neg_k.any() or neg_v.any():
            log.debug("METANET clamp: %d density, %d speed cells", int(neg_k.sum()), int(neg_v.sum()))
            k_new = np.maximum(k_new, 0.0)
            v_new = np.maximum(v_new, 0.0)
        inflow = dt * np.sum(np.broadcast_to(bc.q_in, q[..., 0, :].shape), axis=-1)
        outflow = dt * np.sum(q[..., -1, :], axis=-1)
        ramp = dt * np.sum(r, axis=(-2, -1))
        return k_new, v_new, (inflow, outflow, ramp)

    @staticmethod
    def _check_finite(k_new, v_new, relax, conv, antic):
        for name, arr in (("density", k_new), ("relaxation", relax), ("convection", conv),
                          ("anticipation", antic), ("speed", v_new)):
            bad = ~np.isfinite(arr)
            if bad.any():
                idx = tuple(int(c[0]) for c in np.nonzero(bad))
                raise MetanetNumericError(f"non-finite {name} term at cell {idx[-2:]}")

    def step(self, state: LaneSegmentState, guidance=None, bc: BoundaryConditions | None = None,
             env=None, return_flux=False):
        """Advance one prediction step. ``guidance`` is an (M, N) array, NaN = none."""
        bc = self.default_bc() if bc is None else bc
        vg = np.full_like(state.k, np.nan) if guidance is None else np.asarray(guidance, dtype=float)
        L_v, raining = self._env_terms(env)
        k, v = state.k, state.v
        flux = Flux()
        for _ in range(self.grid.substeps):
            with np.errstate(invalid="ignore", over="ignore"):  # reported by _check_finite
                k, v, (fin, fout, fr) = self._sub_update(k, v, vg, bc, L_v, raining)
            flux.inflow += float(fin)
            flux.outflow += float(fout)
            flux.ramp += float(fr)
        new = LaneSegmentState(k=k, v=v, lam=state.lam + 1)
        return (new, flux) if return_flux else new

    def predict_horizon(self, state: LaneSegmentState, guidance, bcs, env, n_steps: int):
        """Apply ``step`` ``n_steps`` times under fixed guidance; returns the trajectory."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        seq = _bc_sequence(bcs, n_steps, self)
        traj = []
        s = state
        for n in range(n_steps):
            try:
                s = self.step(s, guidance, seq[n], env)
            except MetanetNumericError as e:
                raise MetanetNumericError(f"prediction step {n}: {e}") from None
            traj.append(s)
        return traj

    def predict_batch(self, state: LaneSegmentState, guidance_batch, bc, env, n_steps: int):
        """Score-ready trajectories for a batch of guidance grids.

        ``guidance_batch`` has shape (B, M, N). Returns ``(k, v)`` arrays of
        shape (B, n_steps, M, N). Non-finite values are not checked here.
        """
        vg = np.asarray(guidance_batch, dtype=float)
        B = vg.shape[0]
        L_v, raining = self._env_terms(env)
        k = np.broadcast_to(state.k, vg.shape).copy()
        v = np.broadcast_to(state.v, vg.shape).copy()
        ks = np.empty((B, n_steps) + state.k.shape)
        vs = np.empty_like(ks)
        bc = self.default_bc() if bc is None else bc
        with np.errstate(all="ignore"):
            for n in range(n_steps):
                for _ in range(self.grid.substeps):
                    k, v, _ = self._sub_update(k, v, vg, bc, L_v, raining, check=False)
                ks[:, n] = k
                vs[:, n] = v
        return ks, vs


def _bc_sequence(bcs, n, model) -> Sequence[BoundaryConditions]:
    if bcs is None:
        return [model.default_bc()] * n
    if isinstance(bcs, BoundaryConditions):
        return [bcs] * n
    bcs = list(bcs)
    if len(bcs) < n:
        raise ValueError(f"need {n} boundary conditions, got {len(bcs)}")
    return bcs


def write_trajectory_csv(path, trajectory):
    """Dump a trajectory as rows (lam, i, j, k, v, q)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lam", "i", "j", "k", "v", "q"])
        for s in trajectory:
            q = s.q
            for i in range(s.k.shape[0]):
                for j in range(s.k.shape[1]):
                    w.writerow([s.lam, i, j, f"{s.k[i, j]:.6f}", f"{s.v[i, j]:.6f}", f"{q[i, j]:.6f}"])
