"""Time integration of the linear, parabolic-scaled, and nonlinear systems.

The scaled equation dh/dt = -(1/eps) T h + (1/eps^2) L h is advanced by
Strang splitting: exact diagonal exponentials for the collision halves
(stiffness at small eps costs nothing) and classical RK4 for the transport
part.  Since the discrete T is exactly antisymmetric in the hypocoercive
metric, the RK4 stability factor on imaginary spectra satisfies
|R(iy)|^2 = 1 - y^6/72 + y^8/576 <= 1 for y <= 2 sqrt(2), so each full step
is norm-nonincreasing whenever the CFL bound holds.  The nonlinear term is
a frozen-field Hermite ladder wrapped around the linear step in a second
Strang layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discretization import (
    HermiteBasis,
    OperatorSet,
    PhaseState,
    nodal_coefficients,
    nodes_to_faces,
    random_state,
)
from .macro_ops import MacroOperators, apply_A, get_macro_operators
from .steady_state import SteadyState

__all__ = [
    "TimeSeriesRecord",
    "SimulationSetup",
    "SimulationBlowUp",
    "CFLViolation",
    "PositivityError",
    "cfl_limit",
    "step_linear",
    "step_nonlinear",
    "evaluate_H_delta",
    "nonlinear_free_energy",
    "build_initial_state",
    "simulate",
]


class CFLViolation(ValueError):
    pass


class PositivityError(RuntimeError):
    def __init__(self, msg, location=None):
        super().__init__(msg)
        self.location = location


class SimulationBlowUp(RuntimeError):
    def __init__(self, msg, last_good_time, records):
        super().__init__(msg)
        self.last_good_time = last_good_time
        self.records = records


@dataclass
class TimeSeriesRecord:
    t: float
    norm_sq: float
    H_delta: float
    psi_prime_sup: float
    mass_defect: float
    D_delta: float = math.nan
    free_energy: float = math.nan
    fisher: float = math.nan

    def as_csv_row(self) -> list:
        return [
            self.t,
            self.norm_sq,
            self.H_delta,
            self.D_delta,
            self.free_energy,
            self.fisher,
            self.psi_prime_sup,
            self.mass_defect,
        ]


CSV_HEADER = "t,norm_sq,H_delta,D_delta,free_energy,fisher,psi_prime_sup,mass_defect"


def cfl_limit(ops: OperatorSet, eps: float, cfl: float = 0.4) -> float:
    """dt <= cfl * dx * eps / v_eff with v_eff = sqrt(2K)."""
    return cfl * ops.grid.dx * eps / math.sqrt(2.0 * ops.basis.k_modes)


def _collision_half(h: PhaseState, dt: float, eps: float) -> None:
    """Exact exponential of the collision half-step, in place."""
    tau = 0.5 * dt / eps**2
    h.even *= np.exp(-2.0 * np.arange(h.basis.n_even) * tau)[:, None]
    h.odd *= np.exp(-(2.0 * np.arange(h.basis.n_odd) + 1.0) * tau)[:, None]


def _transport_rk4(ops: OperatorSet, h: PhaseState, dt: float, eps: float) -> PhaseState:
    """One RK4 step of dh/dt = -(1/eps) T h; the field refreshes every stage."""
    scale = -dt / eps

    def t_scaled(state):
        out = ops.apply_T(state)
        out.even *= scale
        out.odd *= scale
        return out

    k1 = t_scaled(h)
    s = h.copy()
    s.even += 0.5 * k1.even
    s.odd += 0.5 * k1.odd
    k2 = t_scaled(s)
    s = h.copy()
    s.even += 0.5 * k2.even
    s.odd += 0.5 * k2.odd
    k3 = t_scaled(s)
    s = h.copy()
    s.even += k3.even
    s.odd += k3.odd
    k4 = t_scaled(s)
    out = h.copy()
    out.even += (k1.even + 2.0 * k2.even + 2.0 * k3.even + k4.even) / 6.0
    out.odd += (k1.odd + 2.0 * k2.odd + 2.0 * k3.odd + k4.odd) / 6.0
    return out


def step_linear(
    h: PhaseState, dt: float, eps: float | None = None, ops: OperatorSet | None = None
) -> PhaseState:
    """One Strang step (collision half, transport, collision half).

    Raises CFLViolation before touching the state when dt exceeds the
    advection bound; raises SimulationBlowUp on non-finite output.
    """
    eps = eps if eps is not None else h.eps
    ops = ops or OperatorSet(h.steady, h.basis)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if dt > cfl_limit(ops, eps) * (1.0 + 1e-12):
        raise CFLViolation(f"dt={dt} exceeds CFL limit {cfl_limit(ops, eps):.3e} at eps={eps}")
    out = h.copy()
    _collision_half(out, dt, eps)
    out = _transport_rk4(ops, out, dt, eps)
    _collision_half(out, dt, eps)
    if not out.is_finite():
        raise SimulationBlowUp("non-finite state after linear step", math.nan, [])
    return out


def _psi_prime_nodes(ops: OperatorSet, c0: np.ndarray) -> np.ndarray:
    """Nodal psi_h': face fluxes averaged, zero boundary fluxes."""
    flux = ops.poisson_flux(c0)
    ext = np.concatenate(([0.0], flux, [0.0]))
    return 0.5 * (ext[:-1] + ext[1:])


def _apply_Q(ops: OperatorSet, h: PhaseState, psi_f: np.ndarray, psi_n: np.ndarray) -> PhaseState:
    """Q[h] with frozen field: mode k gains -psi' sqrt(k) c_{k-1}.

    The ladder mixes the two sublattices, so the donor mode is interpolated
    onto the receiver lattice (second order, zero boundary fluxes).
    """
    out = PhaseState.zeros(h.steady, h.basis, h.eps)
    sq = ops.basis.sqrt_k
    # odd receivers k = 2m+1 take from even modes 2m (nodes -> faces)
    n_odd = h.basis.n_odd
    donors = 0.5 * (h.even[:n_odd, :-1] + h.even[:n_odd, 1:])
    out.odd = -psi_f[None, :] * sq[1 : 2 * n_odd : 2][:, None] * donors
    # even receivers k = 2m+2 take from odd modes 2m+1 (faces -> nodes)
    for m in range(h.basis.n_odd):
        k = 2 * m + 2
        if k >= h.basis.k_modes:
            break
        ext = np.concatenate(([0.0], h.odd[m], [0.0]))
        donor = 0.5 * (ext[:-1] + ext[1:])
        out.even[m + 1] = -psi_n * sq[k] * donor
    return out


def _q_half_step(ops: OperatorSet, h: PhaseState, tau: float) -> PhaseState:
    """RK4 on the frozen-field ladder over tau (field from the incoming state)."""
    psi_f = ops.poisson_flux(h.c0)
    psi_n = _psi_prime_nodes(ops, h.c0)

    def q(state):
        out = _apply_Q(ops, state, psi_f, psi_n)
        out.even *= tau
        out.odd *= tau
        return out

    k1 = q(h)
    s = h.copy()
    s.even += 0.5 * k1.even
    s.odd += 0.5 * k1.odd
    k2 = q(s)
    s = h.copy()
    s.even += 0.5 * k2.even
    s.odd += 0.5 * k2.odd
    k3 = q(s)
    s = h.copy()
    s.even += k3.even
    s.odd += k3.odd
    k4 = q(s)
    out = h.copy()
    out.even += (k1.even + 2.0 * k2.even + 2.0 * k3.even + k4.even) / 6.0
    out.odd += (k1.odd + 2.0 * k2.odd + 2.0 * k3.odd + k4.odd) / 6.0
    return out


def step_nonlinear(h: PhaseState, dt: float, ops: OperatorSet | None = None) -> PhaseState:
    """Strang wrap of the frozen-field nonlinear ladder around the linear step."""
    ops = ops or OperatorSet(h.steady, h.basis)
    vals = h.values_on_lattice()
    low = float(np.min(1.0 + vals))
    if low < -1e-8:
        q, i = np.unravel_index(int(np.argmin(vals)), vals.shape)
        raise PositivityError(
            f"1 + h = {low:.3e} < 0 at x={h.steady.grid.nodes[i]:.3f}, v={h.basis.quad_nodes[q]:.3f}",
            location=(i, q),
        )
    out = _q_half_step(ops, h, 0.5 * dt)
    out = step_linear(out, dt, eps=1.0, ops=ops)
    return _q_half_step(ops, out, 0.5 * dt)


def evaluate_H_delta(h: PhaseState, delta: float, macro: MacroOperators | None = None) -> float:
    """Twisted entropy H_delta[h] = |h|^2 / 2 + delta <A h, h>."""
    if not 0.0 <= delta < 2.0:
        raise ValueError("delta must lie in [0, 2)")
    ops = OperatorSet(h.steady, h.basis)
    val = 0.5 * ops.norm_sq(h)
    if delta > 0.0:
        macro = macro or get_macro_operators(h.steady)
        u_g = macro.solve_a(h.c1)
        val += delta * float(u_g @ (macro.g0 @ h.c0))
    return val


def nonlinear_free_energy(h: PhaseState) -> tuple[float, float, float]:
    """(free energy, Fisher information, |psi_h'|_inf) of f = (1+h) f_star.

    free energy = iint [(1+h) log(1+h) - h] dmu + (1/2) int |psi_h'|^2 dx,
    with the -h term free since h has zero average; the entropy integrand is
    then nonnegative.  Fisher = iint |d_v h|^2 / (1+h) dmu.
    """
    ops = OperatorSet(h.steady, h.basis)
    grid = h.steady.grid
    vals = h.values_on_lattice()
    one_plus = 1.0 + vals
    if np.min(one_plus) <= 0.0:
        raise ValueError("free energy requires 1 + h > 0 on the quadrature lattice")
    wq = h.basis.quad_weights[:, None]
    rho = h.steady.rho_star[None, :]
    entropy = grid.dx * float(np.sum(wq * rho * (one_plus * np.log(one_plus) - vals)))
    flux = ops.poisson_flux(h.c0)
    field_energy = 0.5 * grid.dx * float(flux @ flux)
    # d_v h on the lattice via the shifted coefficients sqrt(k+1) c_{k+1}
    nodal = nodal_coefficients(h)
    dv_coeffs = nodal[1:] * h.basis.sqrt_k[1 : h.basis.k_modes, None]
    dv_vals = h.basis.eval_matrix[:, : h.basis.k_modes - 1] @ dv_coeffs
    fisher = grid.dx * float(np.sum(wq * rho * dv_vals**2 / one_plus))
    psi_sup = float(np.max(np.abs(flux))) if flux.size else 0.0
    return entropy + field_energy, fisher, psi_sup


def q_pairing(ops: OperatorSet, h: PhaseState) -> float:
    """<Q[h], h> in the hypocoercive metric (the field part vanishes)."""
    psi_f = ops.poisson_flux(h.c0)
    psi_n = _psi_prime_nodes(ops, h.c0)
    qh = _apply_Q(ops, h, psi_f, psi_n)
    return ops.dx * float(np.sum(qh.even * h.even * ops.rho_n)) + ops.dx * float(
        np.sum(qh.odd * h.odd * ops.rho_f)
    )


def build_initial_state(
    steady: SteadyState,
    basis: HermiteBasis,
    profile: dict,
    amplitude: float,
    seed: int = 0,
    eps: float = 1.0,
    nonlinear: bool = False,
) -> tuple[PhaseState, int]:
    """Initial perturbation from a config profile, zero-averaged and, for
    nonlinear runs, clipped to 1 + h >= 1e-12 with the clip count returned."""
    grid = steady.grid
    kind = profile.get("profile", "gaussian_bump")
    state = PhaseState.zeros(steady, basis, eps)
    if kind == "gaussian_bump":
        x0 = float(profile.get("x0", 0.0))
        sigma = float(profile.get("sigma", 1.0))
        k = int(profile.get("mode", 0))
        x = grid.nodes if k % 2 == 0 else grid.faces
        state.set_mode(k, np.exp(-0.5 * ((x - x0) / sigma) ** 2))
    elif kind == "mode_seed":
        k = int(profile.get("k", 0))
        wavenumber = float(profile.get("wavenumber", 1.0))
        x = grid.nodes if k % 2 == 0 else grid.faces
        state.set_mode(k, np.sin(np.pi * wavenumber * x / grid.x_max))
    elif kind == "random":
        state = random_state(steady, basis, np.random.default_rng(seed), eps=eps)
    else:
        raise ValueError(f"unknown initial profile {kind!r}")
    state.even *= amplitude
    state.odd *= amplitude
    state.project_zero_average()
    clipped = 0
    if nonlinear:
        vals = state.values_on_lattice()
        bad = 1.0 + vals < 1e-12
        clipped = int(np.sum(bad))
        if clipped:
            vals = np.where(bad, 1e-12 - 1.0, vals)
            # back to coefficients: quadrature transform, then faces for odd modes
            nodal = (state.basis.eval_matrix * state.basis.quad_weights[:, None]).T @ vals
            state.even[:] = nodal[0::2]
            for m in range(basis.n_odd):
                state.odd[m] = nodes_to_faces(nodal[2 * m + 1])
            state.project_zero_average()
    return state, clipped


@dataclass
class SimulationSetup:
    """Everything one run needs; built by the harness from an ExperimentConfig."""

    steady: SteadyState
    basis: HermiteBasis
    mode: str  # linear | parabolic | nonlinear
    eps: float
    dt: float
    t_end: float
    record_every: int
    delta: float
    initial: dict = field(default_factory=dict)
    amplitude: float = 1e-2
    seed: int = 0


def simulate(setup: SimulationSetup) -> list[TimeSeriesRecord]:
    """Run one configured simulation and return the monitor series.

    Stepper failures propagate with the partial series attached to the
    exception.  D_delta is filled afterwards by finite differences of
    H_delta.
    """
    if setup.mode not in ("linear", "parabolic", "nonlinear"):
        raise ValueError(f"unknown mode {setup.mode!r}")
    eps = 1.0 if setup.mode in ("linear", "nonlinear") else setup.eps
    ops = OperatorSet(setup.steady, setup.basis)
    macro = get_macro_operators(setup.steady)
    h, _ = build_initial_state(
        setup.steady,
        setup.basis,
        setup.initial,
        setup.amplitude,
        seed=setup.seed,
        eps=eps,
        nonlinear=setup.mode == "nonlinear",
    )
    n_steps = int(round(setup.t_end / setup.dt))
    records: list[TimeSeriesRecord] = []

    def record(t, state):
        rec = TimeSeriesRecord(
            t=t,
            norm_sq=ops.norm_sq(state),
            H_delta=evaluate_H_delta(state, setup.delta, macro),
            psi_prime_sup=float(np.max(np.abs(ops.poisson_flux(state.c0)))),
            mass_defect=abs(state.average_defect()),
        )
        if setup.mode == "nonlinear":
            rec.free_energy, rec.fisher, _ = nonlinear_free_energy(state)
        records.append(rec)

    record(0.0, h)
    try:
        for k in range(n_steps):
            if setup.mode == "nonlinear":
                h = step_nonlinear(h, setup.dt, ops)
            else:
                h = step_linear(h, setup.dt, eps=eps, ops=ops)
            if (k + 1) % setup.record_every == 0 or k == n_steps - 1:
                record((k + 1) * setup.dt, h)
    except (SimulationBlowUp, PositivityError) as exc:
        fill_entropy_production(records)
        raise SimulationBlowUp(str(exc), records[-1].t if records else math.nan, records) from exc
    fill_entropy_production(records)
    return records


def fill_entropy_production(records: list[TimeSeriesRecord]) -> None:
    """D_delta = -dH_delta/dt by forward differences of the recorded series."""
    for a, b in zip(records, records[1:]):
        if b.t > a.t:
            a.D_delta = -(b.H_delta - a.H_delta) / (b.t - a.t)
