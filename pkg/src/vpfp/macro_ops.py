"""Macroscopic elliptic machinery: the auxiliary operator and the diffusion limit.

The map u -> (TPi)*(TPi) u is realised in Galerkin form: with B the discrete
gradient-plus-field map u -> (u + psi_u)' on the faces and G0 the mode-0
metric (rho_star mass plus Poisson energy), the operator is G0^{-1} B^T R_f B.
The auxiliary operator A then amounts to one symmetric positive definite
solve (G0 + B^T R_f B) u_g = B^T R_f c_1, so the resolvent bounds
|A h| <= |.|/2 and |T A h| <= |.| hold on the discrete space by the same
algebra as in the continuum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .discretization import OperatorSet, PhaseState
from .steady_state import Grid1D, MacroField, SteadyState, poisson_solve_full

__all__ = [
    "EllipticSolveResult",
    "MacroOperators",
    "get_macro_operators",
    "apply_A",
    "apply_TPi_star_TPi",
    "solve_drift_diffusion",
]


class NotZeroAverageError(ValueError):
    pass


@dataclass
class EllipticSolveResult:
    """Macroscopic profile of A h together with its field and free energy parts."""

    u_g: MacroField
    psi_g: MacroField
    w_g: MacroField
    iterations: int
    defect: float


class MacroOperators:
    """Dense mode-0 operators tied to one steady state.

    B: (n-1) x n map u -> w_u' = u' + psi_u' on the faces.
    G0: mode-0 metric, <u, v>_G0 = int u v rho dx + int psi_u' psi_v' dx.
    """

    def __init__(self, steady: SteadyState):
        self.steady = steady
        grid = steady.grid
        n, dx = grid.n, grid.dx
        rho_n, rho_f = steady.rho_star, steady.rho_faces
        self.r_n = dx * rho_n
        self.r_f = dx * rho_f

        d_plus = (np.eye(n, k=1)[: n - 1] - np.eye(n)[: n - 1]) / dx
        # flux map: S u = -cumulative mass of u * rho up to each interface
        cum = np.tril(np.ones((n, n))) * (dx * rho_n)[None, :]
        self.flux_map = -cum[:-1]
        self.b_mat = d_plus + self.flux_map
        self.g0 = np.diag(self.r_n) + dx * (self.flux_map.T @ self.flux_map)
        self._g0_cho = cho_factor(self.g0)
        self.stiffness = self.b_mat.T @ (self.r_f[:, None] * self.b_mat)
        self._ma_cho = cho_factor(self.g0 + self.stiffness)

    # -- metric helpers --

    def macro_dot(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ (self.g0 @ v))

    def macro_norm(self, u: np.ndarray) -> float:
        return float(np.sqrt(max(0.0, self.macro_dot(u, u))))

    def check_zero_average(self, u: np.ndarray, what: str = "input") -> None:
        total = float(self.r_n @ u)
        scale = float(self.r_n @ np.abs(u)) + 1e-300
        if abs(total) > 1e-9 * max(1.0, scale):
            raise NotZeroAverageError(f"{what} must have zero rho_star-average (defect {total:.2e})")

    def solve_a(self, c1_faces: np.ndarray) -> np.ndarray:
        """u_g with (Id + (TPi)*(TPi)) u_g = (TPi)* of a state with flux c1."""
        rhs = self.b_mat.T @ (self.r_f * c1_faces)
        return cho_solve(self._ma_cho, rhs)

    def apply_diffusion(self, u: np.ndarray) -> np.ndarray:
        """(TPi)*(TPi) u = G0^{-1} B^T R_f B u."""
        return cho_solve(self._g0_cho, self.stiffness @ u)


def get_macro_operators(steady: SteadyState) -> MacroOperators:
    """Macro operators for a steady state, cached on the state object."""
    ops = getattr(steady, "_macro_ops", None)
    if ops is None:
        ops = MacroOperators(steady)
        steady._macro_ops = ops
    return ops


def _elliptic_result(macro: MacroOperators, u_g: np.ndarray, rhs: np.ndarray) -> EllipticSolveResult:
    steady = macro.steady
    grid = steady.grid
    sol = poisson_solve_full(u_g * steady.rho_star, 0.0, grid)
    defect_vec = macro.g0 @ u_g + macro.stiffness @ u_g - rhs
    scale = float(np.linalg.norm(rhs)) + 1e-300
    return EllipticSolveResult(
        u_g=MacroField(grid, u_g, role="density"),
        psi_g=sol.phi,
        w_g=MacroField(grid, u_g + sol.phi.values, role="generic"),
        iterations=1,
        defect=float(np.linalg.norm(defect_vec)) / scale,
    )


def apply_A(h: PhaseState, macro: MacroOperators | None = None) -> EllipticSolveResult:
    """Auxiliary operator A h = (Id + (TPi)*(TPi))^{-1} (TPi)* h.

    Only the flux component c_1 of h enters; the result is the macroscopic
    profile u_g (mode-0 placement) with zero rho_star-average.
    """
    macro = macro or get_macro_operators(h.steady)
    scale = float(np.sqrt(np.sum(h.c1**2))) + 1e-300
    defect = abs(h.average_defect())
    if defect > 1e-9 * max(1.0, scale):
        raise NotZeroAverageError(f"apply_A requires a zero-average state (defect {defect:.2e})")
    rhs = macro.b_mat.T @ (macro.r_f * h.c1)
    u_g = cho_solve(macro._ma_cho, rhs)
    return _elliptic_result(macro, u_g, rhs)


def solve_elliptic(macro: MacroOperators, u_h: np.ndarray) -> EllipticSolveResult:
    """(Id + (TPi)*(TPi)) u_g = u_h for a macroscopic right-hand side."""
    macro.check_zero_average(u_h, "elliptic source")
    rhs = macro.g0 @ u_h
    u_g = cho_solve(macro._ma_cho, rhs)
    return _elliptic_result(macro, u_g, rhs)


def apply_TPi_star_TPi(u: MacroField, state: SteadyState) -> MacroField:
    """Macroscopic diffusion operator in divergence form, zero-average preserving."""
    macro = get_macro_operators(state)
    macro.check_zero_average(u.values)
    return MacroField(state.grid, macro.apply_diffusion(u.values), role="density")


def solve_drift_diffusion(
    u0: MacroField,
    state: SteadyState,
    t_end: float,
    dt: float,
    method: str = "implicit",
    record_every: int = 1,
) -> list[MacroField]:
    """Advance du/dt = -(TPi)*(TPi) u to t_end; implicit Euler by default.

    The explicit option demands dt < dx^2/2 and exists for cross-checks only.
    """
    macro = get_macro_operators(state)
    macro.check_zero_average(u0.values)
    if dt <= 0 or t_end <= 0:
        raise ValueError("dt and t_end must be positive")
    n_steps = int(round(t_end / dt))
    if method == "implicit":
        step_cho = cho_factor(macro.g0 + dt * macro.stiffness)

        def step(u):
            return cho_solve(step_cho, macro.g0 @ u)

    elif method == "explicit":
        if dt >= 0.5 * state.grid.dx**2:
            raise ValueError(f"explicit step dt={dt} violates the dx^2/2 stability bound")

        def step(u):
            return u - dt * macro.apply_diffusion(u)

    else:
        raise ValueError(f"unknown method {method!r}")

    u = u0.values.copy()
    out = [MacroField(state.grid, u.copy(), role="density")]
    for k in range(n_steps):
        u = step(u)
        if (k + 1) % record_every == 0 or k == n_steps - 1:
            out.append(MacroField(state.grid, u.copy(), role="density"))
    return out
