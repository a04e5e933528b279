"""Poisson-Boltzmann steady state and the 1D Poisson-inverse conventions.

The whole-line Poisson inverse is realised through the representation
phi(x) = (M/2) x - iint rho + phi0 with the additive constant fixed by
max phi = 0.  Discretely this is a staggered construction: cumulative
midpoint masses live on cell interfaces, the electric flux F = M/2 - m is
exact there, and nodal potentials are recovered by summing fluxes.  Second
differences of the resulting potential invert the input density exactly, so
the Poisson-Boltzmann residual is limited by the fixed-point gap, not by a
stencil truncation term.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .potential import PotentialSpec, eval_potential_array

__all__ = [
    "Grid1D",
    "MacroField",
    "PoissonSolution",
    "SteadyState",
    "poisson_solve_1d",
    "solve_poisson_boltzmann",
    "steady_residual",
    "save_steady_state",
    "load_steady_state",
]


class MassMismatchError(ValueError):
    """Quadrature of the density disagrees with the declared total mass."""


class IterationDivergedError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class Grid1D:
    """Uniform symmetric grid with cell-centered nodes (no node at x = 0)."""

    n: int
    x_max: float
    nodes: np.ndarray = field(repr=False)
    dx: float

    @staticmethod
    def make(n: int, x_max: float) -> "Grid1D":
        if n < 16:
            raise ValueError("grid needs at least 16 points")
        if n % 2:
            raise ValueError("n must be even so no node sits at the origin")
        if x_max <= 0:
            raise ValueError("x_max must be positive")
        dx = 2.0 * x_max / n
        nodes = -x_max + (np.arange(n) + 0.5) * dx
        return Grid1D(n=n, x_max=x_max, nodes=nodes, dx=dx)

    @property
    def faces(self) -> np.ndarray:
        """Interior cell interfaces x_{i+1/2}, i = 0..n-2."""
        return self.nodes[:-1] + 0.5 * self.dx

    def quad(self, values: np.ndarray) -> float:
        """Midpoint quadrature over the grid."""
        return float(np.sum(values) * self.dx)


@dataclass
class MacroField:
    """Scalar field on a Grid1D with a semantic role tag."""

    grid: Grid1D
    values: np.ndarray
    role: str = "generic"  # density | potential | flux | cumulative | generic

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError("field shape does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")

    def weighted_average_is_zero(self, weight: np.ndarray, tol: float = 1e-10) -> bool:
        total = self.grid.quad(self.values * weight)
        scale = self.grid.quad(np.abs(self.values) * weight) + 1e-300
        return abs(total) <= tol * max(1.0, scale)


@dataclass
class PoissonSolution:
    """Nodal potential plus the exact staggered fluxes it was built from."""

    phi: MacroField
    flux: np.ndarray  # phi' at interior faces (length n-1)
    phi_prime: np.ndarray  # nodal phi' (face average, Rep1d boundary slopes)


def poisson_solve_full(rho: np.ndarray, total_mass: float, grid: Grid1D) -> PoissonSolution:
    """Poisson inverse of a nodal density via the whole-line representation.

    The flux at the interface x_{i+1/2} is F = M/2 - m(x_{i+1/2}); nodal
    potentials satisfy phi_{i+1} = phi_i + dx * F_{i+1/2} and are shifted so
    max phi = 0.  By construction -(phi_{i+1} - 2 phi_i + phi_{i-1})/dx^2
    equals rho_i exactly at interior nodes.
    """
    rho = np.asarray(rho, dtype=float)
    m_faces = np.cumsum(rho * grid.dx)[:-1]
    flux = 0.5 * total_mass - m_faces
    phi = np.empty(grid.n)
    phi[0] = 0.0
    phi[1:] = np.cumsum(flux * grid.dx)
    phi -= phi.max()
    # nodal slope: average of adjacent fluxes, boundary fluxes +-M/2 from Rep1d
    f_ext = np.concatenate(([0.5 * total_mass], flux, [-0.5 * total_mass]))
    phi_prime = 0.5 * (f_ext[:-1] + f_ext[1:])
    return PoissonSolution(
        phi=MacroField(grid, phi, role="potential"), flux=flux, phi_prime=phi_prime
    )


def poisson_solve_1d(rho: MacroField, total_mass: float, grid: Grid1D) -> MacroField:
    """Potential of a nodal density, max-zero convention.

    Raises MassMismatchError when the quadrature of rho differs from
    total_mass by more than 1e-8 (absolute, relative to the density scale).
    """
    if rho.grid is not grid and (rho.grid.n != grid.n or rho.grid.x_max != grid.x_max):
        raise ValueError("density grid does not match")
    q = grid.quad(rho.values)
    scale = max(1.0, grid.quad(np.abs(rho.values)))
    if abs(q - total_mass) > 1e-8 * scale:
        raise MassMismatchError(f"density mass {q} != declared {total_mass}")
    return poisson_solve_full(rho.values, total_mass, grid).phi


@dataclass
class SteadyState:
    """Poisson-Boltzmann fixed point (rho_star, phi_star, W_star) on a grid."""

    grid: Grid1D
    rho_star: np.ndarray
    phi_star: np.ndarray
    w_star: np.ndarray
    dw_star: np.ndarray
    mass: float
    residual: float
    spec: PotentialSpec | None = None
    iterations: int = 0

    def __post_init__(self):
        if np.any(self.rho_star <= 0):
            raise ValueError("rho_star must be strictly positive")
        q = self.grid.quad(self.rho_star)
        if abs(q - self.mass) > 1e-10 * self.mass:
            raise ValueError(f"rho_star mass {q} deviates from {self.mass}")
        if np.max(np.abs(self.rho_star - np.exp(-self.w_star))) > 1e-12 * np.max(self.rho_star):
            raise ValueError("rho_star and exp(-W_star) disagree")

    @property
    def rho_faces(self) -> np.ndarray:
        """Arithmetic interface averages of rho_star (conservative stencils)."""
        return 0.5 * (self.rho_star[:-1] + self.rho_star[1:])

    def boundary_leakage(self) -> float:
        """rho_star-mass in the outer 10% of the grid, relative to M."""
        x = np.abs(self.grid.nodes)
        outer = x >= 0.9 * self.grid.x_max
        return self.grid.quad(np.where(outer, self.rho_star, 0.0)) / self.mass


def _second_difference(phi: np.ndarray, dx: float) -> np.ndarray:
    return (phi[2:] - 2.0 * phi[1:-1] + phi[:-2]) / dx**2


def steady_residual(state: SteadyState) -> float:
    """sup |-D2 phi_star - rho_star| at interior nodes, recomputed from scratch."""
    defect = -_second_difference(state.phi_star, state.grid.dx) - state.rho_star[1:-1]
    return float(np.max(np.abs(defect)))


def solve_poisson_boltzmann(
    spec: PotentialSpec,
    mass: float,
    grid: Grid1D,
    tol: float = 1e-10,
    max_iter: int = 400,
    omega: float = 0.5,
    phi0: np.ndarray | None = None,
) -> SteadyState:
    """Solve -phi'' = M e^(-V-phi) / int e^(-V-phi) by damped fixed point.

    Iterates phi <- (1-omega) phi + omega P[rho(phi)] with Aitken
    extrapolation of the damping factor after iteration 10, then applies one
    undamped refresh so the final potential is the exact discrete Poisson
    inverse of the last density.  The additive normalisation shift making
    int e^(-V-phi_star) = M is applied once at the end; it leaves rho_star
    unchanged and turns the equation into -phi'' = e^(-V-phi).
    """
    if mass <= 0:
        raise ValueError("mass must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    v, dv, _ = eval_potential_array(spec, grid.nodes)

    def density(phi):
        w = v + phi
        w = w - w.min()
        raw = np.exp(-w)
        z = grid.quad(raw)
        return mass * raw / z

    phi = np.zeros(grid.n) if phi0 is None else np.array(phi0, dtype=float)
    history = []
    prev_update = None
    w_damp = omega
    converged = False
    for it in range(max_iter):
        target = poisson_solve_full(density(phi), mass, grid).phi.values
        update = target - phi
        err = float(np.max(np.abs(update)))
        history.append(err)
        if err < 0.25 * tol:
            converged = True
            break
        if it >= 10 and prev_update is not None:
            # Aitken dynamic relaxation: w <- -w <u_prev, u - u_prev> / |u - u_prev|^2
            diff = update - prev_update
            den = float(diff @ diff)
            if den > 0:
                w_damp = float(np.clip(-w_damp * (prev_update @ diff) / den, 0.1, 4.0))
        phi = phi + w_damp * update
        prev_update = update
    if not converged:
        raise IterationDivergedError(
            f"Poisson-Boltzmann iteration did not reach tol={tol} in {max_iter} steps "
            f"(last update {history[-1]:.3e})",
            history,
        )

    rho = density(phi)
    phi = poisson_solve_full(rho, mass, grid).phi.values  # exact inverse of rho
    # mass normalisation: shift so that rho_star = exp(-V - phi - c) integrates to M
    w_raw = v + phi
    c = np.log(grid.quad(np.exp(-(w_raw - w_raw.min()))) / mass) - w_raw.min()
    w_star = w_raw + c
    rho_star = np.exp(-w_star)
    # remove the (rounding-level) quadrature drift so the mass invariant is exact
    rho_star *= mass / grid.quad(rho_star)
    w_star = -np.log(rho_star)
    phi_star = w_star - v
    dphi = poisson_solve_full(rho_star, mass, grid).phi_prime
    state = SteadyState(
        grid=grid,
        rho_star=rho_star,
        phi_star=phi_star,
        w_star=w_star,
        dw_star=dv + dphi,
        mass=mass,
        residual=0.0,
        spec=spec,
        iterations=len(history),
    )
    state.residual = steady_residual(state)
    return state


def save_steady_state(state: SteadyState, path: str) -> None:
    """Write steady_state.csv plus a JSON sidecar with scalar metadata."""
    header = "x,rho_star,phi_star,W_star,dW_star"
    data = np.column_stack(
        [state.grid.nodes, state.rho_star, state.phi_star, state.w_star, state.dw_star]
    )
    np.savetxt(path, data, delimiter=",", header=header, comments="")
    meta = {
        "mass": state.mass,
        "residual": state.residual,
        "alpha": state.spec.alpha if state.spec is not None else None,
        "X_max": state.grid.x_max,
        "N": state.grid.n,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar_path(path: str) -> str:
    base, _ = os.path.splitext(path)
    return base + ".json"


def load_steady_state(path: str, spec: PotentialSpec | None = None) -> SteadyState:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    with open(_sidecar_path(path)) as fh:
        meta = json.load(fh)
    grid = Grid1D.make(int(meta["N"]), float(meta["X_max"]))
    if not np.allclose(grid.nodes, data[:, 0], atol=1e-12):
        raise ValueError("grid in file does not match sidecar metadata")
    return SteadyState(
        grid=grid,
        rho_star=data[:, 1],
        phi_star=data[:, 2],
        w_star=data[:, 3],
        dw_star=data[:, 4],
        mass=float(meta["mass"]),
        residual=float(meta["residual"]),
        spec=spec,
    )
