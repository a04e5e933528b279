"""Phase-space discretization: Hermite modes in velocity, staggered 1D grid.

Velocity is expanded in Hermite functions orthonormal for the Maxwellian
weight, which makes the collision operator exactly diagonal (eigenvalue -k
on mode k) and the Maxwellian projector exact.  In space, even Hermite modes
live on cell centers and odd modes on cell interfaces; adjacent modes are
coupled by forward/backward differences built as exact mutual negative
adjoints in the rho_star-weighted inner products.  The self-consistent field
term injects the Poisson flux of the mode-0 density into mode 1, where it
cancels the Poisson part of the scalar product identically.  As a result the
discrete transport operator is antisymmetric in the full hypocoercive scalar
product to rounding, conserves the weighted average exactly, and microscopic
coercivity holds with constant exactly 1.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .steady_state import SteadyState, poisson_solve_full

__all__ = [
    "HermiteBasis",
    "PhaseState",
    "OperatorSet",
    "build_operators",
    "scalar_product",
    "fourth_moment_form",
    "save_phase_state",
    "load_phase_state",
]


class ZeroAverageError(ValueError):
    """State is outside the zero-average Hilbert space."""


@dataclass(frozen=True)
class HermiteBasis:
    """Hermite functions of degree 0..K-1, orthonormal for the Maxwellian."""

    k_modes: int
    sqrt_k: np.ndarray = field(repr=False)
    quad_nodes: np.ndarray = field(repr=False)
    quad_weights: np.ndarray = field(repr=False)
    eval_matrix: np.ndarray = field(repr=False)  # [q, k] = Hbar_k(v_q)

    @staticmethod
    def make(k_modes: int) -> "HermiteBasis":
        if k_modes < 4:
            raise ValueError("need at least 4 Hermite modes")
        nodes, weights = np.polynomial.hermite_e.hermegauss(k_modes)
        weights = weights / np.sqrt(2.0 * np.pi)  # normalise to a probability measure
        return HermiteBasis(
            k_modes=k_modes,
            sqrt_k=np.sqrt(np.arange(k_modes + 1, dtype=float)),
            quad_nodes=nodes,
            quad_weights=weights,
            eval_matrix=hermite_functions(nodes, k_modes),
        )

    @property
    def n_even(self) -> int:
        return (self.k_modes + 1) // 2

    @property
    def n_odd(self) -> int:
        return self.k_modes // 2


def hermite_functions(v: np.ndarray, k_modes: int) -> np.ndarray:
    """Evaluate Hbar_0..Hbar_{K-1} at points v; columns are modes."""
    v = np.asarray(v, dtype=float)
    out = np.empty((v.size, k_modes))
    out[:, 0] = 1.0
    if k_modes > 1:
        out[:, 1] = v
    for k in range(1, k_modes - 1):
        out[:, k + 1] = (v * out[:, k] - np.sqrt(k) * out[:, k - 1]) / np.sqrt(k + 1)
    return out


def fourth_moment_form(a: float, n_nodes: int = 8) -> float:
    """int (a v^2 - a)^2 M(v) dv by Gauss-Hermite quadrature; equals 2 a^2."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(max(4, n_nodes))
    weights = weights / np.sqrt(2.0 * np.pi)
    return float(np.sum(weights * (a * nodes**2 - a) ** 2))


@dataclass
class PhaseState:
    """Perturbation h(x, v) = sum_k c_k(x) Hbar_k(v).

    Even-mode coefficient fields sit on the n grid nodes, odd-mode fields on
    the n-1 interfaces.  eps is carried as a scaling tag consumed by the
    time steppers.
    """

    steady: SteadyState
    basis: HermiteBasis
    even: np.ndarray  # (n_even, n)
    odd: np.ndarray  # (n_odd, n-1)
    eps: float = 1.0

    def __post_init__(self):
        n = self.steady.grid.n
        if self.even.shape != (self.basis.n_even, n):
            raise ValueError("even coefficient block has wrong shape")
        if self.odd.shape != (self.basis.n_odd, n - 1):
            raise ValueError("odd coefficient block has wrong shape")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @staticmethod
    def zeros(steady: SteadyState, basis: HermiteBasis, eps: float = 1.0) -> "PhaseState":
        n = steady.grid.n
        return PhaseState(steady, basis, np.zeros((basis.n_even, n)), np.zeros((basis.n_odd, n - 1)), eps)

    def copy(self) -> "PhaseState":
        return PhaseState(self.steady, self.basis, self.even.copy(), self.odd.copy(), self.eps)

    def mode(self, k: int) -> np.ndarray:
        return self.even[k // 2] if k % 2 == 0 else self.odd[k // 2]

    def set_mode(self, k: int, values: np.ndarray) -> None:
        if k % 2 == 0:
            self.even[k // 2] = values
        else:
            self.odd[k // 2] = values

    @property
    def c0(self) -> np.ndarray:
        return self.even[0]

    @property
    def c1(self) -> np.ndarray:
        return self.odd[0]

    def average_defect(self) -> float:
        """iint h dmu, which must vanish on the Hilbert space."""
        return self.steady.grid.quad(self.c0 * self.steady.rho_star)

    def project_zero_average(self) -> None:
        self.even[0] -= self.average_defect() / self.steady.mass

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.even)) and np.all(np.isfinite(self.odd)))

    def values_on_lattice(self) -> np.ndarray:
        """h at (quadrature velocity, node) points, odd modes interpolated."""
        nodal = nodal_coefficients(self)
        return self.basis.eval_matrix @ nodal

    def last_mode_energy_fraction(self) -> float:
        """Share of the squared norm carried by the top two modes (closure monitor)."""
        ops = OperatorSet(self.steady, self.basis)
        total = ops.norm_sq(self)
        if total == 0:
            return 0.0
        top = 0.0
        for k in (self.basis.k_modes - 2, self.basis.k_modes - 1):
            probe = PhaseState.zeros(self.steady, self.basis, self.eps)
            probe.set_mode(k, self.mode(k))
            top += ops.norm_sq(probe)
        return top / total


def nodal_coefficients(state: PhaseState) -> np.ndarray:
    """All K coefficient fields sampled at nodes (odd modes face-averaged)."""
    n = state.steady.grid.n
    out = np.empty((state.basis.k_modes, n))
    out[0::2] = state.even
    for m in range(state.basis.n_odd):
        out[2 * m + 1] = faces_to_nodes(state.odd[m])
    return out


def faces_to_nodes(f: np.ndarray) -> np.ndarray:
    out = np.empty(f.size + 1)
    out[1:-1] = 0.5 * (f[:-1] + f[1:])
    out[0] = f[0]
    out[-1] = f[-1]
    return out


def nodes_to_faces(g: np.ndarray) -> np.ndarray:
    return 0.5 * (g[:-1] + g[1:])


class OperatorSet:
    """Discrete T, L, Pi and the hypocoercive scalar product for one steady state.

    Immutable after construction; all applications are pure.
    """

    def __init__(self, steady: SteadyState, basis: HermiteBasis):
        if steady.residual > 1e-4:
            raise ValueError(f"steady state residual {steady.residual:.2e} too large")
        self.steady = steady
        self.basis = basis
        self.grid = steady.grid
        self.dx = steady.grid.dx
        self.rho_n = steady.rho_star
        self.rho_f = steady.rho_faces
        k = basis.k_modes
        # sqrt(j+1) factors for the pair (j, j+1), split by parity of j
        self._up_even = np.array([np.sqrt(2 * m + 1) for m in range(basis.n_odd)])
        self._up_odd = np.array([np.sqrt(2 * m + 2) for m in range(basis.n_odd) if 2 * m + 2 < k])
        self._transport_norm: float | None = None

    # -- staggered difference primitives (exact mutual negative adjoints) --

    def d_plus(self, c: np.ndarray) -> np.ndarray:
        """Node field -> face field, (c_{i+1} - c_i)/dx."""
        return np.diff(c, axis=-1) / self.dx

    def d_minus(self, f: np.ndarray) -> np.ndarray:
        """Face field -> node field, (1/rho) d(rho f)/dx with zero ghost fluxes."""
        g = f * self.rho_f
        return np.diff(g, axis=-1, prepend=0.0, append=0.0) / (self.dx * self.rho_n)

    def d_hat(self, f: np.ndarray) -> np.ndarray:
        """Face field -> node field, plain difference with zero ghosts."""
        return np.diff(f, axis=-1, prepend=0.0, append=0.0) / self.dx

    def d_tilde(self, c: np.ndarray) -> np.ndarray:
        """Node field -> face field, (1/rho) d(rho c)/dx."""
        return np.diff(c * self.rho_n, axis=-1) / (self.dx * self.rho_f)

    def poisson_flux(self, c0: np.ndarray) -> np.ndarray:
        """psi_h' on the faces for the macroscopic density c0 * rho_star."""
        rho_h = c0 * self.rho_n
        total = np.sum(rho_h) * self.dx
        return 0.5 * total - np.cumsum(rho_h * self.dx)[:-1]

    # -- operators --

    def apply_T(self, h: PhaseState) -> PhaseState:
        """Transport: streaming ladder plus the self-consistent field in mode 1."""
        out = PhaseState.zeros(h.steady, h.basis, h.eps)
        # odd rows: sqrt(2m+1) * d_plus(even_m)  and  sqrt(2m+2) * d_tilde(even_{m+1})
        out.odd += self._up_even[:, None] * self.d_plus(h.even[: h.basis.n_odd])
        if h.basis.n_even > 1:
            n_dn = len(self._up_odd)
            out.odd[:n_dn] += self._up_odd[:, None] * self.d_tilde(h.even[1 : 1 + n_dn])
        # even rows: sqrt(2m+1) * d_minus(odd_m)  and  sqrt(2m+2) * d_hat(odd_{m+1}->row m+1)
        out.even[: h.basis.n_odd] += self._up_even[:, None] * self.d_minus(h.odd)
        n_dn = len(self._up_odd)
        if n_dn:
            out.even[1 : 1 + n_dn] += self._up_odd[:, None] * self.d_hat(h.odd[:n_dn])
        # nonlocal term v . psi_h'
        out.odd[0] += self.poisson_flux(h.c0)
        return out

    def apply_L(self, h: PhaseState) -> PhaseState:
        out = h.copy()
        out.even *= -2.0 * np.arange(h.basis.n_even)[:, None]
        out.odd *= -(2.0 * np.arange(h.basis.n_odd) + 1.0)[:, None]
        return out

    def apply_Pi(self, h: PhaseState) -> PhaseState:
        out = PhaseState.zeros(h.steady, h.basis, h.eps)
        out.even[0] = h.even[0]
        return out

    # -- metric --

    def scalar_product(self, h1: PhaseState, h2: PhaseState, check_average: bool = True) -> float:
        if h1.steady is not h2.steady or h1.basis is not h2.basis:
            raise ValueError("states live on different discretizations")
        if h1.steady is not self.steady:
            raise ValueError("states do not belong to this operator set")
        if check_average:
            for h in (h1, h2):
                scale = self.grid.quad(np.abs(h.c0) * self.rho_n) + np.sqrt(np.sum(h.odd**2)) * self.dx
                if abs(h.average_defect()) > 1e-10 * max(1.0, scale):
                    raise ZeroAverageError("scalar product requires zero-average states")
        val = self.dx * float(np.sum(h1.even * h2.even * self.rho_n))
        val += self.dx * float(np.sum(h1.odd * h2.odd * self.rho_f))
        val += self.dx * float(self.poisson_flux(h1.c0) @ self.poisson_flux(h2.c0))
        return val

    def norm_sq(self, h: PhaseState, check_average: bool = False) -> float:
        return self.scalar_product(h, h, check_average=check_average)

    def l2_products(self, h: PhaseState) -> tuple[float, float]:
        """(|Pi h|^2, |(Id-Pi) h|^2) in the hypocoercive metric."""
        pi_part = self.dx * float(np.sum(h.even[0] ** 2 * self.rho_n))
        f = self.poisson_flux(h.c0)
        pi_part += self.dx * float(f @ f)
        micro = self.dx * float(np.sum(h.even[1:] ** 2 * self.rho_n))
        micro += self.dx * float(np.sum(h.odd**2 * self.rho_f))
        return pi_part, micro

    def collision_dissipation(self, h: PhaseState) -> float:
        """-<L h, h> = iint |grad_v h|^2 dmu >= |(Id - Pi) h|^2, summed exactly."""
        val = self.dx * float(np.sum((2.0 * np.arange(h.basis.n_even))[:, None] * h.even**2 * self.rho_n))
        val += self.dx * float(
            np.sum((2.0 * np.arange(h.basis.n_odd) + 1.0)[:, None] * h.odd**2 * self.rho_f)
        )
        return val

    def antisymmetry_defect(self, rng: np.random.Generator | None = None, trials: int = 5) -> float:
        """max |<T h, g> + <h, T g>| / (|h| |g|) over random probe pairs."""
        rng = rng or np.random.default_rng(0)
        worst = 0.0
        for _ in range(trials):
            h = random_state(self.steady, self.basis, rng)
            g = random_state(self.steady, self.basis, rng)
            th, tg = self.apply_T(h), self.apply_T(g)
            num = abs(
                self.scalar_product(th, g, check_average=False)
                + self.scalar_product(h, tg, check_average=False)
            )
            den = np.sqrt(self.norm_sq(h) * self.norm_sq(g))
            worst = max(worst, num / den)
        return worst

    def transport_norm(self) -> float:
        """Spectral norm of T in the hypocoercive metric (power iteration on -T^2)."""
        if self._transport_norm is None:
            rng = np.random.default_rng(1234)
            h = random_state(self.steady, self.basis, rng)
            val = 0.0
            for _ in range(40):
                th = self.apply_T(h)
                h = self.apply_T(th)
                h.even *= -1.0
                h.odd *= -1.0
                val = np.sqrt(self.norm_sq(h))
                if val == 0:
                    break
                h.even /= val
                h.odd /= val
            self._transport_norm = float(np.sqrt(val))
        return self._transport_norm


def build_operators(state: SteadyState, basis: HermiteBasis) -> OperatorSet:
    return OperatorSet(state, basis)


def scalar_product(h1: PhaseState, h2: PhaseState) -> float:
    """Hypocoercive scalar product; requires zero-average states."""
    ops = OperatorSet(h1.steady, h1.basis)
    return ops.scalar_product(h1, h2)


def random_state(
    steady: SteadyState,
    basis: HermiteBasis,
    rng: np.random.Generator,
    smoothness: int = 6,
    eps: float = 1.0,
) -> PhaseState:
    """Smooth random zero-average state (low-order Fourier content per mode)."""
    grid = steady.grid
    xn = grid.nodes / grid.x_max
    xf = grid.faces / grid.x_max
    state = PhaseState.zeros(steady, basis, eps)

    def smooth_field(x):
        field_vals = np.zeros_like(x)
        for m in range(1, smoothness + 1):
            a, b = rng.normal(size=2) / m
            field_vals += a * np.sin(np.pi * m * x) + b * np.cos(np.pi * m * x)
        return field_vals

    decay = np.exp(-0.5 * np.arange(basis.k_modes))
    for k in range(basis.k_modes):
        x = xn if k % 2 == 0 else xf
        state.set_mode(k, decay[k] * smooth_field(x))
    state.project_zero_average()
    return state


def save_phase_state(state: PhaseState, path: str, time: float = 0.0) -> None:
    """Columnar snapshot: x, c0..c{K-1} per node (odd modes face-averaged)."""
    nodal = nodal_coefficients(state)
    data = np.column_stack([state.steady.grid.nodes, nodal.T])
    header = "x," + ",".join(f"c{k}" for k in range(state.basis.k_modes))
    np.savetxt(path, data, delimiter=",", header=header, comments="")
    meta = {
        "K": state.basis.k_modes,
        "N": state.steady.grid.n,
        "X_max": state.steady.grid.x_max,
        "eps": state.eps,
        "time": time,
    }
    base, _ = os.path.splitext(path)
    with open(base + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_phase_state(path: str, steady: SteadyState) -> PhaseState:
    base, _ = os.path.splitext(path)
    with open(base + ".json") as fh:
        meta = json.load(fh)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if int(meta["N"]) != steady.grid.n:
        raise ValueError("snapshot grid does not match steady state")
    basis = HermiteBasis.make(int(meta["K"]))
    state = PhaseState.zeros(steady, basis, float(meta["eps"]))
    nodal = data[:, 1:].T
    state.even[:] = nodal[0::2]
    for m in range(basis.n_odd):
        state.odd[m] = nodes_to_faces(nodal[2 * m + 1])
    return state
