"""Constructive decay-rate certification.

Three constants feed the abstract machinery: microscopic coercivity
lambda_m (exactly 1 in the Hermite discretization), macroscopic coercivity
lambda_M (the spectral gap of the rho_star-weighted Sturm-Liouville
operator), and the auxiliary-operator bound C_M.  From them: the admissible
twist range delta_star, the certified rate lambda(delta) through the
discriminant of a 2x2 quadratic form, and the parabolic-scaling constants
(delta(eps), zeta, eta).

The quadratic-form route is double-checked by a direction scan: the rate is
accepted only if the form is nonnegative on the unit circle at lambda and
(unless the sign-condition cap binds) attains a negative value at
1.05 lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, eigh, null_space

from .discretization import OperatorSet
from .macro_ops import get_macro_operators
from .potential import eval_potential_array
from .steady_state import Grid1D, SteadyState

__all__ = [
    "HypocoConstants",
    "EpsScaling",
    "ChainConstants",
    "estimate_lambda_M",
    "measured_macroscopic_gap",
    "estimate_C_M",
    "estimate_chain_constants",
    "compute_delta_star",
    "compute_decay_rate",
    "form_scan_minimum",
    "compute_eps_scaled",
    "choose_delta",
    "certify",
]

LAMBDA_M_EXACT = 1.0  # Gaussian Poincare constant; mode-k collision eigenvalue is k


@dataclass
class HypocoConstants:
    """Certified rate bundle (lambda_m, lambda_M, C_M, delta_star, delta, lambda)."""

    lambda_m: float
    lambda_M: float
    c_m: float
    method: str
    delta_star: float
    chosen_delta: float
    decay_rate: float
    d: int = 1

    def __post_init__(self):
        if not 0 < self.chosen_delta < self.delta_star <= 2.0 + 1e-15:
            raise ValueError("need 0 < chosen_delta < delta_star <= 2")
        if self.decay_rate <= 0:
            raise ValueError("certified rate must be positive")
        if self.decay_rate >= 2.0 * (self.lambda_m - self.chosen_delta):
            raise ValueError("rate violates the sign condition lambda < 2(lambda_m - delta)")

    @property
    def nonlinear_poincare_c(self) -> float:
        """c = 1 + sqrt(2 (d+2)) entering the nonlinear coupling estimate."""
        return 1.0 + math.sqrt(2.0 * (self.d + 2))

    def as_dict(self) -> dict:
        return {
            "lambda_m": self.lambda_m,
            "lambda_M": self.lambda_M,
            "C_M": self.c_m,
            "method": self.method,
            "delta_star": self.delta_star,
            "chosen_delta": self.chosen_delta,
            "lambda": self.decay_rate,
            "d": self.d,
        }


@dataclass
class EpsScaling:
    eps: float
    delta_eps: float
    zeta: float
    eta: float
    small_eps_admissible: bool

    def as_dict(self) -> dict:
        return {
            "eps": self.eps,
            "delta_eps": self.delta_eps,
            "zeta": self.zeta,
            "eta": self.eta,
            "small_eps_admissible": self.small_eps_admissible,
        }


@dataclass
class ChainConstants:
    """Explicit constants of the elliptic-regularity chain (certified route)."""

    c_star: float
    c_weighted: float
    c_circ: float
    lambda_star: float
    lambda_circ: float
    kappa1: float
    kappa2: float
    kappa3: float
    kappa4: float
    big_k: float
    kappa_claimx: float
    lambda_chain: float
    c_m_bound: float
    excluded_nodes: int = 0

    def as_dict(self) -> dict:
        return {
            "C_star": self.c_star,
            "C": self.c_weighted,
            "C_circ": self.c_circ,
            "Lambda_star": self.lambda_star,
            "Lambda_circ": self.lambda_circ,
            "kappa1": self.kappa1,
            "kappa2": self.kappa2,
            "kappa3": self.kappa3,
            "kappa4": self.kappa4,
            "K_claim2": self.big_k,
            "kappa_claimx": self.kappa_claimx,
            "lambda_chain": self.lambda_chain,
            "C_M_bound": self.c_m_bound,
            "excluded_nodes": self.excluded_nodes,
        }


# -- spectral estimators ------------------------------------------------------


def _constrained_min_eig(
    stiff: np.ndarray,
    mass_diag: np.ndarray,
    weights: np.ndarray,
    metric: np.ndarray | None = None,
) -> float:
    """Smallest eigenvalue of stiff u = mu (mass) u subject to weights . u = 0.

    The problem is scaled by mass_diag^{-1/2} first (with nodes below a
    relative floor of the exponentially decaying weight dropped), which keeps
    the transformed pencil positive definite despite rho_star underflowing in
    the far tail.  metric=None means the mass is diag(mass_diag); otherwise
    metric is the dense right-hand matrix and mass_diag only sets the scaling.
    """
    keep = mass_diag > 1e-250 * np.max(mass_diag)
    sc = 1.0 / np.sqrt(mass_diag[keep])
    a = sc[:, None] * stiff[np.ix_(keep, keep)] * sc[None, :]
    w = weights[keep] * sc
    z = null_space(w[None, :])
    if metric is None:
        vals = eigh(z.T @ a @ z, eigvals_only=True)
    else:
        b = sc[:, None] * metric[np.ix_(keep, keep)] * sc[None, :]
        vals = eigh(z.T @ a @ z, z.T @ b @ z, eigvals_only=True)
    return float(vals[0])


def _dirichlet_form(state: SteadyState, face_weight: np.ndarray) -> np.ndarray:
    """Stiffness matrix of u -> sum_f dx w_f ((u_{i+1}-u_i)/dx)^2."""
    n, dx = state.grid.n, state.grid.dx
    d = (np.eye(n, k=1)[: n - 1] - np.eye(n)[: n - 1]) / dx
    return d.T @ ((dx * face_weight)[:, None] * d)


def estimate_lambda_M(state: SteadyState, grid: Grid1D | None = None) -> float:
    """Poincare constant C_star of rho_star: smallest nonzero eigenvalue of the
    weighted Sturm-Liouville problem on zero-average functions."""
    grid = grid or state.grid
    stiff = _dirichlet_form(state, state.rho_faces)
    mass = grid.dx * state.rho_star
    return _constrained_min_eig(stiff, mass, mass)


def measured_macroscopic_gap(state: SteadyState) -> float:
    """Direct gap of (TPi)*(TPi) in the hypocoercive metric (reported alongside C_star)."""
    macro = get_macro_operators(state)
    return _constrained_min_eig(macro.stiffness, macro.r_n, macro.r_n, metric=macro.g0)


def estimate_C_M(ops: OperatorSet, method: str = "direct_operator_norm") -> float:
    """Bound C_M of (H4): |A T (Id-Pi) h| + |A L h| <= C_M |(Id-Pi) h|.

    direct_operator_norm: the supremum is attained on states supported in
    modes 1 and 2 (A L h depends on the flux c_1 only, A T (Id-Pi) h on c_2
    only), so a two-block power iteration on that reduced space converges to
    the exact discrete constant sqrt(sigma_1^2 + sigma_2^2).

    paper_chain: the fully explicit (much looser) certified bound assembled
    from the elliptic-regularity chain.
    """
    if method == "paper_chain":
        return estimate_chain_constants(ops.steady, ops.grid).c_m_bound
    if method != "direct_operator_norm":
        raise ValueError(f"unknown C_M method {method!r}")

    macro = get_macro_operators(ops.steady)
    r_f, r_n = macro.r_f, macro.r_n
    n = ops.grid.n
    # dense (n-1) x n matrix of the mode-2 -> mode-1 coupling sqrt(2)(d/dx - W')
    dtilde = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    dtilde[idx, idx + 1] = ops.rho_n[1:] / (ops.grid.dx * ops.rho_f)
    dtilde[idx, idx] = -ops.rho_n[:-1] / (ops.grid.dx * ops.rho_f)
    w2 = math.sqrt(2.0) * dtilde

    rng = np.random.default_rng(2718)
    c1 = rng.standard_normal(n - 1)
    c2 = rng.standard_normal(n)
    value = 0.0
    for _ in range(100):
        den = math.sqrt(float(c1 @ (r_f * c1)) + float(c2 @ (r_n * c2)))
        c1, c2 = c1 / den, c2 / den
        v1 = macro.solve_a(c1)  # A L h, up to the sign flip of the flux
        v2 = macro.solve_a(w2 @ c2)  # A T (Id - Pi) h
        n1, n2 = macro.macro_norm(v1), macro.macro_norm(v2)
        new_value = n1 + n2
        # metric gradient of |X1 h| + |X2 h| on the unit sphere
        c1 = macro.b_mat @ cho_solve(macro._ma_cho, macro.g0 @ v1) / max(n1, 1e-300)
        c2 = (w2.T @ (r_f * (macro.b_mat @ cho_solve(macro._ma_cho, macro.g0 @ v2)))) / r_n / max(
            n2, 1e-300
        )
        if abs(new_value - value) < 1e-6 * max(new_value, 1e-300):
            value = new_value
            break
        value = new_value
    return float(value)


def estimate_chain_constants(state: SteadyState, grid: Grid1D | None = None) -> ChainConstants:
    """Numerical estimates of every constant in the explicit bound chain.

    Weighted Poincare constants are generalized eigenvalues on the grid;
    the pointwise-ratio constants are maximized over the outer half of the
    domain, excluding (and counting) nodes where W_star' vanishes.
    """
    grid = grid or state.grid
    dx = grid.dx
    rho = state.rho_star
    w1 = state.dw_star  # W_star'
    w2 = w1**2
    # W'' = V'' + phi'' with phi'' = -rho_star (no differencing needed)
    if state.spec is not None:
        _, _, d2v = eval_potential_array(state.spec, grid.nodes)
        wpp = d2v - rho
    else:
        wpp = np.gradient(w1, grid.nodes)  # fallback for detached states

    c_star = estimate_lambda_M(state, grid)
    j = dx * rho
    stiff_plain = _dirichlet_form(state, state.rho_faces)
    mass_w2 = np.diag(dx * w2 * rho)
    c_weighted = _constrained_min_eig(stiff_plain, mass_w2, j)
    w2_faces = 0.5 * (w2[:-1] + w2[1:])
    stiff_w2 = _dirichlet_form(state, state.rho_faces * w2_faces)
    mass_w4 = np.diag(dx * w2**2 * rho)
    c_circ = _constrained_min_eig(stiff_w2, mass_w4, j)

    outer = np.abs(grid.nodes) >= 0.5 * grid.x_max
    nonzero = np.abs(w1) > 1e-10 * np.max(np.abs(w1))
    excluded = int(np.sum(outer & ~nonzero))
    sel = outer & nonzero
    # Lemma ratios: Hess(rho) - (1/2) Lap(rho) Id reduces in 1d to rho''/2,
    # and rho'' = (W'^2 - W'') rho.
    lambda_star = float(np.max(np.maximum(0.5 * (w2[sel] - wpp[sel]) / w2[sel], 0.0)))
    grad_w2 = 2.0 * w1 * wpp
    lambda_circ = float(np.max(np.abs(grad_w2[sel]) / w2[sel]))

    kappa1 = grid.quad(state.phi_star**2 * rho)
    int_wpp2 = grid.quad(wpp**2 * rho)
    int_w2 = grid.quad(w2 * rho)
    rho_sup = float(np.max(rho))
    kappa2 = (int_wpp2 / c_star + int_w2) * rho_sup + kappa1 / state.mass**2 * int_wpp2
    kappa3 = math.sqrt(float(np.max(w2 * rho)))
    kappa4 = math.sqrt(float(np.max(grad_w2**2 * rho)))
    big_k = 1.0 + 2.0 * rho_sup

    # ClaimX: X2^2 - b X2 |Pi h| - c |Pi h|^2 <= 0 from Step 3 with
    # X1 <= sqrt(K/C) |Pi h| and the inner-region remainder.
    inner = ~outer
    l_inner = float(np.max(np.abs(grad_w2[inner]))) if np.any(inner) else 0.0
    x1_coef = math.sqrt(big_k / c_weighted)
    b = kappa3 + 1.0 / math.sqrt(c_circ) + lambda_circ * x1_coef
    c = kappa4 * x1_coef + big_k * l_inner
    kappa_claimx = (0.5 * (b + math.sqrt(b**2 + 4.0 * c))) ** 2

    lambda_chain = lambda_star * (kappa_claimx + kappa3**2)
    c_m_bound = math.sqrt(2.0 * (6.0 * (big_k + 1.5) + 8.0 * (math.sqrt(1.0 + lambda_chain) - 1.0) ** 2)) + 0.5

    return ChainConstants(
        c_star=c_star,
        c_weighted=c_weighted,
        c_circ=c_circ,
        lambda_star=lambda_star,
        lambda_circ=lambda_circ,
        kappa1=kappa1,
        kappa2=kappa2,
        kappa3=kappa3,
        kappa4=kappa4,
        big_k=big_k,
        kappa_claimx=kappa_claimx,
        lambda_chain=lambda_chain,
        c_m_bound=c_m_bound,
        excluded_nodes=excluded,
    )


# -- rate algebra -------------------------------------------------------------


def compute_delta_star(lambda_m: float, lambda_M: float, c_m: float) -> float:
    """delta_star = min{2, lambda_m, 4 lambda_m lambda_M / (4 lambda_M + C_M^2 (1+lambda_M))}."""
    if lambda_m <= 0 or lambda_M <= 0:
        raise ValueError("lambda_m and lambda_M must be positive")
    if c_m < 0:
        raise ValueError("C_M must be nonnegative")
    third = 4.0 * lambda_m * lambda_M / (4.0 * lambda_M + c_m**2 * (1.0 + lambda_M))
    return min(2.0, lambda_m, third)


def _h_coefficients(lambda_m, lambda_M, c_m, delta):
    """h(delta, lam) = a lam^2 + b lam + c (downward parabola for delta < 2)."""
    s = delta * lambda_M / (1.0 + lambda_M)
    a = delta**2 / 4.0 - 1.0
    b = delta**2 * c_m + 2.0 * (lambda_m - delta) + 2.0 * s
    c = delta**2 * c_m**2 - 4.0 * (lambda_m - delta) * s
    return a, b, c


def h_discriminant(lambda_m: float, lambda_M: float, c_m: float, delta: float, lam: float) -> float:
    """The proof's discriminant h(delta, lambda); the form is nonnegative iff h <= 0."""
    a, b, c = _h_coefficients(lambda_m, lambda_M, c_m, delta)
    return a * lam**2 + b * lam + c


def compute_decay_rate(lambda_m: float, lambda_M: float, c_m: float, delta: float) -> float:
    """Certified rate: supremum of {lam > 0 : h(delta, .) <= 0 on (0, lam]},
    capped by the sign condition lam < 2 (lambda_m - delta).

    The proof's claim h(delta, 0) > 0 conflicts with the small-delta sign of
    the stated formula, so the rate is defined through the h <= 0 interval
    adjoining zero and always cross-checked by the direction scan.
    """
    d_star = compute_delta_star(lambda_m, lambda_M, c_m)
    if not 0 < delta < d_star:
        raise ValueError(f"delta={delta} outside the admissible range (0, {d_star})")
    a, b, c = _h_coefficients(lambda_m, lambda_M, c_m, delta)
    cap = 2.0 * (lambda_m - delta)
    tiny = 1e-14 * max(1.0, abs(c))
    if c > tiny:
        return 0.0
    if abs(a) < 1e-300:
        lam_disc = math.inf if b <= 0 else -c / b
    else:
        disc = b * b - 4.0 * a * c
        if disc < 0:
            lam_disc = math.inf
        else:
            r1, r2 = sorted(((-b + math.sqrt(disc)) / (2 * a), (-b - math.sqrt(disc)) / (2 * a)))
            if r1 > tiny:
                lam_disc = r1
            elif r2 <= tiny:
                lam_disc = math.inf
            else:
                lam_disc = 0.0
    return float(min(lam_disc, np.nextafter(cap, 0.0)))


def form_scan_minimum(
    lambda_m: float, lambda_M: float, c_m: float, delta: float, lam: float, n_dir: int = 360
) -> float:
    """Minimum over unit directions of the (X, Y) quadratic form at rate lam."""
    s = delta * lambda_M / (1.0 + lambda_M)
    theta = np.linspace(0.0, np.pi, n_dir, endpoint=False)
    x, y = np.cos(theta), np.sin(theta)
    q = (
        (lambda_m - delta - lam / 2.0) * x**2
        + (s - lam / 2.0) * y**2
        - delta * (c_m + lam / 2.0) * x * y
    )
    return float(np.min(q))


def verify_rate_by_scan(
    lambda_m: float, lambda_M: float, c_m: float, delta: float, lam: float
) -> dict:
    """Scan verification: nonnegative at lam, negative at 1.05 lam unless capped."""
    at_rate = form_scan_minimum(lambda_m, lambda_M, c_m, delta, lam)
    above = form_scan_minimum(lambda_m, lambda_M, c_m, delta, 1.05 * lam)
    cap = 2.0 * (lambda_m - delta)
    cap_binds = lam >= cap * (1.0 - 1e-9)
    return {
        "nonnegative_at_rate": bool(at_rate >= -1e-12 * max(1.0, lambda_m + lambda_M + c_m)),
        "negative_above_rate": bool(above < 0.0) or cap_binds,
        "cap_binds": bool(cap_binds),
        "scan_min_at_rate": at_rate,
        "scan_min_above_rate": above,
    }


def compute_eps_scaled(lambda_m: float, lambda_M: float, c_m: float, eps: float) -> EpsScaling:
    """Parabolic-scaling constants delta(eps), zeta, eta plus the small-eps test."""
    if min(lambda_m, lambda_M, c_m, eps) <= 0:
        raise ValueError("all arguments must be positive")
    denom = c_m**2 * (1.0 + lambda_M)
    delta_eps = 4.0 * lambda_m * lambda_M * eps / (4.0 * lambda_M * eps**2 + denom)
    zeta = 2.0 * lambda_m * lambda_M / denom
    eta = lambda_m * lambda_M**2 / (c_m**2 * (1.0 + lambda_M) ** 2)
    k = 2.0 * zeta
    quartic = (
        lambda_m**2 * k**4 * eps**4
        + k * c_m**3 * (4.0 * k * lambda_m + 3.0 * c_m * (k + 4.0)) * eps**2
        - 2.0 * c_m**6
    )
    return EpsScaling(eps, delta_eps, zeta, eta, bool(quartic < 0.0))


def choose_delta(
    lambda_m: float, lambda_M: float, c_m: float, policy: str = "half_delta_star", explicit: float | None = None
) -> float:
    """delta selection: delta_star/2 (default), golden-section rate maximum, or explicit."""
    d_star = compute_delta_star(lambda_m, lambda_M, c_m)
    if policy == "half_delta_star":
        return 0.5 * d_star
    if policy == "explicit":
        if explicit is None or not 0 < explicit < d_star:
            raise ValueError("explicit delta must lie in (0, delta_star)")
        return float(explicit)
    if policy == "optimize":
        phi = (math.sqrt(5.0) - 1.0) / 2.0
        lo, hi = 1e-6 * d_star, d_star * (1.0 - 1e-9)
        x1 = hi - phi * (hi - lo)
        x2 = lo + phi * (hi - lo)
        f1 = compute_decay_rate(lambda_m, lambda_M, c_m, x1)
        f2 = compute_decay_rate(lambda_m, lambda_M, c_m, x2)
        for _ in range(80):
            if f1 < f2:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + phi * (hi - lo)
                f2 = compute_decay_rate(lambda_m, lambda_M, c_m, x2)
            else:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - phi * (hi - lo)
                f1 = compute_decay_rate(lambda_m, lambda_M, c_m, x1)
        return 0.5 * (lo + hi)
    raise ValueError(f"unknown delta policy {policy!r}")


def certify(
    state: SteadyState,
    ops: OperatorSet,
    cm_method: str = "direct_operator_norm",
    delta_policy: str = "half_delta_star",
    explicit_delta: float | None = None,
    d: int = 1,
) -> HypocoConstants:
    """Full certification: estimate the constants and evaluate the rate algebra."""
    lambda_M = estimate_lambda_M(state)
    c_m = estimate_C_M(ops, cm_method)
    delta = choose_delta(LAMBDA_M_EXACT, lambda_M, c_m, delta_policy, explicit_delta)
    rate = compute_decay_rate(LAMBDA_M_EXACT, lambda_M, c_m, delta)
    return HypocoConstants(
        lambda_m=LAMBDA_M_EXACT,
        lambda_M=lambda_M,
        c_m=c_m,
        method=cm_method,
        delta_star=compute_delta_star(LAMBDA_M_EXACT, lambda_M, c_m),
        chosen_delta=delta,
        decay_rate=rate,
        d=d,
    )
