"""External confining potential: evaluation and admissibility checks.

The confinement class is the power-law family V(x) = |x|^alpha (admissible
for alpha > 1) plus tabulated potentials interpolated monotone-cubically.
Admissibility is certified numerically through eight growth/regularity
conditions (V1-V8) evaluated on a geometric probe grid; each condition gets
a pass/fail/marginal verdict based on the tail behaviour of its defining
expression.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "PotentialSpec",
    "PotentialValues",
    "AssumptionEntry",
    "AssumptionReport",
    "eval_potential",
    "default_probe",
    "check_confinement_assumptions",
]

# Margin by which a strict tail inequality must hold to count as "pass".
PASS_MARGIN = 1e-6
# Tabulated potentials inherit interpolation noise in second derivatives;
# verdicts within this looser band are downgraded to "marginal".
TABULATED_MARGIN = 1e-3


class PotentialDomainError(ValueError):
    """Evaluation outside the tabulated node range."""


@dataclass(frozen=True)
class PotentialSpec:
    """Confining potential: power law |x|^alpha or tabulated (x, V) samples.

    domain_radius is the truncation radius X_max inherited by every
    downstream grid.
    """

    family: str  # "power_law" | "tabulated"
    domain_radius: float
    alpha: float = 0.0
    table_x: np.ndarray | None = None
    table_v: np.ndarray | None = None

    def __post_init__(self):
        if self.domain_radius <= 0:
            raise ValueError("domain_radius must be positive")
        if self.family == "power_law":
            if self.alpha <= 0:
                raise ValueError("power_law requires alpha > 0")
        elif self.family == "tabulated":
            if self.table_x is None or self.table_v is None:
                raise ValueError("tabulated requires table_x and table_v")
            x = np.asarray(self.table_x, dtype=float)
            v = np.asarray(self.table_v, dtype=float)
            if x.ndim != 1 or x.shape != v.shape:
                raise ValueError("table_x and table_v must be 1d arrays of equal length")
            if not np.all(np.isfinite(v)) or not np.all(np.isfinite(x)):
                raise ValueError("tabulated values must be finite")
            if not np.all(np.diff(x) > 0):
                raise ValueError("tabulated nodes must be strictly increasing")
            object.__setattr__(self, "table_x", x)
            object.__setattr__(self, "table_v", v)
        else:
            raise ValueError(f"unknown potential family {self.family!r}")

    @property
    def admissible_regime(self) -> bool:
        """True when the family parameter sits in the proven-admissible range."""
        return self.family != "power_law" or self.alpha > 1.0

    def interpolator(self) -> PchipInterpolator:
        if self.family != "tabulated":
            raise ValueError("interpolator only defined for tabulated potentials")
        return PchipInterpolator(self.table_x, self.table_v, extrapolate=False)


@dataclass(frozen=True)
class PotentialValues:
    """V and its first two derivatives at one point."""

    v: float
    dv: float
    d2v: float
    singular_origin: bool = False

    def astuple(self):
        return (self.v, self.dv, self.d2v)


def eval_potential(spec: PotentialSpec, x: float) -> PotentialValues:
    """Evaluate (V, V', V'') at x.

    Power law: V' = alpha |x|^(alpha-1) sgn(x), V'' = alpha (alpha-1) |x|^(alpha-2).
    For 1 < alpha < 2 the curvature blows up at the origin; the one-sided
    limit (+inf) is reported together with the singular_origin flag instead
    of raising.
    """
    if not math.isfinite(x):
        raise ValueError("x must be finite")
    if spec.family == "power_law":
        a = spec.alpha
        ax = abs(x)
        if ax == 0.0:
            v = 0.0
            dv = 0.0
            if a > 2.0:
                d2v = 0.0
            elif a == 2.0:
                d2v = 2.0
            elif a == 1.0:
                # |x| has no classical curvature at 0; flag it as singular too.
                d2v = math.inf
            else:
                d2v = math.inf
            return PotentialValues(v, dv, d2v, singular_origin=a < 2.0)
        s = math.copysign(1.0, x)
        return PotentialValues(ax**a, a * ax ** (a - 1.0) * s, a * (a - 1.0) * ax ** (a - 2.0))
    # tabulated
    if x < spec.table_x[0] or x > spec.table_x[-1]:
        raise PotentialDomainError(f"x={x} outside tabulated range [{spec.table_x[0]}, {spec.table_x[-1]}]")
    p = spec.interpolator()
    return PotentialValues(float(p(x)), float(p.derivative(1)(x)), float(p.derivative(2)(x)))


def eval_potential_array(spec: PotentialSpec, x: np.ndarray):
    """Vectorised (V, V', V'') on an array of points; origin handled as in eval_potential."""
    x = np.asarray(x, dtype=float)
    if spec.family == "power_law":
        a = spec.alpha
        ax = np.abs(x)
        s = np.sign(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = ax**a
            dv = np.where(ax > 0, a * ax ** (a - 1.0) * s, 0.0)
            d2v = np.where(ax > 0, a * (a - 1.0) * ax ** (a - 2.0), 2.0 if a == 2.0 else (0.0 if a > 2.0 else np.inf))
        return v, dv, d2v
    p = spec.interpolator()
    if np.any(x < spec.table_x[0]) or np.any(x > spec.table_x[-1]):
        raise PotentialDomainError("points outside tabulated range")
    return p(x), p.derivative(1)(x), p.derivative(2)(x)


def schrodinger_potential(spec: PotentialSpec, x: np.ndarray) -> np.ndarray:
    """Phi = (1/4) V'^2 - (1/2) V'', the ground-state-form companion potential."""
    _, dv, d2v = eval_potential_array(spec, x)
    return 0.25 * dv**2 - 0.5 * d2v


@dataclass
class AssumptionEntry:
    name: str
    witness: np.ndarray
    verdict: str  # "pass" | "fail" | "marginal"
    note: str = ""


@dataclass
class AssumptionReport:
    """Per-assumption verdicts plus the named certificate constants.

    sigma_v is the minimum of Phi over the outermost probe annulus, theta the
    smallest admissible V3b weight on the tail, lambda_v the V6 tail bound.
    """

    spec: PotentialSpec
    mass: float
    probe: np.ndarray
    entries: dict[str, AssumptionEntry] = field(default_factory=dict)
    sigma_v: float = math.nan
    theta: float = math.nan
    lambda_v: float = math.nan

    @property
    def all_pass(self) -> bool:
        return all(e.verdict == "pass" for e in self.entries.values())

    @property
    def admissible(self) -> bool:
        return all(e.verdict in ("pass", "marginal") for e in self.entries.values())

    def to_json(self) -> str:
        payload = {
            "mass": self.mass,
            "probe": [float(r) for r in self.probe],
            "sigma_v": self.sigma_v,
            "theta": self.theta,
            "lambda_v": self.lambda_v,
            "all_pass": self.all_pass,
            "entries": {
                k: {
                    "witness": [float(w) for w in e.witness],
                    "verdict": e.verdict,
                    "note": e.note,
                }
                for k, e in sorted(self.entries.items())
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def default_probe(spec: PotentialSpec, levels: int = 10) -> np.ndarray:
    """Geometric probe radii r_j = R0 * 2^j, j = 0..levels, topping out at X_max."""
    return spec.domain_radius * 2.0 ** np.arange(-levels, 1, dtype=float)


def _tail_verdict(ok: np.ndarray, margin_ok: np.ndarray, trend_ok: bool, tabulated: bool) -> str:
    """Verdict from the last three probes: strict satisfaction + margin + trend."""
    tail_ok = bool(np.all(ok[-3:]))
    tail_margin = bool(np.all(margin_ok[-3:]))
    if tail_ok and tail_margin and trend_ok:
        return "marginal" if tabulated else "pass"
    if tail_ok:
        return "marginal"
    return "fail"


def check_confinement_assumptions(
    spec: PotentialSpec, mass: float, probe: np.ndarray | None = None
) -> AssumptionReport:
    """Evaluate the (V1)-(V8) confinement conditions on a radial probe grid.

    Each condition's defining expression is evaluated at +-r for every probe
    radius r (the infimum over the annulus |x| > r is approximated by the
    worse of the two signs) and the verdict is decided from the last three
    probes: pass requires the strict inequality with margin >= 1e-6 and a
    monotone trend in the favourable direction.  Deterministic for a fixed
    probe grid.
    """
    if mass <= 0:
        raise ValueError("mass must be positive")
    if probe is None:
        probe = default_probe(spec)
    probe = np.asarray(probe, dtype=float)
    if probe.ndim != 1 or len(probe) < 4:
        raise ValueError("probe must contain at least 4 radii")
    if not np.all(np.diff(probe) > 0):
        raise ValueError("probe radii must be increasing")
    if probe[-1] > spec.domain_radius * (1 + 1e-12):
        raise ValueError("largest probe radius exceeds domain_radius")

    tab = spec.family == "tabulated"
    if tab:
        # keep probes inside the table
        probe = probe[probe <= min(spec.table_x[-1], -spec.table_x[0])]

    vp, dvp, d2vp = eval_potential_array(spec, probe)
    vm, dvm, d2vm = eval_potential_array(spec, -probe)

    report = AssumptionReport(spec=spec, mass=mass, probe=probe)

    def add(name, witness, threshold=0.0, direction="above", note=""):
        witness = np.asarray(witness, dtype=float)
        if direction == "above":
            ok = witness > threshold
            margin_ok = witness > threshold + PASS_MARGIN
            trend_ok = bool(np.all(np.diff(witness[-3:]) > -PASS_MARGIN)) or bool(
                np.all(margin_ok[-3:])
            )
        else:  # bounded: finite and not exploding
            ok = np.isfinite(witness)
            margin_ok = ok
            tail = witness[-3:]
            trend_ok = bool(np.all(np.isfinite(tail))) and (tail[-1] <= max(tail[0], threshold) + PASS_MARGIN)
        verdict = _tail_verdict(ok, margin_ok, trend_ok, tab)
        report.entries[name] = AssumptionEntry(name, witness, verdict, note)

    # V1: continuity (structural) + liminf V = +inf, certified by V increasing
    # along the probe tail on both sides.
    w_v1 = np.minimum(vp, vm)
    add("V1", w_v1, threshold=float(w_v1[0]), note="min_{+-r} V(r), must grow")

    # V2 (d=1): liminf (V - M|x|/2)/log|x| > 2.
    with np.errstate(divide="ignore", invalid="ignore"):
        w_v2 = np.minimum(vp, vm) - mass * probe / 2.0
        logs = np.log(probe)
        w_v2 = np.where(np.abs(logs) > 1e-12, w_v2 / logs, np.inf)
        # inside r < 1 the log is negative: only the tail matters, mask with +inf
        w_v2 = np.where(probe > 1.0, w_v2, np.inf)
    add("V2", w_v2, threshold=2.0, note="(V - M r/2)/log r > 2")

    # V3a: sigma_V = liminf Phi > 0 and liminf |V'| > 0,
    # with Phi = V'^2/4 - V''/2.
    phi_p = 0.25 * dvp**2 - 0.5 * d2vp
    phi_m = 0.25 * dvm**2 - 0.5 * d2vm
    w_phi = np.minimum(phi_p, phi_m)
    w_grad = np.minimum(np.abs(dvp), np.abs(dvm))
    add("V3a", np.minimum(w_phi, w_grad), threshold=0.0, note="min(Phi, |V'|) > 0 on tail")
    report.sigma_v = float(np.min(w_phi[-3:]))

    # V3b: exists theta in [0,1) with theta V'^2/4 - V''/2 >= 0 on the tail.
    with np.errstate(divide="ignore", invalid="ignore"):
        theta_req = np.maximum(2.0 * d2vp / dvp**2, 2.0 * d2vm / dvm**2)
    theta_req = np.where(np.isfinite(theta_req), theta_req, np.inf)
    theta_tail = float(np.max(np.maximum(theta_req[-3:], 0.0)))
    report.theta = theta_tail
    add("V3b", 1.0 - theta_req, threshold=0.0, note="1 - 2 V''/V'^2 > 0 (theta < 1)")

    # V4 (d=1): liminf (M - 2V')^2 - 2V'' > 0.
    w_v4 = np.minimum((mass - 2.0 * dvp) ** 2 - 2.0 * d2vp, (mass - 2.0 * dvm) ** 2 - 2.0 * d2vm)
    add("V4", w_v4, threshold=0.0, note="(M - 2V')^2 - 2V'' > 0")

    # V5: exists theta in [0,1) with
    # theta V'^4/4 - V'' V'^2/2 - V'' V'^2 >= 0 (1d: Hess:grad x grad = V'' V'^2).
    with np.errstate(divide="ignore", invalid="ignore"):
        theta5 = np.maximum(6.0 * d2vp / dvp**2, 6.0 * d2vm / dvm**2)
    theta5 = np.where(np.isfinite(theta5), theta5, np.inf)
    add("V5", 1.0 - theta5, threshold=0.0, note="quartic form sign, needs 6 V''/V'^2 < 1")

    # V6: Lambda_V = limsup (1/V'^2) * (V'^2 - V'')/2 < inf (1d reduction).
    with np.errstate(divide="ignore", invalid="ignore"):
        w_v6 = np.maximum(
            0.5 * (dvp**2 - d2vp) / dvp**2,
            0.5 * (dvm**2 - d2vm) / dvm**2,
        )
    add("V6", w_v6, direction="bounded", threshold=1.0, note="tail ratio bounded")
    report.lambda_v = float(np.max(w_v6[-3:]))

    # V7: limsup |d/dx log V'^2| = |2 V''/V'| < inf.
    with np.errstate(divide="ignore", invalid="ignore"):
        w_v7 = np.maximum(np.abs(2.0 * d2vp / dvp), np.abs(2.0 * d2vm / dvm))
    add("V7", w_v7, direction="bounded", threshold=float(np.nanmax(w_v7[:3])), note="log-gradient of V'^2 bounded")

    # V8: sup-norms |V'|^2 e^-V and |d(V'^2)/dx|^2 e^-V finite; certified by
    # the witnesses decaying along the tail.
    w8a = np.maximum(dvp**2 * np.exp(-vp), dvm**2 * np.exp(-vm))
    d_gsq_p = 2.0 * dvp * d2vp
    d_gsq_m = 2.0 * dvm * d2vm
    w8b = np.maximum(d_gsq_p**2 * np.exp(-vp), d_gsq_m**2 * np.exp(-vm))
    add("V8", np.maximum(w8a, w8b), direction="bounded", threshold=0.0, note="weighted sup-norms decay")

    return report
