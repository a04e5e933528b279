"""Experiment orchestration: config ingestion, pipelines, fits, reports.

A run is a fixed pipeline: assumption check -> Poisson-Boltzmann solve ->
operator build -> constant estimation -> rate certification -> simulation ->
log-linear rate fit -> verdicts.  Every artifact lands in the output
directory as CSV/JSON so each verdict can be recomputed from files alone.
"""

from __future__ import annotations

import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import rates
from .discretization import HermiteBasis, OperatorSet
from .evolution import CSV_HEADER, SimulationSetup, cfl_limit, simulate
from .potential import PotentialSpec, check_confinement_assumptions
from .steady_state import Grid1D, SteadyState, save_steady_state, solve_poisson_boltzmann

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "FitResult",
    "RunReport",
    "load_config",
    "fit_decay_rate",
    "run_experiment",
    "eps_sweep",
]


class ConfigError(ValueError):
    """Schema violation with the offending section.key in the message."""


class FitError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    potential: PotentialSpec
    mass: float
    grid_n: int
    x_max: float
    k_modes: int
    mode: str
    eps: float
    eps_list: list[float] = field(default_factory=list)
    delta_policy: str = "half_delta_star"
    explicit_delta: float | None = None
    cm_method: str = "direct_operator_norm"
    dt: float | None = None
    cfl: float = 0.4
    t_end: float = 20.0
    record_every: int = 10
    initial: dict = field(default_factory=dict)
    amplitude: float = 1e-2
    seed: int = 0
    out_dir: str = "out"
    pb_tol: float = 1e-10
    fit_window: tuple[float, float] = (0.10, 0.05)


def _get(table, section, key, kind, default=None, required=False):
    sec = table.get(section, {})
    if key not in sec:
        if required:
            raise ConfigError(f"[{section}].{key}: missing required key")
        return default
    val = sec[key]
    if kind is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, kind):
        raise ConfigError(f"[{section}].{key}: expected {kind.__name__}, got {type(val).__name__}")
    return val


def load_config(path: str) -> ExperimentConfig:
    """Parse and schema-check a TOML experiment file."""
    with open(path, "rb") as fh:
        table = tomllib.load(fh)

    family = _get(table, "potential", "family", str, "power_law")
    radius = _get(table, "potential", "domain_radius", float, required=True)
    if family == "power_law":
        alpha = _get(table, "potential", "alpha", float, required=True)
        spec = PotentialSpec(family="power_law", domain_radius=radius, alpha=alpha)
    elif family == "tabulated":
        table_path = _get(table, "potential", "table_path", str, required=True)
        if not os.path.isabs(table_path):
            table_path = os.path.join(os.path.dirname(os.path.abspath(path)), table_path)
        data = np.loadtxt(table_path, comments="#")
        spec = PotentialSpec(
            family="tabulated", domain_radius=radius, table_x=data[:, 0], table_v=data[:, 1]
        )
    else:
        raise ConfigError(f"[potential].family: unknown family {family!r}")

    mass = _get(table, "model", "mass", float, required=True)
    if mass <= 0:
        raise ConfigError("[model].mass: must be positive")
    n = _get(table, "grid", "n", int, required=True)
    if n < 16 or n % 2:
        raise ConfigError("[grid].n: must be an even integer >= 16")
    x_max = _get(table, "grid", "x_max", float, radius)
    if not 0 < x_max <= radius:
        raise ConfigError("[grid].x_max: must lie in (0, domain_radius]")
    k = _get(table, "basis", "k", int, required=True)
    if k < 4:
        raise ConfigError("[basis].k: need at least 4 Hermite modes")

    mode = _get(table, "simulation", "mode", str, "linear")
    if mode not in ("linear", "parabolic", "nonlinear"):
        raise ConfigError(f"[simulation].mode: unknown mode {mode!r}")
    eps = _get(table, "simulation", "eps", float, 1.0)
    if eps <= 0:
        raise ConfigError("[simulation].eps: must be positive")
    eps_list = table.get("simulation", {}).get("eps_list", [])
    if eps_list:
        if not all(isinstance(e, (int, float)) and e > 0 for e in eps_list):
            raise ConfigError("[simulation].eps_list: entries must be positive numbers")
        eps_list = [float(e) for e in eps_list]
        if sorted(eps_list, reverse=True) != eps_list:
            raise ConfigError("[simulation].eps_list: must be sorted descending")
    t_end = _get(table, "simulation", "t_end", float, 20.0)
    dt = _get(table, "simulation", "dt", float)
    cfl = _get(table, "simulation", "cfl", float, 0.4)
    record_every = _get(table, "simulation", "record_every", int, 10)
    if record_every < 1:
        raise ConfigError("[simulation].record_every: must be >= 1")
    seed = _get(table, "simulation", "seed", int, 0)

    policy = _get(table, "rates", "delta_policy", str, "half_delta_star")
    if policy not in ("half_delta_star", "optimize", "explicit"):
        raise ConfigError(f"[rates].delta_policy: unknown policy {policy!r}")
    explicit = _get(table, "rates", "delta", float)
    if policy == "explicit" and explicit is None:
        raise ConfigError("[rates].delta: required when delta_policy = 'explicit'")
    cm_method = _get(table, "rates", "cm_method", str, "direct_operator_norm")
    if cm_method not in ("direct_operator_norm", "paper_chain"):
        raise ConfigError(f"[rates].cm_method: unknown method {cm_method!r}")

    initial = dict(table.get("initial", {}))
    amplitude = float(initial.pop("amplitude", 1e-2))
    out_dir = _get(table, "output", "directory", str, "out")

    return ExperimentConfig(
        potential=spec,
        mass=mass,
        grid_n=n,
        x_max=x_max,
        k_modes=k,
        mode=mode,
        eps=eps,
        eps_list=eps_list,
        delta_policy=policy,
        explicit_delta=explicit,
        cm_method=cm_method,
        dt=dt,
        cfl=cfl,
        t_end=t_end,
        record_every=record_every,
        initial=initial,
        amplitude=amplitude,
        seed=seed,
        out_dir=out_dir,
    )


@dataclass
class FitResult:
    rate: float
    intercept: float
    r_squared: float


def fit_decay_rate(times, values) -> FitResult:
    """Least-squares line through (t, log value); rate is minus the slope.

    Needs >= 10 strictly positive samples.  A constant series fits rate 0
    with undefined (NaN) r^2.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.size < 10:
        raise FitError(f"need at least 10 points, got {t.size}")
    if np.any(v <= 0):
        raise FitError("decay fit requires strictly positive values")
    if np.ptp(t) == 0:
        raise FitError("degenerate time window")
    y = np.log(v)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    total = y - np.mean(y)
    ss_tot = float(total @ total)
    if ss_tot == 0.0:
        return FitResult(rate=-float(slope), intercept=float(intercept), r_squared=math.nan)
    r2 = 1.0 - float(resid @ resid) / ss_tot
    return FitResult(rate=-float(slope), intercept=float(intercept), r_squared=r2)


def fit_window(records, lo_frac=0.10, hi_frac=0.05):
    """Drop the initial transient and the terminal floor before fitting."""
    n = len(records)
    lo = int(math.floor(lo_frac * n))
    hi = n - int(math.floor(hi_frac * n))
    return records[lo:hi]


@dataclass
class RunReport:
    constants: dict
    eps_scaling: list[dict]
    chain: dict
    fits: dict
    verdicts: dict
    manifest: list[str]
    failed_stage: str | None = None

    @property
    def all_pass(self) -> bool:
        return self.failed_stage is None and all(self.verdicts.values())

    def write(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "constants": self.constants,
                    "eps_scaling": self.eps_scaling,
                    "chain": self.chain,
                    "fits": self.fits,
                    "verdicts": self.verdicts,
                    "manifest": self.manifest,
                    "failed_stage": self.failed_stage,
                    "all_pass": self.all_pass,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


GNUPLOT_TEMPLATE = """# gnuplot template: decay curves from the emitted CSVs
set datafile separator ','
set logscale y
set xlabel 't'
set ylabel 'H_delta'
plot 'series_linear.csv' using 1:3 with lines title 'H_delta'
"""


def write_series(path: str, records) -> None:
    rows = np.array([r.as_csv_row() for r in records], dtype=float)
    np.savetxt(path, rows, delimiter=",", header=CSV_HEADER, comments="", fmt="%.17e")


def _prepare(config: ExperimentConfig, out_dir: str, force: bool):
    """Shared pipeline head: assumptions, steady state, operators, constants."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = []
    report_assumptions = check_confinement_assumptions(config.potential, config.mass)
    path = os.path.join(out_dir, "assumptions.json")
    with open(path, "w") as fh:
        fh.write(report_assumptions.to_json())
        fh.write("\n")
    manifest.append(path)
    if not report_assumptions.admissible and not force:
        raise RuntimeError(
            "confinement assumptions failed: "
            + ", ".join(
                f"{k}={e.verdict}" for k, e in report_assumptions.entries.items() if e.verdict == "fail"
            )
        )
    grid = Grid1D.make(config.grid_n, config.x_max)
    steady = solve_poisson_boltzmann(config.potential, config.mass, grid, tol=config.pb_tol)
    path = os.path.join(out_dir, "steady_state.csv")
    save_steady_state(steady, path)
    manifest += [path, os.path.join(out_dir, "steady_state.json")]
    basis = HermiteBasis.make(config.k_modes)
    ops = OperatorSet(steady, basis)
    constants = rates.certify(
        steady,
        ops,
        cm_method=config.cm_method,
        delta_policy=config.delta_policy,
        explicit_delta=config.explicit_delta,
    )
    chain = rates.estimate_chain_constants(steady)
    scan = rates.verify_rate_by_scan(
        constants.lambda_m, constants.lambda_M, constants.c_m, constants.chosen_delta, constants.decay_rate
    )
    rate_payload = {
        **constants.as_dict(),
        "measured_macro_gap": rates.measured_macroscopic_gap(steady),
        "scan": scan,
        "symmetrization_defect": ops.antisymmetry_defect(),
    }
    path = os.path.join(out_dir, "rates.json")
    with open(path, "w") as fh:
        json.dump({"constants": rate_payload, "chain": chain.as_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.append(path)
    return report_assumptions, steady, basis, ops, constants, chain, scan, manifest


def _setup_for(config: ExperimentConfig, steady, basis, ops, constants, eps: float, mode: str):
    dt = config.dt if config.dt is not None else 0.9 * cfl_limit(ops, eps, config.cfl)
    return SimulationSetup(
        steady=steady,
        basis=basis,
        mode=mode,
        eps=eps,
        dt=dt,
        t_end=config.t_end,
        record_every=config.record_every,
        delta=constants.chosen_delta,
        initial=config.initial,
        amplitude=config.amplitude,
        seed=config.seed,
    )


def _monotone(values, tol=1e-8) -> bool:
    v = np.asarray(values)
    return bool(np.all(v[1:] <= v[:-1] * (1.0 + tol)))


def run_experiment(config_path: str, out_dir: str | None = None, force: bool = False) -> RunReport:
    """Full single-run pipeline; exit semantics: all verdicts must pass."""
    config = load_config(config_path) if isinstance(config_path, str) else config_path
    out_dir = out_dir or config.out_dir
    try:
        (report_assumptions, steady, basis, ops, constants, chain, scan, manifest) = _prepare(
            config, out_dir, force
        )
    except Exception as exc:
        report = RunReport({}, [], {}, {}, {"pipeline": False}, [], failed_stage=f"prepare: {exc}")
        os.makedirs(out_dir, exist_ok=True)
        report.write(os.path.join(out_dir, "report.json"))
        return report

    verdicts = {
        "assumptions": report_assumptions.admissible,
        "scan_nonnegative": scan["nonnegative_at_rate"],
        "scan_tight": scan["negative_above_rate"],
        "steady_residual": steady.residual <= max(1e-6, 100.0 * config.pb_tol),
    }
    fits = {}
    setup = _setup_for(config, steady, basis, ops, constants, config.eps, config.mode)
    try:
        records = simulate(setup)
    except Exception as exc:
        report = RunReport(
            constants.as_dict(), [], chain.as_dict(), {}, verdicts, manifest, failed_stage=f"simulate: {exc}"
        )
        report.write(os.path.join(out_dir, "report.json"))
        return report
    series_path = os.path.join(out_dir, f"series_{config.mode}.csv")
    write_series(series_path, records)
    manifest.append(series_path)

    window = fit_window(records, *config.fit_window)
    fit = fit_decay_rate([r.t for r in window], [r.H_delta for r in window])
    fits["lambda_fit"] = fit.rate
    fits["intercept"] = fit.intercept
    fits["r_squared"] = fit.r_squared
    fits["lambda_certified"] = constants.decay_rate

    h_vals = np.array([r.H_delta for r in records])
    verdicts["H_delta_monotone"] = _monotone(h_vals)
    verdicts["rate_at_least_certified"] = fit.rate >= 0.9 * constants.decay_rate
    # pointwise hypocoercive envelope |h(t)|^2 <= (2+d)/(2-d) |h0|^2 e^{-lambda_fit t}
    d = constants.chosen_delta
    norm0 = records[0].norm_sq
    envelope = (2.0 + d) / (2.0 - d) * norm0 * np.exp(-fit.rate * np.array([r.t for r in records]))
    verdicts["hypoco_envelope"] = bool(
        np.all(np.array([r.norm_sq for r in records]) <= envelope * (1.0 + 1e-9))
    )
    verdicts["mass_conserved"] = bool(max(r.mass_defect for r in records) <= 1e-9)

    if config.mode == "nonlinear":
        fe = np.array([r.free_energy for r in records])
        verdicts["free_energy_monotone"] = _monotone(fe)
        ck = np.array([r.psi_prime_sup**2 <= 4.0 * config.mass * r.free_energy * (1 + 1e-9) for r in records])
        verdicts["csiszar_kullback"] = bool(np.all(ck))
        lin_setup = _setup_for(config, steady, basis, ops, constants, 1.0, "linear")
        lin_records = simulate(lin_setup)
        lin_path = os.path.join(out_dir, "series_linear.csv")
        write_series(lin_path, lin_records)
        manifest.append(lin_path)
        lin_window = fit_window(lin_records, *config.fit_window)
        lin_fit = fit_decay_rate([r.t for r in lin_window], [r.H_delta for r in lin_window])
        fits["lambda_fit_linear"] = lin_fit.rate
        verdicts["nonlinear_matches_linear"] = abs(fit.rate - lin_fit.rate) <= 0.05 * lin_fit.rate

    gp = os.path.join(out_dir, "plot.gp")
    with open(gp, "w") as fh:
        fh.write(GNUPLOT_TEMPLATE)
    manifest.append(gp)
    report = RunReport(
        constants={
            **constants.as_dict(),
            "measured_macro_gap": rates.measured_macroscopic_gap(steady),
            "scan": scan,
        },
        eps_scaling=[rates.compute_eps_scaled(constants.lambda_m, constants.lambda_M, constants.c_m, config.eps).as_dict()],
        chain=chain.as_dict(),
        fits=fits,
        verdicts=verdicts,
        manifest=manifest,
    )
    report.write(os.path.join(out_dir, "report.json"))
    return report


def eps_sweep(
    config_path: str, out_dir: str | None = None, force: bool = False, workers: int = 1
) -> RunReport:
    """One simulation per eps in eps_list, same steady state and operators.

    Emits eps_sweep.csv with columns eps, delta_eps, zeta, eta, lambda_fit;
    the sweep verdict requires min lambda_fit >= 0.8 eta.
    """
    config = load_config(config_path) if isinstance(config_path, str) else config_path
    if not config.eps_list:
        raise ConfigError("[simulation].eps_list: required for an eps sweep")
    out_dir = out_dir or config.out_dir
    (report_assumptions, steady, basis, ops, constants, chain, scan, manifest) = _prepare(
        config, out_dir, force
    )

    def run_one(eps: float):
        scaling = rates.compute_eps_scaled(constants.lambda_m, constants.lambda_M, constants.c_m, eps)
        setup = _setup_for(config, steady, basis, ops, constants, eps, "parabolic")
        setup.delta = min(scaling.delta_eps, scaling.zeta * eps)
        try:
            records = simulate(setup)
            window = fit_window(records, *config.fit_window)
            fit = fit_decay_rate([r.t for r in window], [r.H_delta for r in window])
            return eps, scaling, fit.rate, records, None
        except Exception as exc:  # per-eps failures recorded, sweep continues
            return eps, scaling, math.nan, [], str(exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_one, config.eps_list))
    else:
        results = [run_one(e) for e in config.eps_list]

    rows, errors, fits = [], {}, {}
    eta = math.nan
    for eps, scaling, lam_fit, records, err in results:
        eta = scaling.eta
        rows.append([eps, scaling.delta_eps, scaling.zeta, scaling.eta, lam_fit])
        if records:
            path = os.path.join(out_dir, f"series_parabolic_eps{eps:g}.csv")
            write_series(path, records)
            manifest.append(path)
        if err:
            errors[f"eps={eps:g}"] = err
    sweep_path = os.path.join(out_dir, "eps_sweep.csv")
    np.savetxt(
        sweep_path,
        np.array(rows, dtype=float),
        delimiter=",",
        header="eps,delta_eps,zeta,eta,lambda_fit",
        comments="",
        fmt="%.17e",
    )
    manifest.append(sweep_path)

    lam_fits = np.array([r[-1] for r in rows])
    finite = lam_fits[np.isfinite(lam_fits)]
    verdicts = {
        "assumptions": report_assumptions.admissible,
        "all_eps_completed": not errors,
        "uniform_rate": bool(finite.size == len(rows) and np.all(finite >= 0.8 * eta)),
        "rate_spread": bool(finite.size > 0 and np.max(finite) <= 3.0 * np.min(finite)),
    }
    fits["lambda_fit_by_eps"] = {f"{r[0]:g}": r[-1] for r in rows}
    fits["eta"] = eta
    report = RunReport(
        constants=constants.as_dict(),
        eps_scaling=[s.as_dict() for _, s, _, _, _ in results],
        chain=chain.as_dict(),
        fits=fits,
        verdicts=verdicts,
        manifest=manifest,
        failed_stage=None if not errors else f"sweep: {errors}",
    )
    report.write(os.path.join(out_dir, "report.json"))
    return report
