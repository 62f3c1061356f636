#!/usr/bin/env python3
"""
Sphere RKMK experiment runner
Trajectories, convergence order and energy/multiplier studies for the
spherical pendulum and the spherical Kepler problem, written as CSV.

Usage:
    python cli.py simulate --system pendulum --t-end 50 --out pendulum.csv
    python cli.py order-study --stages 2,3,4 --retraction exp --t-end 5 --out order.csv
    python cli.py energy-study --stages 3 --closure concat --t-end 200 --out energy.csv
"""

import argparse
import asyncio
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values, load_dotenv

load_dotenv()

from exceptions import SphereRKMKError
from integrator import ClosureStrategy, SolverConfig, Trajectory, integrate
from oracle import reference_at
from retraction import RetractionKind, tau
from so3_core import from_tait_bryan, to_tait_bryan
from sphere import X0
from systems import LagrangianSystem, build_system
from tableau import lobatto

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
MAX_WORKERS = int(os.getenv("SPHERE_MAX_WORKERS", "4"))

# Errors below this are treated as solver floor in order fits
ORDER_FLOOR = 1e-11
INSTABILITY_SLOPE_FACTOR = 10.0
# A drift that is linear in t from Lambda(0) = 0 grows by t_end / EARLY_WINDOW
# over its early max (20x at t_end = 200), a bounded sequence by about 1x.
# The 2-stage baseline slope sits at roundoff, so the slope test alone would
# flag any bounded 4-stage oscillation.
INSTABILITY_GROWTH_FACTOR = 10.0
EARLY_WINDOW = 10.0

SYSTEM_DEFAULTS = {
    "pendulum": {
        "retraction": "cay",
        "h": 0.1,
        "ic_g": (0.0, np.pi / 3, 0.0),
        "ic_eta": (1 / 3, 0.0, 0.0),
    },
    "kepler": {
        "retraction": "exp",
        "h": 0.01,
        "ic_g": (0.940125174120388, -0.693184358892293, 3.007331043590061),
        "ic_eta": (1.534184084268850, 0.0, 0.0),
    },
}

TRAJECTORY_COLUMNS = (
    ["t"] + [f"g{i}{j}" for i in range(1, 4) for j in range(1, 4)]
    + ["theta1", "theta2", "theta3", "gimbal_lock", "eta1", "eta2", "eta3",
       "x1", "x2", "x3", "E_err", "lambda_s", "phi_max"]
)

VECTOR_PARAMS = ("gamma", "X")


@dataclass
class ExperimentConfig:
    """One experiment: system, method, initial data and output path"""
    command: str = "simulate"
    system: str = "pendulum"
    stages: Tuple[int, ...] = (2,)
    retraction: str = "cay"
    closure: str = "concat"
    h: float = 0.1
    t_end: float = 10.0
    ic_g: Tuple[float, float, float] = (0.0, np.pi / 3, 0.0)
    ic_eta: Tuple[float, float, float] = (1 / 3, 0.0, 0.0)
    ic_lambda: Optional[float] = None
    ic_format: str = "tait-bryan"
    params: Dict[str, Any] = field(default_factory=dict)
    output: str = "trajectory.csv"
    h_list: Tuple[float, ...] = (0.2, 0.1, 0.05, 0.025, 0.0125)
    h_ref: float = 1e-3
    newton_tol: Optional[float] = None
    max_iter: Optional[int] = None
    jacobian: Optional[str] = None
    solver: Optional[str] = None
    plot_script: bool = False
    max_workers: int = MAX_WORKERS

    def __post_init__(self):
        if self.system not in SYSTEM_DEFAULTS:
            raise ValueError(f"system must be pendulum or kepler, got {self.system}")
        if not self.h > 0:
            raise ValueError(f"h must be positive, got {self.h}")
        if self.t_end < 0:
            raise ValueError(f"t_end must be non-negative, got {self.t_end}")
        if not self.stages or any(s not in (2, 3, 4) for s in self.stages):
            raise ValueError(f"stages must be in (2, 3, 4), got {self.stages}")
        if self.ic_format not in ("tait-bryan", "exp"):
            raise ValueError(f"ic_format must be tait-bryan or exp, got {self.ic_format}")
        self.retraction = RetractionKind.parse(self.retraction).value
        self.closure = ClosureStrategy(self.closure).value

    @property
    def method_stages(self) -> int:
        if len(self.stages) != 1:
            raise ValueError(f"{self.command} runs a single method, got stages {self.stages}")
        return self.stages[0]

    def solver_config(self, h: Optional[float] = None) -> SolverConfig:
        return SolverConfig.from_env(
            h=h or self.h,
            retraction=self.retraction,
            newton_tol=self.newton_tol,
            max_iter=self.max_iter,
            jacobian=self.jacobian,
            solver=self.solver,
        )

    def build_system(self) -> LagrangianSystem:
        return build_system(self.system, self.params)

    def initial_configuration(self) -> np.ndarray:
        if self.ic_format == "exp":
            return tau(RetractionKind.EXPONENTIAL, np.asarray(self.ic_g, dtype=float))
        return from_tait_bryan(*self.ic_g)


def setup_logging(level: str = "INFO", log_file: Optional[str] = None):
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)


def _parse_floats(value) -> Tuple[float, ...]:
    if isinstance(value, str):
        return tuple(float(v) for v in value.replace(" ", "").split(",") if v)
    if np.isscalar(value):
        return (float(value),)
    return tuple(float(v) for v in value)


def _parse_ints(value) -> Tuple[int, ...]:
    return tuple(int(v) for v in _parse_floats(value))


def _parse_param(key: str, value) -> Any:
    if key in VECTOR_PARAMS:
        vec = _parse_floats(value)
        if len(vec) != 3:
            raise ValueError(f"Parameter {key} needs three components, got {value}")
        return np.array(vec)
    return float(value)


def _normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


CONFIG_FIELDS = {
    "system": str, "stages": _parse_ints, "retraction": str, "closure": str,
    "h": float, "t_end": float, "ic_g": _parse_floats, "ic_eta": _parse_floats,
    "ic_lambda": float, "ic_format": str, "out": str, "h_list": _parse_floats,
    "h_ref": float, "newton_tol": float, "max_iter": int, "jacobian": str, "solver": str,
    "plot_script": lambda v: str(v).lower() in ("1", "true", "yes") if isinstance(v, str) else bool(v),
    "max_workers": int,
}
IGNORED_KEYS = {"config", "command", "log_level", "log_file", "param"}


def load_config_file(path: str) -> Dict[str, Any]:
    """Flat key=value file; keys mirror the long flags"""
    if not os.path.exists(path):
        raise ValueError(f"Config file not found: {path}")
    values = {_normalize_key(k): v for k, v in dotenv_values(path).items() if v is not None}
    logger.info(f"Loaded {len(values)} settings from {path}")
    return values


def build_config(command: str, settings: Dict[str, Any]) -> ExperimentConfig:
    """
    Merge raw settings (config file entries overridden by flags) into an ExperimentConfig

    Keys that are not experiment fields are treated as system parameters.
    """
    system = str(settings.get("system", "pendulum"))
    merged: Dict[str, Any] = dict(SYSTEM_DEFAULTS.get(system, {}))
    params: Dict[str, Any] = {}

    for key, value in settings.items():
        key = _normalize_key(key)
        if value is None or key in IGNORED_KEYS:
            continue
        if key in CONFIG_FIELDS:
            merged[key] = CONFIG_FIELDS[key](value)
        else:
            params[key] = _parse_param(key, value)

    extra = settings.get("param") or []
    for item in [extra] if isinstance(extra, str) else extra:
        if "=" not in item:
            raise ValueError(f"--param expects key=value, got {item}")
        key, value = item.split("=", 1)
        params[key.strip()] = _parse_param(key.strip(), value.strip())

    if "out" in merged:
        merged["output"] = merged.pop("out")
    return ExperimentConfig(command=command, params=params, **merged)


def to_frame(traj: Trajectory, system: LagrangianSystem) -> pd.DataFrame:
    """Trajectory rows with the configuration, angles, velocity, position and diagnostics"""
    energies = traj.energies(system)
    rows = []
    for k, state in enumerate(traj.states):
        theta1, theta2, theta3, locked = to_tait_bryan(state.g)
        eta = system.momentum_inv(state.mu)
        x = state.g @ X0
        rows.append(
            [state.t] + list(state.g.ravel())
            + [theta1, theta2, theta3, locked, *eta, *x,
               energies[k] - energies[0], traj.lambda_s[k], traj.phi_max[k]]
        )
    df = pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
    if df["gimbal_lock"].any():
        logger.warning(f"Gimbal lock in {int(df['gimbal_lock'].sum())} rows: theta1/theta3 written as NaN")
    return df


def write_plot_script(csv_path: str, columns: Sequence[str]) -> str:
    """Companion matplotlib script for a written CSV"""
    script_path = f"{csv_path}.plot.py"
    y_columns = [c for c in columns if c != "t"]
    lines = [
        "import matplotlib.pyplot as plt",
        "import pandas as pd",
        "",
        f"df = pd.read_csv({csv_path!r})",
        f"columns = {y_columns!r}",
        "fig, axes = plt.subplots(len(columns), 1, sharex=True, figsize=(8, 2 * len(columns)))",
        "for ax, column in zip(axes if len(columns) > 1 else [axes], columns):",
        "    ax.plot(df['t'], df[column])",
        "    ax.set_ylabel(column)",
        "axes[-1].set_xlabel('t') if len(columns) > 1 else axes.set_xlabel('t')",
        "plt.tight_layout()",
        "plt.show()",
        "",
    ]
    with open(script_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    logger.info(f"Plot script written to {script_path}")
    return script_path


def _steps_for(t_end: float, h: float) -> int:
    return int(np.ceil(t_end / h - 1e-9)) if t_end > 0 else 0


def _run_method(config: ExperimentConfig, stages: int, h: Optional[float] = None,
                closure: Optional[str] = None) -> Tuple[Trajectory, LagrangianSystem]:
    system = config.build_system()
    solver = config.solver_config(h)
    traj = integrate(
        system, lobatto(stages), config.initial_configuration(), np.asarray(config.ic_eta, dtype=float),
        _steps_for(config.t_end, solver.h), solver, ClosureStrategy(closure or config.closure),
        lambda0=config.ic_lambda,
    )
    return traj, system


def cmd_simulate(config: ExperimentConfig) -> pd.DataFrame:
    """Integrate one trajectory and write it as CSV"""
    start = time.monotonic()
    stages = config.method_stages
    logger.info(
        f"Simulating {config.system}: s={stages}, tau={config.retraction}, "
        f"closure={config.closure}, h={config.h}, t_end={config.t_end}"
    )
    traj, system = _run_method(config, stages)
    df = to_frame(traj, system)
    df.to_csv(config.output, index=False, encoding="utf-8")
    if config.plot_script:
        write_plot_script(config.output, ["theta1", "theta2", "theta3", "E_err", "lambda_s"])

    logger.info(
        f"Wrote {len(df)} rows to {config.output} in {time.monotonic() - start:.1f}s "
        f"(max |E_err| = {df['E_err'].abs().max():.3e}, max phi = {df['phi_max'].max():.3e})"
    )
    return df


def fit_order(hs: Sequence[float], errors: Sequence[float], floor: float = ORDER_FLOOR) -> float:
    """
    Least-squares slope of log(error) against log(h), ignoring points at or below floor

    inf when every error is finite and at the floor (exact to roundoff), nan
    when a single point is left to fit.
    """
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    finite = np.isfinite(errors)
    mask = finite & (errors > floor)
    if finite.all() and not mask.any():
        return float("inf")
    if mask.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(hs[mask]), np.log(errors[mask]), 1)[0])


def drift_slope(t: Sequence[float], values: Sequence[float]) -> float:
    """Slope of a linear fit of values against t"""
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        return 0.0
    return float(np.polyfit(t, np.asarray(values, dtype=float), 1)[0])


def _order_case(config: ExperimentConfig, stages: int, h: float, reference) -> Dict[str, Any]:
    n_steps = int(round(config.t_end / h))
    if abs(n_steps * h - config.t_end) > 1e-9 * max(1.0, config.t_end):
        raise ValueError(f"t_end={config.t_end} is not a multiple of h={h}")
    traj, _ = _run_method(config, stages, h)
    final = traj.states[-1]
    error = float(np.linalg.norm(final.g - reference.g))
    # Stage multipliers carry stage-order error; their b-weighted mean over the
    # last step is pinned by the step constraint. Both systems have lambda = 0
    # on the constraint manifold, so the step mean and the endpoint value agree.
    lambda_error = abs(traj.lambda_mean[-1] - reference.lam)
    lambda_s_error = abs(traj.lambda_s[-1] - reference.lam)
    logger.info(f"s={stages} h={h}: error={error:.3e}, lambda error={lambda_error:.3e} "
                f"(last stage {lambda_s_error:.3e})")
    return {"stages": stages, "h": h, "global_error": error, "lambda_error": lambda_error,
            "lambda_s_error": lambda_s_error, "steps": n_steps,
            "newton_iterations": int(np.sum(traj.iterations))}


def print_slopes(slopes: pd.DataFrame):
    print(f"\n{'=' * 50}")
    print("CONVERGENCE ORDER")
    print(f"{'=' * 50}")
    print(f"{'Stages':<8} {'Expected':>10} {'Order':>10} {'Lambda':>10}")
    print("-" * 50)
    for _, row in slopes.iterrows():
        print(f"{int(row['stages']):<8} {int(row['expected_order']):>10} "
              f"{row['order_slope']:>10.2f} {row['lambda_slope']:>10.2f}")


async def run_order_study(config: ExperimentConfig) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Error at t_end against the reference for every (stages, h), run concurrently"""
    hs = sorted(config.h_list, reverse=True)
    if len(hs) < 4:
        raise ValueError(f"order study needs at least 4 step sizes, got {len(hs)}")

    system = config.build_system()
    reference = await asyncio.to_thread(
        reference_at, system, config.initial_configuration(), np.asarray(config.ic_eta, dtype=float),
        config.t_end, config.h_ref,
    )
    logger.info(f"Reference solution ready at t={config.t_end} (h_ref={config.h_ref})")

    semaphore = asyncio.Semaphore(max(1, config.max_workers))

    async def run_case(stages: int, h: float) -> Dict[str, Any]:
        async with semaphore:
            return await asyncio.to_thread(_order_case, config, stages, h, reference)

    results = await asyncio.gather(*[run_case(s, h) for s in config.stages for h in hs])

    df = pd.DataFrame(results).sort_values(["stages", "h"], ascending=[True, False]).reset_index(drop=True)
    slopes = pd.DataFrame([
        {
            "stages": s,
            "expected_order": 2 * s - 2,
            "order_slope": fit_order(group["h"], group["global_error"]),
            "lambda_slope": fit_order(group["h"], group["lambda_error"]),
        }
        for s, group in df.groupby("stages")
    ])
    return df, slopes


def cmd_order_study(config: ExperimentConfig) -> pd.DataFrame:
    """Convergence study; writes the error table and a companion slopes CSV"""
    start = time.monotonic()
    logger.info(f"Order study on {config.system}: stages={config.stages}, h={config.h_list}")
    df, slopes = asyncio.run(run_order_study(config))

    df.to_csv(config.output, index=False, encoding="utf-8")
    slopes_path = f"{config.output}.slopes.csv"
    slopes.to_csv(slopes_path, index=False, encoding="utf-8")
    for _, row in slopes.iterrows():
        logger.info(f"s={int(row['stages'])}: order slope {row['order_slope']:.2f}, "
                    f"lambda slope {row['lambda_slope']:.2f} (expected {int(row['expected_order'])})")
    print_slopes(slopes)

    logger.info(f"Order study written to {config.output} and {slopes_path} in {time.monotonic() - start:.1f}s")
    return df


def multiplier_growth(t: np.ndarray, lambda_s: np.ndarray, window: float = EARLY_WINDOW) -> float:
    """max |Lambda| over the run divided by its running max for t < window"""
    magnitude = np.abs(lambda_s)
    early = magnitude[t < window]
    early_max = float(early.max()) if len(early) else 0.0
    if early_max == 0.0:
        return float("inf") if magnitude.max() > 0 else 1.0
    return float(magnitude.max() / early_max)


def cmd_energy_study(config: ExperimentConfig) -> pd.DataFrame:
    """
    Energy error and multiplier drift of one method

    A 2-stage run with the same settings serves as the drift baseline. The
    multiplier sequence is flagged unstable when its drift slope exceeds
    INSTABILITY_SLOPE_FACTOR times the baseline and |Lambda| has grown more
    than INSTABILITY_GROWTH_FACTOR times over its early running max.
    """
    start = time.monotonic()
    stages = config.method_stages
    logger.info(f"Energy study on {config.system}: s={stages}, closure={config.closure}, t_end={config.t_end}")

    traj, system = _run_method(config, stages)
    t = traj.times
    energies = traj.energies(system)
    e_err = energies - energies[0]
    lambda_s = np.asarray(traj.lambda_s)

    df = pd.DataFrame({"t": t, "E_err": e_err, "lambda_s": lambda_s})
    df.to_csv(config.output, index=False, encoding="utf-8")

    if stages == 2:
        baseline_slope = drift_slope(t, np.abs(lambda_s))
    else:
        base_traj, _ = _run_method(config, 2)
        baseline_slope = drift_slope(base_traj.times, np.abs(base_traj.lambda_s))

    energy_slope = drift_slope(t, e_err)
    lambda_slope = drift_slope(t, np.abs(lambda_s))
    growth = multiplier_growth(t, lambda_s)
    unstable = bool(
        abs(lambda_slope) > INSTABILITY_SLOPE_FACTOR * max(abs(baseline_slope), np.finfo(float).eps)
        and growth > INSTABILITY_GROWTH_FACTOR
    )

    summary = pd.DataFrame([{
        "stages": stages,
        "closure": config.closure,
        "energy_drift_slope": energy_slope,
        "energy_oscillation": float(e_err.max() - e_err.min()),
        "lambda_drift_slope": lambda_slope,
        "baseline_lambda_slope": baseline_slope,
        "lambda_growth": growth,
        "unstable": unstable,
    }])
    summary_path = f"{config.output}.summary.csv"
    summary.to_csv(summary_path, index=False, encoding="utf-8")
    if config.plot_script:
        write_plot_script(config.output, ["E_err", "lambda_s"])

    if unstable:
        logger.warning(f"Multiplier drift detected: slope {lambda_slope:.3e}, growth {growth:.1f}x")
    logger.info(
        f"Energy drift slope {energy_slope:.3e}, lambda drift slope {lambda_slope:.3e} "
        f"(baseline {baseline_slope:.3e}); written to {config.output} in {time.monotonic() - start:.1f}s"
    )
    return df


COMMANDS = {
    "simulate": cmd_simulate,
    "order-study": cmd_order_study,
    "energy-study": cmd_energy_study,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Flat key=value file mirroring these flags')
    common.add_argument('--system', choices=sorted(SYSTEM_DEFAULTS), help='System (default: pendulum)')
    common.add_argument('--stages', type=str, help='Lobatto stages, 2|3|4 (comma list for order-study)')
    common.add_argument('--retraction', choices=['exp', 'cay'], help='Retraction map')
    common.add_argument('--closure', choices=[c.value for c in ClosureStrategy], help='Multiplier closure')
    common.add_argument('--h', type=float, help='Step size')
    common.add_argument('--t-end', type=float, help='Final time')
    common.add_argument('--out', type=str, help='Output CSV path')
    common.add_argument('--param', action='append', help='System parameter key=value (vectors as a,b,c)')
    common.add_argument('--ic-g', type=str, help='Initial configuration a,b,c')
    common.add_argument('--ic-eta', type=str, help='Initial body velocity a,b,c')
    common.add_argument('--ic-lambda', type=float, help='Initial multiplier (default: from the initial data)')
    common.add_argument('--ic-format', choices=['tait-bryan', 'exp'], help='Meaning of --ic-g')
    common.add_argument('--newton-tol', type=float, help='Newton residual tolerance')
    common.add_argument('--max-iter', type=int, help='Newton iteration limit')
    common.add_argument('--jacobian', choices=['analytic', 'fd'], help='Newton Jacobian')
    common.add_argument('--solver', choices=['newton', 'root'], help='Stage solver: damped Newton or scipy.optimize.root')
    common.add_argument('--h-list', type=str, help='Step sizes for order-study, comma separated')
    common.add_argument('--h-ref', type=float, help='Reference solver step for order-study')
    common.add_argument('--max-workers', type=int, help='Concurrent order-study cases')
    common.add_argument('--plot-script', action='store_true', default=None, help='Also write a plot script')
    common.add_argument('--log-level', type=str, default=os.getenv("SPHERE_LOG_LEVEL", "INFO"))
    common.add_argument('--log-file', type=str, help='Also log to this file')

    parser = argparse.ArgumentParser(description='Nonholonomic RKMK integrators on the sphere')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('simulate', parents=[common], help='Integrate one trajectory')
    sub.add_parser('order-study', parents=[common], help='Convergence order against a reference solution')
    sub.add_parser('energy-study', parents=[common], help='Energy error and multiplier drift')
    return parser


def main(argv: Optional[List[str]] = None) -> bool:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_file)

    try:
        settings: Dict[str, Any] = {}
        if args.config:
            settings.update(load_config_file(args.config))
        settings.update({k: v for k, v in vars(args).items() if v is not None})
        config = build_config(args.command, settings)
        COMMANDS[args.command](config)
        return True

    except (SphereRKMKError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return False


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
