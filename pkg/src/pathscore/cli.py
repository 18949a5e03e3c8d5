"""Experiment runner: every estimator and oracle behind reproducible,
configured runs with CSV and report outputs.

Configs are flat ``key = value`` text (see CONFIG_KEYS below for the schema);
every run writes its resolved config next to its outputs, a machine-readable
report.json, and prints a human summary.  Identical config + seed give
byte-identical CSVs at any --threads setting.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .discrete import euler_chain_1d
from .estimate import (
    BinGrid,
    bin_and_average_arrays,
    linear_response_deviation_arrays,
    write_deviations_csv,
    write_scores_csv,
)
from .model import (
    InitialDistribution,
    SystemModel,
    cubic_sde_model,
    gaussian_initial,
    gaussian_kernel,
    linear_sde_model,
    lorenz96_model,
    point_mass_initial,
    validate_derivatives,
)
from .oracle import (
    gaussian_grid_density,
    grid_score,
    make_grid,
    propagate_density,
    quadrature_conditional_expectation,
)
from . import discrete as disc
from .paths import SimulationPlan
from .runner import ESTIMATORS, run_estimator
from .schedules import (
    Schedule,
    beta_linear,
    constant_schedule,
    reciprocal_step_schedule,
    safe_alpha_estimate,
)


@dataclass(frozen=True)
class RunConfig:
    """Resolved experiment configuration; round-trips losslessly as key = value text."""

    experiment: str = "custom"
    model: str = "cubic"
    diffusion: str = "unit"
    rate: float = 1.0
    noise: float = 1.0
    damping: float = 0.01
    base_diffusion: float = 2.0
    dim: int = 1
    init: str = "gaussian"
    init_mean: float = 0.0
    init_variance: float = 1.0
    init_point: str = "1"
    total_time: float = 3.0
    dt: float = 0.002
    n_paths: int = 10000
    seed: int = 12345
    estimator: str = "sde-kernel"
    alpha: str = "const:10"
    beta: str = "linear"
    alpha_probes: int = 32
    bin_lo: float = -1.8
    bin_hi: float = 1.8
    bin_count: int = 9
    bin_coordinate: int = 0
    paths_per_bin: int = 0
    observable: str = "mean"
    direction: str = "ones"
    explosion_cap: float = 1e12
    threads: int = 1
    dump_paths: bool = False
    out_dir: str = "runs/out"

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)!r}")
        return "\n".join(lines) + "\n"


CONFIG_KEYS = {f.name: f.type for f in fields(RunConfig)}
_FIELD_TYPES = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    """Parse flat key = value lines; reports every offending key at once."""
    cfg = base or RunConfig()
    errors = []
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw!r}")
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _FIELD_TYPES:
            errors.append(f"line {lineno}: unknown key '{key}'")
            continue
        typ = _FIELD_TYPES[key]
        try:
            if typ is str:
                updates[key] = value.strip("'\"")
            elif typ is bool:
                updates[key] = value.lower() in ("1", "true", "yes")
            else:
                updates[key] = typ(value.strip("'\""))
        except ValueError:
            errors.append(f"line {lineno}: key '{key}' expects {typ.__name__}, got {value!r}")
    if errors:
        raise ConfigError("config errors:\n  " + "\n  ".join(errors))
    return replace(cfg, **updates)


def load_config(path, base: RunConfig = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def _build_model(cfg: RunConfig) -> SystemModel:
    if cfg.model == "cubic":
        return cubic_sde_model(diffusion=cfg.diffusion)
    if cfg.model == "linear-ou":
        return linear_sde_model(rate=cfg.rate, noise=cfg.noise, dim=cfg.dim)
    if cfg.model == "lorenz96":
        return lorenz96_model(damping=cfg.damping, base_diffusion=cfg.base_diffusion, dim=cfg.dim)
    raise ConfigError(f"unknown model '{cfg.model}' (cubic | linear-ou | lorenz96)")


def _build_init(cfg: RunConfig, dim: int) -> InitialDistribution:
    if cfg.init == "gaussian":
        return gaussian_initial(dim, mean=cfg.init_mean, variance=cfg.init_variance)
    if cfg.init == "point":
        vals = [float(v) for v in cfg.init_point.split(",")]
        x0 = np.full(dim, vals[0]) if len(vals) == 1 else np.asarray(vals)
        if x0.shape != (dim,):
            raise ConfigError(f"init_point has {len(vals)} entries, model dim is {dim}")
        return point_mass_initial(x0)
    raise ConfigError(f"unknown init '{cfg.init}' (gaussian | point)")


def _build_alpha(cfg: RunConfig, model, plan) -> Schedule:
    spec = cfg.alpha
    if spec.startswith("const:"):
        return constant_schedule(float(spec.split(":", 1)[1]))
    if spec.startswith("auto"):
        probes = cfg.alpha_probes
        if ":" in spec:
            probes = int(spec.split(":", 1)[1])
        value = safe_alpha_estimate(model, plan, probes, cfg.seed + 1)
        return constant_schedule(value)
    if spec == "reciprocal":
        return reciprocal_step_schedule()
    raise ConfigError(f"unknown alpha spec '{cfg.alpha}' (const:X | auto[:probes] | reciprocal)")


def _build_beta(cfg: RunConfig, plan) -> Schedule:
    if cfg.beta == "linear":
        return beta_linear(plan.total_time)
    if cfg.beta.startswith("const:"):
        return constant_schedule(float(cfg.beta.split(":", 1)[1]))
    raise ConfigError(f"unknown beta spec '{cfg.beta}' (linear | const:X)")


_OBSERVABLES = {"mean": lambda x: float(np.mean(x))}


@dataclass
class RunReport:
    config: RunConfig
    n_valid: int
    n_divergent: int
    n_capped: int
    wall_time: float
    summary: dict


def run(cfg: RunConfig) -> RunReport:
    """Execute one configured experiment: simulate, fold, aggregate, write."""
    t0 = time.perf_counter()
    model = _build_model(cfg)
    init = _build_init(cfg, model.dim)
    plan = SimulationPlan.from_dt(cfg.total_time, cfg.dt, cfg.n_paths, cfg.seed)
    if cfg.estimator not in ESTIMATORS:
        raise ConfigError(f"unknown estimator '{cfg.estimator}' (one of {', '.join(ESTIMATORS)})")
    alpha = _build_alpha(cfg, model, plan) if "divker" in cfg.estimator and "noh0" not in cfg.estimator else None
    beta = _build_beta(cfg, plan) if "kernel" in cfg.estimator else None
    result = run_estimator(
        cfg.estimator,
        model,
        plan,
        init,
        alpha=alpha,
        beta=beta,
        explosion_cap=cfg.explosion_cap,
        threads=cfg.threads,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    terminal, nus, ids = result.valid_pairs()
    summary: dict = {
        "experiment": cfg.experiment,
        "estimator": cfg.estimator,
        "model": model.name,
        "n_paths": cfg.n_paths,
        "n_valid": result.n_valid,
        "n_divergent": result.n_divergent,
        "n_capped": result.n_capped,
        "seed": cfg.seed,
        "max_abs_nu": float(np.max(result.max_abs_nu)),
    }
    if cfg.experiment == "lorenz96":
        if cfg.observable not in _OBSERVABLES:
            raise ConfigError(f"unknown observable '{cfg.observable}' (one of {', '.join(_OBSERVABLES)})")
        if cfg.direction != "ones":
            raise ConfigError(f"unknown direction '{cfg.direction}' (only 'ones' is built in)")
        dev = linear_response_deviation_arrays(
            terminal, nus, ids, _OBSERVABLES[cfg.observable], np.ones(model.dim)
        )
        write_deviations_csv(out / "deviations.csv", dev)
        summary["deviation_mean"] = dev.mean
        summary["deviation_se"] = dev.se
    else:
        grid = BinGrid(cfg.bin_lo, cfg.bin_hi, cfg.bin_count, coordinate=cfg.bin_coordinate)
        coord = terminal[:, grid.coordinate]
        if cfg.paths_per_bin > 0:
            coord, nus, ids = _cap_paths_per_bin(coord, nus, ids, grid, cfg.paths_per_bin)
        binned = bin_and_average_arrays(coord, nus, grid, path_ids=ids)
        write_scores_csv(out / "scores.csv", binned)
        summary["bins"] = [
            {
                "center": e.bin_center,
                "count": e.count,
                "log_density": e.log_density,
                "mean_nu": [float(v) for v in np.atleast_1d(e.mean_nu)],
                "se_nu": [float(v) for v in np.atleast_1d(e.se_nu)],
            }
            for e in binned.estimates
        ]
        summary["overflow"] = binned.overflow
    if cfg.dump_paths:
        from .paths import dump_paths as _dump, simulate_sde_batch

        _dump(simulate_sde_batch(model, init, plan), out / "paths.csv")
    wall = time.perf_counter() - t0
    summary["wall_time_s"] = wall
    (out / "config.txt").write_text(cfg.to_text())
    (out / "report.json").write_text(json.dumps(summary, indent=2, allow_nan=True) + "\n")
    return RunReport(
        config=cfg,
        n_valid=result.n_valid,
        n_divergent=result.n_divergent,
        n_capped=result.n_capped,
        wall_time=wall,
        summary=summary,
    )


def _cap_paths_per_bin(coord, nus, ids, grid: BinGrid, cap: int):
    """Keep at most ``cap`` paths per bin (ascending path id), mimicking
    figure-style averaging over a handful of paths per cell."""
    order = np.argsort(ids, kind="stable")
    coord, nus, ids = coord[order], nus[order], ids[order]
    idx = np.floor((coord - grid.lo) / grid.width).astype(int)
    keep = np.zeros(len(coord), dtype=bool)
    for i in range(grid.n_bins):
        sel = np.nonzero((coord >= grid.lo) & (coord < grid.hi) & (idx == i))[0]
        keep[sel[:cap]] = True
    keep |= ~((coord >= grid.lo) & (coord < grid.hi))
    return coord[keep], nus[keep], ids[keep]


def _print_human_summary(report: RunReport) -> None:
    s = report.summary
    print(f"experiment {s['experiment']}: estimator={s['estimator']} model={s['model']}")
    print(
        f"  paths={s['n_paths']} valid={s['n_valid']} divergent={s['n_divergent']} "
        f"capped={s['n_capped']} max|nu|={s['max_abs_nu']:.3e} wall={s['wall_time_s']:.2f}s"
    )
    if "deviation_mean" in s:
        print(f"  deviation mean = {s['deviation_mean']:.5f} +- {s['deviation_se']:.5f} (SE)")
    elif "bins" in s:
        print("  bin_center  count  log_density  mean_nu_1  se_nu_1")
        for b in s["bins"]:
            print(
                f"  {b['center']:+9.3f}  {b['count']:5d}  {b['log_density']:+11.4f}"
                f"  {b['mean_nu'][0]:+9.4f}  {b['se_nu'][0]:9.4f}"
            )


# ---------------------------------------------------------------------------
# validate / derivcheck harnesses
# ---------------------------------------------------------------------------


def _oracle_identity_suite(spacing: float = 2e-3, points=(-1.5, -0.6, 0.0, 0.9, 1.8)) -> list:
    """One-step quadrature identities on the 1-D benchmark chains.

    Each entry: (name, max |E_quadrature[estimator | x1] - oracle score|).
    """
    results = []
    grid = make_grid(-8.0, 8.0, spacing)
    h0 = gaussian_grid_density(grid)
    init_score = lambda x: -x
    configs = [
        ("map0.9-sigma1", disc.linear_chain(0.9), gaussian_kernel(1, 1.0)),
        ("euler-cubic-sigma1", euler_chain_1d(cubic_sde_model("unit"), 0.002), gaussian_kernel(1, 0.002)),
        ("euler-cubic-sigma2", euler_chain_1d(cubic_sde_model("bump"), 0.002), gaussian_kernel(1, 0.002)),
    ]
    for name, chain, kernel in configs:
        h1 = propagate_density(h0, chain, kernel, 1)
        weights = {
            "kernel": lambda x0, x1: disc.one_step_kernel_score_term(chain, kernel, x0, x1),
            "divergence": lambda x0, x1: disc.one_step_divergence_score_term(chain, x0, x1, init_score),
            "divker(0.3)": lambda x0, x1: disc.one_step_divker_score_term(
                chain, kernel, x0, x1, init_score, 0.3
            ),
        }
        for wname, w in weights.items():
            worst = 0.0
            for x1 in points:
                est = quadrature_conditional_expectation(chain, kernel, h0, w, x1)
                truth = grid_score(h1, x1)
                worst = max(worst, abs(est - truth))
            results.append((f"{name}/{wname}", worst))
    return results


def cmd_validate(args) -> int:
    results = _oracle_identity_suite()
    tol = 1e-4
    failed = False
    for name, err in results:
        ok = err <= tol
        failed |= not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:32s} |error| = {err:.3e} (tol {tol:g})")
    return 1 if failed else 0


def cmd_derivcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    shipped = [
        linear_sde_model(),
        cubic_sde_model("unit"),
        cubic_sde_model("bump"),
        lorenz96_model(),
    ]
    failed = False
    for model in shipped:
        pts = rng.uniform(-2.0, 2.0, size=(args.points, model.dim))
        report = validate_derivatives(model, pts, step=1e-5)
        status = "PASS" if report.passed else "FAIL"
        failed |= not report.passed
        print(f"{status}  {model.name}")
        for line in str(report).splitlines():
            print(f"      {line}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------

_EXPERIMENT_DEFAULTS = {
    "ou-kernel": dict(
        experiment="ou-kernel", model="cubic", diffusion="unit", estimator="sde-kernel",
        beta="linear", total_time=3.0,
    ),
    "ou-div": dict(
        experiment="ou-div", model="cubic", diffusion="bump", estimator="sde-div",
        total_time=0.1,
    ),
    "ou-divker": dict(
        experiment="ou-divker", model="cubic", diffusion="bump", estimator="sde-divker",
        alpha="const:10", total_time=3.0,
    ),
    "ou-divker-noh0": dict(
        experiment="ou-divker-noh0", model="cubic", diffusion="bump",
        estimator="sde-divker-noh0", total_time=3.0,
    ),
    "lorenz96": dict(
        experiment="lorenz96", model="lorenz96", dim=40, init="point", init_point="1",
        estimator="sde-divker-noh0", total_time=0.3, n_paths=10000,
    ),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file (applied before flags)")
    p.add_argument("--seed", type=int, help="64-bit master seed")
    p.add_argument("--paths", type=int, help="number of Monte-Carlo paths")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (speed only, never results)")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--total-time", type=float, help="time horizon T")
    p.add_argument("--alpha", help="alpha schedule: const:X | auto[:probes] | reciprocal")
    p.add_argument("--beta", help="beta schedule: linear | const:X")
    p.add_argument("--estimator", choices=ESTIMATORS, help="override the estimator")
    p.add_argument("--paths-per-bin", type=int, help="cap paths per bin (0 = all)")


def _cfg_from_args(name: str, args) -> RunConfig:
    cfg = RunConfig(**_EXPERIMENT_DEFAULTS[name])
    if args.config:
        cfg = load_config(args.config, base=cfg)
    overrides = {}
    for flag, key in (
        ("seed", "seed"), ("paths", "n_paths"), ("out", "out_dir"), ("threads", "threads"),
        ("dt", "dt"), ("total_time", "total_time"), ("alpha", "alpha"), ("beta", "beta"),
        ("estimator", "estimator"), ("paths_per_bin", "paths_per_bin"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pathscore",
        description="Pathwise Monte-Carlo score estimation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _EXPERIMENT_DEFAULTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        _add_run_flags(p)
    pv = sub.add_parser("validate", help="run the oracle identity suite")
    pd = sub.add_parser("derivcheck", help="finite-difference check of shipped model derivatives")
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--points", type=int, default=20)
    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "derivcheck":
            return cmd_derivcheck(args)
        cfg = _cfg_from_args(args.command, args)
        report = run(cfg)
        _print_human_summary(report)
        return 0
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
