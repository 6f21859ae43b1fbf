"""Configuration-driven experiment runner.

Config grammar (documented in the README): '#'-comments, section headers in
brackets, and 'key = value' lines; vectors and matrices are space-separated
row-major float lists.  Validation failures exit with status 2 and a
file:line message; numerical failures during a run exit with status 3.
"""
from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .errors import NumericalFailure
from .flows import beta_defects, limit_flow, solve_mean_ode, truncated_flow
from .model import linear_gaussian, sine_perturbed, validate_model
from .parametrix import Grid1D, ParametrixContext, majorant_scriptQ, series_p, series_q
from .parametrix.grids import gaussian_g
from .reporting import (Manifest, config_hash, svg_plot, write_binary_cache,
                        write_csv, write_paths_csv)
from .schedules import StepSchedule, time_grid
from .simulate import sample_V_terminal, simulate_bundle
from .truncation import TruncationParams


class ConfigError(Exception):
    pass


@dataclass
class Config:
    path: str
    text: str
    values: dict            # (section, key) -> (value string, line number)

    def line(self, section: str, key: str) -> int:
        return self.values[(section, key)][1]

    def fail(self, section: str, key: str, msg: str):
        if (section, key) in self.values:
            raise ConfigError(f"{self.path}:{self.line(section, key)}: {section}.{key} {msg}")
        raise ConfigError(f"{self.path}: missing {section}.{key} ({msg})")

    def has(self, section: str, key: str) -> bool:
        return (section, key) in self.values

    def get_str(self, section, key, default=None):
        if not self.has(section, key):
            if default is None:
                self.fail(section, key, "is required")
            return default
        return self.values[(section, key)][0]

    def get_float(self, section, key, default=None):
        raw = self.get_str(section, key, None if default is None else str(default))
        try:
            return float(raw)
        except ValueError:
            self.fail(section, key, f"must be a number, got {raw!r}")

    def get_int(self, section, key, default=None):
        raw = self.get_str(section, key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            self.fail(section, key, f"must be an integer, got {raw!r}")

    def get_floats(self, section, key, default=None):
        raw = self.get_str(section, key, default)
        try:
            return [float(v) for v in raw.split()]
        except ValueError:
            self.fail(section, key, f"must be space-separated numbers, got {raw!r}")

    def get_strs(self, section, key, default=None):
        raw = self.get_str(section, key, default)
        return raw.split()


def parse_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})")
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not section:
                raise ConfigError(f"{path}:{lineno}: empty section header")
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[(section, key)] = (val, lineno)
    return Config(path=str(path), text=text, values=values)


def build_schedule(cfg: Config, shift=None) -> StepSchedule:
    A = cfg.get_float("schedule", "A")
    B = cfg.get_float("schedule", "B", 0.0)
    beta = cfg.get_float("schedule", "beta")
    N = shift if shift is not None else cfg.get_int("schedule", "N", 0)
    try:
        return StepSchedule(A=A, B=B, beta=beta, N=int(N))
    except ValueError as exc:
        for key in ("beta", "A", "B", "N"):
            if key in str(exc):
                cfg.fail("schedule", key, str(exc))
        raise ConfigError(f"{cfg.path}: invalid schedule ({exc})")


def build_model(cfg: Config):
    kind = cfg.get_str("model", "kind")
    if kind == "linear_gaussian":
        dim = cfg.get_int("model", "dim", 1)
        a_mat = np.array(cfg.get_floats("model", "a_mat", "1.0")).reshape(dim, dim)
        root = np.array(cfg.get_floats("model", "root", " ".join(["0.0"] * dim)))
        cov = np.array(cfg.get_floats("model", "noise_cov",
                                      " ".join(str(float(i == j)) for i in range(dim)
                                               for j in range(dim)))).reshape(dim, dim)
        return linear_gaussian(a_mat, root=root, noise_cov=cov)
    if kind == "sine_perturbed":
        return sine_perturbed()
    cfg.fail("model", "kind", f"must be linear_gaussian or sine_perturbed, got {kind!r}")


def check_shift(cfg: Config, schedule: StepSchedule, where=("schedule", "N")):
    g1 = float(schedule.gamma_shifted(1))
    if g1 >= math.exp(-1.0):
        cfg.fail(*where, f"gives gamma_1^N = {g1:.4g} >= 1/e; increase the shift")


def _out_dir(cfg: Config, args) -> Path:
    out = Path(args.out if args.out else cfg.get_str("output", "dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(cfg: Config, args) -> int:
    if args.seed is not None:
        return args.seed
    return cfg.get_int("sim", "seed", 12345)


def cmd_simulate(cfg: Config, args) -> int:
    schedule = build_schedule(cfg)
    model = build_model(cfg)
    check_shift(cfg, schedule)
    T = cfg.get_float("sim", "T")
    n_paths = cfg.get_int("sim", "n_paths", 100)
    processes = cfg.get_strs("sim", "processes", "theta U V X")
    theta0 = np.array(cfg.get_floats("sim", "theta0", " ".join(["1.0"] * model.dim)))
    seed = _seed(cfg, args)
    grid = time_grid(schedule, T)
    mean = solve_mean_ode(model, theta0, float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    dt_raw = cfg.get_str("sim", "dt", "auto")
    dt = None if dt_raw == "auto" else float(dt_raw)
    out = _out_dir(cfg, args)
    manifest = Manifest(out, config_hash(cfg.text))
    bundle = simulate_bundle(model, schedule, grid, mean, params, processes,
                             n_paths, seed, theta0, dt=dt)
    for name, arr in sorted(bundle.paths.items()):
        csv_path = manifest.add(out / f"paths_{name}.csv", "simulate")
        write_paths_csv(csv_path, grid.t, arr)
        cache_path = manifest.add(out / f"paths_{name}.sadl", "simulate")
        write_binary_cache(cache_path, arr)
    manifest.write()
    print(f"wrote {len(bundle.paths)} processes, {n_paths} paths, M={grid.M} to {out}")
    for name, flags in sorted(bundle.flags.items()):
        if np.any(flags):
            print(f"flagged {int(np.sum(flags))} divergent {name} paths "
                  f"(ids {np.flatnonzero(flags)[:10].tolist()}...)")
    return 0


def cmd_truncation_report(cfg: Config, args) -> int:
    schedule = build_schedule(cfg)
    check_shift(cfg, schedule)
    params = TruncationParams.from_schedule(schedule)
    out = _out_dir(cfg, args)
    manifest = Manifest(out, config_hash(cfg.text))
    us = np.linspace(0.0, params.a + 1.5, 400)
    csv_path = manifest.add(out / "truncation_profile.csv", "truncation-report")
    write_csv(csv_path, ["u", "phi"], ([u, p] for u, p in zip(us, params.phi(us))))
    manifest.write()
    print(f"cutoff radius a_N = {params.a:.6f}, bump normalizer k_N = {params.bump_norm:.6f}")
    print(f"profile table: {csv_path}")
    return 0


def cmd_flows_report(cfg: Config, args) -> int:
    schedule = build_schedule(cfg)
    model = build_model(cfg)
    check_shift(cfg, schedule)
    T = cfg.get_float("sim", "T")
    theta0 = np.array(cfg.get_floats("sim", "theta0", " ".join(["1.0"] * model.dim)))
    grid = time_grid(schedule, T)
    mean = solve_mean_ode(model, theta0, float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    out = _out_dir(cfg, args)
    manifest = Manifest(out, config_hash(cfg.text))
    mean_csv = manifest.add(out / "mean_trajectory.csv", "flows-report")
    tb = np.atleast_2d(mean.value(grid.t))
    write_csv(mean_csv, ["k", "t"] + [f"theta_{i + 1}" for i in range(model.dim)],
              ([k, grid.t[k]] + list(tb[k]) for k in range(grid.M + 1)))
    betas = beta_defects(model, mean, grid)
    beta_csv = manifest.add(out / "beta_defects.csv", "flows-report")
    write_csv(beta_csv, ["k", "gamma_k1", "beta_norm", "beta_over_gamma32"],
              ([k, grid.gammas[k], float(np.linalg.norm(betas[k])),
                float(np.linalg.norm(betas[k])) / grid.gammas[k] ** 1.5]
               for k in range(grid.M)))
    ratio_csv = manifest.add(out / "flow_comparison.csv", "flows-report")
    g1 = float(schedule.gamma_shifted(1))
    norm = math.sqrt(g1) * math.log(1.0 / g1)
    rows = []
    for t_frac in (0.0, 0.25, 0.5):
        t_val = t_frac * float(grid.t[-1])
        for y_val in (-params.a / 2, params.a / 4, params.a / 2):
            y = np.full(model.dim, y_val / math.sqrt(model.dim))
            lim = limit_flow(model, mean, t_val, float(grid.t[-1]), y, schedule)
            trun = truncated_flow(model, grid, params, mean, t_val, float(grid.t[-1]), y)
            rows.append([t_val, y_val, float(np.linalg.norm(trun - lim)),
                         float(np.linalg.norm(trun - lim)) / norm])
    write_csv(ratio_csv, ["t", "y", "flow_gap", "normalized_gap"], rows)
    manifest.write()
    print(f"flow tables written to {out}")
    return 0


def cmd_parametrix(cfg: Config, args) -> int:
    schedule = build_schedule(cfg)
    model = build_model(cfg)
    check_shift(cfg, schedule)
    if model.dim != 1:
        cfg.fail("model", "dim", "must be 1 for the density engine")
    space = Grid1D(x_min=cfg.get_float("parametrix", "x_min", -10.0),
                   x_max=cfg.get_float("parametrix", "x_max", 10.0),
                   n=cfg.get_int("parametrix", "n", 2048))
    r_max = cfg.get_int("parametrix", "r_max", 3)
    nodes = cfg.get_int("parametrix", "time_nodes", 64)
    T = cfg.get_float("sim", "T")
    x0 = cfg.get_float("parametrix", "x0", 0.0)
    theta0 = np.array(cfg.get_floats("sim", "theta0", "1.0"))
    ctx = ParametrixContext.build(model, schedule, T, space=space, theta0=theta0)
    out = _out_dir(cfg, args)
    manifest = Manifest(out, config_hash(cfg.text))
    t_end = float(ctx.grid.t[-1])
    fld, diag = series_q(ctx, 0.0, t_end, x0, r_max=r_max, n_time_nodes=nodes)
    if cfg.get_str("parametrix", "envelope", "on") == "on" and model.gaussian_noise:
        diag.envelope_kappa = _envelope_kappa(ctx, fld, x0,
                                              cfg.get_int("parametrix", "inner_nodes", 32))
    csv_path = manifest.add(out / "density_diffusion.csv", "parametrix")
    write_csv(csv_path, ["x", "value"], zip(space.x, fld.values))
    diag_path = manifest.add(out / "density_diagnostics.txt", "parametrix")
    with open(diag_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"mass {diag.mass!r}\n")
        fh.write(f"boundary {diag.boundary!r}\n")
        for r, (sup, m) in enumerate(zip(diag.term_sup, diag.term_mass)):
            fh.write(f"term {r} sup {sup!r} mass {m!r}\n")
        if diag.envelope_kappa is not None:
            fh.write(f"envelope_kappa {diag.envelope_kappa!r}\n")
        for w in diag.warnings:
            fh.write(f"warning {w}\n")
    manifest.write()
    print(f"series density at (0, {float(ctx.grid.t[-1]):.4f}): mass {diag.mass:.6f}; "
          f"term sups {['%.3g' % v for v in diag.term_sup]}")
    print(f"wrote {csv_path}")
    return 0


def _envelope_kappa(ctx, diffusion_field, x0: float, inner_nodes: int) -> float:
    """Smallest constant whose scaled majorant dominates the chain/diffusion density gap."""
    fp, _ = series_p(ctx, 0, ctx.grid.M, x0, r_max=2, inner_nodes=inner_nodes)
    t_end = float(ctx.grid.t[-1])
    fwd = truncated_flow(ctx.model, ctx.grid, ctx.params, ctx.mean, t_end, 0.0,
                         np.array([x0]))
    window = np.abs(ctx.space.x - fwd[0]) < 3.0
    envelope = majorant_scriptQ(9.0, t_end, ctx.space.x[window] - fwd[0])
    g1 = float(ctx.schedule.gamma_shifted(1))
    scale = math.sqrt(g1) * math.log(1.0 / g1) ** 2
    gap = np.abs(diffusion_field.values - fp.values)[window]
    return float(np.max(gap / (scale * envelope)))


def cmd_validate_model(cfg: Config, args) -> int:
    model = build_model(cfg)
    seed = _seed(cfg, args)
    rng = np.random.default_rng(seed)
    report = validate_model(model, rng)
    print(f"mean check: {'ok' if report.mean_ok else 'FAIL'} (max z = {report.max_mean_z:.2f})")
    print(f"covariance check: {'ok' if report.cov_ok else 'FAIL'} (max z = {report.max_cov_z:.2f})")
    print(f"jacobian check: {'ok' if report.jacobian_ok else 'FAIL'} "
          f"(max rel err = {report.max_jac_rel_err:.2e})")
    print(f"root check: {'ok' if report.root_ok else 'FAIL'}")
    return 0 if report.all_ok else 3


def _rates_for_shift(model, cfg, N, T, n_paths, seed, space):
    schedule = build_schedule(cfg, shift=N)
    grid = time_grid(schedule, T)
    theta0 = np.array(cfg.get_floats("sim", "theta0", "1.0"))
    mean = solve_mean_ode(model, theta0, float(grid.t[-1]) + 0.01)
    params = TruncationParams.from_schedule(schedule)
    vs = sample_V_terminal(model, schedule, grid, mean, params,
                           np.zeros(model.dim), n_paths, seed)
    est = metrics.kde(vs[:, 0], grid=space, s=0.0, t=float(grid.t[-1]))
    a_scal = float(model.jacobian(model.root)[0, 0])
    bar_a = schedule.bar_alpha()
    lam = bar_a - a_scal
    t_end = float(grid.t[-1])
    sig2 = float(model.noise_cov(model.root)[0, 0])
    var = sig2 * (math.expm1(2.0 * lam * t_end) / (2.0 * lam) if lam != 0 else t_end)
    from .parametrix.grids import DensityField
    ou = DensityField(grid=space, s=0.0, t=t_end, values=gaussian_g(var, space.x))
    l1 = metrics.l1_distance(est, ou)
    hell = metrics.hellinger_sq(est, ou)
    stderr = metrics.bootstrap_stderr(
        vs[:, 0],
        lambda res: metrics.l1_distance(metrics.kde(res, grid=space), ou),
        n_boot=32, seed=seed)
    return {"N": N, "l1": l1, "hellinger_sq": hell, "stderr": stderr, "M": grid.M}


def cmd_rates(cfg: Config, args) -> int:
    model = build_model(cfg)
    if model.dim != 1 or model.kind != "linear_gaussian":
        cfg.fail("model", "kind", "rate experiments run on the scalar linear_gaussian model")
    Ns = [int(v) for v in cfg.get_floats("metrics", "n_sweep", "100 1000 10000")]
    for N in Ns:
        check_shift(cfg, build_schedule(cfg, shift=N), ("metrics", "n_sweep"))
    T = cfg.get_float("sim", "T")
    n_paths = cfg.get_int("sim", "n_paths", 100000)
    seed = _seed(cfg, args)
    space = Grid1D(x_min=cfg.get_float("parametrix", "x_min", -10.0),
                   x_max=cfg.get_float("parametrix", "x_max", 10.0),
                   n=cfg.get_int("parametrix", "n", 2048))
    out = _out_dir(cfg, args)
    manifest = Manifest(out, config_hash(cfg.text))
    workers = max(1, args.threads)
    results = [None] * len(Ns)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futs = {pool.submit(_rates_for_shift, model, cfg, N, T, n_paths, seed, space): i
                for i, N in enumerate(Ns)}
        for fut in futs:
            results[futs[fut]] = fut.result()
    halve = 0.5 if args.halve else 1.0
    rows = []
    for res in results:
        rows.append([res["N"], "l1", halve * res["l1"], halve * res["stderr"]])
        rows.append([res["N"], "hellinger_sq", res["hellinger_sq"], float("nan")])
    l1_vals = [res["l1"] for res in results]
    slope, intercept, r2 = metrics.rate_fit(Ns, l1_vals, correct_log_sq=True)
    rows.append(["fit", "l1_slope_logcorrected", slope, r2])
    csv_path = manifest.add(out / "rates.csv", "rates")
    write_csv(csv_path, ["N", "distance_kind", "value", "stderr_or_r2"], rows)
    svg_path = manifest.add(out / "rates.svg", "rates")
    svg_plot(svg_path, {"l1": (Ns, l1_vals)}, xlabel="N", ylabel="distance",
             title="terminal-density distance vs shift", loglog=True)
    manifest.write()
    print(f"N sweep {Ns}: l1 {['%.4f' % v for v in l1_vals]}; "
          f"log-corrected slope {slope:.3f} (r2 {r2:.3f})")
    print(f"wrote {csv_path} and {svg_path}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "flows-report": cmd_flows_report,
    "truncation-report": cmd_truncation_report,
    "parametrix": cmd_parametrix,
    "rates": cmd_rates,
    "validate-model": cmd_validate_model,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sadl",
                                     description="stochastic-approximation diffusion lab")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--seed", type=int, default=None, help="override sim.seed")
    parser.add_argument("--out", default=None, help="override output.dir")
    parser.add_argument("--threads", type=int, default=1, help="worker cap for sweeps")
    parser.add_argument("--halve", action="store_true",
                        help="report conventional total variation (half the L1 integral)")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
