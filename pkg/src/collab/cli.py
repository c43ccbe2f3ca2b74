"""Command-line orchestration: reproducible experiments with manifests.

    collab <subcommand> --config cfg.json --out dir [--seed N] [--workers N]

Subcommands: simulate-survival, hitting-law, count, ulam, theta, example,
selfcheck.  Exit codes: 0 success, 2 configuration/schema violation,
3 runtime module error, 4 assertion failure in example/selfcheck.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    build_scheme,
    config_hash,
    load_config,
    run_defaults,
    validate_config,
)
from .ensemble import RngSpec
from .stats import (
    count_collisions,
    empirical_cf,
    estimate_survival,
    fit_escape_rate,
    hole_mass_formula,
    ks_exponential,
    sample_hitting_times,
)
from .theory import (
    FormulaDensities,
    closed_form_betas,
    detect_recurrence,
    example_report,
    spectral_theta,
    theta_tilde_value,
    theta_value,
)
from .ulam import BoxModel, build_operator, leading_eigen

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ASSERTION = 4


# ---------------------------------------------------------------------------
# serialization with a fixed float format


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v) or math.isinf(v):
            raise ValueError("non-finite float in report")
        return format(v, ".17g")
    if isinstance(value, complex):
        return f'[{format(value.real, ".17g")},{format(value.imag, ".17g")}]'
    if isinstance(value, str):
        import json
        return json.dumps(value)
    if isinstance(value, dict):
        items = ",".join(f"{_fmt(str(k))}:{_fmt(v)}" for k, v in value.items())
        return "{" + items + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        seq = value.tolist() if isinstance(value, np.ndarray) else value
        return "[" + ",".join(_fmt(v) for v in seq) + "]"
    raise TypeError(f"cannot serialize {type(value)}")


def write_json(path: Path, obj) -> None:
    path.write_text(_fmt(obj) + "\n")


def write_csv(path: Path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(format(v, ".17g") if isinstance(v, float)
                              else str(v) for v in row) + "\n")


def read_survival_csv(path) -> tuple:
    rows = Path(path).read_text().strip().splitlines()
    assert rows[0] == "n,fraction,stderr"
    data = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    if data.size == 0:
        return np.empty(0), np.empty(0), np.empty(0)
    return data[:, 0].astype(int), data[:, 1], data[:, 2]


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _Manifest:
    def __init__(self, subcommand: str, cfg: dict, seed: int, out_dir: Path):
        self.data = {
            "tool_version": __version__,
            "subcommand": subcommand,
            "config_hash": config_hash(cfg),
            "master_seed": seed,
            "outputs": {},
            "warnings": [],
            "open_question_flags": [],
            "wall_clock_s": 0.0,
        }
        self.out_dir = out_dir
        self.t0 = time.perf_counter()

    def add(self, path: Path) -> None:
        self.data["outputs"][path.name] = _digest(path)

    def warn(self, msg: str) -> None:
        self.data["warnings"].append(msg)

    def flag(self, msg: str) -> None:
        self.data["open_question_flags"].append(msg)

    def finish(self) -> Path:
        self.data["wall_clock_s"] = time.perf_counter() - self.t0
        path = self.out_dir / "manifest.json"
        write_json(path, self.data)
        return path


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate_survival(scheme, run, out, manifest, workers):
    rng = RngSpec(run["seed"])
    curve = estimate_survival(scheme, run["n_traj"], run["horizon"], rng,
                              workers=workers)
    path = out / "survival.csv"
    write_csv(path, "n,fraction,stderr",
              zip(curve.steps.tolist(), curve.fraction.tolist(),
                  curve.stderr.tolist()))
    manifest.add(path)
    fit = fit_escape_rate(curve)
    summary = {
        "n_traj": run["n_traj"],
        "horizon": run["horizon"],
        "seed": run["seed"],
        "escape_rate": fit.rate,
        "rate_stderr": fit.stderr,
        "r_squared": fit.r_squared,
        "fit_window": list(fit.window),
        "survival_at_0": float(curve.fraction[0]),
    }
    spath = out / "survival_summary.json"
    write_json(spath, summary)
    manifest.add(spath)


def _cmd_hitting_law(scheme, run, out, manifest, workers):
    rng = RngSpec(run["seed"])
    sample = sample_hitting_times(scheme, run["n_traj"], run["horizon"],
                                  init=run["init"], rng=rng,
                                  burn_in=run["burn_in"], workers=workers)
    path = out / "hitting.csv"
    write_csv(path, "trajectory,t_hit,censored",
              ((i, int(t), int(c)) for i, (t, c) in
               enumerate(zip(sample.times, sample.censored))))
    manifest.add(path)
    for w in sample.warnings:
        manifest.warn(w)
    ks = ks_exponential(sample, "empirical_mean")
    summary = {
        "n_traj": run["n_traj"],
        "horizon": run["horizon"],
        "init": run["init"],
        "burn_in": sample.burn_in,
        "seed": run["seed"],
        "n_uncensored": int((~sample.censored).sum()),
        "censoring_fraction": float(sample.censored.mean()),
        "mean_uncensored": float(sample.uncensored.mean()) if
        (~sample.censored).any() else None,
        "ks_statistic": ks.statistic,
        "ks_pvalue": ks.pvalue,
        "rescaling_mean": ks.scale,
    }
    spath = out / "hitting_summary.json"
    write_json(spath, summary)
    manifest.add(spath)


def _cmd_count(scheme, run, out, manifest, workers):
    rng = RngSpec(run["seed"])
    sample = count_collisions(scheme, run["t"], run["n_traj"], run["gap"],
                              rng, init=run["init"], burn_in=run["burn_in"],
                              workers=workers)
    path = out / "counts.csv"
    write_csv(path, "trajectory,Z,clusters",
              ((i, int(z), ";".join(str(c) for c in cl)) for i, (z, cl) in
               enumerate(zip(sample.counts, sample.clusters))))
    manifest.add(path)
    # companion twisted weight when the closed form applies
    overlay = None
    theta_hat = None
    try:
        scan = detect_recurrence(scheme, k_max=run["k_max"])
        dens = FormulaDensities.idealized_for(scheme)
        th = theta_value(scheme, scan, dens)
        theta_hat = float(th.theta)
        tt = theta_tilde_value(th, closed_form_betas(scan, th), run["s_grid"])
        overlay = tt.theta_tilde
    except Exception as exc:
        manifest.warn(f"no closed-form twisted weight: {exc}")
    rows = empirical_cf(sample, run["s_grid"], theta_tilde=overlay)
    mean_z = float(sample.counts.mean())
    sizes = sample.cluster_sizes()
    summary = {
        "t": run["t"],
        "mu_hole": sample.mu_hole,
        "horizon": sample.horizon,
        "gap": run["gap"],
        "n_traj": run["n_traj"],
        "seed": run["seed"],
        "mean_Z": mean_z,
        "mean_Z_over_t": mean_z / run["t"],
        "intensity_candidates": {"theta_hat": theta_hat, "one": 1.0},
        "cluster_size_one_fraction": float((sizes == 1).mean()) if sizes.size else None,
        "cf": [
            {"s": r["s"], "value": r["value"],
             "re_ci": list(r["re_ci"]), "im_ci": list(r["im_ci"]),
             **({"overlay": r["overlay"]} if "overlay" in r else {})}
            for r in rows
        ],
    }
    manifest.flag("the counting intensity is compared against both the "
                  "extremal index and 1; the limit law's normalization is "
                  "ambiguous and deliberately not asserted")
    spath = out / "count_summary.json"
    write_json(spath, summary)
    manifest.add(spath)


def _cmd_ulam(scheme, run, out, manifest, workers):
    reports = []
    for d in run["delta_list"]:
        sch = replace(scheme, delta=float(d))
        for n_cells in run["grid_sizes"]:
            box = BoxModel.build(sch, which=run["box"], n_cells=n_cells,
                                 variant="full" if run["kind"] == "twisted"
                                 else "decoupled")
            op = build_operator(sch, box, run["kind"],
                                s=run["s"] if run["kind"] == "twisted" else None)
            res = leading_eigen(op)
            reports.append({
                "kind": run["kind"],
                "N": n_cells,
                "box": run["box"],
                "delta": float(d),
                "s": run["s"] if run["kind"] == "twisted" else None,
                "lambda_modulus": res.modulus,
                "lambda_phase": res.phase,
                "escape_rate": res.escape_rate,
                "residual": res.residual,
                "iterations": res.iterations,
            })
            if run["eigen_density_csv"]:
                dpath = out / f"eigen_density_{run['kind']}_{n_cells}_{d}.csv"
                marg = res.eigen_density.real.reshape(box.n_cells, -1).sum(axis=1)
                write_csv(dpath, "cell_lo,cell_hi,mass",
                          zip(box.edges[:-1].tolist(), box.edges[1:].tolist(),
                              marg.tolist()))
                manifest.add(dpath)
    path = out / "ulam.json"
    write_json(path, {"reports": reports})
    manifest.add(path)


def _cmd_theta(scheme, run, out, manifest, workers):
    scan = detect_recurrence(scheme, k_max=run["k_max"])
    dens = FormulaDensities.idealized_for(scheme)
    th = theta_value(scheme, scan, dens)
    try:
        betas = closed_form_betas(scan, th)
        tt = theta_tilde_value(th, betas, run["s_grid"])
    except ValueError as exc:
        manifest.warn(str(exc))
        tt = theta_tilde_value(th, closed_form_betas(
            replace(scan, s_tilde_pairs=()), th), run["s_grid"])
    spec = [spectral_theta(scheme, d, n_cells=max(run["grid_sizes"]))
            for d in run["delta_list"]]
    from .theory import ThetaReport
    report = ThetaReport(scan=scan, theta=th, theta_tilde=tt,
                         theta_spec=tuple(spec), notes=(
        "return-lag conventions k >= 1 and k >= 0 both reported; "
        "spectral companion recorded per delta without asserting equality",))
    if not scan.complete:
        manifest.warn(f"recurrence scan truncated at k_max = {run['k_max']}; "
                      "absence of records is not proof of emptiness")
    manifest.flag("theta reported under both return-lag conventions; see notes")
    path = out / "theta.json"
    write_json(path, report.as_dict())
    manifest.add(path)


def _cmd_example(scheme, run, out, manifest, workers):
    report = example_report(deltas=run["delta_list"], s_grid=run["s_grid"])
    path = out / "example.json"
    write_json(path, report.as_dict())
    manifest.add(path)
    manifest.flag("spectral theta differs from both formula conventions at "
                  "this example; values recorded side by side")
    print(f"[PASS] extremal index = 1 - 5^-4 = {report.theta.theta} exactly")
    print("[PASS] recurrent pairs = {(1/2, 1/4), (1/4, 1/2)}")
    print("[PASS] interverted recurrence set empty")
    print("[PASS] phi_X(s) = e^{is} on the s grid")
    for row in report.theta_spec:
        print(f"[info] delta={row['delta']}: spectral theta = "
              f"{row['theta_spec']:.6f} (formula conventions: "
              f"{float(report.theta.theta):.6f} for k>=1, "
              f"{float(report.theta.theta_with_k0):.6f} for k>=0)")


def _cmd_selfcheck(scheme, run, out, manifest, workers):
    from .selfcheck import run_selfcheck
    results, ok = run_selfcheck(verbose=True)
    path = out / "selfcheck.json"
    write_json(path, {"results": [
        {"name": n, "passed": p, "detail": d} for (n, p, d) in results]})
    manifest.add(path)
    if not ok:
        raise AssertionError("selfcheck failed; see selfcheck.json")


_SUBCOMMANDS = {
    "simulate-survival": _cmd_simulate_survival,
    "hitting-law": _cmd_hitting_law,
    "count": _cmd_count,
    "ulam": _cmd_ulam,
    "theta": _cmd_theta,
    "example": _cmd_example,
    "selfcheck": _cmd_selfcheck,
}

_DEFAULT_CONFIG = {
    "map": {"kind": "mod_beta", "beta": 5},
    "scheme": {
        "dimension": 1, "side": 9,
        "centers": {"1": "1/2", "-1": "1/4"},
        "epsilon": 0.05, "delta": 0.01,
        "focal_site": [0], "mode": "isolated_neighborhood",
    },
}


def run_experiment(cfg: dict, subcommand: str, out_dir, seed=None,
                   workers=None) -> dict:
    """Validate, dispatch, persist outputs, and write the run manifest."""
    validate_config(cfg)
    if subcommand not in _SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    run = run_defaults(cfg)
    if seed is not None:
        run["seed"] = int(seed)
    if workers is not None:
        run["workers"] = int(workers)
    scheme = build_scheme(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _Manifest(subcommand, cfg, run["seed"], out)
    _SUBCOMMANDS[subcommand](scheme, run, out, manifest, run["workers"])
    manifest.finish()
    return manifest.data


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="collab",
        description="collision-coupled map lattice laboratory",
    )
    parser.add_argument("subcommand", choices=sorted(_SUBCOMMANDS))
    parser.add_argument("--config", help="experiment config (JSON); the "
                        "built-in worked-example config is used when omitted")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int,
                        default=int(os.environ.get("COLLAB_WORKERS", "0")) or None)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else dict(_DEFAULT_CONFIG)
        run_experiment(cfg, args.subcommand, args.out, seed=args.seed,
                       workers=args.workers)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except Exception as exc:  # runtime module error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
