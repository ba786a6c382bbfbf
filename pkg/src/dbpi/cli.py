"""Config-driven experiment runner.

Subcommands: validate, spectrum, run, rate, sweep. All file outputs are
UTF-8, CSVs carry a header row, JSON is pretty-printed with sorted
keys, and files are written atomically (temp file then rename).

Exit codes: 0 converged/pass, 1 not-converged/diverged (reported),
2 validation or check failure, 3 parse error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys as _sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import spectral
from .config import ExperimentConfig, as_float, config_hash, load_config, parse_config
from .errors import (
    AssumptionViolatedError,
    DbpiError,
    DisconnectedGraphError,
    DivergedError,
    InvalidConfigError,
    WindowTooShortError,
)
from .graph import gauge_from_weights, metropolis_weights
from .iteration import StopRule, run_algorithm1, run_lifted, run_parametric, run_reduced
from .operators import centralized_picard, certify_fixed_point, newton_fixed_point

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_CHECK_FAILED = 2
EXIT_PARSE_ERROR = 3

ORACLE_TOL = 1e-12


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _write_json(path: Path, payload: dict) -> None:
    _write_atomic(path, json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _trajectory_csv(traj) -> str:
    lines = ["k,residual_norm,consensus_error,dist_to_ref"]
    for k in range(traj.residual_norm.shape[0]):
        lines.append(
            f"{k},{_fmt(traj.residual_norm[k])},{_fmt(traj.consensus_error[k])},{_fmt(traj.dist_to_ref[k])}"
        )
    return "\n".join(lines) + "\n"


def _eigencurves_csv(result) -> str:
    lines = ["alpha,curve_id,re,im"]
    for j, a in enumerate(result.alphas):
        for i in range(result.n_curves):
            v = result.curves[i, j]
            lines.append(f"{_fmt(a)},{i},{_fmt(v.real)},{_fmt(v.imag)}")
    return "\n".join(lines) + "\n"


class _CheckFailure(DbpiError):
    """A validate-level check failed; maps to exit code 2."""


class _Workspace:
    """Graph, weights, gauge, and oracle shared by the commands."""

    def __init__(self, config: ExperimentConfig, seed_override=None):
        self.config = config
        self.sys = config.system
        self.seed_override = seed_override
        try:
            self.graph = config.build_graph()
        except DisconnectedGraphError as exc:
            raise _CheckFailure(f"graph connectivity: {exc}") from exc
        if self.graph.n_agents != self.sys.n_agents:
            raise InvalidConfigError(
                f"graph has {self.graph.n_agents} agents but system has {self.sys.n_agents}"
            )
        self.weights = metropolis_weights(self.graph, d=self.sys.dim)
        try:
            self.gauge = gauge_from_weights(self.weights)
        except AssumptionViolatedError as exc:
            raise _CheckFailure(f"gauge assumptions: {exc}") from exc
        self._oracle = None

    def z0(self) -> np.ndarray:
        return self.config.z0_spec.realize(self.sys.n_agents * self.sys.dim, self.seed_override)

    def w0(self, reduced: bool) -> np.ndarray:
        size = self.sys.dim * (self.sys.n_agents - 1) if reduced else self.sys.n_agents * self.sys.dim
        return self.config.w0_spec.realize(size, self.seed_override)

    def certificate(self):
        """Attractor certificate at the oracle fixed point, or None.

        Tries the centralized iteration from the block-average of z0,
        then a Newton solve (which also locates repelling fixed points
        so they can be reported as non-attractors).
        """
        if self._oracle is None:
            x0 = np.mean(self.z0().reshape(self.sys.n_agents, self.sys.dim), axis=0)
            cert = None
            try:
                run = centralized_picard(self.sys, x0, max_iters=200000, tol=ORACLE_TOL)
                if run.converged:
                    cert = run.certificate
            except DivergedError:
                cert = None
            if cert is None:
                try:
                    x_star = newton_fixed_point(self.sys, x0, tol=ORACLE_TOL)
                    cert = certify_fixed_point(self.sys, x_star, tol=1e-8)
                except DbpiError:
                    cert = None
            self._oracle = (cert,)
        return self._oracle[0]

    def resolve_alpha(self):
        """Configured alpha, or half the certified threshold for "auto"."""
        if self.config.alpha != "auto":
            return float(self.config.alpha), None
        cert = self.certificate()
        if cert is None or not cert.is_attractor:
            raise _CheckFailure("auto alpha requires an attractor-certifiable system")
        params = self.config.iteration_params(alpha=1.0)
        result = spectral.find_alpha_star(
            self.sys, self.gauge, params, cert.x_star, alpha_max=self.config.alpha_max
        )
        return result.alpha_star / 2.0, result


def _out_dir(args, config: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("DBPI_OUT")
    if env:
        return Path(env)
    cfg_dir = config.outputs.get("dir")
    if cfg_dir:
        return Path(cfg_dir)
    return Path.cwd()


def cmd_validate(config: ExperimentConfig, out_dir: Path, args) -> int:
    checks = []

    def check(name, fn):
        try:
            detail = fn()
            checks.append({"name": name, "ok": True, "detail": detail})
        except DbpiError as exc:
            checks.append({"name": name, "ok": False, "detail": str(exc)})

    ws_holder = {}

    def graph_and_gauge():
        ws_holder["ws"] = _Workspace(config, args.seed)
        return f"{ws_holder['ws'].graph.n_agents} agents, {len(ws_holder['ws'].graph.edges)} edges"

    check("graph_and_gauge", graph_and_gauge)
    ws = ws_holder.get("ws")
    if ws is not None:
        def root_conditions():
            report = spectral.check_root_conditions(ws.gauge, config.eta, config.beta)
            if not report.ok:
                raise _CheckFailure(
                    f"(eta={config.eta}, beta_sq={config.beta**2:.6g}) fail the root conditions"
                )
            return f"all {len(report.entries)} eigenvalues admissible"

        def attractor():
            cert = ws.certificate()
            if cert is None:
                raise _CheckFailure("no fixed point of the average map was located")
            if not cert.is_attractor:
                raise _CheckFailure(
                    f"spectral radius {cert.spectral_radius:.6f} >= 1 at the oracle fixed point"
                )
            return f"rho(J_H) = {cert.spectral_radius:.6f} at the centralized fixed point"

        check("root_conditions", root_conditions)
        check("attractor", attractor)

    ok = all(c["ok"] for c in checks)
    for c in checks:
        print(f"[{'PASS' if c['ok'] else 'FAIL'}] {c['name']}: {c['detail']}")
    _write_json(
        out_dir / "validate.json",
        {"command": "validate", "ok": ok, "checks": checks, "config_hash": config_hash(config.raw)},
    )
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_spectrum(config: ExperimentConfig, out_dir: Path, args) -> int:
    ws = _Workspace(config, args.seed)
    if not spectral.check_root_conditions(ws.gauge, config.eta, config.beta).ok:
        raise _CheckFailure("root conditions fail for the configured (eta, beta_sq)")
    cert = ws.certificate()
    if cert is None:
        raise _CheckFailure("no fixed point of the average map was located")
    alpha = 1.0 if config.alpha == "auto" else float(config.alpha)
    params = config.iteration_params(alpha)

    report = spectral.build_spectral_report(
        ws.sys, ws.gauge, params, cert.x_star, alpha_max=config.alpha_max
    )
    payload = {"command": "spectrum", "config_hash": config_hash(config.raw)}
    payload.update(report.to_dict())
    if report.eigencurves is not None:
        curves_path = out_dir / config.outputs["eigencurves_csv"]
        _write_atomic(curves_path, _eigencurves_csv(report.eigencurves))
        payload["eigencurves_csv"] = str(curves_path)
    _write_json(out_dir / "spectrum.json", payload)
    print(f"spectrum: status={report.status}")
    return EXIT_OK if report.status == "ok" else EXIT_CHECK_FAILED


def _execute(ws: _Workspace, alpha: float, ref):
    config = ws.config
    params = config.iteration_params(alpha)
    z0 = ws.z0()
    stop = StopRule(
        tol_step=config.stop.tol_step,
        tol_cons=config.stop.tol_cons,
        max_iters=config.stop.max_iters,
    )
    thin = config.outputs["thin"]
    if config.variant == "algorithm1":
        return run_algorithm1(ws.sys, ws.weights, alpha, z0, stop, ref=ref, thin=thin)
    if config.variant == "parametric":
        return run_parametric(ws.sys, ws.gauge, params, z0, stop, ref=ref, thin=thin)
    if config.variant == "lifted":
        return run_lifted(ws.sys, ws.gauge, params, z0, ws.w0(False), stop, ref=ref, thin=thin)
    return run_reduced(ws.sys, ws.gauge, params, z0, ws.w0(True), stop, ref=ref, thin=thin)


def _run_pipeline(config: ExperimentConfig, args):
    """Shared by run/rate/sweep: returns (workspace, trajectory, report dict)."""
    ws = _Workspace(config, args.seed)
    alpha, astar = ws.resolve_alpha()
    cert = ws.certificate()
    ref = cert.x_star if cert is not None else None
    try:
        traj = _execute(ws, alpha, ref)
    except DivergedError as exc:
        traj = exc.trajectory
    report = {
        "command": "run",
        "config_hash": config_hash(config.raw),
        "variant": config.variant,
        "alpha_used": alpha,
        "status": traj.status,
        "iterations": int(traj.n_iters),
        "final_residual_norm": float(traj.residual_norm[-1]),
        "final_consensus_error": float(traj.consensus_error[-1]),
        "final_dist_to_ref": float(traj.dist_to_ref[-1]),
    }
    if astar is not None:
        report["alpha_star"] = astar.alpha_star
    if cert is not None:
        report["certificate"] = {
            "x_star": cert.x_star.tolist(),
            "residual_norm": cert.residual_norm,
            "spectral_radius": cert.spectral_radius,
            "is_attractor": cert.is_attractor,
        }
        params = config.iteration_params(alpha)
        report["rho_jftilde"] = spectral.spectral_radius(
            spectral.reduced_jacobian(ws.sys, ws.gauge, params, cert.x_star)
        )
    else:
        report["certificate"] = None
        report["rho_jftilde"] = None
    return ws, traj, report


def cmd_run(config: ExperimentConfig, out_dir: Path, args) -> int:
    ws, traj, report = _run_pipeline(config, args)
    traj_path = out_dir / config.outputs["trajectory_csv"]
    _write_atomic(traj_path, _trajectory_csv(traj))
    report["trajectory_csv"] = str(traj_path)
    if config.outputs["states_json"]:
        states_path = out_dir / config.outputs["states_json"]
        states = {
            "ks": traj.ks.tolist(),
            "zs": traj.zs.tolist(),
            "duals": None if traj.duals is None else traj.duals.tolist(),
        }
        _write_json(states_path, states)
        report["states_json"] = str(states_path)
    _write_json(out_dir / config.outputs["report_json"], report)
    print(f"run: status={report['status']} iterations={report['iterations']}")
    return EXIT_OK if traj.status == "converged" else EXIT_NOT_CONVERGED


def cmd_rate(config: ExperimentConfig, out_dir: Path, args) -> int:
    ws, traj, report = _run_pipeline(config, args)
    payload = {
        "command": "rate",
        "config_hash": report["config_hash"],
        "run_status": traj.status,
        "theoretical_rate": report["rho_jftilde"],
    }
    try:
        rate = spectral.empirical_rate(traj, theoretical_rate=report["rho_jftilde"])
        payload.update(rate.to_dict())
        payload["status"] = "ok"
        code = EXIT_OK if traj.status == "converged" else EXIT_NOT_CONVERGED
    except WindowTooShortError as exc:
        payload["status"] = "window_too_short"
        payload["detail"] = str(exc)
        code = EXIT_CHECK_FAILED
    _write_json(out_dir / "rate.json", payload)
    if payload["status"] == "ok":
        rho = payload["theoretical_rate"]
        rho_txt = "unknown" if rho is None else f"{rho:.6f}"
        print(f"rate: sigma_hat={payload['empirical_rate']:.6f} rho={rho_txt}")
    else:
        print(f"rate: status={payload['status']}")
    return code


def _sweep_row(base_raw: dict, param: str, value, args):
    raw = copy.deepcopy(base_raw)
    raw.pop("sweep", None)
    if param == "n":
        raw["graph"]["n"] = int(value)
        system = raw["system"]
        if not isinstance(system, dict):
            return {"param_value": value, "rho": float("nan"), "sigma_hat": float("nan"),
                    "status": "invalid_config"}
        system["replicate"] = int(value)
    else:
        raw["params"][param] = value
    try:
        config = parse_config(raw)
        _, traj, report = _run_pipeline(config, args)
        rho = report["rho_jftilde"]
        try:
            sigma = spectral.empirical_rate(traj).empirical_rate
        except WindowTooShortError:
            sigma = float("nan")
        return {
            "param_value": value,
            "rho": float("nan") if rho is None else rho,
            "sigma_hat": sigma,
            "status": traj.status,
        }
    except InvalidConfigError:
        return {"param_value": value, "rho": float("nan"), "sigma_hat": float("nan"),
                "status": "invalid_config"}
    except DbpiError as exc:
        label = "check_failed" if isinstance(exc, _CheckFailure) else type(exc).__name__
        return {"param_value": value, "rho": float("nan"), "sigma_hat": float("nan"),
                "status": label}


def cmd_sweep(config: ExperimentConfig, out_dir: Path, args) -> int:
    if config.sweep is None:
        raise InvalidConfigError("sweep command needs a 'sweep' section in the config")
    param = config.sweep["param"]
    grid = [as_float(v, "sweep.grid") for v in config.sweep["grid"]]
    threads = max(1, args.threads or 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda v: _sweep_row(config.raw, param, v, args), grid))
    else:
        rows = [_sweep_row(config.raw, param, v, args) for v in grid]
    lines = ["param_value,rho,sigma_hat,status"]
    for row in rows:
        lines.append(
            f"{_fmt(row['param_value'])},{_fmt(row['rho'])},{_fmt(row['sigma_hat'])},{row['status']}"
        )
    _write_atomic(out_dir / config.outputs["sweep_csv"], "\n".join(lines) + "\n")
    print(f"sweep: {len(rows)} rows over {param}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbpi",
        description="Distributed fixed-point iteration: validate, certify, run, and sweep.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("validate", "check graph, gauge assumptions, root conditions, and the attractor"),
        ("spectrum", "emit eigenvalues, root table, alpha threshold, and eigencurves"),
        ("run", "execute the configured iteration and write trajectory + report"),
        ("rate", "estimate the empirical linear rate against the spectral radius"),
        ("sweep", "run a parameter sweep and tabulate rho / empirical rate"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (fallback: $DBPI_OUT)")
        p.add_argument("--seed", type=int, default=None, help="override init seeds")
        p.add_argument("--threads", type=int, default=1, help="worker threads for sweep")
    return parser


COMMANDS = {
    "validate": cmd_validate,
    "spectrum": cmd_spectrum,
    "run": cmd_run,
    "rate": cmd_rate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_PARSE_ERROR
    out_dir = _out_dir(args, config)
    try:
        return COMMANDS[args.command](config, out_dir, args)
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=_sys.stderr)
        return EXIT_PARSE_ERROR
    except _CheckFailure as exc:
        print(f"check failed: {exc}", file=_sys.stderr)
        return EXIT_CHECK_FAILED
    except DbpiError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    raise SystemExit(main())
