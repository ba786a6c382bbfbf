"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion
lines. Each criterion asserts its stated tolerance and runtime budget.
"""

import json
import time

import numpy as np
import pytest

from dbpi import (
    IterationParams,
    StopRule,
    DivergedError,
    base_jacobian,
    build_graph,
    centralized_picard,
    check_semisimple,
    derivative_check,
    embed_fixed_point,
    empirical_rate,
    gamma_roots,
    gauge_from_weights,
    jacobian_of_average,
    limit_dual,
    make_rho_evaluator,
    metropolis_weights,
    multiset_distance,
    reduced_jacobian,
    run_algorithm1,
    run_lifted,
    run_parametric,
    run_reduced,
    spectral_radius,
)
from dbpi.cli import main as cli_main
from dbpi.operators import AgentSystem, affine_map, gradient_of_quadratic, scalar_logistic

from conftest import _CORPUS, _BY_NAME

BETA_HALF = np.sqrt(0.5)
HETEROGENEOUS = ("path3_affine_d2", "cycle5_affine_d1", "star6_mixed_d2")


class _Criterion:
    def __init__(self, num, label, budget_s):
        self.num, self.label, self.budget = num, label, budget_s

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed < self.budget
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {self.num}: {self.label} ({elapsed:.2f}s)")
        if exc_type is None and elapsed >= self.budget:
            raise AssertionError(
                f"criterion {self.num} exceeded its {self.budget}s runtime budget: {elapsed:.2f}s"
            )
        return False


def _forced(n_steps):
    return StopRule(tol_step=0.0, tol_cons=0.0, max_iters=n_steps)


def _rel_gap(traj_a, traj_b):
    diff = max(np.max(np.abs(a - b)) for a, b in zip(traj_a.zs, traj_b.zs))
    scale = 1.0 + max(np.max(np.abs(z)) for z in traj_a.zs)
    return diff / scale


def test_criterion_1_shifted_root_identity():
    with _Criterion(1, "shifted-root magnitude identity on Metropolis gauges", 1.0):
        for family, n in (("path", 3), ("cycle", 5), ("complete", 4), ("star", 6)):
            for d in (1, 3):
                gauge = gauge_from_weights(
                    metropolis_weights(build_graph({"family": family, "n": n}), d=d)
                )
                for lam in gauge.eigvals:
                    pair = gamma_roots(max(lam, 0.0), 1.0, BETA_HALF)
                    assert abs(pair.mag1**2 - (1.0 - lam / 2.0)) <= 1e-12
                    assert abs(pair.mag2**2 - (1.0 - lam / 2.0)) <= 1e-12


def test_criterion_2_algorithm_recovery():
    with _Criterion(2, "parametric recursion recovers the weight-matrix form", 5.0):
        for c in _CORPUS:
            alpha = c.alpha_hat / 2.0
            t_a1 = run_algorithm1(c.system, c.weights, alpha, c.z0, stop=_forced(500))
            t_par = run_parametric(c.system, c.gauge, c.params(alpha), c.z0, stop=_forced(500))
            gap = _rel_gap(t_a1, t_par)
            assert gap <= 1e-12, f"{c.name}: relative gap {gap:.3e}"


def test_criterion_3_elimination_equivalence():
    with _Criterion(3, "dual elimination matches the two-term recursion", 5.0):
        for c in _CORPUS:
            t_par = run_parametric(c.system, c.gauge, c.params(), c.z0, stop=_forced(200))
            t_lift = run_lifted(c.system, c.gauge, c.params(), c.z0, stop=_forced(200))
            gap = _rel_gap(t_par, t_lift)
            assert gap <= 1e-9, f"{c.name}: relative gap {gap:.3e}"


def test_criterion_4_semisimple_structure():
    with _Criterion(4, "unit eigenvalue semisimple of multiplicity d at alpha=0", 5.0):
        for c in _CORPUS:
            d = c.system.dim
            report = check_semisimple(c.gauge, 1.0, BETA_HALF)
            assert report.n_unit == d, c.name
            assert report.kernel_dim == d, c.name
            assert report.max_principal_angle <= 1e-8, c.name
            eigs = np.linalg.eigvals(base_jacobian(c.gauge, 1.0, BETA_HALF))
            others = np.abs(eigs[np.abs(eigs - 1.0) > 1e-9])
            assert np.max(others) <= 1.0 - 1e-6, c.name


def test_criterion_5_eigencurve_derivatives():
    with _Criterion(5, "unit-curve slopes converge to spec(J_H - I)", 10.0):
        c = _BY_NAME["path3_affine_d2"]
        report = derivative_check(c.system, c.gauge, c.params(), c.x_star)
        # independent target: the averaged matrix of the affine corpus
        abar = np.mean([m.jacobian(c.x_star) for m in c.system.maps], axis=0)
        target = np.linalg.eigvals(abar - np.eye(c.system.dim))
        assert multiset_distance(report.slopes[-1], target) <= 1e-4
        assert report.distances[-1] <= 1e-4
        assert report.monotone_ok
        assert np.all(np.diff(report.distances[:4]) < 0)  # clean decades
        assert np.all(np.real(report.slopes[-1]) < 0)


def test_criterion_6_threshold_consistency():
    with _Criterion(6, "alpha below threshold contracts, above it repels", 30.0):
        for c in _CORPUS:
            params = c.params()  # alpha_hat / 2
            rng = np.random.default_rng(101)
            z0 = c.consensus_star + 1e-3 * rng.standard_normal(c.consensus_star.shape)
            traj = run_parametric(c.system, c.gauge, params, z0, ref=c.x_star)
            assert traj.status == "converged", c.name
            assert np.max(np.abs(traj.final_z - c.consensus_star)) <= 1e-8, c.name
            rho = spectral_radius(reduced_jacobian(c.system, c.gauge, params, c.x_star))
            rate = empirical_rate(traj, theoretical_rate=rho)
            assert rate.empirical_rate <= rho + 0.05, c.name

        # instability side, on the two scalar/vector affine systems
        for name in ("path3_affine_d2", "cycle5_affine_d1"):
            c = _BY_NAME[name]
            rho_of = make_rho_evaluator(c.system, c.gauge, IterationParams(alpha=1.0), c.x_star)
            alpha_bad = 2.0 * c.alpha_hat
            while rho_of(alpha_bad) < 1.05:
                alpha_bad *= 1.5
            params_bad = c.params(alpha_bad)
            z_star, wtilde_star = embed_fixed_point(c.system, c.gauge, params_bad, c.x_star)
            z0 = z_star + 1e-9 * rng.standard_normal(z_star.shape)
            try:
                traj = run_reduced(c.system, c.gauge, params_bad, z0, wtilde_star, stop=_forced(500))
            except DivergedError as err:
                traj = err.trajectory
            errs = np.array([np.max(np.abs(z - z_star)) for z in traj.zs])
            assert np.max(errs) >= 10.0 * errs[0], name


def test_criterion_7_dual_limit():
    with _Criterion(7, "lifted dual converges to its closed-form limit", 30.0):
        for name in HETEROGENEOUS:
            c = _BY_NAME[name]
            size = c.system.n_agents * c.system.dim
            for seed in (1, 2, 3):
                rng = np.random.default_rng(seed)
                w0 = rng.standard_normal(size)
                traj = run_lifted(c.system, c.gauge, c.params(), c.z0, w0)
                assert traj.status == "converged", name
                lim = limit_dual(w0, c.gauge, c.params(), c.system, c.x_star)
                gap = np.max(np.abs(traj.final_dual - lim))
                assert gap <= 1e-5, f"{name} seed {seed}: dual gap {gap:.3e}"


def test_criterion_8_centralized_agreement():
    with _Criterion(8, "distributed limits match the centralized oracle", 10.0):
        for c in _CORPUS:
            x0 = np.mean(c.z0.reshape(c.system.n_agents, c.system.dim), axis=0)
            run = centralized_picard(c.system, x0, tol=1e-12, max_iters=200000)
            assert run.converged, c.name
            traj = run_parametric(c.system, c.gauge, c.params(), c.z0)
            dist_ctr = np.max(np.abs(traj.final_z - np.tile(run.certificate.x_star, c.system.n_agents)))
            assert dist_ctr <= 1e-7, f"{c.name}: vs centralized {dist_ctr:.3e}"
            if c.affine:
                dist_solve = np.max(np.abs(traj.final_z - c.consensus_star))
                assert dist_solve <= 1e-7, f"{c.name}: vs linear solve {dist_solve:.3e}"


def test_criterion_9_jacobian_correctness():
    with _Criterion(9, "analytic and finite-difference Jacobians agree", 1.0):
        rng = np.random.default_rng(7)
        d = 3
        q = rng.standard_normal((d, d))
        families = [
            affine_map(0.4 * rng.standard_normal((d, d)), rng.standard_normal(d)),
            gradient_of_quadratic(0.3 * (q + q.T) / 2.0 + 0.8 * np.eye(d), rng.standard_normal(d)),
            scalar_logistic(2.8, d),
        ]
        for m in families:
            sys = AgentSystem(maps=(m,))
            for _ in range(10):
                x = rng.standard_normal(d)
                j_an = jacobian_of_average(sys, x, mode="analytic")
                j_fd = jacobian_of_average(sys, x, mode="finite_diff")
                assert np.max(np.abs(j_an - j_fd)) <= 1e-6, m.label


def test_criterion_10_deterministic_runs(tmp_path):
    with _Criterion(10, "repeated runs with a fixed seed are byte-identical", 5.0):
        config = {
            "graph": {"family": "path", "n": 3},
            "system": {
                "family": "affine",
                "A": [["0.3", "0.1"], ["-0.2", "0.4"]],
                "b": ["1.0", "-0.5"],
                "replicate": 3,
                "perturb_seed": 7,
                "perturb_scale": 0.2,
            },
            "params": {"alpha": 0.4, "variant": "parametric"},
            "init": {"z0": {"kind": "random", "seed": 3, "scale": 0.5}},
        }
        cfg = tmp_path / "config.json"
        cfg.write_text(json.dumps(config), encoding="utf-8")
        for sub in ("a", "b"):
            code = cli_main(
                ["run", "--config", str(cfg), "--out", str(tmp_path / sub), "--seed", "11"]
            )
            assert code == 0
        bytes_a = (tmp_path / "a" / "trajectory.csv").read_bytes()
        bytes_b = (tmp_path / "b" / "trajectory.csv").read_bytes()
        assert bytes_a == bytes_b and len(bytes_a) > 0
