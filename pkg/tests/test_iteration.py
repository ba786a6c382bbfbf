import numpy as np
import pytest

from dbpi import (
    AgentSystem,
    DivergedError,
    IterationParams,
    StopRule,
    affine_map,
    average_map,
    build_graph,
    consensus_error,
    embed_fixed_point,
    gauge_from_weights,
    lifted_step,
    limit_dual,
    metropolis_weights,
    NotFixedPointError,
    reduced_step,
    run_algorithm1,
    run_lifted,
    run_parametric,
    run_reduced,
    stacked_residual,
)

from conftest import identical_affine


def _rel_diff(traj_a, traj_b, n_steps=None):
    """Max sup-norm gap between z-sequences, relative to the iterate scale."""
    za, zb = traj_a.zs, traj_b.zs
    k = min(len(za), len(zb)) if n_steps is None else n_steps + 1
    diff = max(np.max(np.abs(za[i] - zb[i])) for i in range(k))
    scale = 1.0 + max(np.max(np.abs(za[i])) for i in range(k))
    return diff / scale


def _forced(n_steps):
    """Stopping rule that runs exactly n_steps updates."""
    return StopRule(tol_step=0.0, tol_cons=0.0, max_iters=n_steps)


def _single_gauge(d=1):
    return gauge_from_weights(metropolis_weights(build_graph({"family": "path", "n": 1}), d=d))


class TestParams:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            IterationParams(alpha=-0.1)
        with pytest.raises(ValueError):
            IterationParams(alpha=0.1, eta=0.0)

    def test_algorithm1_pins_eta_beta(self):
        p = IterationParams.algorithm1(0.3)
        assert p.eta == 1.0 and p.beta_sq == pytest.approx(0.5, abs=1e-15)
        with pytest.raises(ValueError):
            IterationParams(alpha=0.3, beta=0.9, eta=1.0, variant="algorithm1")

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            IterationParams(alpha=0.3, variant="other")


class TestStopRule:
    def test_converged(self):
        rule = StopRule(tol_step=1e-6, tol_cons=1e-6)
        z = np.array([1.0, 1.0])
        assert rule.evaluate(z, z + 1e-9, 2, 1) == "converged"

    def test_continue_on_consensus_gap(self):
        rule = StopRule(tol_step=1e-6, tol_cons=1e-6)
        z = np.array([1.0, 2.0])
        assert rule.evaluate(z, z + 1e-9, 2, 1) == "continue"

    def test_diverged_on_overflow(self):
        rule = StopRule()
        z = np.array([1.0])
        assert rule.evaluate(z, np.array([1e13]), 1, 1) == "diverged"
        assert rule.evaluate(z, np.array([np.nan]), 1, 1) == "diverged"


class TestAlgorithm1:
    def test_single_agent_is_relaxed_picard(self):
        # with one agent the recursion telescopes to z <- z + alpha R(z),
        # and alpha = 1 gives the plain fixed-point iteration
        sys = AgentSystem(maps=(affine_map([[0.5]], [1.0]),))
        w = metropolis_weights(build_graph({"family": "path", "n": 1}))
        traj = run_algorithm1(sys, w, 1.0, np.array([0.0]), stop=_forced(20))
        x = np.array([0.0])
        for k in range(min(21, len(traj.zs))):
            assert np.allclose(traj.zs[k], x, atol=1e-12)
            x = average_map(sys, x)

    def test_identical_affine_reaches_consensus_fixed_point(self, path3):
        sys = identical_affine(3, [[0.5, 0.1], [0.0, 0.4]], [1.0, -0.3])
        x_star = np.linalg.solve(np.eye(2) - np.array([[0.5, 0.1], [0.0, 0.4]]), [1.0, -0.3])
        w = metropolis_weights(build_graph({"family": "path", "n": 3}), d=2)
        traj = run_algorithm1(sys, w, 0.3, np.zeros(6), ref=x_star)
        assert traj.status == "converged"
        assert np.max(np.abs(traj.final_z - np.tile(x_star, 3))) <= 1e-7

    def test_expansive_diverges(self):
        sys = identical_affine(3, 2.0 * np.eye(1), np.zeros(1))
        w = metropolis_weights(build_graph({"family": "path", "n": 3}))
        with pytest.raises(DivergedError) as err:
            run_algorithm1(sys, w, 1.0, np.ones(3))
        assert err.value.trajectory.status == "diverged"


class TestParametric:
    def test_recovers_algorithm1(self, corpus_system):
        c = corpus_system
        alpha = c.alpha_hat / 2.0
        t1 = run_algorithm1(c.system, c.weights, alpha, c.z0, stop=_forced(500))
        t2 = run_parametric(c.system, c.gauge, c.params(alpha), c.z0, stop=_forced(500))
        assert _rel_diff(t1, t2) <= 1e-12

    def test_zero_gauge_telescopes_to_relaxed_picard(self):
        # N = 1 means L = 0; induction collapses the two-term recursion
        sys = AgentSystem(maps=(affine_map([[0.6]], [2.0]),))
        gauge = _single_gauge()
        alpha = 0.7
        traj = run_parametric(sys, gauge, IterationParams(alpha=alpha), np.zeros(1), stop=_forced(30))
        z = np.zeros(1)
        for k in range(min(31, len(traj.zs))):
            assert np.allclose(traj.zs[k], z, atol=1e-12)
            z = z + alpha * stacked_residual(sys, z)

    def test_converges_to_oracle(self, corpus_system):
        c = corpus_system
        traj = run_parametric(c.system, c.gauge, c.params(), c.z0, ref=c.x_star)
        assert traj.status == "converged"
        assert traj.dist_to_ref[-1] == pytest.approx(
            np.linalg.norm(traj.final_z - c.consensus_star)
        )
        assert traj.dist_to_ref[-1] <= 1e-8


class TestLifted:
    def test_elimination_equivalence(self, corpus_system):
        c = corpus_system
        t_par = run_parametric(c.system, c.gauge, c.params(), c.z0, stop=_forced(200))
        t_lift = run_lifted(c.system, c.gauge, c.params(), c.z0, stop=_forced(200))
        assert _rel_diff(t_par, t_lift) <= 1e-9

    def test_dual_kernel_component_conserved(self, path3):
        c = path3
        rng = np.random.default_rng(4)
        w0 = rng.standard_normal(6)
        traj = run_lifted(c.system, c.gauge, c.params(), c.z0, w0, stop=_forced(1000))
        n, d = 3, 2
        kernel0 = np.tile(np.mean(w0.reshape(n, d), axis=0), n)
        for w in traj.duals[:: 100]:
            kernel_k = np.tile(np.mean(w.reshape(n, d), axis=0), n)
            assert np.max(np.abs(kernel_k - kernel0)) <= 1e-10

    def test_fixed_point_of_lifted_map(self, corpus_system):
        c = corpus_system
        params = c.params()
        z_star, wtilde_star = embed_fixed_point(c.system, c.gauge, params, c.x_star)
        w_star = (c.gauge.range_tilde @ wtilde_star.reshape(-1, c.system.dim)).reshape(-1)
        z1, w1 = lifted_step(c.system, c.gauge, params, z_star, w_star)
        assert np.max(np.abs(z1 - z_star)) <= 1e-9
        assert np.max(np.abs(w1 - w_star)) <= 1e-9

    def test_dual_converges_to_limit(self, heterogeneous_corpus):
        for c in heterogeneous_corpus:
            rng = np.random.default_rng(9)
            w0 = rng.standard_normal(c.system.n_agents * c.system.dim)
            traj = run_lifted(c.system, c.gauge, c.params(), c.z0, w0)
            assert traj.status == "converged"
            lim = limit_dual(w0, c.gauge, c.params(), c.system, c.x_star)
            assert np.max(np.abs(traj.final_dual - lim)) <= 1e-6


class TestReduced:
    def test_matches_lifted_for_range_dual(self, corpus_system):
        c = corpus_system
        n, d = c.system.n_agents, c.system.dim
        rng = np.random.default_rng(17)
        wtilde0 = rng.standard_normal(d * (n - 1))
        w0 = (c.gauge.range_tilde @ wtilde0.reshape(n - 1, d)).reshape(-1)
        t_lift = run_lifted(c.system, c.gauge, c.params(), c.z0, w0, stop=_forced(200))
        t_red = run_reduced(c.system, c.gauge, c.params(), c.z0, wtilde0, stop=_forced(200))
        assert _rel_diff(t_lift, t_red) <= 1e-9

    def test_embedded_point_is_fixed(self, corpus_system):
        c = corpus_system
        params = c.params()
        z_star, wtilde_star = embed_fixed_point(c.system, c.gauge, params, c.x_star)
        z1, w1 = reduced_step(c.system, c.gauge, params, z_star, wtilde_star)
        assert np.max(np.abs(z1 - z_star)) <= 1e-9
        assert np.max(np.abs(w1 - wtilde_star)) <= 1e-9

    def test_single_agent_degenerate_dual(self):
        sys = AgentSystem(maps=(affine_map([[0.5]], [1.0]),))
        gauge = _single_gauge()
        traj = run_reduced(sys, gauge, IterationParams(alpha=1.0), np.zeros(1))
        assert traj.status == "converged"
        assert traj.final_z[0] == pytest.approx(2.0, abs=1e-8)
        assert traj.duals.shape[1] == 0


class TestLimitDual:
    def test_identical_agents_zero_limit(self):
        sys = identical_affine(3, [[0.5]], [1.0])
        gauge = gauge_from_weights(metropolis_weights(build_graph({"family": "path", "n": 3})))
        lim = limit_dual(np.zeros(3), gauge, IterationParams(alpha=0.4), sys, np.array([2.0]))
        assert np.allclose(lim, 0.0, atol=1e-12)

    def test_kernel_only_dual_start(self, path3):
        c = path3
        params = c.params()
        w0 = np.tile(np.array([1.5, -0.7]), 3)  # pure consensus component
        lim = limit_dual(w0, c.gauge, params, c.system, c.x_star)
        n, d = 3, 2
        r_blocks = stacked_residual(c.system, c.consensus_star).reshape(n, d)
        correction = (params.alpha / params.beta) * (c.gauge.sqrt_pinv_tilde @ r_blocks).reshape(-1)
        assert np.allclose(lim, w0 - correction, atol=1e-12)

    def test_rejects_non_fixed_point(self, path3):
        c = path3
        with pytest.raises(NotFixedPointError):
            limit_dual(np.zeros(6), c.gauge, c.params(), c.system, c.x_star + 1.0)


class TestTrajectory:
    def test_metrics_dense_and_finite(self, path3):
        c = path3
        traj = run_parametric(c.system, c.gauge, c.params(), c.z0, ref=c.x_star)
        k = traj.n_iters
        assert traj.residual_norm.shape == (k + 1,)
        assert traj.consensus_error.shape == (k + 1,)
        assert traj.dist_to_ref.shape == (k + 1,)
        assert np.all(np.isfinite(traj.residual_norm))
        assert np.all(np.isfinite(traj.dist_to_ref))

    def test_thinning_keeps_final_state(self, path3):
        c = path3
        dense = run_parametric(c.system, c.gauge, c.params(), c.z0)
        thin = run_parametric(c.system, c.gauge, c.params(), c.z0, thin=7)
        assert len(thin.zs) < len(dense.zs)
        assert np.array_equal(thin.zs[-1], dense.zs[-1])
        assert thin.residual_norm.shape == dense.residual_norm.shape  # metrics stay dense

    def test_consensus_error_helper(self):
        z = np.array([1.0, 1.0, 1.0, 1.0])
        assert consensus_error(z, 4, 1) == 0.0
        z = np.array([1.0, -1.0])
        assert consensus_error(z, 2, 1) == pytest.approx(np.sqrt(2.0))

    def test_fixed_point_consistency(self, corpus_system):
        c = corpus_system
        stop = StopRule()
        traj = run_parametric(c.system, c.gauge, c.params(), c.z0, stop=stop)
        assert traj.status == "converged"
        assert np.max(np.abs(traj.final_z - c.consensus_star)) <= 10.0 * stop.tol_step


class TestEliminationQuantified:
    def test_bound_with_random_starts(self, corpus_system):
        c = corpus_system
        rng = np.random.default_rng(31)
        z0 = c.z0 + 0.1 * rng.standard_normal(c.z0.shape)
        t_par = run_parametric(c.system, c.gauge, c.params(), z0, stop=_forced(200))
        t_lift = run_lifted(c.system, c.gauge, c.params(), z0, stop=_forced(200))
        diff = max(np.max(np.abs(a - b)) for a, b in zip(t_par.zs, t_lift.zs))
        scale = 1.0 + max(np.max(np.abs(z)) for z in t_par.zs)
        assert diff <= 1e-9 * scale
