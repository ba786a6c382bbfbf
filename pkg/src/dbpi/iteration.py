"""Distributed iteration drivers with trajectory recording.

Four equivalent executions of the same distributed fixed-point scheme:

- run_algorithm1: the two-term consensus recursion with Metropolis
  weights (variant "algorithm1", the eta=1, beta^2=1/2, L=I-W instance),
  implemented directly from its own recursion so equivalence with the
  parametric driver is a test, not a definition;
- run_parametric: the general (alpha, beta, eta) two-term recursion for
  any gauge matrix;
- run_lifted: the primal-dual map on (z, w) whose dual elimination
  recovers the parametric recursion;
- run_reduced: the same with the dual confined to range(L) coordinates.

All drivers work blockwise on (N, d) arrays using the small N x N
matrices, record dense per-step metrics, and raise DivergedError (with
the partial trajectory attached) on overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, DivergedError, NotFixedPointError
from .graph import GaugeMatrix, WeightMatrix
from .operators import AgentSystem, average_map, stacked_residual

VARIANTS = ("algorithm1", "parametric", "lifted", "reduced")


@dataclass(frozen=True)
class IterationParams:
    """Step size alpha and gauge couplings (beta, eta) for a variant.

    beta is stored; beta**2 enters the recursions. The "algorithm1"
    variant pins (eta, beta^2) = (1, 1/2) and expects the gauge I - W.
    """

    alpha: float
    beta: float = math.sqrt(0.5)
    eta: float = 1.0
    variant: str = "parametric"

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.eta <= 0:
            raise ValueError("alpha, beta, eta must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "algorithm1":
            if abs(self.eta - 1.0) > 1e-15 or abs(self.beta**2 - 0.5) > 1e-15:
                raise ValueError("algorithm1 requires eta=1 and beta^2=1/2")

    @property
    def beta_sq(self) -> float:
        return self.beta**2

    @classmethod
    def algorithm1(cls, alpha: float) -> "IterationParams":
        return cls(alpha=alpha, beta=math.sqrt(0.5), eta=1.0, variant="algorithm1")


@dataclass(frozen=True)
class StopRule:
    """Stopping thresholds for the drivers.

    Converged when the sup-norm step and the consensus error both drop
    below their tolerances; diverged when the iterate norm passes the
    overflow guard. Defaults leave long clean tails for rate fits.
    """

    tol_step: float = 1e-10
    tol_cons: float = 1e-8
    max_iters: int = 50000
    overflow: float = 1e12

    def evaluate(self, z_prev: np.ndarray, z_next: np.ndarray, n_agents: int, dim: int) -> str:
        """Decision for the latest step: 'continue', 'converged', or 'diverged'."""
        if not np.all(np.isfinite(z_next)) or np.linalg.norm(z_next, np.inf) > self.overflow:
            return "diverged"
        step = np.linalg.norm(z_next - z_prev, np.inf)
        if step <= self.tol_step and consensus_error(z_next, n_agents, dim) <= self.tol_cons:
            return "converged"
        return "continue"


def consensus_error(z: np.ndarray, n_agents: int, dim: int) -> float:
    """Distance of z from the consensus subspace (Euclidean norm)."""
    blocks = np.asarray(z, dtype=float).reshape(n_agents, dim)
    return float(np.linalg.norm(blocks - np.mean(blocks, axis=0)))


@dataclass(eq=False)
class Trajectory:
    """Recorded run of one driver.

    Metrics are dense (one entry per iterate, including the initial
    state); states may be thinned but always include the final iterate.
    """

    variant: str
    n_agents: int
    dim: int
    ks: np.ndarray
    zs: np.ndarray
    duals: Optional[np.ndarray]
    residual_norm: np.ndarray
    consensus_error: np.ndarray
    dist_to_ref: np.ndarray
    status: str
    n_iters: int

    @property
    def final_z(self) -> np.ndarray:
        return self.zs[-1]

    @property
    def final_dual(self) -> Optional[np.ndarray]:
        return None if self.duals is None else self.duals[-1]


class _Recorder:
    def __init__(self, sys: AgentSystem, variant: str, ref, thin: int):
        self.n, self.d = sys.n_agents, sys.dim
        self.variant = variant
        self.thin = max(1, int(thin))
        self.ref = None
        if ref is not None:
            ref = np.asarray(ref, dtype=float).reshape(-1)
            if ref.shape == (self.d,):
                ref = np.tile(ref, self.n)
            if ref.shape != (self.n * self.d,):
                raise DimensionMismatchError(f"reference has shape {ref.shape}")
            self.ref = ref
        self.ks, self.zs, self.duals = [], [], []
        self.res, self.cons, self.dist = [], [], []
        self.last_k = -1
        self.pending = None

    def record(self, k: int, z_blocks: np.ndarray, r_blocks: np.ndarray, dual=None):
        z = z_blocks.reshape(-1)
        self.res.append(float(np.linalg.norm(r_blocks)))
        self.cons.append(consensus_error(z, self.n, self.d))
        self.dist.append(
            float(np.linalg.norm(z - self.ref)) if self.ref is not None else float("nan")
        )
        if k % self.thin == 0:
            self._store(k, z, dual)
        else:
            self.pending = (k, z.copy(), None if dual is None else np.copy(dual))
        self.last_k = k

    def _store(self, k, z, dual):
        self.ks.append(k)
        self.zs.append(np.array(z, dtype=float))
        self.duals.append(None if dual is None else np.asarray(dual, dtype=float).reshape(-1).copy())
        self.pending = None

    def finish(self, status: str) -> Trajectory:
        if self.pending is not None:
            self._store(*self.pending)
        duals = None
        if any(d is not None for d in self.duals):
            duals = np.array([d for d in self.duals])
        return Trajectory(
            variant=self.variant,
            n_agents=self.n,
            dim=self.d,
            ks=np.array(self.ks, dtype=int),
            zs=np.array(self.zs),
            duals=duals,
            residual_norm=np.array(self.res),
            consensus_error=np.array(self.cons),
            dist_to_ref=np.array(self.dist),
            status=status,
            n_iters=self.last_k,
        )


def _residual_blocks(sys: AgentSystem, z_blocks: np.ndarray) -> np.ndarray:
    out = np.empty_like(z_blocks)
    for i, m in enumerate(sys.maps):
        out[i] = m.evaluate(z_blocks[i]) - z_blocks[i]
    return out


def _check_z0(sys: AgentSystem, z0) -> np.ndarray:
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (sys.n_agents * sys.dim,):
        raise DimensionMismatchError(
            f"z0 has shape {z0.shape}, expected ({sys.n_agents * sys.dim},)"
        )
    return z0.reshape(sys.n_agents, sys.dim)


def _run_two_term(sys, m_next, m_prev, init_fn, alpha, z0, stop, ref, thin, variant):
    """Shared loop for the two-term recursions.

    z^{k+2} = m_next z^{k+1} - m_prev z^k + alpha (R(z^{k+1}) - R(z^k)),
    with z^1 supplied by init_fn.
    """
    stop = stop or StopRule()
    rec = _Recorder(sys, variant, ref, thin)
    z_prev = _check_z0(sys, z0)
    r_prev = _residual_blocks(sys, z_prev)
    rec.record(0, z_prev, r_prev)

    z_cur = init_fn(z_prev, r_prev)
    for k in range(1, stop.max_iters + 1):
        if not np.all(np.isfinite(z_cur)) or np.linalg.norm(z_cur.reshape(-1), np.inf) > stop.overflow:
            raise DivergedError(
                f"{variant} iteration exceeded overflow guard at step {k}",
                trajectory=rec.finish("diverged"),
            )
        r_cur = _residual_blocks(sys, z_cur)
        rec.record(k, z_cur, r_cur)
        decision = stop.evaluate(z_prev.reshape(-1), z_cur.reshape(-1), sys.n_agents, sys.dim)
        if decision == "converged":
            return rec.finish("converged")
        z_next = m_next @ z_cur - m_prev @ z_prev + alpha * (r_cur - r_prev)
        z_prev, r_prev, z_cur = z_cur, r_cur, z_next
    return rec.finish("not_converged")


def run_algorithm1(
    sys: AgentSystem,
    w: WeightMatrix,
    alpha: float,
    z0,
    stop: Optional[StopRule] = None,
    ref=None,
    thin: int = 1,
) -> Trajectory:
    """Two-term consensus recursion driven directly by the weight matrix.

    Initialization z^1 = W z^0 + alpha R(z^0), then
    z^{k+2} = (I+W) z^{k+1} - (I+W)/2 z^k + alpha (R(z^{k+1}) - R(z^k)).
    """
    if w.d != sys.dim or w.n_agents != sys.n_agents:
        raise DimensionMismatchError("weight matrix does not match the system")
    eye = np.eye(w.n_agents)
    m_next = eye + w.w_tilde
    m_prev = (eye + w.w_tilde) / 2.0

    def init(z, r):
        return w.w_tilde @ z + alpha * r

    return _run_two_term(sys, m_next, m_prev, init, alpha, z0, stop, ref, thin, "algorithm1")


def run_parametric(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    z0,
    stop: Optional[StopRule] = None,
    ref=None,
    thin: int = 1,
) -> Trajectory:
    """General two-term recursion for an arbitrary gauge matrix.

    Initialization z^1 = z^0 + alpha R(z^0) - eta L z^0, then
    z^{k+2} = (2I - eta L) z^{k+1} - (I + beta^2 L - eta L) z^k
              + alpha (R(z^{k+1}) - R(z^k)).
    """
    if gauge.d != sys.dim or gauge.n_agents != sys.n_agents:
        raise DimensionMismatchError("gauge matrix does not match the system")
    eye = np.eye(gauge.n_agents)
    lt = gauge.l_tilde
    m_next = 2.0 * eye - params.eta * lt
    m_prev = eye + params.beta_sq * lt - params.eta * lt

    def init(z, r):
        return z + params.alpha * r - params.eta * (lt @ z)

    return _run_two_term(
        sys, m_next, m_prev, init, params.alpha, z0, stop, ref, thin, "parametric"
    )


def _run_primal_dual(sys, gauge, params, z0, dual0, stop, ref, thin, variant, reduced):
    stop = stop or StopRule()
    rec = _Recorder(sys, variant, ref, thin)
    n, d = sys.n_agents, sys.dim
    z = _check_z0(sys, z0)
    st = gauge.sqrt_tilde
    ut = gauge.range_tilde  # N x (N-1)

    dual0 = np.asarray(dual0, dtype=float).reshape(-1)
    if reduced:
        if dual0.shape != (d * (n - 1),):
            raise DimensionMismatchError(
                f"reduced dual has shape {dual0.shape}, expected ({d * (n - 1)},)"
            )
        dual = dual0.reshape(max(n - 1, 0), d).copy()
    else:
        if dual0.shape != (d * n,):
            raise DimensionMismatchError(f"dual has shape {dual0.shape}, expected ({d * n},)")
        dual = dual0.reshape(n, d).copy()

    r = _residual_blocks(sys, z)
    rec.record(0, z, r, dual)
    for k in range(1, stop.max_iters + 1):
        if reduced:
            coupling = st @ (ut @ dual)
            dual_next = dual - params.beta * (ut.T @ (st @ z))
        else:
            coupling = st @ dual
            dual_next = dual - params.beta * (st @ z)
        z_next = z + params.alpha * r + params.beta * coupling - params.eta * (gauge.l_tilde @ z)
        if not np.all(np.isfinite(z_next)) or np.linalg.norm(z_next.reshape(-1), np.inf) > stop.overflow:
            raise DivergedError(
                f"{variant} iteration exceeded overflow guard at step {k}",
                trajectory=rec.finish("diverged"),
            )
        r_next = _residual_blocks(sys, z_next)
        rec.record(k, z_next, r_next, dual_next)
        decision = stop.evaluate(z.reshape(-1), z_next.reshape(-1), n, d)
        z, r, dual = z_next, r_next, dual_next
        if decision == "converged":
            return rec.finish("converged")
    return rec.finish("not_converged")


def run_lifted(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    z0,
    w0=None,
    stop: Optional[StopRule] = None,
    ref=None,
    thin: int = 1,
) -> Trajectory:
    """Primal-dual iteration on (z, w):

    z^{k+1} = z^k + alpha R(z^k) + beta L^{1/2} w^k - eta L z^k
    w^{k+1} = w^k - beta L^{1/2} z^k

    w0 defaults to zero, which matches the parametric initialization.
    """
    if gauge.d != sys.dim or gauge.n_agents != sys.n_agents:
        raise DimensionMismatchError("gauge matrix does not match the system")
    if w0 is None:
        w0 = np.zeros(sys.n_agents * sys.dim)
    return _run_primal_dual(sys, gauge, params, z0, w0, stop, ref, thin, "lifted", False)


def run_reduced(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    z0,
    wtilde0=None,
    stop: Optional[StopRule] = None,
    ref=None,
    thin: int = 1,
) -> Trajectory:
    """Primal-dual iteration with the dual in range(L) coordinates:

    z^{k+1} = z^k + alpha R(z^k) + beta L^{1/2} U w^k - eta L z^k
    w^{k+1} = w^k - beta U^T L^{1/2} z^k

    where U is the orthonormal range basis of the gauge.
    """
    if gauge.d != sys.dim or gauge.n_agents != sys.n_agents:
        raise DimensionMismatchError("gauge matrix does not match the system")
    if wtilde0 is None:
        wtilde0 = np.zeros(sys.dim * (sys.n_agents - 1))
    return _run_primal_dual(sys, gauge, params, z0, wtilde0, stop, ref, thin, "reduced", True)


def lifted_step(sys: AgentSystem, gauge: GaugeMatrix, params: IterationParams, z, w):
    """One application of the primal-dual map on (z, w)."""
    n, d = sys.n_agents, sys.dim
    zb = np.asarray(z, dtype=float).reshape(n, d)
    wb = np.asarray(w, dtype=float).reshape(n, d)
    r = _residual_blocks(sys, zb)
    z_next = zb + params.alpha * r + params.beta * (gauge.sqrt_tilde @ wb) - params.eta * (
        gauge.l_tilde @ zb
    )
    w_next = wb - params.beta * (gauge.sqrt_tilde @ zb)
    return z_next.reshape(-1), w_next.reshape(-1)


def reduced_step(sys: AgentSystem, gauge: GaugeMatrix, params: IterationParams, z, wtilde):
    """One application of the range-coordinate primal-dual map on (z, wtilde)."""
    n, d = sys.n_agents, sys.dim
    zb = np.asarray(z, dtype=float).reshape(n, d)
    wb = np.asarray(wtilde, dtype=float).reshape(max(n - 1, 0), d)
    r = _residual_blocks(sys, zb)
    st, ut = gauge.sqrt_tilde, gauge.range_tilde
    z_next = zb + params.alpha * r + params.beta * (st @ (ut @ wb)) - params.eta * (
        gauge.l_tilde @ zb
    )
    w_next = wb - params.beta * (ut.T @ (st @ zb))
    return z_next.reshape(-1), w_next.reshape(-1)


def limit_dual(
    w0,
    gauge: GaugeMatrix,
    params: IterationParams,
    sys: AgentSystem,
    x_star,
    fp_tol: float = 1e-8,
) -> np.ndarray:
    """Limit of the lifted dual variable for a run started at w0:

    kernel part of w0 minus (alpha/beta) (L^{1/2})^+ R(1 (x) x_star).
    """
    n, d = sys.n_agents, sys.dim
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    if x_star.shape != (d,):
        raise DimensionMismatchError(f"x_star has shape {x_star.shape}, expected ({d},)")
    if np.linalg.norm(average_map(sys, x_star) - x_star, np.inf) > fp_tol:
        raise NotFixedPointError("x_star is not a fixed point of the average map")
    w0 = np.asarray(w0, dtype=float).reshape(n, d)
    kernel_part = np.tile(np.mean(w0, axis=0), n)
    r_star = stacked_residual(sys, np.tile(x_star, n))
    correction = (params.alpha / params.beta) * (
        gauge.sqrt_pinv_tilde @ r_star.reshape(n, d)
    ).reshape(-1)
    return kernel_part - correction
