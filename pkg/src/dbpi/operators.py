"""Agent-held maps, the average map, the stacked residual, and Jacobians.

Agents are heterogeneous by design: each agent map may come from a
different family, and only the average map needs an attractor. Maps
without an analytic Jacobian fall back to central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DimensionMismatchError, DivergedError, NonSymmetricMatrixError

OVERFLOW_GUARD = 1e12
FIXED_POINT_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class AgentMap:
    """One agent's local map on R^d with an optional analytic Jacobian."""

    dim: int
    evaluate: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    label: str = "custom"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.evaluate(x)


@dataclass(frozen=True, eq=False)
class AgentSystem:
    """N agent maps of equal dimension."""

    maps: tuple

    def __post_init__(self):
        if len(self.maps) < 1:
            raise DimensionMismatchError("system needs at least one agent")
        dims = {m.dim for m in self.maps}
        if len(dims) != 1:
            raise DimensionMismatchError(f"agent dimensions disagree: {sorted(dims)}")

    @property
    def n_agents(self) -> int:
        return len(self.maps)

    @property
    def dim(self) -> int:
        return self.maps[0].dim


def _check_dim(x: np.ndarray, d: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (d,):
        raise DimensionMismatchError(f"{what} has shape {x.shape}, expected ({d},)")
    return x


def affine_map(a: np.ndarray, b: np.ndarray) -> AgentMap:
    """H(x) = A x + b with Jacobian A."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatchError(f"A must be square, got {a.shape}")
    if b.shape != (a.shape[0],):
        raise DimensionMismatchError(f"b has shape {b.shape}, expected ({a.shape[0]},)")
    d = a.shape[0]
    return AgentMap(
        dim=d,
        evaluate=lambda x: a @ x + b,
        jacobian=lambda x: a.copy(),
        label="affine",
    )


def gradient_of_quadratic(q: np.ndarray, c: np.ndarray) -> AgentMap:
    """Unit-step gradient map of f(x) = x'Qx/2 - c'x, i.e. H(x) = x - (Qx - c)."""
    q = np.asarray(q, dtype=float)
    c = np.asarray(c, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise DimensionMismatchError(f"Q must be square, got {q.shape}")
    if not np.allclose(q, q.T, atol=1e-12 * (1.0 + np.max(np.abs(q)))):
        raise NonSymmetricMatrixError("Q must be symmetric")
    if c.shape != (q.shape[0],):
        raise DimensionMismatchError(f"c has shape {c.shape}, expected ({q.shape[0]},)")
    d = q.shape[0]
    eye = np.eye(d)
    return AgentMap(
        dim=d,
        evaluate=lambda x: x - (q @ x - c),
        jacobian=lambda x: eye - q,
        label="gradient_of_quadratic",
    )


def scalar_logistic(r: float, dim: int = 1) -> AgentMap:
    """Coordinatewise logistic map H(x) = r x (1 - x)."""
    r = float(r)
    return AgentMap(
        dim=int(dim),
        evaluate=lambda x: r * x * (1.0 - x),
        jacobian=lambda x: np.diag(r * (1.0 - 2.0 * x)),
        label="scalar_logistic",
    )


def average_map(sys: AgentSystem, x: np.ndarray) -> np.ndarray:
    """Mean of the agent maps at x."""
    x = _check_dim(x, sys.dim, "x")
    vals = np.stack([m.evaluate(x) for m in sys.maps])
    return np.mean(vals, axis=0)


def stacked_residual(sys: AgentSystem, z: np.ndarray) -> np.ndarray:
    """Blockwise residual: block n is H_n(z_n) - z_n."""
    n, d = sys.n_agents, sys.dim
    z = np.asarray(z, dtype=float)
    if z.shape != (n * d,):
        raise DimensionMismatchError(f"z has shape {z.shape}, expected ({n * d},)")
    blocks = z.reshape(n, d)
    out = np.empty_like(blocks)
    for i, m in enumerate(sys.maps):
        out[i] = m.evaluate(blocks[i]) - blocks[i]
    return out.reshape(-1)


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian with per-coordinate step sqrt(eps)*max(1,|x_s|)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    f0 = np.asarray(f(x), dtype=float)
    jac = np.empty((f0.shape[0], d))
    root_eps = np.sqrt(np.finfo(float).eps)
    for s in range(d):
        h = root_eps * max(1.0, abs(x[s]))
        xp = x.copy()
        xm = x.copy()
        xp[s] += h
        xm[s] -= h
        # actual symmetric step after rounding
        h2 = xp[s] - xm[s]
        jac[:, s] = (np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / h2
    return jac


def _map_jacobian(m: AgentMap, x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "analytic" or (mode == "auto" and m.jacobian is not None):
        if m.jacobian is None:
            raise DimensionMismatchError(f"map {m.label!r} has no analytic Jacobian")
        return np.asarray(m.jacobian(x), dtype=float)
    return finite_difference_jacobian(m.evaluate, x)


def jacobian_of_average(sys: AgentSystem, x: np.ndarray, mode: str = "auto") -> np.ndarray:
    """Jacobian of the average map: mean of the per-agent Jacobians.

    mode: 'analytic' (requires every map to carry one), 'finite_diff',
    or 'auto' (analytic where available).
    """
    x = _check_dim(x, sys.dim, "x")
    jacs = np.stack([_map_jacobian(m, x, mode) for m in sys.maps])
    return np.mean(jacs, axis=0)


def jacobian_of_residual(sys: AgentSystem, z: np.ndarray, mode: str = "auto") -> np.ndarray:
    """Block-diagonal Jacobian of the stacked residual: blocks J_n(z_n) - I."""
    n, d = sys.n_agents, sys.dim
    z = np.asarray(z, dtype=float)
    if z.shape != (n * d,):
        raise DimensionMismatchError(f"z has shape {z.shape}, expected ({n * d},)")
    blocks = z.reshape(n, d)
    eye = np.eye(d)
    out = np.zeros((n * d, n * d))
    for i, m in enumerate(sys.maps):
        out[i * d : (i + 1) * d, i * d : (i + 1) * d] = _map_jacobian(m, blocks[i], mode) - eye
    return out


@dataclass(frozen=True)
class FixedPointCertificate:
    """Attractor certificate at a candidate fixed point."""

    x_star: np.ndarray
    residual_norm: float
    jacobian: np.ndarray
    spectral_radius: float
    is_attractor: bool


@dataclass(frozen=True, eq=False)
class CentralizedRun:
    """Result of the centralized fixed-point iteration."""

    certificate: FixedPointCertificate
    xs: np.ndarray  # (k+1, d) iterates including x0
    converged: bool
    n_iters: int


def certify_fixed_point(
    sys: AgentSystem, x: np.ndarray, tol: float = FIXED_POINT_TOL, mode: str = "auto"
) -> FixedPointCertificate:
    """Evaluate the attractor condition at x: residual and Jacobian spectral radius."""
    x = _check_dim(x, sys.dim, "x")
    res = float(np.linalg.norm(average_map(sys, x) - x))
    jac = jacobian_of_average(sys, x, mode)
    rho = float(np.max(np.abs(np.linalg.eigvals(jac))))
    return FixedPointCertificate(
        x_star=x.copy(),
        residual_norm=res,
        jacobian=jac,
        spectral_radius=rho,
        is_attractor=bool(rho < 1.0 and res <= tol),
    )


def newton_fixed_point(
    sys: AgentSystem,
    x0: np.ndarray,
    max_iters: int = 100,
    tol: float = 1e-12,
    mode: str = "auto",
) -> np.ndarray:
    """Locate a fixed point of the average map by Newton's method.

    Unlike the fixed-point iteration this also finds repelling fixed
    points, which is what the spectral analysis needs to certify that a
    point is *not* an attractor. Raises NotFixedPointError on failure.
    """
    from .errors import NotFixedPointError

    x = _check_dim(x0, sys.dim, "x0").copy()
    eye = np.eye(sys.dim)
    for _ in range(max_iters):
        g = average_map(sys, x) - x
        if np.linalg.norm(g, np.inf) <= tol:
            return x
        jac = jacobian_of_average(sys, x, mode) - eye
        try:
            step = np.linalg.solve(jac, g)
        except np.linalg.LinAlgError as exc:
            raise NotFixedPointError(f"newton step failed: {exc}") from exc
        x = x - step
        if not np.all(np.isfinite(x)) or np.linalg.norm(x, np.inf) > OVERFLOW_GUARD:
            raise NotFixedPointError("newton iteration left the overflow guard")
    raise NotFixedPointError(f"newton did not converge within {max_iters} steps")


def centralized_picard(
    sys: AgentSystem,
    x0: np.ndarray,
    max_iters: int = 10000,
    tol: float = FIXED_POINT_TOL,
    overflow: float = OVERFLOW_GUARD,
    mode: str = "auto",
) -> CentralizedRun:
    """Iterate x <- H(x) until the step norm drops below tol.

    Raises DivergedError (with the partial iterate history attached) when
    the iterate norm exceeds the overflow guard. If max_iters is reached
    first, the run is returned with converged=False.
    """
    x = _check_dim(x0, sys.dim, "x0")
    xs = [x.copy()]
    converged = False
    for _ in range(max_iters):
        x_new = average_map(sys, x)
        xs.append(x_new.copy())
        if not np.all(np.isfinite(x_new)) or np.linalg.norm(x_new, np.inf) > overflow:
            raise DivergedError(
                f"centralized iteration exceeded overflow guard after {len(xs) - 1} steps",
                xs=np.array(xs),
            )
        if np.linalg.norm(x_new - x, np.inf) <= tol:
            x = x_new
            converged = True
            break
        x = x_new
    cert = certify_fixed_point(sys, x, tol=tol, mode=mode)
    return CentralizedRun(
        certificate=cert, xs=np.array(xs), converged=converged, n_iters=len(xs) - 1
    )
