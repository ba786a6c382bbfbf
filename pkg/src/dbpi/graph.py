"""Communication graphs, Metropolis weights, and the gauge matrix.

All spectral work is done on the small N x N matrix and lifted to the
block form (Kronecker product with the identity) analytically, so eigen
factorizations cost O(N^3) instead of O((dN)^3) and the lifted spectrum
is exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    AssumptionViolatedError,
    DisconnectedGraphError,
    InvalidEdgeError,
)

# Eigenvalues below this are treated as zero when splitting range/kernel.
RANK_TOL = 1e-10
# Strictness margin for the rho(L) < 2 check.
SPECTRAL_MARGIN = 1e-12


@dataclass(frozen=True)
class CommGraph:
    """Undirected connected agent topology with 1-based agent indices."""

    n_agents: int
    edges: frozenset  # of (s, t) tuples with s < t

    def __post_init__(self):
        if self.n_agents < 1:
            raise InvalidEdgeError("n_agents must be a positive integer")
        for s, t in self.edges:
            if s == t:
                raise InvalidEdgeError(f"self-loop at agent {s}")
            if not (1 <= s <= self.n_agents and 1 <= t <= self.n_agents):
                raise InvalidEdgeError(f"edge ({s},{t}) outside [1..{self.n_agents}]")
            if s > t:
                raise InvalidEdgeError(f"edge ({s},{t}) must be stored as (min,max)")
        if not self._connected():
            raise DisconnectedGraphError(
                f"graph on {self.n_agents} agents with {len(self.edges)} edges is not connected"
            )

    def _connected(self) -> bool:
        if self.n_agents == 1:
            return True
        adj = {n: set() for n in range(1, self.n_agents + 1)}
        for s, t in self.edges:
            adj[s].add(t)
            adj[t].add(s)
        seen = {1}
        stack = [1]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == self.n_agents

    def degree(self, s: int) -> int:
        return sum(1 for e in self.edges if s in e)

    def has_edge(self, s: int, t: int) -> bool:
        return (min(s, t), max(s, t)) in self.edges

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_agents, self.n_agents))
        for s, t in self.edges:
            a[s - 1, t - 1] = 1.0
            a[t - 1, s - 1] = 1.0
        return a


def _family_edges(family: str, n: int, p=None, seed=None) -> set:
    if n < 1:
        raise InvalidEdgeError("family graphs need n >= 1")
    if family == "path":
        return {(i, i + 1) for i in range(1, n)}
    if family == "cycle":
        if n < 3:
            raise InvalidEdgeError("cycle needs n >= 3")
        return {(i, i + 1) for i in range(1, n)} | {(1, n)}
    if family == "complete":
        return {(s, t) for s in range(1, n + 1) for t in range(s + 1, n + 1)}
    if family == "star":
        if n < 2:
            raise InvalidEdgeError("star needs n >= 2")
        return {(1, t) for t in range(2, n + 1)}
    if family == "erdos_renyi":
        if p is None or seed is None:
            raise InvalidEdgeError("erdos_renyi needs p and seed")
        rng = np.random.default_rng(int(seed))
        edges = set()
        for s in range(1, n + 1):
            for t in range(s + 1, n + 1):
                if rng.random() < float(p):
                    edges.add((s, t))
        return edges
    raise InvalidEdgeError(f"unknown graph family {family!r}")


def build_graph(spec) -> CommGraph:
    """Build a validated CommGraph from a descriptor.

    Accepts ``{"family": name, "n": N, ...}`` for the named families
    (path, cycle, complete, star, erdos_renyi) or an explicit
    ``{"edges": [[s, t], ...], "n": N}`` list with 1-based indices.
    """
    if isinstance(spec, CommGraph):
        return spec
    if not isinstance(spec, dict):
        raise InvalidEdgeError("graph descriptor must be a dict")
    n = int(spec["n"])
    if "family" in spec:
        edges = _family_edges(spec["family"], n, spec.get("p"), spec.get("seed"))
    elif "edges" in spec:
        edges = set()
        for pair in spec["edges"]:
            s, t = int(pair[0]), int(pair[1])
            if s == t:
                raise InvalidEdgeError(f"self-loop at agent {s}")
            edges.add((min(s, t), max(s, t)))
    else:
        raise InvalidEdgeError("graph descriptor needs 'family' or 'edges'")
    return CommGraph(n_agents=n, edges=frozenset(edges))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Metropolis consensus weights W for a communication graph.

    ``w_tilde`` is the N x N matrix; the block form (Kronecker product
    with the d x d identity) is materialized on demand.
    """

    w_tilde: np.ndarray
    d: int
    graph: CommGraph

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents

    @cached_property
    def w(self) -> np.ndarray:
        return _readonly(np.kron(self.w_tilde, np.eye(self.d)))


def metropolis_weights(g: CommGraph, d: int = 1) -> WeightMatrix:
    """Metropolis weights: edge weight 1/(1 + max of endpoint degrees).

    Diagonal entries absorb the remaining mass so rows sum to one; the
    matrix is symmetric, nonnegative, and (for a connected graph) has
    eigenvalue 1 simple with all eigenvalues in (-1, 1].
    """
    n = g.n_agents
    deg = [g.degree(s) for s in range(1, n + 1)]
    w = np.zeros((n, n))
    for s, t in g.edges:
        v = 1.0 / (1.0 + max(deg[s - 1], deg[t - 1]))
        w[s - 1, t - 1] = v
        w[t - 1, s - 1] = v
    for s in range(n):
        w[s, s] = 1.0 - np.sum(w[s])

    # Construction guarantees these; fail loudly if numerics disagree.
    if not np.allclose(w, w.T, atol=1e-14):
        raise AssumptionViolatedError("a", "Metropolis matrix not symmetric")
    if np.any(w < -1e-14):
        raise AssumptionViolatedError("a", "negative Metropolis weight")
    eigs = np.linalg.eigvalsh(w)
    if eigs[0] <= -1.0 + SPECTRAL_MARGIN:
        raise AssumptionViolatedError("b", "Metropolis eigenvalue at or below -1")
    return WeightMatrix(w_tilde=_readonly(w), d=int(d), graph=g)


@dataclass(frozen=True, eq=False)
class GaugeMatrix:
    """Gauge matrix L = l_tilde (x) I_d with its full spectral toolkit.

    Stores the N x N eigendecomposition plus the derived square root,
    pseudoinverse of the square root, and orthonormal range / kernel
    bases. Lifted (dN-sized) views are cached properties.
    """

    l_tilde: np.ndarray
    d: int
    graph: CommGraph
    eigvals_tilde: np.ndarray  # ascending
    eigvecs_tilde: np.ndarray  # columns match eigvals_tilde
    sqrt_tilde: np.ndarray
    sqrt_pinv_tilde: np.ndarray
    range_tilde: np.ndarray  # N x (N-1), eigenvectors of nonzero eigenvalues
    rank_tol: float = field(default=RANK_TOL)

    @property
    def n_agents(self) -> int:
        return self.graph.n_agents

    @property
    def dim(self) -> int:
        return self.d * self.n_agents

    @cached_property
    def eigvals(self) -> np.ndarray:
        """Eigenvalues of the lifted matrix: each small eigenvalue d times."""
        return _readonly(np.repeat(self.eigvals_tilde, self.d))

    @cached_property
    def eigvecs(self) -> np.ndarray:
        return _readonly(np.kron(self.eigvecs_tilde, np.eye(self.d)))

    @cached_property
    def l(self) -> np.ndarray:
        return _readonly(np.kron(self.l_tilde, np.eye(self.d)))

    @cached_property
    def sqrt(self) -> np.ndarray:
        return _readonly(np.kron(self.sqrt_tilde, np.eye(self.d)))

    @cached_property
    def sqrt_pinv(self) -> np.ndarray:
        return _readonly(np.kron(self.sqrt_pinv_tilde, np.eye(self.d)))

    @cached_property
    def range_basis(self) -> np.ndarray:
        """Orthonormal basis of range(L), dN x d(N-1)."""
        return _readonly(np.kron(self.range_tilde, np.eye(self.d)))

    @cached_property
    def kernel_basis(self) -> np.ndarray:
        """Orthonormal basis of ker(L): the explicit consensus formula."""
        n = self.n_agents
        return _readonly(np.kron(np.ones((n, 1)) / np.sqrt(n), np.eye(self.d)))


def _build_gauge(l_tilde: np.ndarray, g: CommGraph, d: int) -> GaugeMatrix:
    l_tilde = np.asarray(l_tilde, dtype=float)
    n = g.n_agents
    if l_tilde.shape != (n, n):
        raise AssumptionViolatedError("d", f"matrix shape {l_tilde.shape} does not match {n} agents")

    # a) symmetric positive semidefinite
    scale = 1.0 + np.max(np.abs(l_tilde))
    if np.max(np.abs(l_tilde - l_tilde.T)) > 1e-12 * scale:
        raise AssumptionViolatedError("a", "matrix is not symmetric")
    eigvals, eigvecs = np.linalg.eigh(l_tilde)
    if eigvals[0] < -RANK_TOL:
        raise AssumptionViolatedError("a", f"negative eigenvalue {eigvals[0]:.3e}")

    # b) spectral radius strictly below 2
    if eigvals[-1] >= 2.0 - SPECTRAL_MARGIN:
        raise AssumptionViolatedError("b", f"spectral radius {eigvals[-1]:.12g} reaches 2")

    # c) kernel equals the consensus subspace
    n_zero = int(np.sum(eigvals <= RANK_TOL))
    if n_zero != 1:
        raise AssumptionViolatedError("c", f"kernel multiplicity {n_zero}, expected 1")
    ones_dir = np.ones(n) / np.sqrt(n)
    if abs(float(eigvecs[:, 0] @ ones_dir)) < 1.0 - 1e-8:
        raise AssumptionViolatedError("c", "kernel is not the consensus direction")

    # d) sparsity compatible with the communication graph
    for s in range(1, n + 1):
        for t in range(s + 1, n + 1):
            if not g.has_edge(s, t) and l_tilde[s - 1, t - 1] != 0.0:
                raise AssumptionViolatedError("d", f"nonzero entry between non-neighbors ({s},{t})")

    lam = np.where(eigvals <= RANK_TOL, 0.0, eigvals)
    sqrt_tilde = (eigvecs * np.sqrt(lam)) @ eigvecs.T
    inv_sqrt = np.where(lam > 0.0, 1.0 / np.sqrt(np.where(lam > 0.0, lam, 1.0)), 0.0)
    sqrt_pinv_tilde = (eigvecs * inv_sqrt) @ eigvecs.T
    return GaugeMatrix(
        l_tilde=_readonly(l_tilde),
        d=int(d),
        graph=g,
        eigvals_tilde=_readonly(eigvals),
        eigvecs_tilde=_readonly(eigvecs),
        sqrt_tilde=_readonly(sqrt_tilde),
        sqrt_pinv_tilde=_readonly(sqrt_pinv_tilde),
        range_tilde=_readonly(eigvecs[:, 1:]),
    )


def gauge_from_weights(w: WeightMatrix) -> GaugeMatrix:
    """Gauge matrix I - W from a Metropolis weight matrix."""
    n = w.n_agents
    return _build_gauge(np.eye(n) - w.w_tilde, w.graph, w.d)


def gauge_from_custom(l_tilde: np.ndarray, g: CommGraph, d: int) -> GaugeMatrix:
    """Validate an arbitrary candidate gauge matrix against a graph.

    Raises AssumptionViolatedError naming the first failed assumption.
    """
    return _build_gauge(l_tilde, g, int(d))


def kernel_projector(gauge: GaugeMatrix) -> np.ndarray:
    """Orthogonal projector onto ker(L): block-averaging over agents."""
    u = gauge.kernel_basis
    return u @ u.T
