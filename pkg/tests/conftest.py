"""Shared test corpus: small heterogeneous systems on named graphs.

Every corpus entry carries an independently computed reference fixed
point (a direct linear solve for the affine families, the closed form
for the logistic family) so iteration results can be checked against
an oracle that never touches the drivers.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pytest

from dbpi import (
    AgentSystem,
    GaugeMatrix,
    IterationParams,
    WeightMatrix,
    affine_map,
    build_graph,
    find_alpha_star,
    gauge_from_weights,
    gradient_of_quadratic,
    metropolis_weights,
    scalar_logistic,
)


def heterogeneous_affine(n, d, rho_target, het_scale, seed):
    """N affine maps whose mean matrix has spectral radius rho_target."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((d, d))
    base *= rho_target / np.max(np.abs(np.linalg.eigvals(base)))
    perts = [rng.standard_normal((d, d)) for _ in range(n)]
    pmean = sum(perts) / n
    mats = [base + het_scale * (p - pmean) for p in perts]
    offs = [rng.standard_normal(d) for _ in range(n)]
    return AgentSystem(maps=tuple(affine_map(a, b) for a, b in zip(mats, offs)))


def heterogeneous_quadratic(n, d, seed, het_scale=0.15):
    """N quadratic-gradient maps; mean curvature eigenvalues in (0.4, 1.5)."""
    rng = np.random.default_rng(seed)
    q_basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    q_base = q_basis @ np.diag(np.linspace(0.4, 1.5, d)) @ q_basis.T
    perts = [rng.standard_normal((d, d)) for _ in range(n)]
    pmean = sum(perts) / n
    maps = []
    for p in perts:
        dq = p - pmean
        maps.append(gradient_of_quadratic(q_base + het_scale * (dq + dq.T) / 2.0, rng.standard_normal(d)))
    return AgentSystem(maps=tuple(maps))


def identical_affine(n, a, b):
    return AgentSystem(maps=tuple(affine_map(np.asarray(a, float), np.asarray(b, float)) for _ in range(n)))


def affine_oracle_fixed_point(sys: AgentSystem) -> np.ndarray:
    """Direct linear solve for systems whose maps are all affine in x."""
    d = sys.dim
    jbar = np.mean([np.asarray(m.jacobian(np.zeros(d))) for m in sys.maps], axis=0)
    hbar0 = np.mean([m.evaluate(np.zeros(d)) for m in sys.maps], axis=0)
    return np.linalg.solve(np.eye(d) - jbar, hbar0)


@dataclass(eq=False)
class CorpusSystem:
    name: str
    graph_spec: dict
    system: AgentSystem
    x_star: np.ndarray  # oracle fixed point, independent of any driver
    z0: np.ndarray
    affine: bool  # every map affine in x (closed-form oracle available)

    @cached_property
    def weights(self) -> WeightMatrix:
        return metropolis_weights(build_graph(self.graph_spec), d=self.system.dim)

    @cached_property
    def gauge(self) -> GaugeMatrix:
        return gauge_from_weights(self.weights)

    @cached_property
    def alpha_hat(self) -> float:
        params = IterationParams(alpha=1.0)
        return find_alpha_star(self.system, self.gauge, params, self.x_star).alpha_star

    def params(self, alpha=None, **kw) -> IterationParams:
        return IterationParams(alpha=self.alpha_hat / 2.0 if alpha is None else alpha, **kw)

    @property
    def consensus_star(self) -> np.ndarray:
        return np.tile(self.x_star, self.system.n_agents)


def _build_corpus():
    entries = []

    sys1 = heterogeneous_affine(3, 2, rho_target=0.6, het_scale=0.3, seed=42)
    entries.append(
        CorpusSystem(
            name="path3_affine_d2",
            graph_spec={"family": "path", "n": 3},
            system=sys1,
            x_star=affine_oracle_fixed_point(sys1),
            z0=np.zeros(6),
            affine=True,
        )
    )

    sys2 = heterogeneous_affine(5, 1, rho_target=0.5, het_scale=0.4, seed=1)
    entries.append(
        CorpusSystem(
            name="cycle5_affine_d1",
            graph_spec={"family": "cycle", "n": 5},
            system=sys2,
            x_star=affine_oracle_fixed_point(sys2),
            z0=np.zeros(5),
            affine=True,
        )
    )

    sys3 = heterogeneous_quadratic(4, 3, seed=11)
    entries.append(
        CorpusSystem(
            name="complete4_quad_d3",
            graph_spec={"family": "complete", "n": 4},
            system=sys3,
            x_star=affine_oracle_fixed_point(sys3),
            z0=np.zeros(12),
            affine=True,
        )
    )

    rng = np.random.default_rng(5)
    aff = heterogeneous_affine(3, 2, rho_target=0.5, het_scale=0.25, seed=19)
    quad = heterogeneous_quadratic(3, 2, seed=23)
    sys4 = AgentSystem(maps=aff.maps + quad.maps)
    entries.append(
        CorpusSystem(
            name="star6_mixed_d2",
            graph_spec={"family": "star", "n": 6},
            system=sys4,
            x_star=affine_oracle_fixed_point(sys4),
            z0=0.1 * rng.standard_normal(12),
            affine=True,
        )
    )

    rs = np.array([2.95, 2.65, 2.85, 2.75])  # mean exactly 2.8
    sys5 = AgentSystem(maps=tuple(scalar_logistic(r, 1) for r in rs))
    x_star5 = np.array([1.0 - 1.0 / 2.8])
    entries.append(
        CorpusSystem(
            name="path4_logistic_d1",
            graph_spec={"family": "path", "n": 4},
            system=sys5,
            x_star=x_star5,
            z0=np.tile(x_star5 + 0.05, 4),
            affine=False,
        )
    )
    return entries


_CORPUS = _build_corpus()
_BY_NAME = {c.name: c for c in _CORPUS}


@pytest.fixture(scope="session")
def corpus():
    return _CORPUS


@pytest.fixture(scope="session", params=[c.name for c in _CORPUS])
def corpus_system(request):
    return _BY_NAME[request.param]


@pytest.fixture(scope="session")
def heterogeneous_corpus():
    """The three systems with per-agent residuals nonzero at consensus."""
    return [_BY_NAME[n] for n in ("path3_affine_d2", "cycle5_affine_d1", "star6_mixed_d2")]


@pytest.fixture(scope="session")
def path3(request):
    return _BY_NAME["path3_affine_d2"]
