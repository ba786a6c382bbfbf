"""Spectral certification of the distributed iteration.

Everything here reasons about the Jacobian of the reduced primal-dual
map at the embedded fixed point,

    J(alpha) = I + A(eta, beta) + B(alpha),

where A couples the gauge matrix to the dual coordinates and B carries
alpha times the stacked-residual Jacobian. The module provides:

- the root pairs of x^2 + lam*eta*x + lam*beta^2 per gauge eigenvalue
  and the (eta, beta) admissibility conditions on them;
- the semisimple structure of the unperturbed matrix I + A (eigenvalue
  1 of multiplicity d carried by the consensus-kernel directions);
- a certified-by-probing search for the step-size threshold alpha*;
- eigenvalue-curve tracing in alpha and a finite-difference check that
  the d unit-starting curves leave the unit circle with slopes given by
  the average-map Jacobian minus the identity;
- empirical linear-rate estimation from recorded trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConditionsNotMetError,
    DimensionMismatchError,
    NoPositiveAlphaError,
    NotFixedPointError,
    SlopeMismatchError,
    WindowTooShortError,
)
from .graph import GaugeMatrix
from .iteration import IterationParams, Trajectory
from .operators import AgentSystem, average_map, jacobian_of_average, jacobian_of_residual

STRICTNESS_MARGIN = 1e-12
MATCH_AMBIGUITY_TOL = 1e-12


def spectral_radius(m: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(m))))


# ---------------------------------------------------------------------------
# root pairs and admissibility of (eta, beta)


@dataclass(frozen=True)
class RootPair:
    """Roots of x^2 + lam*eta*x + lam*beta^2 with the shifted magnitudes."""

    lam: float
    gamma1: complex
    gamma2: complex
    mag1: float  # |1 + gamma1|
    mag2: float  # |1 + gamma2|


def gamma_roots(lam: float, eta: float, beta: float) -> RootPair:
    """Both roots of x^2 + lam*eta*x + lam*beta^2 = 0.

    Uses the numerically stable quadratic formula; lam = 0 gives the
    double root 0.
    """
    lam = float(lam)
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    b = lam * float(eta)
    c = lam * float(beta) ** 2
    disc = b * b - 4.0 * c
    if disc < 0.0:
        re, im = -b / 2.0, math.sqrt(-disc) / 2.0
        g1, g2 = complex(re, im), complex(re, -im)
    else:
        r1 = (-b - math.sqrt(disc)) / 2.0
        r2 = c / r1 if r1 != 0.0 else 0.0
        g1, g2 = complex(r1), complex(r2)
    return RootPair(lam=lam, gamma1=g1, gamma2=g2, mag1=abs(1.0 + g1), mag2=abs(1.0 + g2))


@dataclass(frozen=True)
class RootConditionEntry:
    lam: float
    pair: RootPair
    is_zero: bool
    at_unit_circle: bool
    ok: bool


@dataclass(frozen=True)
class RootConditionReport:
    eta: float
    beta: float
    entries: tuple
    ok: bool

    def to_dict(self) -> dict:
        return {
            "eta": self.eta,
            "beta": self.beta,
            "ok": self.ok,
            "entries": [
                {
                    "lambda": e.lam,
                    "gamma1": [e.pair.gamma1.real, e.pair.gamma1.imag],
                    "gamma2": [e.pair.gamma2.real, e.pair.gamma2.imag],
                    "mag1": e.pair.mag1,
                    "mag2": e.pair.mag2,
                    "is_zero": e.is_zero,
                    "ok": e.ok,
                }
                for e in self.entries
            ],
        }


def check_root_conditions(
    gauge: GaugeMatrix, eta: float, beta: float, margin: float = STRICTNESS_MARGIN
) -> RootConditionReport:
    """Admissibility of (eta, beta) for a gauge: every shifted root must
    sit inside the unit circle, touching it only for the zero eigenvalue.

    Strict inequalities are tested with a 1e-12 margin: nonzero
    eigenvalues need both magnitudes <= 1 - margin, the zero eigenvalue
    needs both magnitudes within margin of 1.
    """
    entries = []
    for lam in gauge.eigvals:
        pair = gamma_roots(max(float(lam), 0.0), eta, beta)
        is_zero = bool(lam <= gauge.rank_tol)
        at_unit = bool(abs(pair.mag1 - 1.0) <= margin and abs(pair.mag2 - 1.0) <= margin)
        if is_zero:
            ok = at_unit
        else:
            ok = bool(pair.mag1 <= 1.0 - margin and pair.mag2 <= 1.0 - margin)
        entries.append(
            RootConditionEntry(lam=float(lam), pair=pair, is_zero=is_zero, at_unit_circle=at_unit, ok=ok)
        )
    return RootConditionReport(
        eta=float(eta), beta=float(beta), entries=tuple(entries), ok=all(e.ok for e in entries)
    )


# ---------------------------------------------------------------------------
# Jacobian assembly


def base_jacobian(gauge: GaugeMatrix, eta: float, beta: float) -> np.ndarray:
    """The unperturbed (alpha = 0) reduced-map Jacobian I + A(eta, beta)."""
    dn = gauge.dim
    dr = gauge.d * (gauge.n_agents - 1)
    su = gauge.sqrt @ gauge.range_basis  # dN x d(N-1)
    top = np.hstack([np.eye(dn) - eta * gauge.l, beta * su])
    bot = np.hstack([-beta * su.T, np.eye(dr)])
    return np.vstack([top, bot])


def _check_fixed_point(sys: AgentSystem, x_star, fp_tol: float) -> np.ndarray:
    x_star = np.asarray(x_star, dtype=float).reshape(-1)
    if x_star.shape != (sys.dim,):
        raise DimensionMismatchError(f"x_star has shape {x_star.shape}, expected ({sys.dim},)")
    if np.linalg.norm(average_map(sys, x_star) - x_star, np.inf) > fp_tol:
        raise NotFixedPointError("x_star is not a fixed point of the average map")
    return x_star


def _residual_jacobian_embedded(sys: AgentSystem, x_star: np.ndarray, mode: str) -> np.ndarray:
    """B(1): the stacked-residual Jacobian padded to reduced-state size."""
    n, d = sys.n_agents, sys.dim
    jr = jacobian_of_residual(sys, np.tile(x_star, n), mode)
    m = n * d + d * (n - 1)
    out = np.zeros((m, m))
    out[: n * d, : n * d] = jr
    return out


def reduced_jacobian(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    mode: str = "auto",
    fp_tol: float = 1e-8,
) -> np.ndarray:
    """Jacobian of the reduced primal-dual map at the embedded fixed point."""
    if gauge.d != sys.dim or gauge.n_agents != sys.n_agents:
        raise DimensionMismatchError("gauge matrix does not match the system")
    x_star = _check_fixed_point(sys, x_star, fp_tol)
    return base_jacobian(gauge, params.eta, params.beta) + params.alpha * _residual_jacobian_embedded(
        sys, x_star, mode
    )


def make_rho_evaluator(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    mode: str = "auto",
    fp_tol: float = 1e-8,
) -> Callable[[float], float]:
    """alpha -> spectral radius of the reduced-map Jacobian, with the
    alpha-independent pieces precomputed."""
    x_star = _check_fixed_point(sys, x_star, fp_tol)
    base = base_jacobian(gauge, params.eta, params.beta)
    bump = _residual_jacobian_embedded(sys, x_star, mode)

    def rho(alpha: float) -> float:
        return spectral_radius(base + float(alpha) * bump)

    return rho


# ---------------------------------------------------------------------------
# semisimple structure of the unperturbed Jacobian


@dataclass(frozen=True)
class SemisimpleReport:
    n_unit: int
    expected_multiplicity: int
    spectral_gap: float  # 1 - max magnitude among non-unit eigenvalues
    max_principal_angle: float
    kernel_dim: int
    ok: bool

    def to_dict(self) -> dict:
        return {
            "n_unit": self.n_unit,
            "expected_multiplicity": self.expected_multiplicity,
            "spectral_gap": self.spectral_gap,
            "max_principal_angle": self.max_principal_angle,
            "kernel_dim": self.kernel_dim,
            "ok": self.ok,
        }


def check_semisimple(
    gauge: GaugeMatrix,
    eta: float,
    beta: float,
    unit_tol: float = 1e-9,
    angle_tol: float = 1e-8,
) -> SemisimpleReport:
    """Structure of I + A: eigenvalue 1 must have multiplicity exactly d,
    algebraic equal to geometric, with eigenspace ker(L) x {0}; all other
    eigenvalues must sit strictly inside the unit circle.

    Raises ConditionsNotMetError if (eta, beta) fail the root conditions.
    """
    if not check_root_conditions(gauge, eta, beta).ok:
        raise ConditionsNotMetError(f"(eta={eta}, beta={beta}) fail the root conditions")
    m = base_jacobian(gauge, eta, beta)
    eigs = np.linalg.eigvals(m)
    near_unit = np.abs(eigs - 1.0) <= unit_tol
    n_unit = int(np.sum(near_unit))
    others = np.abs(eigs[~near_unit])
    gap = float(1.0 - np.max(others)) if others.size else 1.0

    # geometric multiplicity and eigenspace via the SVD of (M - I)
    _, sv, sv_vt = np.linalg.svd(m - np.eye(m.shape[0]))
    kernel_dim = int(np.sum(sv <= unit_tol))
    d = gauge.d
    target = np.zeros((m.shape[0], d))
    target[: gauge.dim, :] = gauge.kernel_basis
    if kernel_dim > 0:
        basis = sv_vt[m.shape[0] - kernel_dim :, :].T  # orthonormal null-space basis
        # sine route: accurate for the small angles we need to certify
        resid = target - basis @ (basis.T @ target)
        sines = np.linalg.svd(resid, compute_uv=False)
        max_angle = float(np.arcsin(np.clip(np.max(sines), 0.0, 1.0)))
    else:
        max_angle = float(np.pi / 2.0)
    ok = (
        n_unit == d
        and kernel_dim == d
        and gap > 0.0
        and max_angle <= angle_tol
    )
    return SemisimpleReport(
        n_unit=n_unit,
        expected_multiplicity=d,
        spectral_gap=gap,
        max_principal_angle=max_angle,
        kernel_dim=kernel_dim,
        ok=ok,
    )


# ---------------------------------------------------------------------------
# step-size threshold


@dataclass(frozen=True)
class AlphaStarResult:
    alpha_star: float
    saturated: bool  # predicate held all the way to alpha_max
    alpha_grid: np.ndarray
    rho_grid: np.ndarray
    n_bisections: int

    def to_dict(self) -> dict:
        return {
            "alpha_star": self.alpha_star,
            "saturated": self.saturated,
            "alpha_grid": self.alpha_grid.tolist(),
            "rho_grid": self.rho_grid.tolist(),
            "n_bisections": self.n_bisections,
        }


def find_alpha_star(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    alpha_max: float = 10.0,
    grid: int = 64,
    refine_tol: float = 1e-10,
    mode: str = "auto",
    fp_tol: float = 1e-8,
) -> AlphaStarResult:
    """Largest certified step size: probe rho(alpha) on a log-spaced grid
    in (0, alpha_max], then bisect the boundary interval (at most 40
    steps, stopping at width refine_tol) and return the certified lower
    end.

    The predicate is rho(alpha) < 1 + 1e-12; the margin keeps the
    degenerate zero-residual-Jacobian case (rho identically 1, iteration
    still convergent on the quotient) on the passing side. Raises
    NoPositiveAlphaError if the smallest probe already fails and
    ConditionsNotMetError if (eta, beta) are inadmissible.
    """
    if not check_root_conditions(gauge, params.eta, params.beta).ok:
        raise ConditionsNotMetError(
            f"(eta={params.eta}, beta={params.beta}) fail the root conditions"
        )
    rho = make_rho_evaluator(sys, gauge, params, x_star, mode, fp_tol)
    alphas = np.geomspace(alpha_max * 1e-6, alpha_max, int(grid))
    rhos = np.array([rho(a) for a in alphas])
    passing = rhos < 1.0 + STRICTNESS_MARGIN
    if not passing[0]:
        raise NoPositiveAlphaError(
            f"rho({alphas[0]:.3e}) = {rhos[0]:.6f} >= 1; no positive step size certified"
        )
    if np.all(passing):
        return AlphaStarResult(
            alpha_star=float(alpha_max),
            saturated=True,
            alpha_grid=alphas,
            rho_grid=rhos,
            n_bisections=0,
        )
    first_fail = int(np.argmin(passing))  # first False
    lo, hi = float(alphas[first_fail - 1]), float(alphas[first_fail])
    n_bis = 0
    while n_bis < 40 and hi - lo > refine_tol:
        mid = 0.5 * (lo + hi)
        if rho(mid) < 1.0 + STRICTNESS_MARGIN:
            lo = mid
        else:
            hi = mid
        n_bis += 1
    return AlphaStarResult(
        alpha_star=lo, saturated=False, alpha_grid=alphas, rho_grid=rhos, n_bisections=n_bis
    )


# ---------------------------------------------------------------------------
# eigenvalue curves and their derivatives at zero


@dataclass(eq=False)
class EigencurveResult:
    alphas: np.ndarray
    curves: np.ndarray  # (n_curves, n_alphas) complex; curves 0..d-1 start at 1
    warnings: list

    @property
    def n_curves(self) -> int:
        return self.curves.shape[0]


def _match_greedy(prev: np.ndarray, new: np.ndarray, warnings: list, tag: str) -> np.ndarray:
    """Greedy nearest-neighbor assignment of new eigenvalues to curves.

    Globally smallest distance first; ties broken by smallest curve
    index, then smallest candidate index. Near-ties (within 1e-12) are
    reported as ambiguous, not resolved silently.
    """
    n = prev.shape[0]
    dist = np.abs(prev[:, None] - new[None, :])
    order = sorted(
        ((dist[i, j], i, j) for i in range(n) for j in range(n)), key=lambda t: (t[0], t[1], t[2])
    )
    row_used = np.zeros(n, dtype=bool)
    col_used = np.zeros(n, dtype=bool)
    assign = np.full(n, -1, dtype=int)
    for idx, (d0, i, j) in enumerate(order):
        if row_used[i] or col_used[j]:
            continue
        for d1, i1, j1 in order[idx + 1 :]:
            if d1 - d0 > MATCH_AMBIGUITY_TOL:
                break
            if (i1 == i) != (j1 == j) and not row_used[i1] and not col_used[j1]:
                warnings.append(f"{tag}: ambiguous match for curve {i} (distance gap <= 1e-12)")
                break
        assign[i] = j
        row_used[i] = True
        col_used[j] = True
    return new[assign]


def _initial_order(eigs: np.ndarray) -> np.ndarray:
    """Canonical start order: distance from 1 ascending, then (re, im)."""
    keys = sorted(range(eigs.shape[0]), key=lambda i: (abs(eigs[i] - 1.0), eigs[i].real, eigs[i].imag))
    return eigs[np.array(keys)]


def trace_eigencurves(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    alpha_grid,
    mode: str = "auto",
    fp_tol: float = 1e-8,
) -> EigencurveResult:
    """Eigenvalues of the reduced-map Jacobian along an alpha grid,
    matched across consecutive grid points into d(2N-1) continuous
    curves. The grid must start at 0; the first d curves start at the
    unit eigenvalue.
    """
    alphas = np.asarray(alpha_grid, dtype=float)
    if alphas.ndim != 1 or alphas.size < 1 or alphas[0] != 0.0:
        raise ValueError("alpha_grid must be 1-d and start at 0")
    if np.any(np.diff(alphas) <= 0):
        raise ValueError("alpha_grid must be strictly increasing")
    x_star = _check_fixed_point(sys, x_star, fp_tol)
    base = base_jacobian(gauge, params.eta, params.beta)
    bump = _residual_jacobian_embedded(sys, x_star, mode)

    warnings: list = []
    cur = _initial_order(np.linalg.eigvals(base))
    cols = [cur]
    for a in alphas[1:]:
        new = np.linalg.eigvals(base + a * bump)
        cur = _match_greedy(cur, new, warnings, f"alpha={a:.6g}")
        cols.append(cur)
    return EigencurveResult(alphas=alphas, curves=np.array(cols).T, warnings=warnings)


def _sorted_multiset(vals: np.ndarray) -> np.ndarray:
    idx = np.lexsort((np.imag(vals), np.real(vals)))
    return np.asarray(vals)[idx]


def multiset_distance(a, b) -> float:
    """Max pointwise distance after canonical (re, im) sorting."""
    a = _sorted_multiset(np.asarray(a, dtype=complex))
    b = _sorted_multiset(np.asarray(b, dtype=complex))
    if a.shape != b.shape:
        raise DimensionMismatchError("multisets have different sizes")
    return float(np.max(np.abs(a - b))) if a.size else 0.0


@dataclass(eq=False)
class DerivativeCheckReport:
    hs: np.ndarray
    distances: np.ndarray  # multiset distance slope-set vs target per h
    slopes: np.ndarray  # (n_h, d) matched slopes
    target: np.ndarray  # eigenvalues of the average-map Jacobian minus I
    monotone_ok: bool  # distances decrease (within noise floor) as h shrinks
    negative_real_ok: bool  # all finest-h slopes have negative real part
    ok: bool

    def to_dict(self) -> dict:
        return {
            "hs": self.hs.tolist(),
            "distances": self.distances.tolist(),
            "slopes_finest": [[s.real, s.imag] for s in self.slopes[-1]],
            "target": [[t.real, t.imag] for t in self.target],
            "monotone_ok": self.monotone_ok,
            "negative_real_ok": self.negative_real_ok,
            "ok": self.ok,
        }


def derivative_check(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    h_grid=None,
    mode: str = "auto",
    fp_tol: float = 1e-8,
    tol: Optional[float] = None,
    noise_floor: float = 1e-8,
) -> DerivativeCheckReport:
    """Finite-difference slopes of the d unit-starting eigenvalue curves.

    For each step h the d eigenvalues continued from 1 are extracted and
    (value - 1)/h is compared, as a canonically sorted multiset, with
    the spectrum of the average-map Jacobian minus the identity. If tol
    is given, SlopeMismatchError is raised when the finest-h distance
    exceeds it.
    """
    if h_grid is None:
        h_grid = np.array([1e-2, 1e-3, 1e-4, 1e-5, 1e-6])
    hs = np.asarray(h_grid, dtype=float)
    if np.any(hs <= 0) or np.any(np.diff(hs) >= 0):
        raise ValueError("h_grid must be positive and strictly decreasing")
    x_star = _check_fixed_point(sys, x_star, fp_tol)
    base = base_jacobian(gauge, params.eta, params.beta)
    bump = _residual_jacobian_embedded(sys, x_star, mode)
    d = sys.dim

    start = _initial_order(np.linalg.eigvals(base))
    target = np.linalg.eigvals(jacobian_of_average(sys, x_star, mode) - np.eye(d))
    warnings: list = []
    slopes = []
    dists = []
    for h in hs:
        new = np.linalg.eigvals(base + h * bump)
        matched = _match_greedy(start, new, warnings, f"h={h:.3e}")
        sl = (matched[:d] - 1.0) / h
        slopes.append(sl)
        dists.append(multiset_distance(sl, target))
    slopes = np.array(slopes)
    dists = np.array(dists)
    monotone_ok = bool(np.all(np.diff(dists) <= noise_floor))
    negative_real_ok = bool(np.all(np.real(slopes[-1]) < 0.0))
    ok = monotone_ok and (tol is None or dists[-1] <= tol)
    if tol is not None and dists[-1] > tol:
        raise SlopeMismatchError(
            f"slope multiset distance {dists[-1]:.3e} exceeds tolerance {tol:.3e} at h={hs[-1]:.3e}"
        )
    return DerivativeCheckReport(
        hs=hs,
        distances=dists,
        slopes=slopes,
        target=target,
        monotone_ok=monotone_ok,
        negative_real_ok=negative_real_ok,
        ok=ok,
    )


# ---------------------------------------------------------------------------
# fixed-point embedding and empirical rate


def embed_fixed_point(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    fp_tol: float = 1e-8,
):
    """Embed a fixed point of the average map into reduced coordinates:
    (1 (x) x_star, -(alpha/beta) U^T (L^{1/2})^+ R(1 (x) x_star))."""
    from .operators import stacked_residual

    x_star = _check_fixed_point(sys, x_star, fp_tol)
    n, d = sys.n_agents, sys.dim
    z_star = np.tile(x_star, n)
    r_blocks = stacked_residual(sys, z_star).reshape(n, d)
    wtilde = -(params.alpha / params.beta) * (
        gauge.range_tilde.T @ (gauge.sqrt_pinv_tilde @ r_blocks)
    )
    return z_star, wtilde.reshape(-1)


@dataclass(eq=False)
class SpectralReport:
    """Full certification bundle for one (system, gauge, eta, beta)."""

    eigenvalues: np.ndarray  # of the gauge matrix, lifted
    root_conditions: RootConditionReport
    semisimple: SemisimpleReport
    alpha_star: Optional[AlphaStarResult]  # None when no positive step certifies
    eigencurves: Optional[EigencurveResult]
    derivative: Optional[DerivativeCheckReport]
    status: str  # "ok" | "no_positive_alpha"
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "eigenvalues_L": self.eigenvalues.tolist(),
            "root_conditions": self.root_conditions.to_dict(),
            "semisimple": self.semisimple.to_dict(),
            "alpha_star": None if self.alpha_star is None else self.alpha_star.to_dict(),
            "eigencurve_warnings": None if self.eigencurves is None else self.eigencurves.warnings,
            "derivative_check": None if self.derivative is None else self.derivative.to_dict(),
            "status": self.status,
            "detail": self.detail,
        }


def build_spectral_report(
    sys: AgentSystem,
    gauge: GaugeMatrix,
    params: IterationParams,
    x_star,
    alpha_max: float = 10.0,
    curve_points: int = 48,
    mode: str = "auto",
) -> SpectralReport:
    """Run the whole certification chain at one fixed point.

    The eigencurve grid spans [0, alpha_star] geometrically (fine near
    zero); when no positive step size certifies, curves and derivative
    checks are omitted and the status records why.
    """
    roots = check_root_conditions(gauge, params.eta, params.beta)
    if not roots.ok:
        raise ConditionsNotMetError("(eta, beta) fail the root conditions for this gauge")
    semisimple = check_semisimple(gauge, params.eta, params.beta)
    try:
        astar = find_alpha_star(sys, gauge, params, x_star, alpha_max=alpha_max, mode=mode)
    except NoPositiveAlphaError as exc:
        return SpectralReport(
            eigenvalues=gauge.eigvals,
            root_conditions=roots,
            semisimple=semisimple,
            alpha_star=None,
            eigencurves=None,
            derivative=None,
            status="no_positive_alpha",
            detail=str(exc),
        )
    hi = astar.alpha_star
    grid = np.concatenate([[0.0], np.geomspace(hi / 1000.0, hi, curve_points)])
    curves = trace_eigencurves(sys, gauge, params, x_star, grid, mode=mode)
    deriv = derivative_check(sys, gauge, params, x_star, mode=mode)
    return SpectralReport(
        eigenvalues=gauge.eigvals,
        root_conditions=roots,
        semisimple=semisimple,
        alpha_star=astar,
        eigencurves=curves,
        derivative=deriv,
        status="ok",
    )


@dataclass(frozen=True)
class RateReport:
    empirical_rate: float
    theoretical_rate: Optional[float]
    fit_window: tuple  # (first k, last k) used in the fit
    fit_residual: float  # rms residual of the log-linear fit
    r_squared: float
    n_points: int

    def to_dict(self) -> dict:
        return {
            "empirical_rate": self.empirical_rate,
            "theoretical_rate": self.theoretical_rate,
            "fit_window": list(self.fit_window),
            "fit_residual": self.fit_residual,
            "r_squared": self.r_squared,
            "n_points": self.n_points,
        }


def empirical_rate(
    traj,
    window_fraction: float = 0.75,
    reference=None,
    theoretical_rate: Optional[float] = None,
    min_points: int = 20,
) -> RateReport:
    """Per-step contraction factor from the tail of an error sequence.

    Accepts a Trajectory (uses its distance-to-reference metric, or
    recomputes it from the recorded states when ``reference`` is given)
    or a plain array of errors. Fits log(error) against the step index
    over the final window_fraction of usable points; errors at or below
    the floor 100*eps*max(1, max error) are excluded. Raises
    WindowTooShortError below ``min_points`` usable points.
    """
    if isinstance(traj, Trajectory):
        ks = np.arange(traj.dist_to_ref.shape[0])
        errors = traj.dist_to_ref
        if not np.any(np.isfinite(errors)):
            if reference is None:
                raise WindowTooShortError("trajectory has no reference metric and none was given")
            ref = np.asarray(reference, dtype=float).reshape(-1)
            if ref.shape == (traj.dim,):
                ref = np.tile(ref, traj.n_agents)
            ks = traj.ks
            errors = np.linalg.norm(traj.zs - ref, axis=1)
    else:
        errors = np.asarray(traj, dtype=float)
        ks = np.arange(errors.shape[0])

    floor = 100.0 * np.finfo(float).eps * max(1.0, float(np.nanmax(errors)))
    usable = np.isfinite(errors) & (errors > floor)
    ks_u, err_u = ks[usable], errors[usable]
    n_window = int(np.ceil(window_fraction * ks_u.size))
    if n_window < min_points:
        raise WindowTooShortError(
            f"{n_window} usable points in the fit window, need at least {min_points}"
        )
    ks_w, err_w = ks_u[-n_window:], err_u[-n_window:]
    logs = np.log(err_w)
    coeffs, residuals, *_ = np.polyfit(ks_w, logs, 1, full=True)
    slope = float(coeffs[0])
    pred = np.polyval(coeffs, ks_w)
    ss_res = float(np.sum((logs - pred) ** 2))
    ss_tot = float(np.sum((logs - np.mean(logs)) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateReport(
        empirical_rate=float(np.exp(slope)),
        theoretical_rate=theoretical_rate,
        fit_window=(int(ks_w[0]), int(ks_w[-1])),
        fit_residual=float(np.sqrt(ss_res / n_window)),
        r_squared=float(r_squared),
        n_points=int(n_window),
    )
