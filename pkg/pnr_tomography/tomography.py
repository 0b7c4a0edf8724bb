"""
Standard and modified detector tomography.

Both estimate the POVM matrix Pi (rows k = photon number, columns n = clicks) from
probe statistics P and probe distributions F by minimizing

    1/2 |P - F Pi|_Fro^2 + gamma/2 sum_{k,n} (Pi[k, n] - Pi[k+1, n])^2

over row-stochastic Pi. The modified variant first solves the problem without
inequality constraints in closed form and pins every entry that comes out
nonpositive to zero, leaving fewer variables for the QP.
"""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from .exceptions import (
    ConditioningError,
    DegenerateMaskError,
    InvalidArgumentError,
)
from .profiling import measure
from .qp import QpSolution, SeparableQp, SolverOptions, qp_solve

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-8
NEGATIVE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PovmMatrix:
    """Pi[k, n] = theta_k^(n): probability of n clicks given k photons."""

    values: NDArray[np.float64]
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] < 1:
            raise InvalidArgumentError("Pi must be an (M+1) x (N+1) matrix")
        if self.validate:
            row_error = np.abs(values.sum(axis=1) - 1).max()
            if row_error > ROW_SUM_TOL:
                raise InvalidArgumentError(
                    f"POVM rows must sum to 1, worst deviation {row_error:.2e}"
                )
            if values.min() < -NEGATIVE_TOL:
                raise InvalidArgumentError(
                    f"POVM entries must be nonnegative, found {values.min():.2e}"
                )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_pixels(self) -> int:
        return self.values.shape[1] - 1

    @property
    def truncation(self) -> int:
        return self.values.shape[0] - 1

    def clamped(self) -> NDArray[np.float64]:
        return np.clip(self.values, 0.0, None)


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    values: NDArray[np.float64]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1:
            raise InvalidArgumentError("P must be a D x (N+1) matrix")
        if np.any(values < 0):
            raise InvalidArgumentError("P must be entrywise nonnegative")
        row_error = np.abs(values.sum(axis=1) - 1).max()
        if row_error > 1e-12:
            raise InvalidArgumentError(
                f"rows of P must sum to 1, worst deviation {row_error:.2e}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_pixels(self) -> int:
        return self.values.shape[1] - 1


@dataclass(frozen=True, eq=False)
class SparsityMask:
    """True where the closed-form solution is nonpositive; those entries are pinned to zero."""

    mask: NDArray[np.bool_]

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def degenerate_rows(self) -> List[int]:
        return np.flatnonzero(self.mask.all(axis=1)).tolist()


@dataclass
class MleSolution:
    povm: PovmMatrix
    iterations: int
    final_change: float
    converged: bool
    wall_time: float

    def stats(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "final_change": self.final_change,
            "converged": self.converged,
            "wall_time": self.wall_time,
        }


@dataclass(frozen=True)
class GammaSweepRow:
    gamma: float
    p_dark: float
    objective: float
    smoothness: float
    converged: bool


def _matrix(value: Any) -> NDArray[np.float64]:
    return np.asarray(getattr(value, "values", value), dtype=float)


def smoothing_operator(truncation: int) -> NDArray[np.float64]:
    """U = sum_k u_k u_k^T with u_k = e_k - e_(k+1), the path-graph Laplacian of first differences."""
    size = truncation + 1
    u = np.zeros((size, size))
    if size == 1:
        return u
    idx = np.arange(size)
    u[idx, idx] = 2.0
    u[0, 0] = u[-1, -1] = 1.0
    u[idx[:-1], idx[1:]] = -1.0
    u[idx[1:], idx[:-1]] = -1.0
    return u


def _check_shapes(p: NDArray[np.float64], f: NDArray[np.float64], gamma: float) -> None:
    if p.shape[0] != f.shape[0]:
        raise InvalidArgumentError(
            f"P has {p.shape[0]} probes but F has {f.shape[0]}"
        )
    if gamma < 0:
        raise InvalidArgumentError("gamma must be >= 0")


def tomography_objective(povm: ArrayLike, p: ArrayLike, f: ArrayLike, gamma: float) -> float:
    pi, p, f = _matrix(povm), _matrix(p), _matrix(f)
    fit = 0.5 * np.sum((p - f @ pi) ** 2)
    smooth = 0.5 * gamma * np.sum(np.diff(pi, axis=0) ** 2)
    return float(fit + smooth)


def _normal_system(p: NDArray[np.float64], f: NDArray[np.float64], gamma: float):
    system = f.T @ f + gamma * smoothing_operator(f.shape[1] - 1)
    return system, f.T @ p


def unconstrained_solution(p: ArrayLike, f: ArrayLike, gamma: float) -> NDArray[np.float64]:
    """Pi~ = (F^T F + gamma U)^-1 F^T P, the stationary point without inequality constraints."""
    p, f = _matrix(p), _matrix(f)
    _check_shapes(p, f, gamma)
    if gamma <= 0:
        raise InvalidArgumentError("the closed-form solution needs gamma > 0")

    system, rhs = _normal_system(p, f, gamma)
    try:
        solution = linalg.solve(system, rhs, assume_a="pos")
    except linalg.LinAlgError as e:
        smallest = float(linalg.eigvalsh(system)[0])
        raise ConditioningError(
            f"F^T F + gamma U is singular (smallest eigenvalue {smallest:.3e})",
            smallest_eigenvalue=smallest,
        ) from e

    rhs_norm = max(float(np.linalg.norm(rhs)), np.finfo(float).tiny)
    residual = np.linalg.norm(system @ solution - rhs) / rhs_norm
    if residual > 1e-8:
        # one step of iterative refinement before giving up
        solution = solution + linalg.solve(system, rhs - system @ solution, assume_a="pos")
        residual = np.linalg.norm(system @ solution - rhs) / rhs_norm
    if residual > 1e-8:
        smallest = float(linalg.eigvalsh(system)[0])
        raise ConditioningError(
            f"closed-form solve residual {residual:.2e} exceeds 1e-8",
            smallest_eigenvalue=smallest,
        )

    row_error = float(np.abs(solution.sum(axis=1) - 1).max())
    if row_error > 1e-6:
        logger.warning(f"Closed-form rows deviate from 1 by {row_error:.2e}")
    return solution


def sparsity_mask(unconstrained: ArrayLike, strict: bool = False) -> SparsityMask:
    mask = SparsityMask(_matrix(unconstrained) <= 0)
    logger.info(f"Sparsity mask pins {mask.masked_fraction:.1%} of the variables")
    if mask.degenerate_rows and strict:
        raise DegenerateMaskError(
            f"rows {mask.degenerate_rows} are fully masked", rows=mask.degenerate_rows
        )
    return mask


def _problem(
    p: NDArray[np.float64],
    f: NDArray[np.float64],
    gamma: float,
    fixed_zero: Optional[NDArray[np.bool_]] = None,
) -> SeparableQp:
    system, rhs = _normal_system(p, f, gamma)
    return SeparableQp(
        hessian=system,
        linear=rhs,
        row_sums=np.ones(f.shape[1]),
        nonneg=True,
        fixed_zero=fixed_zero,
        constant=0.5 * float(np.sum(p**2)),
    )


def _finish(solution: QpSolution, gamma: float, assembly_time: float, masked_fraction: float) -> QpSolution:
    # entries within the KKT tolerance below zero are rounded up and the rows rescaled
    values = np.clip(solution.x, 0.0, None)
    sums = values.sum(axis=1, keepdims=True)
    values = np.where(sums > 0, values / np.where(sums > 0, sums, 1.0), values)
    povm = PovmMatrix(values, validate=solution.converged)
    return replace(
        solution,
        povm=povm,
        gamma=gamma,
        assembly_time=assembly_time,
        masked_fraction=masked_fraction,
    )


def solve_sdt(
    p: ArrayLike, f: ArrayLike, gamma: float, opts: Optional[SolverOptions] = None
) -> QpSolution:
    """Standard detector tomography over all (M+1)(N+1) entries."""
    p, f = _matrix(p), _matrix(f)
    _check_shapes(p, f, gamma)
    t0 = time.perf_counter()
    problem = _problem(p, f, gamma)
    assembly_time = time.perf_counter() - t0

    solution = qp_solve(problem, opts)
    logger.info(
        f"SDT: {solution.n_variables} variables, {solution.iterations} iterations, "
        f"{solution.wall_time:.3f}s"
    )
    return _finish(solution, gamma, assembly_time, 0.0)


def solve_mdt(
    p: ArrayLike, f: ArrayLike, gamma: float, opts: Optional[SolverOptions] = None
) -> QpSolution:
    """Modified detector tomography: entries with Pi~ <= 0 are fixed at zero."""
    p, f = _matrix(p), _matrix(f)
    _check_shapes(p, f, gamma)
    t0 = time.perf_counter()
    mask = sparsity_mask(unconstrained_solution(p, f, gamma))
    fixed = mask.mask.copy()
    if mask.degenerate_rows:
        logger.warning(
            f"Rows {mask.degenerate_rows} fully masked, solving them unmasked"
        )
        fixed[mask.degenerate_rows] = False
    problem = _problem(p, f, gamma, fixed_zero=fixed)
    assembly_time = time.perf_counter() - t0

    # the mask already names the zeros, so start from the active-set polish
    solution = qp_solve(problem, opts, active=np.zeros_like(fixed))
    logger.info(
        f"MDT: {solution.n_variables} variables, {solution.iterations} iterations, "
        f"{solution.wall_time:.3f}s"
    )
    return _finish(solution, gamma, assembly_time, float(fixed.mean()))


def solve_mle(
    p: ArrayLike,
    f: ArrayLike,
    tol: float = 1e-7,
    max_iter: int = 100000,
) -> MleSolution:
    """Maximum-likelihood detector tomography by the multiplicative fixed-point iteration.

    Each step rescales Pi by F^T (P / F Pi) and renormalizes the rows through a
    Lagrange multiplier, so iterates stay row-stochastic and nonnegative.
    """
    p, f = _matrix(p), _matrix(f)
    _check_shapes(p, f, 0.0)
    tiny = 1e-15
    m, c = f.shape[1], p.shape[1]
    pi = np.full((m, c), 1.0 / c)
    change = np.inf
    iterations = 0
    with measure(track_memory=False) as usage:
        for iterations in range(1, max_iter + 1):
            weighted = pi * (f.T @ (p / (f @ pi + tiny)))
            lagrange = weighted.sum(axis=1, keepdims=True)
            new = np.where(lagrange > 0, weighted / np.maximum(lagrange, tiny), pi)
            change = float(np.linalg.norm(new - pi))
            pi = new
            if change < tol:
                break
    converged = change < tol
    if not converged:
        logger.warning(f"MLE tomography stopped at change {change:.2e}")
    return MleSolution(
        povm=PovmMatrix(pi, validate=False),
        iterations=iterations,
        final_change=change,
        converged=converged,
        wall_time=usage.wall_time,
    )


def dark_count_probability(povm: ArrayLike) -> float:
    """Single-click probability with no incident photons, Pi[0, 1]."""
    pi = _matrix(povm)
    if pi.shape[1] < 2:
        raise InvalidArgumentError("a dark-count probability needs N >= 1")
    return float(pi[0, 1])


def povm_relative_error(povm_a: ArrayLike, povm_b: ArrayLike) -> float:
    a, b = _matrix(povm_a), _matrix(povm_b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shapes differ: {a.shape} vs {b.shape}")
    reference = float(np.linalg.norm(b))
    if reference == 0:
        raise InvalidArgumentError("relative error against a zero matrix")
    return float(np.linalg.norm(a - b)) / reference


def povm_smoothness(povm: ArrayLike) -> float:
    """Summed absolute second difference along the photon number from k = 1 on.

    The vacuum row is excluded; its step to k = 1 is genuine structure.
    """
    pi = _matrix(povm)[1:]
    if pi.shape[0] < 3:
        return 0.0
    return float(np.abs(np.diff(pi, n=2, axis=0)).sum())


def gamma_sweep(
    p: ArrayLike,
    f: ArrayLike,
    gamma_list: List[float],
    opts: Optional[SolverOptions] = None,
) -> List[GammaSweepRow]:
    rows = []
    for gamma in gamma_list:
        solution = solve_mdt(p, f, gamma, opts)
        assert solution.povm is not None
        rows.append(
            GammaSweepRow(
                gamma=gamma,
                p_dark=dark_count_probability(solution.povm),
                objective=solution.objective,
                smoothness=povm_smoothness(solution.povm),
                converged=solution.converged,
            )
        )
        logger.info(f"gamma={gamma:.1e}: p_dark={rows[-1].p_dark:.4f}")
    return rows
