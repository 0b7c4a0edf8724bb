"""
Convex quadratic programs over a matrix variable X of shape (m, c):

    minimize    1/2 tr(X^T H X) - tr(X^T B) + constant
    subject to  X 1 = s                (optional row sums)
                X[k, n] >= 0           where nonneg[k, n]
                X[k, n] == 0           where fixed_zero[k, n]

H only couples entries of the same column, so apart from the row sums the
problem separates over columns. Detector tomography has exactly this shape and a
plain QP in a vector x is the single-column case.

The solver runs ADMM on the splitting X = Z, Z in the constraint set, and then
polishes: on the support suggested by Z it solves the equality-constrained
problem exactly and updates the active set until the KKT conditions hold.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import TYPE_CHECKING, Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .exceptions import InfeasibleProblemError, InvalidArgumentError
from .profiling import measure

if TYPE_CHECKING:
    from .tomography import PovmMatrix

logger = logging.getLogger(__name__)

REFINEMENT_STEPS = 6
BALANCE_INTERVAL = 25


@dataclass
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 20000
    threads: int = 1
    rho: Optional[float] = None
    relaxation: float = 1.6
    admm_tol: float = 1e-5
    max_active_set_iter: int = 50
    track_memory: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise InvalidArgumentError("tol must be positive")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")
        if not 0 < self.relaxation < 2:
            raise InvalidArgumentError("relaxation must lie in (0, 2)")
        self.threads = max(1, int(self.threads))

    def to_json_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SolverOptions":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def from_json(cls, text: str) -> "SolverOptions":
        return cls.from_mapping(json.loads(text))


@dataclass
class SeparableQp:
    hessian: NDArray[np.float64]
    linear: NDArray[np.float64]
    row_sums: Optional[NDArray[np.float64]] = None
    nonneg: Optional[NDArray[np.bool_]] = None
    fixed_zero: Optional[NDArray[np.bool_]] = None
    constant: float = 0.0

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.linear = np.asarray(self.linear, dtype=float)
        if self.linear.ndim == 1:
            self.linear = self.linear[:, None]
        m, c = self.linear.shape
        if self.hessian.shape != (m, m):
            raise InvalidArgumentError(
                f"hessian must be {m}x{m}, got {self.hessian.shape}"
            )
        self.hessian = (self.hessian + self.hessian.T) / 2
        if self.row_sums is not None:
            self.row_sums = np.asarray(self.row_sums, dtype=float).reshape(m)
        self.nonneg = (
            np.ones((m, c), dtype=bool)
            if self.nonneg is None
            else np.broadcast_to(np.asarray(self.nonneg, dtype=bool), (m, c)).copy()
        )
        self.fixed_zero = (
            np.zeros((m, c), dtype=bool)
            if self.fixed_zero is None
            else np.asarray(self.fixed_zero, dtype=bool)
        )
        if self.fixed_zero.shape != (m, c):
            raise InvalidArgumentError("fixed_zero must match the variable shape")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.linear.shape

    @property
    def n_variables(self) -> int:
        return int(np.count_nonzero(~self.fixed_zero))

    @property
    def scale(self) -> float:
        return max(1.0, float(np.abs(self.linear).max(initial=0.0)))

    def objective(self, x: NDArray[np.float64]) -> float:
        return float(
            0.5 * np.sum(x * (self.hessian @ x)) - np.sum(x * self.linear)
            + self.constant
        )

    def check_feasible(self) -> None:
        """Raise InfeasibleProblemError when the row-sum constraints cannot be met."""
        if self.row_sums is None:
            return
        free = ~self.fixed_zero
        signfree = free & ~self.nonneg
        for k, s in enumerate(self.row_sums):
            if not free[k].any() and s != 0:
                raise InfeasibleProblemError(
                    f"row {k} has no free variable but must sum to {s}",
                    certificate={"row": k, "reason": "no-free-variable", "row_sum": s},
                )
            if not signfree[k].any() and s < 0:
                raise InfeasibleProblemError(
                    f"row {k} of nonnegative variables must sum to {s} < 0",
                    certificate={"row": k, "reason": "negative-row-sum", "row_sum": s},
                )


@dataclass
class KktResiduals:
    primal: float
    dual: float
    complementarity: float
    multipliers: NDArray[np.float64]

    @property
    def worst(self) -> float:
        return max(self.primal, self.dual, self.complementarity)


@dataclass
class QpSolution:
    x: NDArray[np.float64]
    objective: float
    kkt_primal_residual: float
    kkt_dual_residual: float
    kkt_complementarity: float
    iterations: int
    wall_time: float
    peak_memory: int
    converged: bool
    multipliers: NDArray[np.float64]
    history: List[Tuple[int, float, float]] = field(default_factory=list)
    admm_iterations: int = 0
    active_set_iterations: int = 0
    n_variables: int = 0
    masked_fraction: float = 0.0
    assembly_time: float = 0.0
    gamma: Optional[float] = None
    povm: Optional["PovmMatrix"] = None

    def stats(self) -> Dict[str, Any]:
        return {
            "objective": self.objective,
            "kkt_primal_residual": self.kkt_primal_residual,
            "kkt_dual_residual": self.kkt_dual_residual,
            "kkt_complementarity": self.kkt_complementarity,
            "iterations": self.iterations,
            "admm_iterations": self.admm_iterations,
            "active_set_iterations": self.active_set_iterations,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "assembly_time": self.assembly_time,
            "peak_memory": self.peak_memory,
            "n_variables": self.n_variables,
            "masked_fraction": self.masked_fraction,
            "gamma": self.gamma,
        }


def _project(values: NDArray[np.float64], problem: SeparableQp) -> NDArray[np.float64]:
    """Euclidean projection onto the constraint set, row by row."""
    free = ~problem.fixed_zero
    nonneg = free & problem.nonneg
    signfree = free & ~problem.nonneg
    z = np.where(free, values, 0.0)
    if problem.row_sums is None:
        return np.where(nonneg, np.maximum(z, 0.0), z)

    s = problem.row_sums
    m, c = z.shape
    n_signfree = signfree.sum(axis=1)
    sum_signfree = np.where(signfree, z, 0.0).sum(axis=1)

    # Shift tau per row so that sum(max(z - tau, 0) over nonneg) + sum(z - tau over
    # sign-free) = s. With nonneg entries sorted descending, the j largest are
    # positive after the shift for the largest j with u_j > tau_j.
    u = -np.sort(-np.where(nonneg, z, -np.inf), axis=1)
    finite = np.isfinite(u)
    csum = np.cumsum(np.where(finite, u, 0.0), axis=1)
    j = np.arange(1, c + 1)
    tau_j = (sum_signfree[:, None] + csum - s[:, None]) / (n_signfree[:, None] + j)
    valid = finite & (u > tau_j)
    count = np.where(valid.any(axis=1), c - np.argmax(valid[:, ::-1], axis=1), 0)

    rows = np.arange(m)
    tau = tau_j[rows, np.maximum(count - 1, 0)]
    no_active = count == 0
    tau = np.where(
        no_active & (n_signfree > 0),
        (sum_signfree - s) / np.maximum(n_signfree, 1),
        tau,
    )
    shifted = z - np.where(no_active & (n_signfree == 0), 0.0, tau)[:, None]
    out = np.where(nonneg, np.maximum(shifted, 0.0), np.where(signfree, shifted, 0.0))
    # rows with nothing active and no sign-free entries have s == 0
    out[no_active & (n_signfree == 0)] = 0.0
    return out


def kkt_residuals(problem: SeparableQp, x: NDArray[np.float64]) -> KktResiduals:
    """Primal feasibility, dual feasibility and complementarity of ``x``.

    Row multipliers are estimated from the gradient on the support; the dual
    and complementarity terms are scaled by max(1, |B|_inf).
    """
    m, _ = problem.shape
    g = problem.hessian @ x - problem.linear
    free = ~problem.fixed_zero
    nonneg = free & problem.nonneg
    signfree = free & ~problem.nonneg

    if problem.row_sums is None:
        nu = np.zeros(m)
    else:
        support = signfree | (nonneg & (x > 0))
        count = support.sum(axis=1)
        nu_support = np.where(support, g, 0.0).sum(axis=1) / np.maximum(count, 1)
        nu_floor = np.where(nonneg, g, np.inf).min(axis=1, initial=np.inf)
        nu_floor = np.where(np.isfinite(nu_floor), nu_floor, 0.0)
        nu = np.where(count > 0, nu_support, nu_floor)
    mu = g - nu[:, None]

    primal = max(
        float(np.maximum(-x[nonneg], 0.0).max(initial=0.0)),
        float(np.abs(x[problem.fixed_zero]).max(initial=0.0)),
    )
    if problem.row_sums is not None:
        primal = max(primal, float(np.abs(x.sum(axis=1) - problem.row_sums).max()))
    scale = problem.scale
    dual = max(
        float(np.abs(mu[signfree]).max(initial=0.0)),
        float(np.maximum(-mu[nonneg], 0.0).max(initial=0.0)),
    )
    complementarity = float(np.abs(x[nonneg] * mu[nonneg]).max(initial=0.0))
    return KktResiduals(primal, dual / scale, complementarity / scale, nu)


def _factorize(matrix: NDArray[np.float64]) -> Callable[[NDArray[np.float64]], NDArray[np.float64]]:
    try:
        factor = cho_factor(matrix, check_finite=False)
        return lambda rhs: cho_solve(factor, rhs, check_finite=False)
    except LinAlgError:
        # positive semidefinite blocks (gamma = 0) fall back to the pseudo-inverse
        pinv = np.linalg.pinv(matrix, hermitian=True)
        return lambda rhs: pinv @ rhs


class _ColumnSystems:
    """Factorizations of H restricted to each column's support.

    Columns sharing a support pattern share one factorization.
    """

    def __init__(self, hessian: NDArray[np.float64], support: NDArray[np.bool_], threads: int = 1):
        self.shape = support.shape
        patterns: Dict[bytes, List[int]] = {}
        for n in range(support.shape[1]):
            patterns.setdefault(support[:, n].tobytes(), []).append(n)

        def build(columns: List[int]):
            idx = np.flatnonzero(support[:, columns[0]])
            if idx.size == 0:
                return None
            return idx, columns, _factorize(hessian[np.ix_(idx, idx)])

        groups = list(patterns.values())
        if threads > 1 and len(groups) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                blocks = list(pool.map(build, groups))
        else:
            blocks = [build(cols) for cols in groups]
        self.blocks = [b for b in blocks if b is not None]

    def solve(self, rhs: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.zeros(self.shape)
        for idx, columns, solve in self.blocks:
            x[np.ix_(idx, columns)] = solve(rhs[np.ix_(idx, columns)])
        return x

    def inverse_sum(self) -> NDArray[np.float64]:
        """Sum over columns of the support-embedded inverses of H."""
        m = self.shape[0]
        total = np.zeros((m, m))
        for idx, columns, solve in self.blocks:
            total[np.ix_(idx, idx)] += len(columns) * solve(np.eye(idx.size))
        return (total + total.T) / 2


def _solve_on_support(
    problem: SeparableQp, support: NDArray[np.bool_], options: SolverOptions
) -> Optional[NDArray[np.float64]]:
    """Minimize over the support with every other entry pinned at zero.

    The row sums enter through one multiplier per row; the multipliers solve a
    Schur-complement system and are refined until the row sums hold.
    """
    systems = _ColumnSystems(problem.hessian, support, options.threads)
    x = systems.solve(problem.linear)
    if problem.row_sums is None:
        return x

    rows = support.any(axis=1)
    if np.any(~rows & (problem.row_sums != 0)):
        return None
    schur = _factorize(systems.inverse_sum()[np.ix_(rows, rows)])
    nu = np.zeros(problem.shape[0])
    for _ in range(REFINEMENT_STEPS):
        defect = problem.row_sums - x.sum(axis=1)
        if np.abs(defect[rows]).max(initial=0.0) <= 1e-3 * options.tol:
            break
        nu[rows] += schur(defect[rows])
        x = systems.solve(problem.linear + nu[:, None])
    return x


def _active_set_phase(
    problem: SeparableQp,
    active: NDArray[np.bool_],
    options: SolverOptions,
    history: List[Tuple[int, float, float]],
    offset: int,
) -> Tuple[Optional[NDArray[np.float64]], bool, int]:
    """Primal-dual active-set refinement starting from ``active`` (entries at zero)."""
    free = ~problem.fixed_zero
    nonneg = free & problem.nonneg
    active = active & nonneg
    scale = problem.scale
    seen = set()
    best: Optional[NDArray[np.float64]] = None
    best_worst = np.inf
    iterations = 0

    for iterations in range(1, options.max_active_set_iter + 1):
        key = active.tobytes()
        if key in seen:
            logger.debug("Active set cycled, leaving polish")
            break
        seen.add(key)

        support = free & ~active
        x = _solve_on_support(problem, support, options)
        if x is None:
            logger.debug("Active set leaves a constrained row without support")
            break
        kkt = kkt_residuals(problem, x)
        history.append((offset + iterations, kkt.primal, kkt.dual))
        if kkt.worst < best_worst:
            best, best_worst = x, kkt.worst
        if kkt.worst <= options.tol:
            return x, True, iterations

        mu = problem.hessian @ x - problem.linear - kkt.multipliers[:, None]
        release = active & (mu < -options.tol * scale)
        add = support & nonneg & (x < -options.tol)
        if not release.any() and not add.any():
            break
        active = (active & ~release) | add

    return best, False, iterations


class _Admm:
    def __init__(
        self,
        problem: SeparableQp,
        options: SolverOptions,
        initial: Optional[NDArray[np.float64]] = None,
    ):
        self.problem = problem
        self.options = options
        m, c = problem.shape
        hessian = problem.hessian
        self.rho = options.rho or max(float(np.trace(hessian)) / m, 1e-6)
        self.x = np.zeros((m, c)) if initial is None else np.array(initial, dtype=float)
        self.z = _project(self.x, problem)
        self.u = np.zeros((m, c))
        self.iterations = 0
        self._factor()

    def _factor(self) -> None:
        m = self.problem.shape[0]
        self.solve = _factorize(self.problem.hessian + self.rho * np.eye(m))

    def _rebalance(self, r_prim: float, r_dual: float) -> None:
        # residual balancing; u is the scaled dual and scales with 1/rho
        if r_prim > 10 * r_dual:
            factor = 2.0
        elif r_dual > 10 * r_prim:
            factor = 0.5
        else:
            return
        self.rho *= factor
        self.u /= factor
        self._factor()
        logger.debug(f"ADMM rho -> {self.rho:.3e}")

    def run(
        self, threshold: float, budget: int, history: List[Tuple[int, float, float]], offset: int
    ) -> int:
        problem = self.problem
        alpha = self.options.relaxation
        scale = problem.scale
        done = 0
        while done < budget:
            x = self.solve(problem.linear + self.rho * (self.z - self.u))
            x_hat = alpha * x + (1 - alpha) * self.z
            z = _project(x_hat + self.u, problem)
            self.u += x_hat - z
            r_prim = float(np.abs(x - z).max())
            r_dual = float(self.rho * np.abs(z - self.z).max())
            self.x, self.z = x, z
            done += 1
            self.iterations += 1
            history.append((offset + done, r_prim, r_dual))
            if r_prim <= threshold and r_dual <= threshold * scale:
                break
            if self.iterations % BALANCE_INTERVAL == 0:
                self._rebalance(r_prim, r_dual / scale)
        return done


def _better(problem: SeparableQp, a: Optional[NDArray[np.float64]], b: Optional[NDArray[np.float64]]):
    if a is None:
        return b
    if b is None:
        return a
    return a if kkt_residuals(problem, a).worst <= kkt_residuals(problem, b).worst else b


def qp_solve(
    problem: SeparableQp,
    options: Optional[SolverOptions] = None,
    active: Optional[NDArray[np.bool_]] = None,
    initial: Optional[NDArray[np.float64]] = None,
) -> QpSolution:
    """Solve ``problem`` to the KKT tolerance ``options.tol``.

    ``active`` seeds the polish with a set of entries assumed to sit at zero and
    skips the first ADMM phase; ``initial`` warm-starts ADMM. Runs out of
    iterations return the best iterate with ``converged=False``.
    """
    options = options or SolverOptions()
    problem.check_feasible()
    history: List[Tuple[int, float, float]] = []
    admm_iterations = 0
    active_iterations = 0

    with measure(options.track_memory) as usage:
        best: Optional[NDArray[np.float64]] = None
        solved = False
        if active is not None:
            best, solved, n = _active_set_phase(problem, active, options, history, 0)
            active_iterations += n

        if not solved:
            admm = _Admm(problem, options, initial)
            threshold = options.admm_tol
            while admm_iterations + active_iterations < options.max_iter:
                budget = options.max_iter - admm_iterations - active_iterations
                admm_iterations += admm.run(
                    threshold, budget, history, admm_iterations + active_iterations
                )
                guess = problem.nonneg & ~problem.fixed_zero & (admm.z <= 0)
                x, solved, n = _active_set_phase(
                    problem, guess, options, history, admm_iterations + active_iterations
                )
                active_iterations += n
                best = _better(problem, best, x)
                if solved:
                    break
                best = _better(problem, best, admm.z)
                threshold = max(threshold * 0.1, 1e-15)
                logger.debug(
                    f"Polish did not certify after {admm_iterations} ADMM iterations, "
                    f"tightening ADMM threshold to {threshold:.1e}"
                )
        if best is None:
            best = _project(np.zeros(problem.shape), problem)

    kkt = kkt_residuals(problem, best)
    converged = kkt.worst <= options.tol
    if not converged:
        logger.warning(
            f"QP not converged after {admm_iterations + active_iterations} iterations "
            f"(primal {kkt.primal:.2e}, dual {kkt.dual:.2e}, "
            f"complementarity {kkt.complementarity:.2e})"
        )
    else:
        logger.debug(
            f"QP solved in {admm_iterations} ADMM + {active_iterations} active-set "
            f"iterations, {usage.wall_time:.3f}s"
        )
    return QpSolution(
        x=best,
        objective=problem.objective(best),
        kkt_primal_residual=kkt.primal,
        kkt_dual_residual=kkt.dual,
        kkt_complementarity=kkt.complementarity,
        iterations=admm_iterations + active_iterations,
        wall_time=usage.wall_time,
        peak_memory=usage.peak_memory,
        converged=converged,
        multipliers=kkt.multipliers,
        history=history,
        admm_iterations=admm_iterations,
        active_set_iterations=active_iterations,
        n_variables=problem.n_variables,
    )
