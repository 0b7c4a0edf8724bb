"""
Solve time and peak memory of detector tomography versus pixel count, and
power-law fits y = a N^b of the measurements.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy import optimize
from tqdm import tqdm

from .detector import NOISELESS, sample_detector, simulate_probe_matrix
from .exceptions import InvalidArgumentError, UnderdeterminedFitError
from .probes import build_probe_matrix, make_probe_plan
from .profiling import max_rss
from .qp import SolverOptions
from .tomography import solve_mdt, solve_sdt

logger = logging.getLogger(__name__)

METHODS = ("SDT", "MDT")
QUANTITIES = ("solve_time", "peak_memory")
WEIGHT_SCHEMES = ("relative", "poisson", "uniform")


@dataclass(frozen=True)
class ScalingRecord:
    n_pixels: int
    method: str
    solve_time: float
    peak_memory: int
    masked_fraction: float
    truncation: int
    out_of_memory: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"method must be one of {METHODS}")
        if not self.out_of_memory and self.solve_time <= 0:
            raise InvalidArgumentError("solve_time must be positive")

    @staticmethod
    def csv_header() -> List[str]:
        return ["n_pixels", "method", "time_s", "mem_bytes", "masked_fraction", "M", "oom"]

    def to_csv_row(self) -> list:
        return [
            self.n_pixels,
            self.method,
            self.solve_time,
            self.peak_memory,
            self.masked_fraction,
            self.truncation,
            int(self.out_of_memory),
        ]


@dataclass(frozen=True)
class FitResult:
    a: float
    b: float
    residual: float
    n_points: int = 0
    weight_scheme: str = "relative"

    def __post_init__(self):
        if not self.a > 0:
            raise InvalidArgumentError(f"prefactor must be positive, got {self.a}")

    def predict(self, n: ArrayLike) -> np.ndarray:
        return self.a * np.asarray(n, dtype=float) ** self.b

    def to_json_dict(self) -> Dict[str, float]:
        return asdict(self)


def _weights(y: np.ndarray, scheme: str) -> np.ndarray:
    if scheme == "relative":
        return 1.0 / y**2
    if scheme == "poisson":
        return 1.0 / y
    if scheme == "uniform":
        return np.ones_like(y)
    raise InvalidArgumentError(f"unknown weight scheme {scheme!r}, use one of {WEIGHT_SCHEMES}")


def fit_power_law(n: ArrayLike, y: ArrayLike, weight_scheme: str = "relative") -> FitResult:
    """Weighted nonlinear least squares for y = a N^b.

    The start point is the ordinary least-squares line through (ln N, ln y); the
    prefactor is fitted on a log scale so it stays positive.
    """
    n, y = np.asarray(n, dtype=float), np.asarray(y, dtype=float)
    if n.shape != y.shape:
        raise InvalidArgumentError("n and y must have the same length")
    if n.size < 3:
        raise UnderdeterminedFitError(f"need at least 3 points to fit, got {n.size}")
    if np.any(n <= 0) or np.any(y <= 0):
        raise InvalidArgumentError("power-law fits need positive N and y")
    # the fit must not depend on the input order
    order = np.lexsort((y, n))
    n, y = n[order], y[order]

    sqrt_w = np.sqrt(_weights(y, weight_scheme))
    log_n = np.log(n)
    b0, log_a0 = np.polyfit(log_n, np.log(y), 1)

    def residuals(params: np.ndarray) -> np.ndarray:
        log_a, b = params
        return sqrt_w * (y - np.exp(log_a + b * log_n))

    result = optimize.least_squares(
        residuals, x0=[log_a0, b0], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15
    )
    log_a, b = result.x
    residual = float(np.sqrt(np.mean(residuals(result.x) ** 2)))
    fit = FitResult(
        a=float(np.exp(log_a)),
        b=float(b),
        residual=residual,
        n_points=int(n.size),
        weight_scheme=weight_scheme,
    )
    logger.debug(f"Fitted a={fit.a:.4g}, b={fit.b:.4f} over {n.size} points")
    return fit


def fit_records(
    records: Iterable[ScalingRecord],
    method: str,
    quantity: str,
    weight_scheme: str = "relative",
) -> FitResult:
    """Fit one quantity of one method, skipping flagged or unmeasured records."""
    if quantity not in QUANTITIES:
        raise InvalidArgumentError(f"quantity must be one of {QUANTITIES}")
    selected = [r for r in records if r.method == method]
    usable = [r for r in selected if not r.out_of_memory and getattr(r, quantity) > 0]
    if len(usable) < len(selected):
        logger.warning(
            f"Skipping {len(selected) - len(usable)} flagged {method} records in the {quantity} fit"
        )
    # sorted so the fit does not depend on record order
    usable.sort(key=lambda r: (r.n_pixels, getattr(r, quantity)))
    return fit_power_law(
        [r.n_pixels for r in usable],
        [getattr(r, quantity) for r in usable],
        weight_scheme,
    )


def fit_all(records: Sequence[ScalingRecord], weight_scheme: str = "relative") -> Dict[str, FitResult]:
    """Time and memory fits for both methods, keyed ``t_sdt``, ``m_mdt`` and so on."""
    fits = {}
    for quantity, prefix in (("solve_time", "t"), ("peak_memory", "m")):
        for method in METHODS:
            fits[f"{prefix}_{method.lower()}"] = fit_records(
                records, method, quantity, weight_scheme
            )
    return fits


def extrapolate(fit: FitResult, budget: float) -> int:
    """Largest integer N with a N^b <= budget."""
    if fit.b <= 0:
        raise InvalidArgumentError("extrapolation needs a positive exponent")
    if budget <= 0:
        return 0
    log_n = (math.log(budget) - math.log(fit.a)) / fit.b
    if log_n > 64:
        raise InvalidArgumentError(f"budget {budget:g} is out of range for exponent {fit.b:g}")
    n = math.floor(math.exp(log_n))
    # step off floating-point rounding at the boundary
    while fit.a * (n + 1) ** fit.b <= budget:
        n += 1
    while n > 0 and fit.a * n**fit.b > budget:
        n -= 1
    if n < 2:
        logger.warning(f"Budget {budget:g} does not cover a 2-pixel detector")
    return n


def _median_record(
    n_pixels: int, method: str, solutions: list, truncation: int
) -> ScalingRecord:
    return ScalingRecord(
        n_pixels=n_pixels,
        method=method,
        solve_time=float(np.median([s.wall_time for s in solutions])),
        peak_memory=int(np.median([s.peak_memory for s in solutions])),
        masked_fraction=solutions[0].masked_fraction,
        truncation=truncation,
    )


def _oom_record(n_pixels: int, method: str, truncation: int) -> ScalingRecord:
    return ScalingRecord(
        n_pixels=n_pixels,
        method=method,
        solve_time=math.nan,
        peak_memory=0,
        masked_fraction=math.nan,
        truncation=truncation,
        out_of_memory=True,
    )


def run_scaling(
    pixel_list: Sequence[int],
    repetitions: int = 3,
    solver_opts: Optional[SolverOptions] = None,
    gamma: float = 1e-4,
    pulses_per_probe: int = 100000,
    seed: int = 0,
    probe_rule: str = "saturation",
    threads: int = 1,
    progress: bool = False,
) -> List[ScalingRecord]:
    """Time SDT and MDT solves for every pixel count, one solve at a time.

    Only the solver phase is timed; sampling, simulation and problem assembly
    are not. Each method reports the median over ``repetitions`` solves.
    """
    if repetitions < 1:
        raise InvalidArgumentError("repetitions must be >= 1")
    if any(n < 2 for n in pixel_list):
        raise InvalidArgumentError("every pixel count must be >= 2")
    solver_opts = solver_opts or SolverOptions()

    records = []
    for n_pixels in tqdm(pixel_list, desc="scaling", disable=not progress):
        config = sample_detector(n_pixels, seed)
        plan = make_probe_plan(
            n_pixels, rule=probe_rule, config=config, pulses_per_probe=pulses_per_probe
        )
        f = build_probe_matrix(plan)
        p = simulate_probe_matrix(
            config, plan.alpha_sq_values, NOISELESS, plan.pulses_per_probe, seed, threads
        )
        for method, solve in (("SDT", solve_sdt), ("MDT", solve_mdt)):
            try:
                solutions = [
                    solve(p, f, gamma, solver_opts) for _ in range(repetitions)
                ]
            except MemoryError:
                logger.error(f"{method} at N={n_pixels} ran out of memory")
                records.append(_oom_record(n_pixels, method, plan.truncation))
                continue
            record = _median_record(n_pixels, method, solutions, plan.truncation)
            records.append(record)
            logger.info(
                f"N={n_pixels} {method}: {record.solve_time:.3f}s, "
                f"{record.peak_memory / 1e6:.1f} MB, masked {record.masked_fraction:.2f}"
            )
        rss = max_rss()
        if rss is not None:
            logger.debug(f"Process max RSS after N={n_pixels}: {rss / 1e6:.1f} MB")
    return records
