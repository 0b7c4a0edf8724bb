"""
Coherent-state probe set, Fock-space truncation and the probe matrix F.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.typing import NDArray
from scipy import stats

from .detector import DetectorConfig, NoiseModel, detection_probabilities
from .exceptions import InvalidArgumentError
from .tomography import smoothing_operator

logger = logging.getLogger(__name__)

TRUNCATION_BOUND = 1e-5
RULES = ("poisson-tail", "saturation")


@dataclass(frozen=True)
class ProbePlan:
    alpha_sq_values: Tuple[float, ...]
    truncation: int
    pulses_per_probe: int = 100000

    def __post_init__(self):
        values = tuple(float(m) for m in self.alpha_sq_values)
        object.__setattr__(self, "alpha_sq_values", values)
        if len(values) < 2:
            raise InvalidArgumentError("a probe plan needs at least 2 probes")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise InvalidArgumentError("alpha_sq_values must be strictly increasing")
        if values[0] < 0:
            raise InvalidArgumentError("alpha_sq_values must be nonnegative")
        if self.truncation <= values[-1]:
            raise InvalidArgumentError(
                f"truncation {self.truncation} must exceed the largest probe {values[-1]}"
            )
        if self.pulses_per_probe < 1:
            raise InvalidArgumentError("pulses_per_probe must be >= 1")

    @property
    def n_probes(self) -> int:
        return len(self.alpha_sq_values)

    @property
    def alpha_sq_max(self) -> float:
        return self.alpha_sq_values[-1]

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "alpha_sq_values": list(self.alpha_sq_values),
            "truncation": self.truncation,
            "pulses_per_probe": self.pulses_per_probe,
        }

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> "ProbePlan":
        return cls(
            alpha_sq_values=tuple(data["alpha_sq_values"]),
            truncation=int(data["truncation"]),
            pulses_per_probe=int(data.get("pulses_per_probe", 100000)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProbePlan":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ProbeMatrix:
    values: NDArray[np.float64]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidArgumentError("F must be a matrix")
        if np.any(values < 0):
            raise InvalidArgumentError("F must be entrywise nonnegative")
        sums = values.sum(axis=1)
        if np.any(sums > 1 + 1e-9):
            raise InvalidArgumentError("probe rows cannot carry more than unit mass")
        if np.any(sums < 1 - 1e-4):
            logger.warning(
                f"Probe rows lose up to {1 - sums.min():.2e} mass to the truncation"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_probes(self) -> int:
        return self.values.shape[0]

    @property
    def truncation(self) -> int:
        return self.values.shape[1] - 1

    def smallest_singular_value(self, gamma: float) -> float:
        """Smallest singular value of F^T F + gamma U, the conditioning of the solve."""
        f = self.values
        system = f.T @ f + gamma * smoothing_operator(self.truncation)
        return float(np.linalg.svd(system, compute_uv=False).min())


def choose_alpha_max(n_pixels: int, threshold: float = 0.9) -> int:
    """Smallest integer mean m with P(Poisson(m) > N) >= threshold."""
    if n_pixels < 0:
        raise InvalidArgumentError("n_pixels must be >= 0")
    if not 0 <= threshold < 1:
        raise InvalidArgumentError("threshold must lie in [0, 1)")
    m = 1
    while stats.poisson.sf(n_pixels, m) < threshold:
        m += 1
    return m


def choose_alpha_max_saturation(config: DetectorConfig, threshold: float = 0.9) -> int:
    """Smallest integer mean m at which all N pixels click with probability >= threshold.

    For coherent light the per-pixel photon numbers are independent Poisson
    variables with means m*r_j, so P(all click) = prod_j (1 - exp(-m*r_j)).
    """
    if not 0 <= threshold < 1:
        raise InvalidArgumentError("threshold must lie in [0, 1)")
    r = detection_probabilities(config)[1:]
    if np.any(r <= 0):
        raise InvalidArgumentError("a pixel that never clicks cannot saturate")
    log_threshold = math.log(threshold) if threshold > 0 else -math.inf

    def saturated(m: int) -> bool:
        return float(np.sum(np.log1p(-np.exp(-m * r)))) >= log_threshold

    lo, hi = 0, 1
    while not saturated(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if saturated(mid):
            hi = mid
        else:
            lo = mid
    return hi


def choose_truncation(alpha_sq_max: float, bound: float = TRUNCATION_BOUND) -> int:
    """Smallest integer M > alpha_sq_max with Poisson pmf(M; alpha_sq_max) <= bound."""
    if alpha_sq_max <= 0:
        raise InvalidArgumentError("alpha_sq_max must be positive")
    log_bound = math.log(bound)
    m = math.floor(alpha_sq_max) + 1
    while stats.poisson.logpmf(m, alpha_sq_max) > log_bound:
        m += 1
    return m


def make_probe_plan(
    n_pixels: int,
    rule: str = "poisson-tail",
    threshold: float = 0.9,
    config: Optional[DetectorConfig] = None,
    alpha_sq_values: Optional[Sequence[float]] = None,
    truncation: Optional[int] = None,
    pulses_per_probe: int = 100000,
    truncation_bound: float = TRUNCATION_BOUND,
) -> ProbePlan:
    """Probe grid 1..|alpha|^2_max in steps of 1 unless overridden."""
    if alpha_sq_values is None:
        if rule == "poisson-tail":
            alpha_max = choose_alpha_max(n_pixels, threshold)
        elif rule == "saturation":
            if config is None:
                raise InvalidArgumentError("the saturation rule needs a detector config")
            alpha_max = choose_alpha_max_saturation(config, threshold)
        else:
            raise InvalidArgumentError(f"unknown probe rule {rule!r}, use one of {RULES}")
        alpha_sq_values = [float(m) for m in range(1, alpha_max + 1)]
    if truncation is None:
        truncation = choose_truncation(max(alpha_sq_values), truncation_bound)
    plan = ProbePlan(
        alpha_sq_values=tuple(alpha_sq_values),
        truncation=truncation,
        pulses_per_probe=pulses_per_probe,
    )
    logger.info(
        f"Probe plan: D={plan.n_probes}, |alpha|^2_max={plan.alpha_sq_max:g}, "
        f"M={plan.truncation} ({rule})"
    )
    return plan


def _poisson_rows(means: NDArray[np.float64], truncation: int) -> NDArray[np.float64]:
    k = np.arange(truncation + 1)
    rows = np.zeros((means.size, truncation + 1))
    positive = means > 0
    rows[positive] = np.exp(stats.poisson.logpmf(k[None, :], means[positive, None]))
    rows[~positive, 0] = 1.0
    return rows


def build_probe_matrix(plan: ProbePlan) -> ProbeMatrix:
    """Ideal Poisson rows, F[d, k] = exp(-m_d) m_d^k / k!, tail left untruncated."""
    return ProbeMatrix(_poisson_rows(np.asarray(plan.alpha_sq_values), plan.truncation))


def build_noisy_probe_matrix(plan: ProbePlan, noise: NoiseModel, nodes: int = 40) -> ProbeMatrix:
    """Poisson rows averaged over the laser's pulse-energy jitter (Gauss-Hermite)."""
    x, w = hermegauss(nodes)
    w = w / w.sum()
    rows = np.zeros((plan.n_probes, plan.truncation + 1))
    for d, m in enumerate(plan.alpha_sq_values):
        energies = np.clip(m + noise.sigma_rel * m * x, 0.0, None)
        rows[d] = w @ _poisson_rows(energies, plan.truncation)
    return ProbeMatrix(rows)
