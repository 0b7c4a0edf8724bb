"""
Distances, correlation functions and reference photon-number distributions.
"""

import json
import math
from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import stats

from .exceptions import InvalidArgumentError, UndefinedMomentError


@dataclass(frozen=True, eq=False)
class Pnd:
    """Photon-number distribution over 0..M."""

    probs: NDArray[np.float64]

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 1:
            raise InvalidArgumentError("a PND is a nonempty vector")
        if np.any(probs < 0):
            raise InvalidArgumentError("PND entries must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-10:
            raise InvalidArgumentError(f"PND must sum to 1, got {probs.sum()!r}")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def truncation(self) -> int:
        return self.probs.size - 1


def _vector(f) -> NDArray[np.float64]:
    return np.asarray(getattr(f, "probs", f), dtype=float)


def _pair(f, f_true):
    a, b = _vector(f), _vector(f_true)
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"distributions differ in length: {a.size} vs {b.size}"
        )
    return a, b


def fidelity(f, f_true) -> float:
    a, b = _pair(f, f_true)
    # dividing by the sums makes fidelity(f, f) exactly 1 under rounding
    overlap = float(np.sum(np.sqrt(a * b)))
    norm = float(np.sum(a)) * float(np.sum(b))
    if norm <= 0:
        raise InvalidArgumentError("fidelity of an all-zero vector")
    return min(1.0, overlap * overlap / norm)


def tvd(f, f_true) -> float:
    a, b = _pair(f, f_true)
    return float(np.sum(np.abs(a - b)) / 2)


def mean_photon_number(f) -> float:
    a = _vector(f)
    return float(np.arange(a.size) @ a)


def _factorial_moment_ratio(f, order: int) -> float:
    a = _vector(f)
    k = np.arange(a.size, dtype=float)
    mean = float(k @ a)
    if mean <= 0:
        raise UndefinedMomentError(f"g{order} is undefined for a zero-mean PND")
    falling = np.ones_like(k)
    for j in range(order):
        falling = falling * (k - j)
    return float(falling @ a) / mean**order


def g2(f) -> float:
    return _factorial_moment_ratio(f, 2)


def g3(f) -> float:
    return _factorial_moment_ratio(f, 3)


def _renormalised(values: NDArray[np.float64]) -> Pnd:
    return Pnd(values / math.fsum(values))


def poisson_pnd(mean: float, truncation: int) -> Pnd:
    """Coherent-state PND truncated at ``truncation`` and renormalised."""
    if mean < 0:
        raise InvalidArgumentError("mean must be >= 0")
    k = np.arange(truncation + 1)
    if mean == 0:
        return Pnd(np.eye(truncation + 1)[0])
    return _renormalised(stats.poisson.pmf(k, mean))


def thermal_pnd(mean: float, truncation: int) -> Pnd:
    """Bose-Einstein PND, f_k = mean^k / (1 + mean)^(k + 1), truncated and renormalised."""
    if mean < 0:
        raise InvalidArgumentError("mean must be >= 0")
    k = np.arange(truncation + 1)
    if mean == 0:
        return Pnd(np.eye(truncation + 1)[0])
    log_f = k * math.log(mean) - (k + 1) * math.log1p(mean)
    return _renormalised(np.exp(log_f))


@dataclass(frozen=True)
class MetricReport:
    fidelity: float
    tvd: float
    g2: float
    g3: float
    mean: float

    def to_json_dict(self) -> Dict[str, float]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @staticmethod
    def csv_header() -> List[str]:
        return ["fidelity", "tvd", "g2", "g3", "mean"]

    def to_csv_row(self) -> List[float]:
        return [self.fidelity, self.tvd, self.g2, self.g3, self.mean]


def metric_report(f, f_true: ArrayLike) -> MetricReport:
    return MetricReport(
        fidelity=fidelity(f, f_true),
        tvd=tvd(f, f_true),
        g2=g2(f),
        g3=g3(f),
        mean=mean_photon_number(f),
    )
