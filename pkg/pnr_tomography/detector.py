"""
Ground-truth model of an N-pixel multiplexed click detector.

Photons are split onto pixels with weights w_j, survive the input coupling c and
are registered with the intrinsic efficiency eta_j of the pixel they land on.
Click statistics come either from Monte Carlo sampling or, for small N, from an
exact inclusion-exclusion oracle.
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.special import comb

from .exceptions import InvalidArgumentError, UnsupportedSizeError
from .metrics import poisson_pnd
from .tomography import PovmMatrix

logger = logging.getLogger(__name__)

COUPLING_EFFICIENCY = 0.99
SPLITTING_SIGMA = 0.02
EFFICIENCY_RANGE = (0.90, 0.95)
TECHNICAL_NOISE_SIGMA = 0.0188

MAX_EXACT_PIXELS = 12
BLOCK_SIZE = 4096


@dataclass(frozen=True)
class DetectorConfig:
    n_pixels: int
    coupling_efficiency: float
    splitting_weights: Tuple[float, ...]
    intrinsic_efficiencies: Tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        if self.n_pixels < 1:
            raise InvalidArgumentError(f"n_pixels must be >= 1, got {self.n_pixels}")
        if not 0.0 <= self.coupling_efficiency <= 1.0:
            raise InvalidArgumentError(
                f"coupling_efficiency must be in [0, 1], got {self.coupling_efficiency}"
            )
        # Normalise sequences so equality and hashing work on any input type
        object.__setattr__(
            self, "splitting_weights", tuple(float(w) for w in self.splitting_weights)
        )
        object.__setattr__(
            self,
            "intrinsic_efficiencies",
            tuple(float(e) for e in self.intrinsic_efficiencies),
        )
        if len(self.splitting_weights) != self.n_pixels:
            raise InvalidArgumentError("splitting_weights must have n_pixels entries")
        if len(self.intrinsic_efficiencies) != self.n_pixels:
            raise InvalidArgumentError(
                "intrinsic_efficiencies must have n_pixels entries"
            )
        if min(self.splitting_weights) < 0:
            raise InvalidArgumentError("splitting_weights must be nonnegative")
        if abs(math.fsum(self.splitting_weights) - 1.0) > 1e-12:
            raise InvalidArgumentError("splitting_weights must sum to 1")
        if any(not 0.0 <= e <= 1.0 for e in self.intrinsic_efficiencies):
            raise InvalidArgumentError("intrinsic_efficiencies must lie in [0, 1]")

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "n_pixels": self.n_pixels,
            "coupling_efficiency": self.coupling_efficiency,
            "splitting_weights": list(self.splitting_weights),
            "intrinsic_efficiencies": list(self.intrinsic_efficiencies),
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> "DetectorConfig":
        return cls(
            n_pixels=int(data["n_pixels"]),
            coupling_efficiency=float(data["coupling_efficiency"]),
            splitting_weights=tuple(data["splitting_weights"]),
            intrinsic_efficiencies=tuple(data["intrinsic_efficiencies"]),
            seed=int(data.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DetectorConfig":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class NoiseModel:
    """Relative Gaussian jitter of the pulse energy |beta|^2."""

    sigma_rel: float = TECHNICAL_NOISE_SIGMA

    def __post_init__(self):
        if self.sigma_rel < 0:
            raise InvalidArgumentError(f"sigma_rel must be >= 0, got {self.sigma_rel}")

    def to_json_dict(self) -> Dict[str, Any]:
        return {"sigma_rel": self.sigma_rel}

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> "NoiseModel":
        return cls(sigma_rel=float(data["sigma_rel"]))


NOISELESS = NoiseModel(sigma_rel=0.0)


@dataclass(frozen=True, eq=False)
class ClickStatistics:
    probs: NDArray[np.float64]
    n_samples: int = 0
    counts: Optional[NDArray[np.int64]] = field(default=None, compare=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 2:
            raise InvalidArgumentError("probs must be a vector over 0..N clicks")
        if np.any(probs < 0):
            raise InvalidArgumentError("click probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError(
                f"click probabilities must sum to 1, got {probs.sum()!r}"
            )
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_pixels(self) -> int:
        return self.probs.size - 1

    @classmethod
    def from_counts(cls, counts: NDArray[np.int64]) -> "ClickStatistics":
        counts = np.asarray(counts, dtype=np.int64)
        total = int(counts.sum())
        if total < 1:
            raise InvalidArgumentError("cannot normalise an empty histogram")
        probs = counts / total
        # exact renormalisation keeps the sum within 1e-12
        probs = probs / math.fsum(probs)
        return cls(probs=probs, n_samples=total, counts=counts)

    @staticmethod
    def csv_header() -> List[str]:
        return ["clicks", "probability"]

    def to_csv_rows(self) -> List[Tuple[int, float]]:
        return [(n, float(p)) for n, p in enumerate(self.probs)]


def sample_detector(
    n_pixels: int,
    seed: int,
    coupling_efficiency: float = COUPLING_EFFICIENCY,
    splitting_sigma: float = SPLITTING_SIGMA,
    efficiency_range: Tuple[float, float] = EFFICIENCY_RANGE,
) -> DetectorConfig:
    """Draw a detector with nearly even splitting and spread pixel efficiencies."""
    if n_pixels < 1:
        raise InvalidArgumentError(f"n_pixels must be >= 1, got {n_pixels}")

    rng = np.random.Generator(np.random.Philox(seed))
    eps = rng.normal(0.0, splitting_sigma, size=n_pixels)
    weights = np.clip((1.0 + eps) / n_pixels, 0.0, None)
    if np.any(weights == 0.0):
        logger.warning(
            f"{int(np.sum(weights == 0.0))} splitting weights clamped at zero"
        )
    weights = weights / weights.sum()
    # absorb the last rounding error so the weights sum to 1 to machine precision
    weights[-1] = max(0.0, 1.0 - math.fsum(weights[:-1]))
    efficiencies = rng.uniform(efficiency_range[0], efficiency_range[1], size=n_pixels)

    config = DetectorConfig(
        n_pixels=n_pixels,
        coupling_efficiency=coupling_efficiency,
        splitting_weights=tuple(weights.tolist()),
        intrinsic_efficiencies=tuple(efficiencies.tolist()),
        seed=seed,
    )
    logger.info(
        f"Sampled {n_pixels}-pixel detector (seed={seed}), "
        f"mean efficiency {efficiencies.mean():.4f}"
    )
    return config


def detection_probabilities(config: DetectorConfig) -> NDArray[np.float64]:
    """Outcome probabilities of a single photon: [r_0 (lost), r_1, ..., r_N]."""
    r = (
        config.coupling_efficiency
        * np.asarray(config.splitting_weights)
        * np.asarray(config.intrinsic_efficiencies)
    )
    r0 = max(0.0, 1.0 - math.fsum(r))
    return np.concatenate([[r0], r])


def _pixel_pvals(config: DetectorConfig) -> NDArray[np.float64]:
    # multinomial wants pixels first and the loss channel last
    probs = detection_probabilities(config)
    return np.concatenate([probs[1:], probs[:1]])


def substream(seed: int, stream: int, block: int = 0) -> np.random.Generator:
    """Generator keyed by (seed, stream, block), independent of execution order."""
    sequence = np.random.SeedSequence(seed, spawn_key=(stream, block))
    return np.random.Generator(np.random.Philox(sequence))


def simulate_pulse(config: DetectorConfig, photon_number: int, rng: np.random.Generator) -> int:
    if photon_number < 0:
        raise InvalidArgumentError("photon_number must be >= 0")
    if photon_number == 0:
        return 0
    placement = rng.multinomial(photon_number, _pixel_pvals(config))
    return int(np.count_nonzero(placement[:-1]))


def _clicks_for_photons(
    config: DetectorConfig, photons: NDArray[np.int64], rng: np.random.Generator
) -> NDArray[np.int64]:
    placement = rng.multinomial(photons, _pixel_pvals(config))
    return np.count_nonzero(placement[:, :-1], axis=1)


def _run_blocks(
    n_pulses: int,
    threads: int,
    block_fn,
) -> NDArray[np.int64]:
    n_blocks = -(-n_pulses // BLOCK_SIZE)
    sizes = [min(BLOCK_SIZE, n_pulses - b * BLOCK_SIZE) for b in range(n_blocks)]
    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            histograms = list(pool.map(block_fn, range(n_blocks), sizes))
    else:
        histograms = [block_fn(b, size) for b, size in enumerate(sizes)]
    return np.sum(histograms, axis=0)


def simulate_coherent_probe(
    config: DetectorConfig,
    alpha_sq: float,
    noise: NoiseModel,
    n_pulses: int,
    seed: int,
    stream: int = 0,
    threads: int = 1,
) -> ClickStatistics:
    """Click histogram of a laser pulse train with mean photon number ``alpha_sq``.

    Each pulse draws its own energy |beta|^2 ~ Normal(alpha_sq, sigma_rel*alpha_sq),
    clamped at zero, then a Poisson photon number. Pulses are processed in fixed
    blocks whose generators are keyed by ``(seed, stream, block)``, so the result does
    not depend on ``threads``.
    """
    if alpha_sq < 0:
        raise InvalidArgumentError("alpha_sq must be >= 0")
    if n_pulses < 1:
        raise InvalidArgumentError("n_pulses must be >= 1")

    n = config.n_pixels

    def block(index: int, size: int) -> NDArray[np.int64]:
        rng = substream(seed, stream, index)
        energies = rng.normal(alpha_sq, noise.sigma_rel * alpha_sq, size=size)
        photons = rng.poisson(np.clip(energies, 0.0, None))
        clicks = _clicks_for_photons(config, photons, rng)
        return np.bincount(clicks, minlength=n + 1)

    counts = _run_blocks(n_pulses, threads, block)
    return ClickStatistics.from_counts(counts)


def simulate_thermal(
    config: DetectorConfig,
    mean_n: float,
    n_pulses: int,
    seed: int,
    stream: int = 0,
    threads: int = 1,
) -> ClickStatistics:
    if mean_n < 0:
        raise InvalidArgumentError("mean_n must be >= 0")
    if n_pulses < 1:
        raise InvalidArgumentError("n_pulses must be >= 1")

    n = config.n_pixels

    def block(index: int, size: int) -> NDArray[np.int64]:
        rng = substream(seed, stream, index)
        if mean_n == 0:
            photons = np.zeros(size, dtype=np.int64)
        else:
            # numpy's geometric counts trials (>= 1); shift to photon numbers (>= 0)
            photons = rng.geometric(1.0 / (1.0 + mean_n), size=size) - 1
        clicks = _clicks_for_photons(config, photons, rng)
        return np.bincount(clicks, minlength=n + 1)

    counts = _run_blocks(n_pulses, threads, block)
    return ClickStatistics.from_counts(counts)


def simulate_fock(
    config: DetectorConfig,
    photon_number: int,
    n_pulses: int,
    seed: int,
    stream: int = 0,
    threads: int = 1,
) -> ClickStatistics:
    """Click histogram of pulses that all carry exactly ``photon_number`` photons."""
    if photon_number < 0:
        raise InvalidArgumentError("photon_number must be >= 0")
    if n_pulses < 1:
        raise InvalidArgumentError("n_pulses must be >= 1")

    n = config.n_pixels

    def block(index: int, size: int) -> NDArray[np.int64]:
        rng = substream(seed, stream, index)
        photons = np.full(size, photon_number, dtype=np.int64)
        clicks = _clicks_for_photons(config, photons, rng)
        return np.bincount(clicks, minlength=n + 1)

    counts = _run_blocks(n_pulses, threads, block)
    return ClickStatistics.from_counts(counts)


def simulate_probe_matrix(
    config: DetectorConfig,
    alpha_sq_values,
    noise: NoiseModel,
    pulses_per_probe: int,
    seed: int,
    threads: int = 1,
) -> NDArray[np.float64]:
    """Measurement matrix P, one row of click statistics per probe."""
    rows = [
        simulate_coherent_probe(
            config, float(m), noise, pulses_per_probe, seed, stream=d, threads=threads
        ).probs
        for d, m in enumerate(alpha_sq_values)
    ]
    logger.info(
        f"Simulated {len(rows)} probes x {pulses_per_probe} pulses on "
        f"{config.n_pixels} pixels"
    )
    return np.vstack(rows)


def _subset_tables(config: DetectorConfig) -> Tuple[NDArray[np.float64], NDArray[np.int64]]:
    n = config.n_pixels
    if n > MAX_EXACT_PIXELS:
        raise UnsupportedSizeError(
            f"exact oracle supports at most {MAX_EXACT_PIXELS} pixels, got {n}"
        )
    probs = detection_probabilities(config)
    r0, r = probs[0], probs[1:]
    masks = np.arange(2**n)
    bits = (masks[:, None] >> np.arange(n)) & 1
    # q(T): probability a photon lands outside the pixels not in T
    q = r0 + bits @ r
    sizes = bits.sum(axis=1)
    return q, sizes


def _inclusion_exclusion_matrix(n: int) -> NDArray[np.float64]:
    # A[m, t] = (-1)^(m-t) * C(N-t, m-t): folds the sum over exact click sets S of
    # size m containing a subset T of size t
    a = np.zeros((n + 1, n + 1))
    for m, t in itertools.product(range(n + 1), repeat=2):
        if t <= m:
            a[m, t] = (-1) ** (m - t) * comb(n - t, m - t, exact=True)
    return a


def _exact_rows(config: DetectorConfig, photon_numbers: NDArray[np.int64]) -> NDArray[np.float64]:
    n = config.n_pixels
    q, sizes = _subset_tables(config)
    powers = q[None, :] ** photon_numbers[:, None]
    by_size = np.stack(
        [powers[:, sizes == t].sum(axis=1) for t in range(n + 1)], axis=1
    )
    rows = by_size @ _inclusion_exclusion_matrix(n).T
    # cancellation can leave tiny negatives
    rows = np.clip(rows, 0.0, None)
    return rows / rows.sum(axis=1, keepdims=True)


def exact_click_distribution(config: DetectorConfig, photon_number: int) -> NDArray[np.float64]:
    """P(n clicks | k photons) for n = 0..N by inclusion-exclusion over pixel subsets."""
    if photon_number < 0:
        raise InvalidArgumentError("photon_number must be >= 0")
    return _exact_rows(config, np.array([photon_number]))[0]


def exact_povm(config: DetectorConfig, truncation: int) -> PovmMatrix:
    if truncation < 0:
        raise InvalidArgumentError("truncation must be >= 0")
    values = _exact_rows(config, np.arange(truncation + 1))
    return PovmMatrix(values)


def exact_coherent_click_distribution(
    config: DetectorConfig, alpha_sq: float, truncation: int
) -> NDArray[np.float64]:
    f = poisson_pnd(alpha_sq, truncation).probs
    return f @ exact_povm(config, truncation).values
