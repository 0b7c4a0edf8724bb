"""
Photon-number distributions from click statistics by expectation-maximization
with a maximum-entropy correction.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .detector import (
    NOISELESS,
    DetectorConfig,
    NoiseModel,
    simulate_coherent_probe,
    simulate_thermal,
)
from .exceptions import InvalidArgumentError, ModelMismatchError
from .metrics import (
    MetricReport,
    Pnd,
    fidelity,
    metric_report,
    poisson_pnd,
    thermal_pnd,
    tvd,
)

logger = logging.getLogger(__name__)

STATES = ("coherent", "thermal")


@dataclass(frozen=True)
class EmeOptions:
    lam: float = 0.02
    max_iter: int = 100000
    convergence_tol: float = 1e-9
    floor_eps: float = 1e-12
    track_likelihood: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidArgumentError("lambda must be >= 0")
        if not 0 < self.floor_eps <= 1e-8:
            raise InvalidArgumentError("floor_eps must lie in (0, 1e-8]")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be >= 1")


@dataclass
class EmeResult:
    pnd: Pnd
    iterations: int
    final_change: float
    converged: bool
    lam: float
    likelihood: List[float] = field(default_factory=list)

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_change": self.final_change,
            "converged": self.converged,
            "lambda": self.lam,
        }


@dataclass(frozen=True)
class LambdaSweepRow:
    lam: float
    mean_fidelity: float
    min_fidelity: float


@dataclass
class RepeatedReconstruction:
    state: str
    mean_n: float
    mean: NDArray[np.float64]
    std: NDArray[np.float64]
    reference: Pnd
    reports: List[MetricReport]
    click_mean: NDArray[np.float64]
    click_std: NDArray[np.float64]
    fidelities: List[float] = field(default_factory=list)
    tvds: List[float] = field(default_factory=list)
    diagnostics: List[dict] = field(default_factory=list)

    @property
    def mean_report(self) -> Optional[MetricReport]:
        """Averaged report; None for vacuum input, whose g2 and g3 are undefined."""
        if not self.reports:
            return None
        return MetricReport(
            fidelity=float(np.mean([r.fidelity for r in self.reports])),
            tvd=float(np.mean([r.tvd for r in self.reports])),
            g2=float(np.mean([r.g2 for r in self.reports])),
            g3=float(np.mean([r.g3 for r in self.reports])),
            mean=float(np.mean([r.mean for r in self.reports])),
        )


def _vector(p) -> NDArray[np.float64]:
    return np.asarray(getattr(p, "probs", p), dtype=float)


def _povm(povm) -> NDArray[np.float64]:
    return np.asarray(getattr(povm, "values", povm), dtype=float)


def _ratio(p: NDArray[np.float64], q: NDArray[np.float64]) -> NDArray[np.float64]:
    observed = p > 0
    missing = observed & (q <= 0)
    if missing.any():
        outcome = int(np.flatnonzero(missing)[0])
        raise ModelMismatchError(
            f"outcome {outcome} was observed but the model gives it zero probability",
            outcome=outcome,
        )
    return np.divide(p, q, out=np.zeros_like(p), where=observed)


def log_likelihood(p: ArrayLike, povm: ArrayLike, f: ArrayLike) -> float:
    """sum_n p_n ln (Pi^T f)_n over observed outcomes."""
    p, pi, f = _vector(p), _povm(povm), _vector(f)
    q = pi.T @ f
    observed = p > 0
    return float(np.sum(p[observed] * np.log(q[observed])))


def eme_reconstruct(p, povm, opts: Optional[EmeOptions] = None) -> EmeResult:
    """Iterate f <- R f - lam (ln f + S) f from a uniform start.

    R_k = sum_n Pi[k, n] p_n / (Pi^T f)_n and S = -sum f ln f. After every step
    entries are floored at ``floor_eps`` and the vector renormalized, so each
    iterate is a probability vector.
    """
    opts = opts or EmeOptions()
    p, pi = _vector(p), _povm(povm)
    if pi.ndim != 2 or pi.shape[1] != p.size:
        raise InvalidArgumentError(
            f"click statistics over {p.size} outcomes do not match POVM {pi.shape}"
        )
    if abs(p.sum() - 1) > 1e-10 or np.any(p < 0):
        raise InvalidArgumentError("click statistics must be a probability vector")

    size = pi.shape[0]
    f = np.full(size, 1.0 / size)
    _ratio(p, pi.T @ np.ones(size))
    likelihood: List[float] = []
    change = np.inf
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        r = pi @ _ratio(p, pi.T @ f)
        log_f = np.log(f)
        entropy = -float(f @ log_f)
        update = r * f - opts.lam * (log_f + entropy) * f
        update = np.maximum(update, opts.floor_eps)
        update /= update.sum()
        change = float(np.abs(update - f).sum())
        f = update
        if opts.track_likelihood:
            likelihood.append(log_likelihood(p, pi, f))
        if change < opts.convergence_tol:
            break

    converged = change < opts.convergence_tol
    if not converged:
        logger.warning(
            f"EME stopped after {iterations} iterations with change {change:.2e}"
        )
    logger.debug(f"EME finished in {iterations} iterations (lambda={opts.lam})")
    return EmeResult(
        pnd=Pnd(f),
        iterations=iterations,
        final_change=change,
        converged=converged,
        lam=opts.lam,
        likelihood=likelihood,
    )


def lambda_sweep(
    probe_statistics: Sequence[ArrayLike],
    true_pnds: Sequence[ArrayLike],
    povm,
    lambda_list: Sequence[float],
    opts: Optional[EmeOptions] = None,
) -> List[LambdaSweepRow]:
    """Mean reconstruction fidelity over known probes for each lambda."""
    if len(probe_statistics) != len(true_pnds):
        raise InvalidArgumentError("need one true PND per probe")
    base = opts or EmeOptions()
    rows = []
    for lam in lambda_list:
        eme_opts = EmeOptions(
            lam=lam,
            max_iter=base.max_iter,
            convergence_tol=base.convergence_tol,
            floor_eps=base.floor_eps,
        )
        fidelities = [
            fidelity(eme_reconstruct(p, povm, eme_opts).pnd, f_true)
            for p, f_true in zip(probe_statistics, true_pnds)
        ]
        rows.append(
            LambdaSweepRow(
                lam=lam,
                mean_fidelity=float(np.mean(fidelities)),
                min_fidelity=float(np.min(fidelities)),
            )
        )
        logger.info(f"lambda={lam:g}: mean fidelity {rows[-1].mean_fidelity:.6f}")
    return rows


def reference_pnd(state: str, mean_n: float, truncation: int) -> Pnd:
    if state == "coherent":
        return poisson_pnd(mean_n, truncation)
    if state == "thermal":
        return thermal_pnd(mean_n, truncation)
    raise InvalidArgumentError(f"unknown input state {state!r}, use one of {STATES}")


def simulate_input(
    config: DetectorConfig,
    state: str,
    mean_n: float,
    n_pulses: int,
    seed: int,
    stream: int = 0,
    noise: NoiseModel = NOISELESS,
    threads: int = 1,
):
    if state == "coherent":
        return simulate_coherent_probe(
            config, mean_n, noise, n_pulses, seed, stream=stream, threads=threads
        )
    if state == "thermal":
        return simulate_thermal(config, mean_n, n_pulses, seed, stream=stream, threads=threads)
    raise InvalidArgumentError(f"unknown input state {state!r}, use one of {STATES}")


def reconstruct_repeated(
    config: DetectorConfig,
    povm,
    state: str,
    mean_n: float,
    n_pulses: int,
    repeats: int,
    seed: int,
    opts: Optional[EmeOptions] = None,
    threads: int = 1,
) -> RepeatedReconstruction:
    """Simulate clicks and reconstruct ``repeats`` times; mean and spread per photon number."""
    if repeats < 1:
        raise InvalidArgumentError("repeats must be >= 1")
    truncation = _povm(povm).shape[0] - 1
    reference = reference_pnd(state, mean_n, truncation)
    estimates, clicks, reports = [], [], []
    fidelities, tvds, diagnostics = [], [], []
    for repeat in range(repeats):
        stats = simulate_input(
            config, state, mean_n, n_pulses, seed, stream=repeat, threads=threads
        )
        result = eme_reconstruct(stats, povm, opts)
        estimates.append(result.pnd.probs)
        clicks.append(stats.probs)
        diagnostics.append(result.diagnostics())
        fidelities.append(fidelity(result.pnd, reference))
        tvds.append(tvd(result.pnd, reference))
        if mean_n > 0:
            reports.append(metric_report(result.pnd, reference))
    estimates_arr, clicks_arr = np.array(estimates), np.array(clicks)
    return RepeatedReconstruction(
        state=state,
        mean_n=mean_n,
        mean=estimates_arr.mean(axis=0),
        std=estimates_arr.std(axis=0),
        reference=reference,
        reports=reports,
        click_mean=clicks_arr.mean(axis=0),
        click_std=clicks_arr.std(axis=0),
        fidelities=fidelities,
        tvds=tvds,
        diagnostics=diagnostics,
    )
