import numpy as np
import pytest

from pnr_tomography.detector import (
    NoiseModel,
    exact_povm,
    sample_detector,
    simulate_probe_matrix,
)
from pnr_tomography.exceptions import InvalidArgumentError, ModelMismatchError
from pnr_tomography.metrics import fidelity, poisson_pnd, thermal_pnd
from pnr_tomography.probes import build_probe_matrix, make_probe_plan
from pnr_tomography.reconstruction import (
    EmeOptions,
    eme_reconstruct,
    lambda_sweep,
    log_likelihood,
    reconstruct_repeated,
    reference_pnd,
)
from pnr_tomography.tomography import solve_mdt


def test_identity_povm_returns_data():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    result = eme_reconstruct(p, np.eye(4), EmeOptions(lam=0.0))
    np.testing.assert_allclose(result.pnd.probs, p, atol=1e-12)
    assert result.converged
    assert result.iterations <= 3


def test_uniform_data_stays_uniform():
    result = eme_reconstruct(np.full(5, 0.2), np.eye(5), EmeOptions(lam=0.0))
    np.testing.assert_allclose(result.pnd.probs, 0.2, atol=1e-15)


def test_unexplained_outcome():
    povm = np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])
    with pytest.raises(ModelMismatchError) as excinfo:
        eme_reconstruct(np.array([0.5, 0.3, 0.2]), povm)
    assert excinfo.value.outcome == 2


def test_input_validation():
    with pytest.raises(InvalidArgumentError):
        eme_reconstruct(np.array([0.5, 0.5]), np.eye(3))
    with pytest.raises(InvalidArgumentError):
        eme_reconstruct(np.array([0.5, 0.6]), np.eye(2))
    with pytest.raises(InvalidArgumentError):
        EmeOptions(lam=-0.1)


def test_likelihood_never_decreases_without_entropy():
    povm = exact_povm(sample_detector(4, seed=5), truncation=15)
    p = thermal_pnd(2.0, 15).probs @ povm.values
    result = eme_reconstruct(p, povm, EmeOptions(lam=0.0, max_iter=500, track_likelihood=True))
    assert len(result.likelihood) == result.iterations
    assert np.all(np.diff(result.likelihood) >= -1e-12)
    assert result.likelihood[-1] <= log_likelihood(p, povm, thermal_pnd(2.0, 15)) + 1e-12


def test_iterates_are_distributions():
    povm = exact_povm(sample_detector(4, seed=5), truncation=12)
    p = poisson_pnd(3.0, 12).probs @ povm.values
    result = eme_reconstruct(p, povm, EmeOptions(max_iter=7))
    assert result.iterations == 7
    assert not result.converged
    assert abs(result.pnd.probs.sum() - 1) < 1e-12
    # floored at 1e-12 before the final renormalization
    assert result.pnd.probs.min() >= 0.99e-12


def test_exact_clicks_reconstruct_coherent_state():
    povm = exact_povm(sample_detector(10, seed=6), truncation=30)
    truth = poisson_pnd(3.0, 30)
    p = truth.probs @ povm.values
    result = eme_reconstruct(p, povm)
    assert fidelity(result.pnd, truth) > 0.99
    assert result.diagnostics()["lambda"] == 0.02


def test_lambda_sweep_single_value():
    povm = exact_povm(sample_detector(4, seed=5), truncation=15)
    truths = [poisson_pnd(m, 15) for m in (1.0, 2.0)]
    clicks = [t.probs @ povm.values for t in truths]
    rows = lambda_sweep(clicks, truths, povm, [0.02])
    assert len(rows) == 1
    assert rows[0].lam == 0.02
    assert 0 < rows[0].min_fidelity <= rows[0].mean_fidelity <= 1
    with pytest.raises(InvalidArgumentError):
        lambda_sweep(clicks, truths[:1], povm, [0.02])


def test_reference_pnd():
    np.testing.assert_array_equal(reference_pnd("coherent", 2.0, 10).probs, poisson_pnd(2.0, 10).probs)
    with pytest.raises(InvalidArgumentError):
        reference_pnd("squeezed", 1.0, 10)


def test_repeated_reconstruction():
    config = sample_detector(4, seed=7)
    povm = exact_povm(config, truncation=20)
    result = reconstruct_repeated(config, povm, "coherent", 2.0, 5000, repeats=3, seed=7)
    assert result.mean.shape == (21,)
    assert result.std.shape == (21,)
    assert len(result.fidelities) == 3
    assert len(result.reports) == 3
    assert len(result.diagnostics) == 3
    assert all(d["iterations"] >= 1 for d in result.diagnostics)
    assert result.mean_report is not None
    assert np.all(result.std >= 0)


def test_vacuum_reconstructs_to_vacuum():
    config = sample_detector(4, seed=7)
    povm = exact_povm(config, truncation=20)
    result = reconstruct_repeated(config, povm, "coherent", 0.0, 2000, repeats=2, seed=1)
    assert result.mean[0] > 1 - 1e-9
    assert result.mean_report is None
    assert result.fidelities[0] == pytest.approx(1.0, abs=1e-9)


@pytest.fixture(scope="module")
def twenty_pixel_povm():
    config = sample_detector(20, seed=77)
    plan = make_probe_plan(20, rule="saturation", config=config)
    f = build_probe_matrix(plan)
    p = simulate_probe_matrix(config, plan.alpha_sq_values, NoiseModel(), 100000, seed=77)
    solution = solve_mdt(p, f, 1e-4)
    assert 0.2 <= solution.masked_fraction <= 0.6
    return config, solution.povm


def twenty_pixel_report(twenty_pixel_povm, state: str, mean_n: float):
    config, povm = twenty_pixel_povm
    result = reconstruct_repeated(
        config, povm, state, mean_n, 100000, repeats=1, seed=78, opts=EmeOptions(lam=0.02)
    )
    assert result.mean_report is not None
    return result.mean_report


@pytest.mark.slow
@pytest.mark.parametrize("mean_n", [5.0, 10.0, 20.0])
def test_twenty_pixel_coherent(twenty_pixel_povm, mean_n):
    report = twenty_pixel_report(twenty_pixel_povm, "coherent", mean_n)
    assert report.fidelity > 0.99
    assert 0.95 <= report.g2 <= 1.05
    assert 0.9 <= report.g3 <= 1.1


@pytest.mark.slow
@pytest.mark.parametrize("mean_n", [5.0, 10.0, 20.0])
def test_twenty_pixel_thermal(twenty_pixel_povm, mean_n):
    report = twenty_pixel_report(twenty_pixel_povm, "thermal", mean_n)
    assert report.fidelity > 0.99
    assert 1.85 <= report.g2 <= 2.15
    if mean_n <= 5.0:
        assert 5.4 <= report.g3 <= 6.6


@pytest.mark.slow
@pytest.mark.xfail(
    strict=False,
    reason="20 pixels saturate above about 10 photons; EME fills the flat tail and inflates g3",
)
@pytest.mark.parametrize("mean_n", [10.0, 20.0])
def test_twenty_pixel_thermal_third_order(twenty_pixel_povm, mean_n):
    report = twenty_pixel_report(twenty_pixel_povm, "thermal", mean_n)
    assert 5.4 <= report.g3 <= 6.6
