import numpy as np
import pytest

from pnr_tomography.detector import (
    NoiseModel,
    exact_povm,
    sample_detector,
    simulate_probe_matrix,
)
from pnr_tomography.exceptions import DegenerateMaskError, InvalidArgumentError
from pnr_tomography.probes import build_probe_matrix, make_probe_plan
from pnr_tomography.tomography import (
    PovmMatrix,
    dark_count_probability,
    gamma_sweep,
    povm_relative_error,
    povm_smoothness,
    smoothing_operator,
    solve_mdt,
    solve_mle,
    solve_sdt,
    sparsity_mask,
    tomography_objective,
    unconstrained_solution,
)


def random_instance(d: int, m: int, n: int, seed: int):
    """Row-stochastic F (D x M+1), POVM (M+1 x N+1) with all entries >= 0.05, P = F Pi."""
    rng = np.random.default_rng(seed)
    f = rng.dirichlet(np.ones(m + 1), size=d)
    pi = 0.05 + rng.dirichlet(np.ones(n + 1), size=m + 1)
    pi /= pi.sum(axis=1, keepdims=True)
    return f @ pi, f, pi


def noise_free_instance():
    config = sample_detector(4, seed=21)
    plan = make_probe_plan(4, alpha_sq_values=np.arange(0.5, 20.5, 0.5))
    f = build_probe_matrix(plan).values
    pi_true = exact_povm(config, plan.truncation).values
    return f @ pi_true, f, pi_true


def test_smoothing_operator_matches_differences():
    m = 4
    diff = np.diff(np.eye(m + 1), axis=0)
    np.testing.assert_allclose(smoothing_operator(m), diff.T @ diff)
    np.testing.assert_allclose(smoothing_operator(m) @ np.ones(m + 1), 0.0)


def test_row_sums_of_closed_form():
    for seed in range(10):
        p, f, _ = random_instance(d=8, m=5, n=3, seed=seed)
        gamma = 10.0 ** np.random.default_rng(seed).uniform(-4, 0)
        pi = unconstrained_solution(p, f, gamma)
        np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-6)


def test_identity_design_returns_data():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=6)
    pi = unconstrained_solution(p, np.eye(6), 1e-10)
    np.testing.assert_allclose(pi, p, atol=1e-8)


def test_closed_form_small_case():
    f = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]])
    p = np.array([[0.7, 0.3], [0.4, 0.6], [0.2, 0.8]])
    gamma = 0.1
    u = np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
    expected = np.linalg.solve(f.T @ f + gamma * u, f.T @ p)
    np.testing.assert_allclose(unconstrained_solution(p, f, gamma), expected, atol=1e-12)


def test_closed_form_needs_positive_gamma():
    p, f, _ = random_instance(4, 3, 2, seed=0)
    with pytest.raises(InvalidArgumentError):
        unconstrained_solution(p, f, 0.0)
    with pytest.raises(InvalidArgumentError):
        solve_sdt(p, f, -1.0)
    with pytest.raises(InvalidArgumentError):
        solve_sdt(p[:2], f, 1e-3)


def test_sparsity_mask():
    pi = np.array([[0.5, 0.5], [1.2, -0.2], [0.0, 1.0]])
    mask = sparsity_mask(pi)
    np.testing.assert_array_equal(mask.mask, [[False, False], [False, True], [True, False]])
    assert mask.masked_fraction == pytest.approx(2 / 6)
    assert mask.degenerate_rows == []
    assert not sparsity_mask(np.full((3, 2), 0.5)).mask.any()


def test_degenerate_mask():
    pi = np.array([[0.5, 0.5], [-0.1, 0.0]])
    assert sparsity_mask(pi).degenerate_rows == [1]
    with pytest.raises(DegenerateMaskError) as excinfo:
        sparsity_mask(pi, strict=True)
    assert excinfo.value.rows == [1]


def test_noise_free_identifiability():
    p, f, pi_true = noise_free_instance()
    for solve in (solve_sdt, solve_mdt):
        solution = solve(p, f, 1e-6)
        assert solution.povm is not None
        assert povm_relative_error(solution.povm, pi_true) < 1e-2


def test_returned_povm_is_valid():
    p, f, _ = random_instance(10, 6, 4, seed=3)
    solution = solve_sdt(p, f, 1e-3)
    assert solution.converged
    np.testing.assert_allclose(solution.povm.values.sum(axis=1), 1.0, atol=1e-8)
    assert solution.povm.values.min() >= -1e-10


def test_objective_matches_qp_value():
    p, f, _ = random_instance(10, 6, 4, seed=4)
    solution = solve_sdt(p, f, 1e-2)
    assert solution.objective == pytest.approx(
        tomography_objective(solution.x, p, f, 1e-2), rel=1e-9, abs=1e-12
    )


def test_mdt_equals_sdt_with_empty_mask():
    p, f, _ = random_instance(12, 4, 3, seed=6)
    gamma = 1e-6
    assert not sparsity_mask(unconstrained_solution(p, f, gamma)).mask.any()
    sdt, mdt = solve_sdt(p, f, gamma), solve_mdt(p, f, gamma)
    assert mdt.masked_fraction == 0
    np.testing.assert_allclose(mdt.x, sdt.x, atol=1e-6)


def test_heavy_smoothing_flattens_columns():
    p, f, _ = random_instance(10, 6, 3, seed=7)
    solution = solve_sdt(p, f, 1e6)
    assert np.ptp(solution.povm.values, axis=0).max() < 1e-2
    np.testing.assert_allclose(solution.povm.values.sum(axis=1), 1.0, atol=1e-8)


def test_sdt_objective_never_exceeds_mdt():
    config = sample_detector(4, seed=5)
    plan = make_probe_plan(4, config=config)
    f = build_probe_matrix(plan).values
    for seed in range(3):
        p = simulate_probe_matrix(config, plan.alpha_sq_values, NoiseModel(), 5000, seed=seed)
        sdt, mdt = solve_sdt(p, f, 1e-4), solve_mdt(p, f, 1e-4)
        assert mdt.masked_fraction > 0
        assert tomography_objective(sdt.x, p, f, 1e-4) <= (
            tomography_objective(mdt.x, p, f, 1e-4) * (1 + 1e-8) + 1e-12
        )


def test_mdt_pins_masked_entries():
    p, f, _ = noise_free_instance()
    mask = sparsity_mask(unconstrained_solution(p, f, 1e-4))
    solution = solve_mdt(p, f, 1e-4)
    assert solution.masked_fraction == pytest.approx(mask.masked_fraction)
    assert np.all(solution.x[mask.mask] == 0)
    assert solution.n_variables == int((~mask.mask).sum())
    assert solution.assembly_time > 0


def test_dark_count_probability():
    povm = exact_povm(sample_detector(5, seed=2), truncation=10)
    assert dark_count_probability(povm) == 0
    assert dark_count_probability(np.array([[0.9, 0.1], [0.0, 1.0]])) == pytest.approx(0.1)


def test_relative_error():
    pi = exact_povm(sample_detector(3, seed=2), truncation=8).values
    assert povm_relative_error(pi, pi) == 0
    assert povm_relative_error(1.01 * pi, pi) == pytest.approx(0.01)
    with pytest.raises(InvalidArgumentError):
        povm_relative_error(pi, pi[:-1])


def test_smoothness_flags_spikes():
    pi = exact_povm(sample_detector(3, seed=2), truncation=12).values
    spiky = pi.copy()
    spiky[6] = [0.0, 0.0, 0.0, 1.0]
    assert povm_smoothness(spiky) > povm_smoothness(pi)

    small = pi.copy()
    small[8] += [0.05, 0.0, 0.0, -0.05]
    assert povm_smoothness(small) > povm_smoothness(pi) + 0.1

    # the vacuum row does not count
    shifted = pi.copy()
    shifted[0] = [0.5, 0.5, 0.0, 0.0]
    assert povm_smoothness(shifted) == povm_smoothness(pi)


def test_povm_validation():
    with pytest.raises(InvalidArgumentError):
        PovmMatrix(np.array([[0.5, 0.4]]))
    with pytest.raises(InvalidArgumentError):
        PovmMatrix(np.array([[1.1, -0.1]]))
    PovmMatrix(np.array([[1.1, -0.1]]), validate=False)


def test_gamma_sweep_single_row():
    p, f, _ = random_instance(8, 5, 3, seed=9)
    rows = gamma_sweep(p, f, [1e-3])
    assert len(rows) == 1
    assert rows[0].gamma == 1e-3
    assert rows[0].converged


def test_mle_stays_stochastic():
    p, f, pi_true = random_instance(12, 4, 3, seed=10)
    solution = solve_mle(p, f, max_iter=20000)
    np.testing.assert_allclose(solution.povm.values.sum(axis=1), 1.0, atol=1e-10)
    assert solution.povm.values.min() >= 0
    assert povm_relative_error(solution.povm, pi_true) < 0.1


@pytest.mark.slow
def test_ten_pixel_run():
    config = sample_detector(10, seed=2024)
    plan = make_probe_plan(10, rule="saturation", config=config)
    f = build_probe_matrix(plan)
    p = simulate_probe_matrix(config, plan.alpha_sq_values, NoiseModel(), 100000, seed=2024)

    sdt, mdt = solve_sdt(p, f, 1e-4), solve_mdt(p, f, 1e-4)
    assert sdt.converged and mdt.converged
    assert povm_relative_error(mdt.povm, sdt.povm) < 0.03
    assert dark_count_probability(mdt.povm) < 0.10
    assert 0.2 <= mdt.masked_fraction <= 0.6

    rows = gamma_sweep(p, f, [1e-5, 1e-1])
    assert rows[1].p_dark > rows[0].p_dark
