import math

import numpy as np
import pytest

from pnr_tomography.detector import (
    NOISELESS,
    ClickStatistics,
    DetectorConfig,
    NoiseModel,
    detection_probabilities,
    exact_click_distribution,
    exact_coherent_click_distribution,
    exact_povm,
    sample_detector,
    simulate_coherent_probe,
    simulate_fock,
    simulate_probe_matrix,
    simulate_pulse,
    simulate_thermal,
    substream,
)
from pnr_tomography.exceptions import InvalidArgumentError, UnsupportedSizeError
from pnr_tomography.metrics import thermal_pnd, tvd


def ideal_detector(n_pixels: int) -> DetectorConfig:
    return DetectorConfig(
        n_pixels=n_pixels,
        coupling_efficiency=1.0,
        splitting_weights=tuple([1.0 / n_pixels] * n_pixels),
        intrinsic_efficiencies=tuple([1.0] * n_pixels),
    )


def test_sample_single_pixel():
    config = sample_detector(1, seed=7)
    assert config.splitting_weights == (1.0,)


def test_sample_is_deterministic():
    assert sample_detector(70, seed=3) == sample_detector(70, seed=3)
    assert sample_detector(70, seed=3) != sample_detector(70, seed=4)


def test_sample_ranges():
    config = sample_detector(4, seed=11)
    assert all(0.90 <= e <= 0.95 for e in config.intrinsic_efficiencies)
    assert math.fsum(config.splitting_weights) == pytest.approx(1.0, abs=1e-12)
    assert config.coupling_efficiency == 0.99


def test_sample_rejects_zero_pixels():
    with pytest.raises(InvalidArgumentError):
        sample_detector(0, seed=1)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(2, 1.0, (0.6, 0.6), (1.0, 1.0))
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(2, 1.0, (0.5, 0.5), (1.0,))
    with pytest.raises(InvalidArgumentError):
        DetectorConfig(1, 1.5, (1.0,), (1.0,))


def test_config_json():
    config = sample_detector(5, seed=2)
    assert DetectorConfig.from_json(config.to_json()) == config
    noise = NoiseModel(0.0188)
    assert NoiseModel.from_json_dict(noise.to_json_dict()) == noise


def test_detection_probabilities():
    config = DetectorConfig(2, 0.5, (0.5, 0.5), (1.0, 0.5))
    r = detection_probabilities(config)
    np.testing.assert_allclose(r, [0.625, 0.25, 0.125])


def test_pulse_without_photons():
    config = sample_detector(6, seed=1)
    assert simulate_pulse(config, 0, substream(0, 0)) == 0


def test_single_pixel_saturates():
    assert simulate_pulse(ideal_detector(1), 5, substream(0, 0)) == 1


def test_two_photons_two_pixels():
    config = ideal_detector(2)
    rng = substream(5, 0)
    clicks = [simulate_pulse(config, 2, rng) for _ in range(20000)]
    assert set(clicks) <= {1, 2}
    assert np.mean(np.array(clicks) == 2) == pytest.approx(0.5, abs=0.02)


def test_vacuum_probe():
    stats = simulate_coherent_probe(sample_detector(5, seed=1), 0.0, NoiseModel(), 5000, seed=1)
    np.testing.assert_array_equal(stats.probs, [1, 0, 0, 0, 0, 0])
    assert stats.n_samples == 5000


def test_coherent_matches_oracle():
    config = ideal_detector(3)
    stats = simulate_coherent_probe(config, 1.0, NOISELESS, 10**6, seed=42)
    exact = exact_coherent_click_distribution(config, 1.0, truncation=20)
    assert tvd(stats.probs, exact) < 3e-3


def test_thermal_matches_oracle():
    config = ideal_detector(3)
    stats = simulate_thermal(config, 1.0, 10**6, seed=43)
    truncation = 60
    exact = thermal_pnd(1.0, truncation).probs @ exact_povm(config, truncation).values
    assert tvd(stats.probs, exact) < 3e-3


def test_thermal_vacuum():
    stats = simulate_thermal(sample_detector(4, seed=1), 0.0, 1000, seed=1)
    np.testing.assert_array_equal(stats.probs, [1, 0, 0, 0, 0])


def test_reproducible_and_thread_independent():
    config = sample_detector(8, seed=9)
    noise = NoiseModel(0.0188)
    a = simulate_coherent_probe(config, 5.0, noise, 20000, seed=17, threads=1)
    b = simulate_coherent_probe(config, 5.0, noise, 20000, seed=17, threads=4)
    c = simulate_coherent_probe(config, 5.0, noise, 20000, seed=18)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)


def test_click_statistics_sum():
    config = sample_detector(10, seed=4)
    stats = simulate_thermal(config, 3.0, 12345, seed=4)
    assert abs(stats.probs.sum() - 1) <= 1e-12
    assert stats.probs.min() >= 0
    assert stats.n_pixels == 10


def test_click_statistics_validation():
    with pytest.raises(InvalidArgumentError):
        ClickStatistics.from_counts(np.zeros(3, dtype=np.int64))
    with pytest.raises(InvalidArgumentError):
        ClickStatistics(np.array([0.5, 0.6]))


def test_probe_matrix_rows():
    config = sample_detector(4, seed=3)
    p = simulate_probe_matrix(config, [1.0, 2.0, 3.0], NOISELESS, 3000, seed=3)
    assert p.shape == (3, 5)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    # each probe draws from its own stream
    single = simulate_coherent_probe(config, 2.0, NOISELESS, 3000, seed=3, stream=1)
    np.testing.assert_array_equal(p[1], single.probs)


def test_exact_vacuum_row():
    config = sample_detector(5, seed=8)
    np.testing.assert_allclose(exact_click_distribution(config, 0), np.eye(6)[0])


def test_exact_small_cases():
    config = ideal_detector(2)
    np.testing.assert_allclose(exact_click_distribution(config, 1), [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(exact_click_distribution(config, 2), [0, 0.5, 0.5], atol=1e-15)
    # two photons over three pixels share one with probability 1/3
    np.testing.assert_allclose(
        exact_click_distribution(ideal_detector(3), 2), [0, 1 / 3, 2 / 3, 0], atol=1e-14
    )


def test_exact_povm_single_pixel():
    povm = exact_povm(ideal_detector(1), truncation=6)
    np.testing.assert_allclose(povm.values[1:, 1], 1.0)
    assert povm.values[0, 1] == 0


def test_exact_povm_is_stochastic():
    povm = exact_povm(sample_detector(6, seed=12), truncation=30)
    np.testing.assert_allclose(povm.values.sum(axis=1), 1.0, atol=1e-12)
    assert povm.values.min() >= 0
    assert povm.n_pixels == 6
    assert povm.truncation == 30


def test_no_click_probability_falls_with_photon_number():
    config = sample_detector(5, seed=13)
    no_click = exact_povm(config, truncation=20).values[:, 0]
    assert np.all(np.diff(no_click) < 0)
    assert no_click[1] == pytest.approx(detection_probabilities(config)[0], rel=1e-9)


def test_fock_input_matches_oracle():
    for seed in range(3):
        config = sample_detector(4, seed=100 + seed)
        for k in (0, 1, 3, 6):
            stats = simulate_fock(config, k, 200000, seed=seed, stream=k)
            assert tvd(stats.probs, exact_click_distribution(config, k)) < 5e-3


def test_fock_input_validation():
    config = sample_detector(2, seed=1)
    with pytest.raises(InvalidArgumentError):
        simulate_fock(config, -1, 100, seed=1)
    with pytest.raises(InvalidArgumentError):
        simulate_fock(config, 2, 0, seed=1)


def test_exact_size_limit():
    with pytest.raises(UnsupportedSizeError):
        exact_click_distribution(sample_detector(13, seed=1), 2)


@pytest.mark.slow
def test_fock_input_matches_oracle_on_random_detectors():
    rng = np.random.default_rng(2718)
    for index in range(20):
        config = sample_detector(int(rng.integers(2, 7)), seed=int(rng.integers(2**31)))
        for k in range(11):
            stats = simulate_fock(config, k, 10**6, seed=index, stream=k, threads=4)
            assert tvd(stats.probs, exact_click_distribution(config, k)) < 5e-3
