import numpy as np
import pytest
from scipy.stats import kstest

from config.settings import settings
from models.errors import InitializationFailure
from models.schemas import SamplerConfig
from services.diagnostics_service import ess, rhat
from services.sampler_service import (
    DualAveraging,
    SamplerService,
    find_initial_point,
    regularized_variance,
    run_chains,
    sampler_service,
    warmup_windows,
)


class StandardNormal:
    """Isotropic standard normal target."""

    def __init__(self, dim: int):
        self.dim = dim

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        return -0.5 * float(u @ u), -u


class Nowhere:
    dim = 2

    def __call__(self, u):
        return -np.inf, np.zeros(2)


class CorrelatedGaussian:
    """Zero-mean bivariate normal with unit variances and correlation ``rho``."""

    dim = 2

    def __init__(self, rho: float):
        self.covariance = np.array([[1.0, rho], [rho, 1.0]])
        self.precision = np.linalg.inv(self.covariance)

    def __call__(self, u):
        u = np.asarray(u, dtype=np.float64)
        grad = -self.precision @ u
        return 0.5 * float(u @ grad), grad


def test_warmup_windows_default_schedule():
    windows = warmup_windows(1000)
    assert windows[0] == (75, 100)
    assert windows[-1][1] == 950
    for (_, end), (start, _) in zip(windows, windows[1:]):
        assert end == start
    sizes = [end - start for start, end in windows[:-1]]
    assert sizes == [25 * 2 ** k for k in range(len(sizes))]


def test_warmup_windows_short_warmup():
    windows = warmup_windows(100)
    assert windows == [(15, 90)]


def test_dual_averaging_moves_toward_target():
    adaptation = DualAveraging(target=0.8)
    adaptation.restart(1.0)
    low = adaptation.update(0.1)
    adaptation.restart(1.0)
    high = adaptation.update(1.0)
    assert low < high


def test_regularized_variance_shrinks_toward_small_value():
    samples = np.random.default_rng(0).normal(scale=3.0, size=(200, 3))
    variance = regularized_variance(samples)
    expected = (200 / 205) * samples.var(axis=0, ddof=1) + 1e-3 * 5 / 205
    np.testing.assert_allclose(variance, expected)


def test_find_initial_point_gives_up():
    cfg = SamplerConfig(init_attempts=5)
    with pytest.raises(InitializationFailure):
        find_initial_point(Nowhere(), np.zeros(2), cfg, np.random.default_rng(0), 2.0)


def test_run_chains_reports_initialization_failure():
    cfg = SamplerConfig(n_chains=1, n_warmup=100, n_draws=10, init_attempts=3)
    with pytest.raises(InitializationFailure):
        run_chains(Nowhere(), cfg)


def test_standard_normal_moments_short_run():
    cfg = SamplerConfig(n_chains=2, n_warmup=300, n_draws=600, seed=11)
    draws = run_chains(StandardNormal(5), cfg)
    assert draws.unconstrained.shape == (2, 600, 5)
    flat = draws.unconstrained.reshape(-1, 5)
    assert np.all(np.abs(flat.mean(axis=0)) < 0.2)
    assert np.all(np.abs(flat.var(axis=0) - 1.0) < 0.3)
    assert draws.divergent.sum() == 0
    np.testing.assert_allclose(draws.lp, -0.5 * np.sum(draws.unconstrained ** 2, axis=-1))


def test_same_seed_reproduces_draws():
    cfg = SamplerConfig(n_chains=2, n_warmup=100, n_draws=50, seed=3)
    first = run_chains(StandardNormal(3), cfg)
    second = run_chains(StandardNormal(3), cfg)
    np.testing.assert_array_equal(first.unconstrained, second.unconstrained)
    third = run_chains(StandardNormal(3), cfg.model_copy(update={"seed": 4}))
    assert not np.array_equal(first.unconstrained, third.unconstrained)


def test_user_init_starts_near_center():
    cfg = SamplerConfig(n_chains=1, n_warmup=100, n_draws=20, init_mode="user", seed=5)
    draws = run_chains(StandardNormal(2), cfg, init_center=np.array([0.5, -0.5]))
    assert np.all(np.isfinite(draws.unconstrained))


def test_sampler_service_thread_cap_does_not_change_draws():
    cfg = SamplerConfig(n_chains=3, n_warmup=100, n_draws=40, seed=8)
    assert sampler_service.max_workers == settings.max_workers
    serial = SamplerService(max_workers=1).sample(StandardNormal(2), cfg, names=["a", "b"])
    parallel = run_chains(StandardNormal(2), cfg)
    np.testing.assert_array_equal(serial.unconstrained, parallel.unconstrained)
    assert serial.names == ["a", "b"]


def test_correlated_gaussian_moments_within_monte_carlo_error():
    rho = 0.9
    cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_draws=2000, seed=515)
    draws = run_chains(CorrelatedGaussian(rho), cfg)
    chains = draws.unconstrained
    flat = chains.reshape(-1, 2)
    assert draws.divergent.sum() == 0

    for k in range(2):
        n_eff = ess(chains[:, :, k])
        assert n_eff > 400
        assert abs(flat[:, k].mean()) < 4.0 / np.sqrt(n_eff)
        assert abs(flat[:, k].var() - 1.0) < 4.0 * np.sqrt(2.0) / np.sqrt(ess(chains[:, :, k] ** 2))
        assert rhat(chains[:, :, k]) < 1.01

    product = chains[:, :, 0] * chains[:, :, 1]
    correlation = np.corrcoef(flat.T)[0, 1]
    assert abs(correlation - rho) < 4.0 * (1.0 - rho ** 2) / np.sqrt(ess(product))


@pytest.mark.slow
def test_standard_normal_moments_full_run():
    cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_draws=2000, seed=2024)
    draws = run_chains(StandardNormal(10), cfg)
    flat = draws.unconstrained.reshape(-1, 10)
    assert np.all(np.abs(flat.mean(axis=0)) < 0.05)
    assert np.all(np.abs(flat.var(axis=0) - 1.0) < 0.1)


@pytest.mark.slow
def test_one_dimensional_draws_pass_ks():
    cfg = SamplerConfig(n_chains=1, n_warmup=1000, n_draws=8000, seed=99)
    draws = run_chains(StandardNormal(1), cfg)
    result = kstest(draws.unconstrained.ravel(), "norm")
    assert result.statistic < 1.63 / np.sqrt(8000)
