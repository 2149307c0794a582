import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgqt.errors import ConfigError, DimensionMismatchError, OracleError
from sgqt.oracle import (
    MeasurementOracle,
    NoiseProfile,
    crosstalk_channel,
    high_noise,
    low_noise,
    neighbour_crosstalk,
    uniform_crosstalk,
)
from sgqt.qstate import DensityMatrix, Ket, fidelity, random_density_matrix, random_haar_ket


def _sample(oracle, setting, n):
    return np.array([oracle.query_counts(setting) for _ in range(n)])


def test_zero_probability_no_dark_gives_zero():
    o = MeasurementOracle(Ket.basis(3, 0), NoiseProfile(copies_per_setting=1000), rng=0)
    assert np.all(_sample(o, Ket.basis(3, 1), 500) == 0)


def test_poisson_moments_at_80_copies():
    psi = random_haar_ket(3, 0)
    o = MeasurementOracle(psi, NoiseProfile(copies_per_setting=80), rng=1)
    c = _sample(o, psi, 10_000)
    assert abs(c.mean() - 80) < 1
    assert 0.9 <= c.var() / c.mean() <= 1.1
    assert np.sqrt(c.var()) == pytest.approx(np.sqrt(80), rel=0.05)


def test_rate_mode_mean_with_dark_counts():
    psi = Ket.basis(2, 0)
    setting = Ket(np.array([1, 1]) / np.sqrt(2))
    o = MeasurementOracle(psi, NoiseProfile(rate_hz=1e5, integration_time_s=1.0,
                                            dark_rate_hz=100), rng=2)
    c = _sample(o, setting, 10_000)
    assert abs(c.mean() - 50_100) < 3 * np.sqrt(50_100 / 10_000)
    assert 0.9 <= c.var() / c.mean() <= 1.1


def test_ideal_probability_examples():
    psi = random_haar_ket(3, 4)
    o = MeasurementOracle(psi, low_noise(3), rng=0)
    assert o.ideal_probability(psi) == pytest.approx(1.0)
    perp = np.cross(psi.amps.conj(), random_haar_ket(3, 5).amps.conj())
    assert o.ideal_probability(perp / np.linalg.norm(perp)) == pytest.approx(0.0, abs=1e-15)
    mixed = MeasurementOracle(DensityMatrix.maximally_mixed(3), low_noise(3), rng=0)
    assert mixed.ideal_probability(random_haar_ket(3, 6)) == pytest.approx(1 / 3)


def test_counts_track_overlap_without_technical_noise():
    rng = np.random.default_rng(3)
    psi = random_haar_ket(4, rng)
    o = MeasurementOracle(psi, NoiseProfile(copies_per_setting=10**6), rng=rng)
    settings_ = [random_haar_ket(4, rng) for _ in range(1000)]
    f = np.array([fidelity(s, psi) for s in settings_])
    c = np.array([o.query_counts(s) for s in settings_]) / 1e6
    assert abs(c.sum() / f.sum() - 1) < 0.01
    assert np.all(np.abs(c - f) < 6 * np.sqrt(f / 1e6) + 1e-5)


def test_loss_breaks_basis_completeness():
    psi = random_haar_ket(3, 8)
    noise = NoiseProfile(copies_per_setting=1, loss=[1.0, 0.8, 0.6], shot_noise=False)
    o = MeasurementOracle(psi, noise)
    basis = [Ket(np.array([1, w, w * w]) / np.sqrt(3)) for w in np.exp(2j * np.pi * np.arange(3) / 3)]
    total = sum(o.evaluation.expected_probability(b) for b in basis)
    assert total < 0.95


def test_uniform_loss_halves_counts():
    psi = random_haar_ket(3, 10)
    s = random_haar_ket(3, 11)
    full = MeasurementOracle(psi, NoiseProfile(copies_per_setting=10**4))
    half = MeasurementOracle(psi, NoiseProfile(copies_per_setting=10**4, loss=[0.5] * 3))
    assert half.expected_counts(s) == pytest.approx(0.5 * full.expected_counts(s), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_crosstalk_channel_is_a_state_map(d, seed, eps):
    rho = random_density_matrix(d, rng=seed).elements
    for c in (uniform_crosstalk(d, eps), neighbour_crosstalk(d, eps)):
        out = crosstalk_channel(rho, c)
        assert np.trace(out).real == pytest.approx(1.0, abs=1e-12)
        assert np.linalg.eigvalsh(out).min() > -1e-12
        # populations move as p -> p C
        assert np.allclose(np.diag(out).real, np.diag(rho).real @ c)


def test_uniform_crosstalk_reduces_overlap_by_eps_mixture():
    psi = random_haar_ket(3, 12)
    eps = 0.1
    o = MeasurementOracle(psi, NoiseProfile(copies_per_setting=1, crosstalk=uniform_crosstalk(3, eps)))
    p = o.evaluation.expected_probability(psi)
    assert 1 - eps < p < 1


def test_noise_profile_validation():
    with pytest.raises(ConfigError) as err:
        NoiseProfile()
    assert err.value.field == "noise"
    with pytest.raises(ConfigError) as err:
        NoiseProfile(copies_per_setting=10, crosstalk=[[0.5, 0.4], [0, 1]])
    assert err.value.field == "noise.crosstalk"
    with pytest.raises(ConfigError) as err:
        NoiseProfile(rate_hz=10, loss=[1.2, 1])
    assert err.value.field == "noise.loss"


def test_presets():
    assert low_noise(3).signal_mean == 1e5 and low_noise(3).dark_mean == 100
    assert high_noise(3).copies == 80 and high_noise(20).copies == 1000


def test_with_copies_rescales_budget():
    psi = random_haar_ket(3, 0)
    o = MeasurementOracle(psi, low_noise(3), rng=0)
    o2 = o.with_copies(1000)
    assert o2.copies_per_query == 1000
    assert o2.noise.dark_mean == pytest.approx(1.0)


def test_dimension_mismatch():
    psi = random_haar_ket(3, 0)
    o = MeasurementOracle(psi, low_noise(3))
    with pytest.raises(DimensionMismatchError):
        o.query_counts(Ket.basis(2, 0))
    with pytest.raises(DimensionMismatchError):
        MeasurementOracle(psi, low_noise(4))


class _BrokenChannel:
    dim = 3

    def transfer_matrix(self, rng):
        return np.full((3, 3), np.nan)


def test_non_finite_probability_raises():
    o = MeasurementOracle(random_haar_ket(3, 0), low_noise(3), channel=_BrokenChannel())
    with pytest.raises(OracleError):
        o.query_counts(Ket.basis(3, 0))


def test_seeded_oracle_is_deterministic():
    psi = random_haar_ket(3, 0)
    a = _sample(MeasurementOracle(psi, high_noise(3), rng=5), psi, 50)
    b = _sample(MeasurementOracle(psi, high_noise(3), rng=5), psi, 50)
    assert np.array_equal(a, b)


def test_query_and_copy_bookkeeping():
    o = MeasurementOracle(random_haar_ket(3, 0), high_noise(3), rng=0)
    for _ in range(7):
        o.query_counts(Ket.basis(3, 0))
    assert o.queries == 7 and o.copies_used == 560
