import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgqt.errors import DegenerateVectorError, DimensionMismatchError
from sgqt.mixed import MixedParam, _score, realize, realize_root, run_sgqt_mixed
from sgqt.mub import build_mubs
from sgqt.oracle import MeasurementOracle, low_noise, noiseless
from sgqt.qstate import DensityMatrix, fidelity_mixed, random_density_matrix, random_haar_ket


def test_realize_examples():
    assert np.allclose(realize(MixedParam(3, np.eye(3))).elements, np.eye(3) / 3)
    e0 = np.diag([1.0, 0, 0])
    assert np.allclose(realize(MixedParam(3, e0)).elements, e0)
    assert np.allclose(realize_root(MixedParam(3, np.eye(3))).elements, np.eye(3) / 3)
    assert np.allclose(realize_root(MixedParam(3, e0)).elements, e0)


def test_realize_rejects_zero_factor():
    with pytest.raises(DegenerateVectorError):
        realize(MixedParam(3, np.zeros((3, 3))))
    with pytest.raises(DegenerateVectorError):
        realize_root(MixedParam(3, np.zeros((3, 3))))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_any_factor_realizes_a_state(d, seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=d * d) * rng.uniform(0.01, 100)
    p = MixedParam.from_vector(theta, d)
    assert np.allclose(p.tri, np.tril(p.tri))
    for rho in (realize(p), realize_root(p)):
        assert isinstance(rho, DensityMatrix)
    assert np.allclose(p.to_vector(), theta)


def test_both_maps_are_surjective():
    rho = random_density_matrix(3, rank=3, rng=2).elements
    assert np.allclose(realize(MixedParam(3, np.linalg.cholesky(rho))).elements, rho)
    assert np.allclose(realize_root(MixedParam(3, np.linalg.cholesky(rho @ rho))).elements, rho)


def test_param_shape_validation():
    with pytest.raises(DimensionMismatchError):
        MixedParam(3, np.eye(2))
    with pytest.raises(DimensionMismatchError):
        MixedParam.from_vector(np.ones(8), 3)


def _score_oracle(theta, d, proj, freqs):
    # independent evaluation: build |T| with scipy's sqrtm, normalize, cross entropy
    from scipy.linalg import sqrtm
    t = MixedParam.from_vector(theta, d).tri
    r = sqrtm(t @ t.conj().T)
    r = r / np.trace(r)
    p = np.real(np.einsum("sij,ji->s", proj, r))
    return float(freqs @ np.log(p / p.sum()))


def test_spsa_parameter_gradient_matches_finite_difference():
    d = 3
    rng = np.random.default_rng(0)
    truth = random_density_matrix(d, rank=2, rng=rng)
    vecs = build_mubs(d).matrix()
    proj = np.einsum("si,sj->sij", vecs, vecs.conj())
    freqs = np.real(np.einsum("sij,ji->s", proj, truth.elements))
    freqs /= freqs.sum()
    theta = MixedParam(d, np.linalg.cholesky(random_density_matrix(d, rng=rng).elements)).to_vector()
    beta = 1e-3
    acc = np.zeros_like(theta)
    n = 1000
    for _ in range(n):
        delta = rng.choice([-1.0, 1.0], size=theta.size)
        up = _score(theta + beta * delta, d, proj, freqs)
        down = _score(theta - beta * delta, d, proj, freqs)
        acc += (up - down) / (2 * beta) * delta
    h = 1e-6
    fd = np.array([(_score_oracle(theta + h * e, d, proj, freqs)
                    - _score_oracle(theta - h * e, d, proj, freqs)) / (2 * h)
                   for e in np.eye(theta.size)])
    g = acc / n
    assert g @ fd / (np.linalg.norm(g) * np.linalg.norm(fd)) >= 0.9


def _run(target, noise, iterations, seed):
    o = MeasurementOracle(target, noise, rng=np.random.default_rng([seed, 1]))
    est, records = run_sgqt_mixed(o, 3, iterations, rng=np.random.default_rng([seed, 2]))
    return est, np.array([r.fidelity_true for r in records])


def test_pure_target_noiseless():
    fids = [_run(random_haar_ket(3, s).projector(), noiseless(3), 300, s)[1][-1] for s in range(20)]
    assert np.median(fids) >= 0.99


def test_maximally_mixed_target_noiseless():
    _, f = _run(DensityMatrix.maximally_mixed(3), noiseless(3), 300, 0)
    assert f[-1] >= 0.99


@pytest.fixture(scope="module")
def rank2_low_noise():
    return np.array([_run(random_density_matrix(3, rank=2, rng=s), low_noise(3), 1000, s)[1]
                     for s in range(24)])


def test_rank2_low_noise_at_convergence(rank2_low_noise):
    assert np.median(rank2_low_noise[:, -1]) >= 0.96


def test_median_infidelity_decreases(rank2_low_noise):
    med = np.median(1 - rank2_low_noise, axis=0)
    checkpoints = [9, 29, 99, 299, 999]
    assert np.all(np.diff(med[checkpoints]) < 0)


def test_estimate_is_valid_and_copies_counted():
    target = random_density_matrix(3, rank=2, rng=5)
    o = MeasurementOracle(target, low_noise(3).with_(rate_hz=100.0, dark_rate_hz=0.0), rng=1)
    est, records = run_sgqt_mixed(o, 3, 40, settings_per_objective=4, rng=2)
    assert isinstance(est, DensityMatrix)
    assert [r.copies_used for r in records] == [400 * (k + 1) for k in range(40)]
    assert records[-1].fidelity_true == pytest.approx(fidelity_mixed(est, target), abs=1e-12)


def test_run_validation():
    o = MeasurementOracle(DensityMatrix.maximally_mixed(3), noiseless(3))
    with pytest.raises(DimensionMismatchError):
        run_sgqt_mixed(o, 2, 5)
    with pytest.raises(ValueError):
        run_sgqt_mixed(o, 3, 5, settings_per_objective=13)
    with pytest.raises(ValueError):
        run_sgqt_mixed(o, 3, 5, realization="cube")


def test_square_map_still_runs():
    o = MeasurementOracle(random_density_matrix(3, rank=2, rng=3), low_noise(3), rng=0)
    _, rec = run_sgqt_mixed(o, 3, 100, rng=0, realization="square")
    assert rec[-1].fidelity_true > rec[0].fidelity_true
