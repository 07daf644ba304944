import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatem.metrics import (
    EnsembleBasis,
    downsample_volume,
    ensemble_basis,
    fsc,
    fsc_auc,
    pcv,
)


def random_basis(rng, dim, r):
    q, _ = np.linalg.qr(rng.normal(size=(dim, r)))
    return EnsembleBasis(q, np.sort(rng.uniform(0.1, 5, r))[::-1], np.zeros(dim))


def pcv_brute(a, b):
    Va, Sa, Vb = a.eigenvectors, a.eigenvalues, b.eigenvectors
    num = 0.0
    for k in range(Va.shape[1]):
        for l in range(Vb.shape[1]):
            num += Sa[k] ** 2 * float(np.dot(Vb[:, l], Va[:, k])) ** 2
    return num / float(np.sum(Sa**2))


# ---------------------------------------------------------------- FSC

def test_fsc_identity_every_shell():
    v = np.random.default_rng(0).normal(size=(16, 16, 16)) + 1.0
    c = fsc(v, v)
    assert len(c) == 8
    np.testing.assert_allclose(c.correlations, 1.0, atol=1e-12)
    np.testing.assert_array_equal(c.radii, np.arange(8))
    assert fsc_auc(c) == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_fsc_symmetric_and_scale_invariant(seed, s, t):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 8, 8, 8))
    base = fsc(a, b).correlations
    np.testing.assert_allclose(fsc(b, a).correlations, base, atol=1e-12)
    np.testing.assert_allclose(fsc(s * a, t * b).correlations, base, atol=1e-10)
    assert np.all(np.abs(base) <= 1.0)


def test_fsc_triple_is_one():
    v = np.random.default_rng(1).normal(size=(8, 8, 8))
    np.testing.assert_allclose(fsc(v, 3 * v).correlations, 1.0, atol=1e-10)


def test_fsc_against_direct_shell_sums():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 8, 8, 8))
    A, B = np.fft.fftn(a), np.fft.fftn(b)
    f = np.fft.fftfreq(8) * 8
    expected = np.zeros(4)
    for r in range(4):
        num = pa = pb = 0.0
        for i in range(8):
            for j in range(8):
                for k in range(8):
                    if round(np.sqrt(f[i] ** 2 + f[j] ** 2 + f[k] ** 2)) == r:
                        num += (A[i, j, k] * np.conj(B[i, j, k])).real
                        pa += abs(A[i, j, k]) ** 2
                        pb += abs(B[i, j, k]) ** 2
        expected[r] = num / np.sqrt(pa * pb)
    np.testing.assert_allclose(fsc(a, b).correlations, expected, atol=1e-12)


def test_fsc_independent_noise_is_small():
    vals = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 32, 32, 32))
        # shell 0 is the single real DC coefficient, so |FSC| there is 1 by construction
        vals.append(np.mean(np.abs(fsc(a, b).correlations[1:])))
    assert np.mean(vals) <= 0.1


def test_fsc_errors():
    with pytest.raises(ValueError):
        fsc(np.zeros((8, 8, 8)), np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        fsc(np.zeros((8, 8, 4)), np.zeros((8, 8, 4)))


def test_fsc_zero_volume_reports_zero():
    assert not fsc(np.zeros((8, 8, 8)), np.ones((8, 8, 8))).correlations.any()


def test_fsc_auc_cases():
    assert fsc_auc(np.ones(16)) == 1.0
    assert fsc_auc(np.zeros(16)) == 0.0
    n = 16
    assert abs(fsc_auc(np.linspace(1, 0, n)) - 0.5) <= 1 / (2 * n)
    with pytest.raises(ValueError):
        fsc_auc(np.array([]))


# ---------------------------------------------------------------- PCV

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_pcv_self_is_one(seed, r):
    b = random_basis(np.random.default_rng(seed), 12, r)
    assert abs(pcv(b, b) - 1.0) <= 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_pcv_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = random_basis(rng, 6, 2), random_basis(rng, 6, 2)
    value = pcv(a, b)
    assert abs(value - pcv_brute(a, b)) <= 1e-10
    assert 0.0 <= value <= 1.0


def test_pcv_orthogonal_is_zero():
    eye = np.eye(6)
    a = EnsembleBasis(eye[:, :2], np.array([2.0, 1.0]), np.zeros(6))
    b = EnsembleBasis(eye[:, 2:4], np.array([2.0, 1.0]), np.zeros(6))
    assert pcv(a, b) == 0.0


def test_pcv_is_asymmetric():
    eye = np.eye(4)
    a = EnsembleBasis(eye[:, :2], np.array([3.0, 1.0]), np.zeros(4))
    b = EnsembleBasis(eye[:, :1], np.array([1.0]), np.zeros(4))
    # b captures a's dominant axis: 9 / 10; a captures all of b
    assert pcv(a, b) == pytest.approx(0.9)
    assert pcv(b, a) == pytest.approx(1.0)


def test_pcv_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        pcv(random_basis(rng, 6, 2), random_basis(rng, 7, 2))


# ---------------------------------------------------------------- basis

def test_ensemble_basis_matches_dense_eigensolver():
    rng = np.random.default_rng(0)
    vols = rng.normal(size=(5, 8, 8, 8))
    basis = ensemble_basis(vols, rank=4)
    X = vols.reshape(5, -1)
    Xc = X - X.mean(0)
    cov = Xc.T @ Xc / 4
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1][:4]
    np.testing.assert_allclose(basis.eigenvalues, w[order], rtol=1e-8, atol=1e-8)
    for k, idx in enumerate(order):
        v = V[:, idx]
        sign = np.sign(v @ basis.eigenvectors[:, k])
        np.testing.assert_allclose(basis.eigenvectors[:, k], sign * v, atol=1e-8)
    np.testing.assert_allclose(basis.eigenvectors.T @ basis.eigenvectors, np.eye(4), atol=1e-8)
    assert np.all(np.diff(basis.eigenvalues) <= 0)


def test_ensemble_basis_two_volumes():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 4, 4, 4))
    basis = ensemble_basis([a, b])
    assert basis.rank == 1
    d = (a - b).reshape(-1)
    assert abs(basis.eigenvectors[:, 0] @ d) == pytest.approx(np.linalg.norm(d))


def test_ensemble_basis_duplicated_set_same_subspace():
    vols = list(np.random.default_rng(2).normal(size=(4, 4, 4, 4)))
    a = ensemble_basis(vols, rank=3)
    b = ensemble_basis(vols + vols, rank=3)
    np.testing.assert_allclose(np.abs(a.eigenvectors.T @ b.eigenvectors), np.eye(3), atol=1e-8)


def test_ensemble_basis_truncates_with_warning():
    vols = np.random.default_rng(3).normal(size=(3, 4, 4, 4))
    with pytest.warns(UserWarning):
        basis = ensemble_basis(vols, rank=5)
    assert basis.rank == 2
    with pytest.raises(ValueError):
        ensemble_basis(vols[:1])


def test_ensemble_basis_default_rank():
    vols = np.random.default_rng(4).normal(size=(6, 4, 4, 4))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert ensemble_basis(vols).rank == 5


# ---------------------------------------------------------------- downsample

def test_downsample_preserves_mean_and_lowpass():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(16, 16, 16)) + 2.0
    d = downsample_volume(v, 8)
    assert d.shape == (8, 8, 8)
    assert d.mean() == pytest.approx(v.mean(), rel=1e-10)
    np.testing.assert_array_equal(downsample_volume(v, 16), v)
