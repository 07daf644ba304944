import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from splatem.optics import (
    ConfigurationError,
    CtfParams,
    apply_ctf,
    ctf_evaluate,
    electron_wavelength,
    fft2,
    ifft2,
)


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def test_fft_matches_direct_dft():
    x = np.random.default_rng(0).normal(size=(8, 8))
    F = dft_matrix(8)
    np.testing.assert_allclose(fft2(x), F @ x @ F.T, atol=1e-12)


def test_fft_roundtrip_and_parseval():
    x = np.random.default_rng(1).normal(size=(64, 64))
    y = ifft2(fft2(x))
    assert np.linalg.norm(y - x) / np.linalg.norm(x) <= 1e-10
    assert np.sum(x**2) / np.sum(np.abs(fft2(x)) ** 2) == pytest.approx(1.0, rel=1e-12)


def test_fft_constant_has_only_dc():
    X = fft2(np.full((16, 16), 2.5))
    assert X[0, 0] == pytest.approx(2.5 * 16)
    X[0, 0] = 0
    assert np.abs(X).max() < 1e-12


@pytest.mark.parametrize("shape", [(12, 12), (16, 24), (0, 8)])
def test_fft_rejects_non_power_of_two(shape):
    with pytest.raises(ConfigurationError):
        fft2(np.zeros(shape))


def test_wavelength_300kv():
    # relativistic electron wavelength at 300 kV
    assert electron_wavelength(300.0) == pytest.approx(0.019687, abs=2e-6)


def test_ctf_dc_is_minus_w():
    c = ctf_evaluate(CtfParams(amplitude_contrast=0.1), 32, 32, 1.5)
    assert c[0, 0] == pytest.approx(-0.1, abs=1e-15)


def test_ctf_all_minus_one():
    p = CtfParams(amplitude_contrast=1.0, cs_mm=0.0, defocus_u_A=0.0, defocus_v_A=0.0)
    np.testing.assert_allclose(ctf_evaluate(p, 16, 16, 2.0), -1.0, atol=1e-15)


def test_ctf_first_zero():
    # w=0, Cs=0: CTF = -sin(pi lam df k^2); first zero at k = sqrt(1/(lam df))
    lam = electron_wavelength(300.0)
    df = 10000.0

    def chi_minus_pi(k):
        return np.pi * lam * df * k * k - np.pi

    k0 = brentq(chi_minus_pi, 1e-4, 0.5)
    assert k0 == pytest.approx(np.sqrt(1 / (lam * df)), rel=1e-10)
    # with the pixel size chosen so k0 falls on grid frequency 5/N, the grid CTF vanishes there
    n = 64
    px = 5.0 / (n * k0)
    c = ctf_evaluate(CtfParams(amplitude_contrast=0.0, cs_mm=0.0, defocus_u_A=df,
                               defocus_v_A=df), n, n, px)
    assert abs(c[0, 5]) < 1e-9 and abs(c[5, 0]) < 1e-9
    assert c[0, 4] < 0


def test_ctf_disabled_is_ones_and_identity():
    p = CtfParams.disabled()
    assert np.all(ctf_evaluate(p, 8, 8, 1.0) == 1.0)
    x = np.random.default_rng(2).normal(size=(8, 8))
    out = apply_ctf(x, p, 1.0)
    assert np.array_equal(out, x) and out is not x


def test_apply_ctf_negation():
    p = CtfParams(amplitude_contrast=1.0, cs_mm=0.0, defocus_u_A=0.0, defocus_v_A=0.0)
    x = np.random.default_rng(3).normal(size=(16, 16))
    np.testing.assert_allclose(apply_ctf(x, p, 1.0), -x, atol=1e-12)


def test_apply_ctf_errors():
    p = CtfParams()
    with pytest.raises(ConfigurationError):
        apply_ctf(np.zeros((16, 32)), p, 1.0)
    with pytest.raises(ValueError):
        apply_ctf(np.zeros((16, 16)), p, 1.0, ctf=np.ones((8, 8)))


def test_params_validation():
    with pytest.raises(ValueError):
        CtfParams(voltage_kv=0)
    with pytest.raises(ValueError):
        CtfParams(amplitude_contrast=1.5)
    with pytest.raises(ValueError):
        CtfParams(defocus_u_A=np.inf)


ctf_params = st.builds(
    CtfParams,
    voltage_kv=st.sampled_from([100.0, 200.0, 300.0]),
    cs_mm=st.floats(0.0, 4.0),
    amplitude_contrast=st.floats(0.0, 1.0),
    defocus_u_A=st.floats(3e3, 3e4),
    defocus_v_A=st.floats(3e3, 3e4),
    astigmatism_angle_deg=st.floats(0.0, 180.0),
    phase_shift_rad=st.floats(0.0, np.pi),
)


@settings(max_examples=40, deadline=None)
@given(ctf_params, st.floats(0.5, 4.0))
def test_ctf_bounded(p, px):
    assert np.abs(ctf_evaluate(p, 32, 32, px)).max() <= 1.0 + 1e-12


@settings(max_examples=40, deadline=None)
@given(ctf_params, st.integers(0, 2**32 - 1))
def test_apply_ctf_linear_and_self_adjoint(p, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(2, 32, 32))
    a, b = rng.normal(size=2)
    lhs = apply_ctf(a * x + b * y, p, 2.0)
    rhs = a * apply_ctf(x, p, 2.0) + b * apply_ctf(y, p, 2.0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)
    cx_y = np.sum(apply_ctf(x, p, 2.0) * y)
    x_cy = np.sum(x * apply_ctf(y, p, 2.0))
    assert abs(cx_y - x_cy) <= 1e-8 * max(1.0, abs(cx_y))


@settings(max_examples=30, deadline=None)
@given(st.floats(3e3, 3e4), st.floats(3e3, 3e4), st.floats(0.0, 180.0))
def test_ctf_astigmatism_swap_symmetry(du, dv, angle):
    a = ctf_evaluate(CtfParams(defocus_u_A=du, defocus_v_A=dv, astigmatism_angle_deg=angle),
                     32, 32, 2.0)
    b = ctf_evaluate(CtfParams(defocus_u_A=dv, defocus_v_A=du,
                               astigmatism_angle_deg=angle + 90.0), 32, 32, 2.0)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_b_factor_envelope_damps():
    k = ctf_evaluate(CtfParams(b_factor_A2=100.0), 32, 32, 2.0)
    k0 = ctf_evaluate(CtfParams(), 32, 32, 2.0)
    fx = np.fft.fftfreq(32, 2.0)
    k2 = fx[:, None] ** 2 + fx[None, :] ** 2
    np.testing.assert_allclose(k, k0 * np.exp(-25.0 * k2), atol=1e-15)


def test_ctf_grid_is_cached_but_returned_writable():
    p = CtfParams(defocus_u_A=12345.0)
    a = ctf_evaluate(p, 16, 16, 1.0)
    a[0, 0] = 99.0
    assert ctf_evaluate(p, 16, 16, 1.0)[0, 0] != 99.0
