"""Fourier transforms and contrast transfer function modulation of projections."""

from __future__ import annotations

from dataclasses import dataclass, asdict, astuple
from functools import lru_cache

import numpy as np

__all__ = [
    "CtfParams",
    "ConfigurationError",
    "electron_wavelength",
    "fft2",
    "ifft2",
    "ctf_evaluate",
    "apply_ctf",
]


class ConfigurationError(ValueError):
    """Raised when array geometry violates a pipeline constraint."""


@dataclass(frozen=True)
class CtfParams:
    """Microscope optics for one particle.

    Defocus is positive for underfocus. With ``enabled=False`` the modulator
    is the identity.
    """

    enabled: bool = True
    voltage_kv: float = 300.0
    cs_mm: float = 2.7
    amplitude_contrast: float = 0.1
    defocus_u_A: float = 15000.0
    defocus_v_A: float = 15000.0
    astigmatism_angle_deg: float = 0.0
    phase_shift_rad: float = 0.0
    b_factor_A2: float = 0.0

    def __post_init__(self):
        if not self.voltage_kv > 0:
            raise ValueError(f"voltage_kv must be positive, got {self.voltage_kv}")
        if not 0.0 <= self.amplitude_contrast <= 1.0:
            raise ValueError(
                f"amplitude_contrast must lie in [0, 1], got {self.amplitude_contrast}"
            )
        if not (np.isfinite(self.defocus_u_A) and np.isfinite(self.defocus_v_A)):
            raise ValueError("defocus values must be finite")

    @classmethod
    def disabled(cls) -> "CtfParams":
        return cls(enabled=False)

    def to_dict(self) -> dict:
        return asdict(self)


def electron_wavelength(voltage_kv: float) -> float:
    """Relativistic electron wavelength in Angstrom."""
    volts = voltage_kv * 1e3
    return 12.2643247 / np.sqrt(volts * (1.0 + 0.978466e-6 * volts))


def _check_pow2(shape):
    for n in shape:
        if n < 1 or (n & (n - 1)) != 0:
            raise ConfigurationError(f"image sides must be powers of two, got {shape}")


def fft2(image: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT in the standard (unshifted) frequency layout."""
    image = np.asarray(image)
    _check_pow2(image.shape[-2:])
    return np.fft.fft2(image, norm="ortho")


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`; returns the real part."""
    spectrum = np.asarray(spectrum)
    _check_pow2(spectrum.shape[-2:])
    return np.fft.ifft2(spectrum, norm="ortho").real


def _frequency_grid(H: int, W: int, pixel_size: float):
    ky = np.fft.fftfreq(H, d=pixel_size)
    kx = np.fft.fftfreq(W, d=pixel_size)
    return np.meshgrid(ky, kx, indexing="ij")


def ctf_evaluate(params: CtfParams, H: int, W: int, pixel_size: float) -> np.ndarray:
    """Evaluate the CTF on the frequency grid of an ``H x W`` image.

    Parameters
    ----------
    params : CtfParams
        Optics. A disabled CTF evaluates to ones.
    H, W : int
        Image shape.
    pixel_size : float
        Angstrom per pixel; sets the frequency units (1/Angstrom).

    Returns
    -------
    ndarray
        Real ``(H, W)`` grid laid out like ``fft2`` output.
    """
    if not params.enabled:
        return np.ones((H, W))
    return _ctf_cached(astuple(params), H, W, float(pixel_size)).copy()


@lru_cache(maxsize=256)
def _ctf_cached(key: tuple, H: int, W: int, pixel_size: float) -> np.ndarray:
    p = CtfParams(*key)
    ky, kx = _frequency_grid(H, W, pixel_size)
    k2 = kx**2 + ky**2
    lam = electron_wavelength(p.voltage_kv)
    cs = p.cs_mm * 1e7
    theta = np.arctan2(ky, kx)
    astig = np.deg2rad(p.astigmatism_angle_deg)
    defocus = 0.5 * (
        p.defocus_u_A
        + p.defocus_v_A
        + (p.defocus_u_A - p.defocus_v_A) * np.cos(2.0 * (theta - astig))
    )
    chi = np.pi * lam * defocus * k2 - 0.5 * np.pi * cs * lam**3 * k2**2 + p.phase_shift_rad
    w = p.amplitude_contrast
    ctf = -np.sqrt(1.0 - w * w) * np.sin(chi) - w * np.cos(chi)
    if p.b_factor_A2:
        ctf = ctf * np.exp(-p.b_factor_A2 * k2 / 4.0)
    ctf.setflags(write=False)
    return ctf


def apply_ctf(image: np.ndarray, params: CtfParams, pixel_size: float,
              ctf: np.ndarray | None = None) -> np.ndarray:
    """Convolve a real-space image with the point spread function of ``params``.

    The CTF grid is real and even, so this operator is linear and self-adjoint;
    the backward pass of rendering reuses it unchanged.
    """
    image = np.asarray(image, dtype=float)
    if not params.enabled:
        return image.copy()
    H, W = image.shape[-2:]
    if H != W:
        raise ConfigurationError(f"CTF requires square images, got {image.shape}")
    if ctf is None:
        ctf = ctf_evaluate(params, H, W, pixel_size)
    elif ctf.shape != (H, W):
        raise ValueError(f"CTF grid shape {ctf.shape} does not match image {(H, W)}")
    return ifft2(fft2(image) * ctf)
