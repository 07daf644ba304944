"""Direct Fourier inversion of posed particle images."""

from __future__ import annotations

import numpy as np

from .core import Pose
from .optics import CtfParams, ctf_evaluate, _check_pow2

__all__ = ["backproject"]


def backproject(images, poses, ctfs=None, pixel_size: float = 1.0,
                wiener_rel: float = 1e-2) -> np.ndarray:
    """Reconstruct a volume by inserting central slices in Fourier space.

    Each image spectrum is placed on the plane ``R @ (kx, ky, 0)`` with
    trilinear weights. Numerator and denominator accumulate ``CTF * F`` and
    ``CTF**2``; the result is ``num / (den + wiener_rel * max(den))``.

    Parameters
    ----------
    images : ndarray, shape (M, D, D)
    poses : sequence of Pose
    ctfs : sequence of CtfParams, optional
        Missing or disabled entries count as a unit CTF.
    pixel_size : float
        Angstrom per pixel, for CTF evaluation.

    Returns
    -------
    ndarray, shape (D, D, D)
    """
    images = np.asarray(images, dtype=float)
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("backproject needs a non-empty (M, D, D) image stack")
    M, D, W = images.shape
    if D != W:
        raise ValueError("images must be square")
    _check_pow2((D,))
    if len(poses) != M or (ctfs is not None and len(ctfs) != M):
        raise ValueError("poses/ctfs must match the number of images")

    k = np.fft.fftfreq(D) * D
    ky, kx = np.meshgrid(k, k, indexing="ij")
    kx, ky = kx.reshape(-1), ky.reshape(-1)
    inside = kx**2 + ky**2 < (D / 2 - 1) ** 2
    kx, ky = kx[inside], ky[inside]
    num_re = np.zeros(D**3)
    num_im = np.zeros(D**3)
    den = np.zeros(D**3)
    corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]

    for m in range(M):
        pose: Pose = poses[m]
        ctf: CtfParams | None = None if ctfs is None else ctfs[m]
        F = np.fft.fft2(np.fft.ifftshift(images[m])).reshape(-1)[inside]
        sx, sy = pose.shift
        F = F * np.exp(2j * np.pi * (kx * sx + ky * sy) / D)
        if ctf is not None and ctf.enabled:
            c = ctf_evaluate(ctf, D, D, pixel_size).reshape(-1)[inside]
        else:
            c = np.ones_like(kx)
        R = pose.rotation
        q = np.outer(kx, R[:, 0]) + np.outer(ky, R[:, 1])  # (x, y, z) frequency
        base = np.floor(q).astype(np.int64)
        frac = q - base
        cf = c * F
        c2 = c * c
        for dx, dy, dz in corners:
            w = ((frac[:, 0] if dx else 1 - frac[:, 0])
                 * (frac[:, 1] if dy else 1 - frac[:, 1])
                 * (frac[:, 2] if dz else 1 - frac[:, 2]))
            ix = (base[:, 0] + dx) % D
            iy = (base[:, 1] + dy) % D
            iz = (base[:, 2] + dz) % D
            flat = (iz * D + iy) * D + ix
            num_re += np.bincount(flat, w * cf.real, minlength=D**3)
            num_im += np.bincount(flat, w * cf.imag, minlength=D**3)
            den += np.bincount(flat, w * c2, minlength=D**3)

    eps = wiener_rel * den.max() if den.max() > 0 else 1.0
    spec = ((num_re + 1j * num_im) / (den + eps)).reshape(D, D, D)
    return np.fft.fftshift(np.fft.ifftn(spec)).real
