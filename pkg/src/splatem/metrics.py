"""Volume comparison metrics: Fourier shell correlation and captured variance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FSCCurve",
    "EnsembleBasis",
    "fsc",
    "fsc_auc",
    "ensemble_basis",
    "pcv",
    "downsample_volume",
]


@dataclass
class FSCCurve:
    radii: np.ndarray
    correlations: np.ndarray

    def __len__(self):
        return self.correlations.size


@dataclass
class EnsembleBasis:
    """Principal subspace of a set of volumes.

    ``eigenvectors`` holds orthonormal columns over flattened voxels and
    ``eigenvalues`` the matching covariance eigenvalues in descending order.
    """

    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray

    @property
    def rank(self) -> int:
        return self.eigenvalues.size


def _shell_index(shape):
    freqs = np.meshgrid(*[np.fft.fftfreq(n) * n for n in shape], indexing="ij")
    return np.rint(np.sqrt(sum(f * f for f in freqs))).astype(np.int64)


def fsc(vol_a: np.ndarray, vol_b: np.ndarray) -> FSCCurve:
    """Correlation of two cubic volumes over unit-width Fourier shells.

    Returns ``D // 2`` shells; empty or zero-power shells report 0.
    """
    a = np.asarray(vol_a, dtype=float)
    b = np.asarray(vol_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or len(set(a.shape)) != 1:
        raise ValueError(f"FSC expects cubic volumes, got {a.shape}")
    n_shells = a.shape[0] // 2
    fa, fb = np.fft.fftn(a), np.fft.fftn(b)
    shell = _shell_index(a.shape).reshape(-1)
    keep = shell < n_shells
    shell = shell[keep]
    fa, fb = fa.reshape(-1)[keep], fb.reshape(-1)[keep]
    cross = np.bincount(shell, (fa * np.conj(fb)).real, minlength=n_shells)
    pa = np.bincount(shell, np.abs(fa) ** 2, minlength=n_shells)
    pb = np.bincount(shell, np.abs(fb) ** 2, minlength=n_shells)
    denom = np.sqrt(pa * pb)
    corr = np.divide(cross, denom, out=np.zeros(n_shells), where=denom > 0)
    return FSCCurve(np.arange(n_shells), np.clip(corr, -1.0, 1.0))


def fsc_auc(curve: FSCCurve | np.ndarray) -> float:
    """Trapezoidal area under the curve over frequency normalized to [0, 1]."""
    c = np.asarray(curve.correlations if isinstance(curve, FSCCurve) else curve, float)
    if c.size == 0:
        raise ValueError("empty FSC curve")
    if c.size == 1:
        return float(c[0])
    return float(np.sum(0.5 * (c[1:] + c[:-1])) / (c.size - 1))


def ensemble_basis(volumes, rank: int | None = None) -> EnsembleBasis:
    """Top principal directions of a volume ensemble.

    Eigenvalues are those of the sample covariance, ``sigma**2 / (n - 1)``.
    """
    X = np.stack([np.asarray(v, dtype=float).reshape(-1) for v in volumes])
    n = X.shape[0]
    if n < 2:
        raise ValueError("an ensemble basis needs at least two volumes")
    mean = X.mean(0)
    _, sv, vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = max(X.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    available = int(np.sum(sv > tol))
    if rank is None:
        rank = min(n - 1, 20)
    if rank > available:
        warnings.warn(f"requested rank {rank} exceeds available rank {available}; truncating")
        rank = available
    return EnsembleBasis(vt[:rank].T.copy(), sv[:rank] ** 2 / (n - 1), mean)


def pcv(reference: EnsembleBasis, test: EnsembleBasis) -> float:
    """Fraction of the reference ensemble's weighted subspace captured by ``test``."""
    Va, Vb = reference.eigenvectors, test.eigenvectors
    if Va.shape[0] != Vb.shape[0]:
        raise ValueError("bases live in different voxel spaces")
    Sa = reference.eigenvalues
    num = np.linalg.norm((Vb.T @ Va) * Sa[None, :]) ** 2
    den = np.linalg.norm((Va.T @ Va) * Sa[None, :]) ** 2
    if den == 0:
        raise ValueError("reference basis carries no variance")
    return float(num / den)


def downsample_volume(volume: np.ndarray, size: int) -> np.ndarray:
    """Fourier-crop a cubic volume to ``size`` voxels per side."""
    v = np.asarray(volume, dtype=float)
    D = v.shape[0]
    if size >= D:
        return v.copy()
    F = np.fft.fftshift(np.fft.fftn(v))
    lo = D // 2 - size // 2
    F = F[lo:lo + size, lo:lo + size, lo:lo + size]
    return np.fft.ifftn(np.fft.ifftshift(F)).real * (size / D) ** 3
