"""Isotropic 3D Gaussian density model, projection, splatting and its gradients.

Coordinates are in voxels with the origin at the box center. Arrays are
indexed ``image[y, x]`` and ``volume[z, y, x]`` so that x varies fastest, and
grid index ``k`` sits at coordinate ``k - n // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .optics import CtfParams, apply_ctf

__all__ = [
    "SCALE_FLOOR",
    "Gaussian",
    "GaussianModel",
    "Pose",
    "Gaussians2D",
    "Deformation",
    "grid_coords",
    "clamp_scale",
    "apply_deformation",
    "eval_density",
    "transform_pose",
    "project_gaussians",
    "splat_image",
    "splat_backward",
    "render",
    "render_volume",
    "render_backward",
]

SCALE_FLOOR = 0.1
SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Gaussian:
    density: float
    scale: float
    position: tuple

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        vals = (self.density, self.scale, *self.position)
        if len(self.position) != 3 or not np.all(np.isfinite(vals)):
            raise ValueError("Gaussian fields must be finite with a 3-vector position")


@dataclass
class GaussianModel:
    """A set of isotropic 3D Gaussians on a cubic box.

    Parameters
    ----------
    densities : ndarray, shape (N,)
        Peak density of each Gaussian.
    scales : ndarray, shape (N,)
        Isotropic standard deviation in voxels.
    positions : ndarray, shape (N, 3)
        Centers ``(x, y, z)`` in voxels relative to the box center.
    box_size : int
        Voxels per side.
    pixel_size : float
        Angstrom per voxel.
    """

    densities: np.ndarray
    scales: np.ndarray
    positions: np.ndarray
    box_size: int
    pixel_size: float = 1.0

    def __post_init__(self):
        self.densities = np.asarray(self.densities, dtype=float).reshape(-1)
        self.scales = np.asarray(self.scales, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.box_size = int(self.box_size)
        self.pixel_size = float(self.pixel_size)
        n = self.densities.size
        if n < 1:
            raise ValueError("a GaussianModel needs at least one Gaussian")
        if self.scales.size != n or self.positions.shape[0] != n:
            raise ValueError("densities, scales and positions must have equal length")
        if self.box_size < 8:
            raise ValueError(f"box_size must be >= 8, got {self.box_size}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")
        if not (np.all(np.isfinite(self.densities)) and np.all(np.isfinite(self.positions))
                and np.all(np.isfinite(self.scales))):
            raise ValueError("Gaussian parameters must be finite")
        if np.any(self.scales <= 0):
            raise ValueError("Gaussian scales must be positive")

    def __len__(self):
        return self.densities.size

    @property
    def gaussians(self) -> list[Gaussian]:
        return [Gaussian(float(d), float(s), tuple(map(float, p)))
                for d, s, p in zip(self.densities, self.scales, self.positions)]

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian], box_size: int,
                       pixel_size: float = 1.0) -> "GaussianModel":
        return cls(
            densities=[g.density for g in gaussians],
            scales=[g.scale for g in gaussians],
            positions=[g.position for g in gaussians],
            box_size=box_size,
            pixel_size=pixel_size,
        )

    def validate_bounds(self):
        """Raise if any center lies outside ``[-D/2, D/2]^3``."""
        half = self.box_size / 2
        if np.any(np.abs(self.positions) > half):
            raise ValueError(f"Gaussian positions must lie within [-{half}, {half}]^3")

    def replace(self, **kwargs) -> "GaussianModel":
        fields = dict(densities=self.densities, scales=self.scales,
                      positions=self.positions, box_size=self.box_size,
                      pixel_size=self.pixel_size)
        fields.update(kwargs)
        return GaussianModel(**fields)

    def concatenate(self, other: "GaussianModel") -> "GaussianModel":
        return self.replace(
            densities=np.concatenate([self.densities, other.densities]),
            scales=np.concatenate([self.scales, other.scales]),
            positions=np.concatenate([self.positions, other.positions]),
        )


@dataclass
class Pose:
    """Projection geometry: rotation of the model and an in-plane pixel shift."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.shift = np.asarray(self.shift, dtype=float).reshape(2)
        R = self.rotation
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("pose rotation must be orthonormal with det = +1")
        if not np.all(np.isfinite(self.shift)):
            raise ValueError("pose shift must be finite")


@dataclass
class Gaussians2D:
    """Projected Gaussians: amplitude, 2D center (pixels) and sigma (pixels)."""

    amplitudes: np.ndarray
    centers: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        self.sigmas = np.asarray(self.sigmas, dtype=float).reshape(-1)
        if np.any(self.sigmas <= 0):
            raise ValueError("projected sigmas must be positive")

    def __len__(self):
        return self.amplitudes.size

    @classmethod
    def empty(cls) -> "Gaussians2D":
        return cls(np.zeros(0), np.zeros((0, 2)), np.zeros(0))


@dataclass
class Deformation:
    """Per-Gaussian parameter changes for one particle."""

    delta_density: np.ndarray
    delta_scale: np.ndarray
    delta_position: np.ndarray

    def __post_init__(self):
        self.delta_density = np.asarray(self.delta_density, dtype=float).reshape(-1)
        self.delta_scale = np.asarray(self.delta_scale, dtype=float).reshape(-1)
        self.delta_position = np.asarray(self.delta_position, dtype=float).reshape(-1, 3)
        n = self.delta_density.size
        if self.delta_scale.size != n or self.delta_position.shape[0] != n:
            raise ValueError("deformation channels must have equal length")

    def __len__(self):
        return self.delta_density.size

    @classmethod
    def zeros(cls, n: int) -> "Deformation":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def as_array(self) -> np.ndarray:
        """Stack into an ``(N, 5)`` array ordered (dd, ds, dx, dy, dz)."""
        return np.column_stack([self.delta_density, self.delta_scale, self.delta_position])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Deformation":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2:5])


def grid_coords(n: int) -> np.ndarray:
    return np.arange(n) - n // 2


def clamp_scale(s: np.ndarray, floor: float = SCALE_FLOOR):
    """Smoothly floor scales at ``floor``; identity for ``s >= 2 * floor``.

    Below ``2 * floor`` the map is ``floor * (1 + exp((s - 2 floor) / floor))``,
    which matches value and slope at the join and tends to ``floor``.

    Returns
    -------
    value, derivative : ndarray
    """
    s = np.asarray(s, dtype=float)
    t = np.minimum((s - 2.0 * floor) / floor, 0.0)
    e = np.exp(t)
    low = s < 2.0 * floor
    value = np.where(low, floor * (1.0 + e), s)
    deriv = np.where(low, e, 1.0)
    return value, deriv


def apply_deformation(model: GaussianModel, deformation: Deformation | None,
                      scale_floor: float = SCALE_FLOOR) -> GaussianModel:
    if deformation is None:
        return model
    if len(deformation) != len(model):
        raise ValueError(
            f"deformation length {len(deformation)} does not match model size {len(model)}")
    scales, _ = clamp_scale(model.scales + deformation.delta_scale, scale_floor)
    return model.replace(
        densities=model.densities + deformation.delta_density,
        scales=scales,
        positions=model.positions + deformation.delta_position,
    )


def eval_density(model: GaussianModel, x) -> np.ndarray | float:
    """Sum of untruncated Gaussian contributions at point(s) ``x`` (voxels)."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("evaluation point must be finite")
    pts = x.reshape(-1, 3)
    d2 = ((pts[:, None, :] - model.positions[None, :, :]) ** 2).sum(-1)
    vals = (model.densities * np.exp(-d2 / (2.0 * model.scales**2))).sum(-1)
    return float(vals[0]) if x.ndim == 1 else vals


def transform_pose(model: GaussianModel, pose: Pose) -> GaussianModel:
    """Rotate positions into the viewing frame, ``p -> R^T p``."""
    return model.replace(positions=model.positions @ pose.rotation)


def project_gaussians(model: GaussianModel, shift=(0.0, 0.0)) -> Gaussians2D:
    """Integrate each Gaussian along z.

    The 2D amplitude is the exact marginal ``d * s * sqrt(2 pi)``; the center
    drops z and gains ``shift``; sigma is unchanged.
    """
    shift = np.asarray(shift, dtype=float).reshape(2)
    return Gaussians2D(
        amplitudes=model.densities * model.scales * SQRT_2PI,
        centers=model.positions[:, :2] + shift,
        sigmas=model.scales.copy(),
    )


def _footprint(centers, sigmas, shape, truncate):
    """Grid samples covered by each Gaussian.

    Returns flat indices, per-axis offsets from the centers (in the order of
    ``shape`` reversed, i.e. x first), squared distances and a validity mask,
    each shaped ``(N, M)``.
    """
    ndim = len(shape)
    n = centers.shape[0]
    origin = np.array([s // 2 for s in shape[::-1]])  # x, y[, z]
    if truncate is None:
        axes = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
        idx_axes = [a.reshape(1, -1).repeat(n, 0) for a in axes[::-1]]
        mask = np.ones(idx_axes[0].shape, dtype=bool)
    else:
        radius = int(np.ceil(truncate * sigmas.max())) + 1 if n else 0
        radius = min(radius, max(shape))
        off = np.arange(-radius, radius + 1)
        offs = np.meshgrid(*([off] * ndim), indexing="ij")
        offs = [o.reshape(-1) for o in offs[::-1]]
        base = np.rint(centers + origin).astype(np.int64)
        idx_axes = [base[:, a:a + 1] + offs[a][None, :] for a in range(ndim)]
        mask = np.ones(idx_axes[0].shape, dtype=bool)
        for a, size in enumerate(shape[::-1]):
            mask &= (idx_axes[a] >= 0) & (idx_axes[a] < size)
    deltas = [idx_axes[a] - origin[a] - centers[:, a:a + 1] for a in range(ndim)]
    r2 = sum(d * d for d in deltas)
    if truncate is not None:
        mask &= r2 <= (truncate * sigmas[:, None]) ** 2
    flat = np.zeros_like(idx_axes[0])
    stride = 1
    for a, size in enumerate(shape[::-1]):
        flat += np.where(mask, idx_axes[a], 0) * stride
        stride *= size
    return flat, deltas, r2, mask


def splat_image(g2d: Gaussians2D, H: int, W: int, truncate: float | None = 4.0) -> np.ndarray:
    """Evaluate a sum of 2D Gaussians at pixel centers of an ``H x W`` grid.

    Contributions beyond ``truncate * sigma`` from a center are dropped
    (``truncate=None`` evaluates every pixel).
    """
    if H < 1 or W < 1:
        raise ValueError("image dimensions must be positive")
    if len(g2d) == 0:
        return np.zeros((H, W))
    flat, _, r2, mask = _footprint(g2d.centers, g2d.sigmas, (H, W), truncate)
    vals = g2d.amplitudes[:, None] * np.exp(-r2 / (2.0 * g2d.sigmas[:, None] ** 2))
    out = np.bincount(flat[mask], weights=vals[mask], minlength=H * W)
    return out.reshape(H, W)


def splat_backward(g2d: Gaussians2D, upstream: np.ndarray, truncate: float | None = 4.0):
    """Gradients of ``sum(upstream * splat_image(g2d))``.

    Returns
    -------
    d_amplitude : ndarray, shape (N,)
    d_center : ndarray, shape (N, 2)
    d_sigma : ndarray, shape (N,)
    """
    H, W = upstream.shape
    n = len(g2d)
    if n == 0:
        return np.zeros(0), np.zeros((0, 2)), np.zeros(0)
    flat, (dx, dy), r2, mask = _footprint(g2d.centers, g2d.sigmas, (H, W), truncate)
    sig2 = g2d.sigmas[:, None] ** 2
    e = np.exp(-r2 / (2.0 * sig2))
    ge = upstream.reshape(-1)[flat] * e * mask
    a = g2d.amplitudes
    d_amp = ge.sum(1)
    d_cx = a * (ge * dx).sum(1) / sig2[:, 0]
    d_cy = a * (ge * dy).sum(1) / sig2[:, 0]
    d_sig = a * (ge * r2).sum(1) / (sig2[:, 0] * g2d.sigmas)
    return d_amp, np.column_stack([d_cx, d_cy]), d_sig


def render(model: GaussianModel, deformation: Deformation | None, pose: Pose,
           ctf: CtfParams | None = None, truncate: float | None = 4.0) -> np.ndarray:
    """Deform, rotate, project, splat and CTF-modulate one particle image."""
    deformed = apply_deformation(model, deformation)
    viewed = transform_pose(deformed, pose)
    g2d = project_gaussians(viewed, pose.shift)
    D = model.box_size
    image = splat_image(g2d, D, D, truncate)
    if ctf is None or not ctf.enabled:
        return image
    return apply_ctf(image, ctf, model.pixel_size)


def render_backward(model: GaussianModel, deformation: Deformation | None, pose: Pose,
                    ctf: CtfParams | None, upstream_grad: np.ndarray,
                    truncate: float | None = 4.0) -> Deformation:
    """Gradient of ``sum(upstream_grad * render(...))`` w.r.t. the deformation."""
    D = model.box_size
    upstream_grad = np.asarray(upstream_grad, dtype=float)
    if upstream_grad.shape != (D, D):
        raise ValueError(f"upstream gradient shape {upstream_grad.shape} != {(D, D)}")
    if deformation is None:
        deformation = Deformation.zeros(len(model))
    if len(deformation) != len(model):
        raise ValueError("deformation length does not match model")
    grad = upstream_grad
    if ctf is not None and ctf.enabled:
        grad = apply_ctf(grad, ctf, model.pixel_size)

    dens = model.densities + deformation.delta_density
    scales, dscale = clamp_scale(model.scales + deformation.delta_scale)
    pos = model.positions + deformation.delta_position
    R = pose.rotation
    viewed = pos @ R
    g2d = Gaussians2D(dens * scales * SQRT_2PI, viewed[:, :2] + pose.shift, scales)
    d_amp, d_center, d_sig = splat_backward(g2d, grad, truncate)

    g_density = d_amp * scales * SQRT_2PI
    g_scale = (d_amp * dens * SQRT_2PI + d_sig) * dscale
    g_viewed = np.column_stack([d_center, np.zeros(len(model))])
    g_pos = g_viewed @ R.T
    return Deformation(g_density, g_scale, g_pos)


def render_volume(model: GaussianModel, deformation: Deformation | None = None,
                  truncate: float | None = 4.0) -> np.ndarray:
    """Rasterize the (deformed) density on the ``D^3`` voxel grid."""
    m = apply_deformation(model, deformation)
    D = m.box_size
    flat, _, r2, mask = _footprint(m.positions, m.scales, (D, D, D), truncate)
    vals = m.densities[:, None] * np.exp(-r2 / (2.0 * m.scales[:, None] ** 2))
    out = np.bincount(flat[mask], weights=vals[mask], minlength=D**3)
    return out.reshape(D, D, D)
