"""Synthetic ground-truth datasets and Gaussian initialization from a map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianModel, Pose, render, render_volume
from .optics import CtfParams, _check_pow2
from .trainer import ParticleDataset

__all__ = [
    "ToySpec",
    "DatasetMeta",
    "SimulatedDataset",
    "lattice_ellipsoid",
    "rotation_about_axis",
    "quaternion_to_matrix",
    "matrix_to_quaternion",
    "random_quaternions",
    "make_toy_structure",
    "simulate_dataset",
    "consensus_volume",
    "subunit_mask",
    "init_gaussians_from_volume",
]


@dataclass
class ToySpec:
    """Parameters of a synthetic heterogeneous dataset.

    ``dihedral_1d`` rotates an arm about a hinge axis through a full turn in
    ``n_conformations`` steps; ``two_state_composition`` removes one subunit
    in state 1.
    """

    kind: str = "dihedral_1d"
    n_conformations: int = 100
    n_particles: int = 2000
    box_size: int = 64
    pixel_size: float = 3.0
    snr: float = 0.5
    defocus_range_A: tuple = (10000.0, 25000.0)
    astigmatism_A: float = 300.0
    ctf_enabled: bool = True
    shift_range_px: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("dihedral_1d", "two_state_composition"):
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.kind == "two_state_composition":
            self.n_conformations = 2
        if self.n_particles < self.n_conformations:
            raise ValueError("n_particles must be >= n_conformations")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        self.defocus_range_A = tuple(float(x) for x in self.defocus_range_A)


@dataclass
class DatasetMeta:
    poses: list
    ctfs: list
    gt_conformation: np.ndarray
    gt_angle: np.ndarray | None = None

    def __len__(self):
        return len(self.poses)


@dataclass
class SimulatedDataset:
    images: np.ndarray
    meta: DatasetMeta
    gt_volumes: list
    consensus: GaussianModel
    gt_models: list
    clean_images: np.ndarray = field(repr=False, default=None)
    noise_sigma: float = 0.0

    def particles(self, pixel_size: float) -> ParticleDataset:
        return ParticleDataset(self.images, self.meta.poses, self.meta.ctfs, pixel_size)


def lattice_ellipsoid(center, radii, spacing: float = 2.0) -> np.ndarray:
    """Points of the ``spacing`` lattice (through the origin) inside an ellipsoid."""
    center = np.asarray(center, float)
    radii = np.asarray(radii, float)
    lo = np.floor((center - radii) / spacing).astype(int)
    hi = np.ceil((center + radii) / spacing).astype(int)
    axes = [np.arange(l, h + 1) * spacing for l, h in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    inside = (((grid - center) / radii) ** 2).sum(1) <= 1.0
    return grid[inside]


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quaternion(R) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, float)
    m = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
        [R[0, 1] + R[1, 0], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
        [R[0, 2] + R[2, 0], R[1, 2] + R[2, 1], R[2, 2] - R[0, 0] - R[1, 1], 0],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(m)
    x, y, z, w = vecs[:, np.argmax(vals)]
    q = np.array([w, x, y, z])
    return q if q[0] >= 0 else -q


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed unit quaternions (normalized 4D normals)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


# Toy geometry in voxels for a 64 box; scaled with box_size / 64.
# The body has no symmetry about the hinge axis; otherwise an arm rotation
# would look like a global rotation and be invisible without the pose.
_BODY_RADII = (6.0, 9.0, 4.5)
_KNOB_CENTER = (0.0, 7.0, -5.0)
_KNOB_RADIUS = 3.0
_ARM_CENTER = (13.0, 0.0, 8.0)
_ARM_RADII = (5.0, 4.0, 4.6)
_HINGE = (8.0, 0.0, 0.0)
_HINGE_AXIS = (1.0, 0.0, 0.0)
_SUBUNIT_CENTER = (0.0, 0.0, 8.5)
_SUBUNIT_RADII = (5.0, 5.0, 4.0)


def _toy_parts(spec: ToySpec):
    f = spec.box_size / 64.0
    body = lattice_ellipsoid((0, 0, 0), np.multiply(_BODY_RADII, f))
    knob = lattice_ellipsoid(np.multiply(_KNOB_CENTER, f), np.full(3, _KNOB_RADIUS * f))
    body = np.unique(np.concatenate([body, knob]), axis=0)
    if spec.kind == "dihedral_1d":
        arm = lattice_ellipsoid(np.multiply(_ARM_CENTER, f), np.multiply(_ARM_RADII, f))
    else:
        arm = lattice_ellipsoid(np.multiply(_SUBUNIT_CENTER, f), np.multiply(_SUBUNIT_RADII, f))
    return body, arm


def make_toy_structure(spec: ToySpec):
    """Build the consensus model and one ground-truth model per conformation.

    Returns
    -------
    consensus : GaussianModel
        Zero-angle (dihedral) or complete (composition) structure.
    gt_models : list of GaussianModel
    arm_index : ndarray
        Indices of the moving or removable Gaussians.
    """
    body, arm = _toy_parts(spec)
    pos = np.concatenate([body, arm])
    n = len(pos)
    arm_index = np.arange(len(body), n)
    scale = np.full(n, 1.0 * spec.box_size / 64.0)
    consensus = GaussianModel(np.ones(n), scale, pos, spec.box_size, spec.pixel_size)
    models = []
    if spec.kind == "dihedral_1d":
        hinge = np.multiply(_HINGE, spec.box_size / 64.0)
        for c in range(spec.n_conformations):
            theta = 2 * np.pi * c / spec.n_conformations
            R = rotation_about_axis(_HINGE_AXIS, theta)
            p = pos.copy()
            p[arm_index] = hinge + (p[arm_index] - hinge) @ R.T
            models.append(consensus.replace(positions=p))
    else:
        models.append(consensus.replace())
        d = consensus.densities.copy()
        d[arm_index] = 0.0
        models.append(consensus.replace(densities=d))
    return consensus, models, arm_index


def consensus_volume(gt_volumes, labels) -> np.ndarray:
    """Particle-weighted average of the ground-truth volumes.

    This stands in for a homogeneous reconstruction of the whole dataset.
    """
    counts = np.bincount(np.asarray(labels), minlength=len(gt_volumes)).astype(float)
    out = np.zeros_like(np.asarray(gt_volumes[0], float))
    for c, v in zip(counts, gt_volumes):
        if c:
            out += c * v
    return out / counts.sum()


def subunit_mask(spec: ToySpec, threshold: float = 0.2) -> np.ndarray:
    """Boolean voxel mask of the removable (or moving) part at its zero pose."""
    _, models, arm_index = make_toy_structure(spec)
    m = models[0]
    only = m.replace(densities=np.where(np.isin(np.arange(len(m)), arm_index),
                                        m.densities, 0.0))
    vol = render_volume(only)
    return vol >= threshold * vol.max()


def simulate_dataset(spec: ToySpec) -> SimulatedDataset:
    """Render noisy CTF-modulated projections of random conformations.

    Each particle draws from its own seed substream, so particle ``k`` is the
    same regardless of how many particles are generated after it. Additive
    white noise has variance ``mean signal variance / snr``.
    """
    _check_pow2((spec.box_size,))
    consensus, models, _ = make_toy_structure(spec)
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_particles)
    D = spec.box_size
    clean = np.empty((spec.n_particles, D, D))
    poses, ctfs = [], []
    labels = np.empty(spec.n_particles, dtype=np.int64)
    noise_rngs = []
    lo, hi = spec.defocus_range_A
    for k, ss in enumerate(streams):
        param_ss, noise_ss = ss.spawn(2)
        rng = np.random.default_rng(param_ss)
        c = int(rng.integers(spec.n_conformations))
        R = quaternion_to_matrix(random_quaternions(rng, 1)[0])
        shift = rng.uniform(-spec.shift_range_px, spec.shift_range_px, 2)
        du = rng.uniform(lo, hi)
        dv = du + rng.uniform(-spec.astigmatism_A, spec.astigmatism_A)
        ang = rng.uniform(0.0, 180.0)
        ctf = CtfParams(enabled=spec.ctf_enabled, defocus_u_A=du, defocus_v_A=dv,
                        astigmatism_angle_deg=ang)
        pose = Pose(R, shift)
        clean[k] = render(models[c], None, pose, ctf)
        labels[k] = c
        poses.append(pose)
        ctfs.append(ctf)
        noise_rngs.append(np.random.default_rng(noise_ss))
    signal_power = float(np.mean(clean.var(axis=(1, 2))))
    sigma = np.sqrt(signal_power / spec.snr)
    images = clean + np.stack([sigma * r.standard_normal((D, D)) for r in noise_rngs])
    angles = None
    if spec.kind == "dihedral_1d":
        angles = 2 * np.pi * labels / spec.n_conformations
    gt_volumes = [render_volume(m) for m in models]
    meta = DatasetMeta(poses, ctfs, labels, angles)
    return SimulatedDataset(images, meta, gt_volumes, consensus, models, clean, sigma)


def init_gaussians_from_volume(volume, contour_level: float, interval: int = 2,
                               pixel_size: float = 1.0) -> GaussianModel:
    """Place Gaussians on an ``interval``-voxel lattice wherever the map exceeds
    the contour.

    Each Gaussian starts at the lattice point with the voxel value as density
    and scale ``interval / 2``. Densities are then rescaled by one factor so
    the re-rendered map matches the source mean inside the contour mask.
    """
    vol = np.asarray(volume, dtype=float)
    if not np.isfinite(contour_level):
        raise ValueError("contour level must be finite")
    D = vol.shape[0]
    if vol.shape != (D, D, D):
        raise ValueError(f"expected a cubic volume, got {vol.shape}")
    coords = np.arange(D) - D // 2
    keep = coords % interval == 0
    sub = vol[np.ix_(keep, keep, keep)]
    zz, yy, xx = np.nonzero(sub >= contour_level)
    if len(zz) == 0:
        vmax = float(vol.max())
        raise ValueError(
            f"no lattice voxel reaches contour {contour_level}; try a lower contour "
            f"(map maximum is {vmax:.4g})")
    lattice = coords[keep]
    pos = np.column_stack([lattice[xx], lattice[yy], lattice[zz]]).astype(float)
    dens = sub[zz, yy, xx]
    model = GaussianModel(dens, np.full(len(dens), interval / 2.0), pos, D, pixel_size)
    mask = vol >= contour_level
    rendered = render_volume(model)
    r_mean = rendered[mask].mean()
    if r_mean > 0:
        model = model.replace(densities=dens * vol[mask].mean() / r_mean)
    return model
