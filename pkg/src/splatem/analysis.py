"""Latent-space analysis, volume decoding, FSC-based scoring and atom mapping."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .core import Deformation, GaussianModel, render_volume
from .metrics import fsc, fsc_auc
from .net import ChannelFlags, NetworkState, decode_deformation, gaussian_encode
from .reconstruction import backproject

log = logging.getLogger(__name__)

__all__ = [
    "ClusterResult",
    "AtomModel",
    "ClusterScores",
    "kmeans",
    "pca",
    "decode_volume_at",
    "pc_traversal",
    "score_against_gt",
    "sample_fsc",
    "cluster_fsc",
    "map_to_atoms",
    "rmsd",
    "latent_angles",
    "circular_rank_correlation",
]


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centers: np.ndarray
    inertia: float


@dataclass
class AtomModel:
    """Atom coordinates in Angstrom, origin at the box center."""

    coords: np.ndarray
    nearest_gaussian: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.coords)


@dataclass
class ClusterScores:
    scores: np.ndarray  # best FSC_AUC per cluster, NaN where omitted
    best_match: np.ndarray  # index of the best-matching GT volume, -1 where omitted
    volumes: list
    clusters: ClusterResult


def _sq_dist(x, c):
    return (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]


def kmeans(latents, K: int, seed=0, max_iter: int = 300) -> ClusterResult:
    """Lloyd's algorithm from k-means++ seeding.

    Stops at an assignment fixpoint or after ``max_iter`` iterations. An empty
    cluster keeps its previous center.
    """
    X = np.asarray(latents, dtype=float)
    n = len(X)
    if K < 1 or K > n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    rng = np.random.default_rng(seed)
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(1)
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[k] = X[idx]
        closest = np.minimum(closest, ((X - centers[k]) ** 2).sum(1))

    assign = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(X, centers), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(K):
            members = X[assign == k]
            if len(members):
                centers[k] = members.mean(0)
    inertia = float(((X - centers[assign]) ** 2).sum())
    return ClusterResult(assign, centers, inertia)


def pca(matrix):
    """Principal components of ``(samples, features)`` data.

    Returns
    -------
    components : ndarray, shape (features, features)
        Orthonormal rows, ordered by decreasing variance.
    variances : ndarray
    mean : ndarray
    """
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("pca needs at least two samples")
    mean = X.mean(0)
    _, sv, vt = np.linalg.svd(X - mean, full_matrices=True)
    var = np.zeros(X.shape[1])
    var[:sv.size] = sv**2 / (len(X) - 1)
    return vt, var, mean


def decode_volume_at(net: NetworkState, z, model: GaussianModel,
                     flags: ChannelFlags = ChannelFlags(), truncate: float | None = 4.0,
                     embeddings=None) -> np.ndarray:
    """Decode a latent code into a deformed consensus and rasterize it."""
    if embeddings is None:
        embeddings, _ = gaussian_encode(net, model)
    deformation, _ = decode_deformation(net, np.asarray(z, float), embeddings, flags)
    return render_volume(model, deformation, truncate)


def pc_traversal(latents, n_steps: int = 10, component: int = 0, span: float = 2.0):
    """Latent codes along one principal axis, ``mean +/- span * std``."""
    comps, var, mean = pca(latents)
    t = np.linspace(-span, span, n_steps) * np.sqrt(var[component])
    return mean[None, :] + t[:, None] * comps[component][None, :]


def score_against_gt(volume, gt_volumes):
    """Best FSC_AUC of ``volume`` over all ground-truth volumes."""
    if len(gt_volumes) == 0:
        raise ValueError("no ground-truth volumes to score against")
    aucs = np.array([fsc_auc(fsc(volume, g)) for g in gt_volumes])
    best = int(np.argmax(aucs))
    return float(aucs[best]), best


def sample_fsc(net: NetworkState, model: GaussianModel, latents, K: int, gt_volumes,
               flags: ChannelFlags = ChannelFlags(), seed=0) -> ClusterScores:
    """Cluster latents, decode the centers, score each volume against the GT set."""
    if len(gt_volumes) == 0:
        raise ValueError("no ground-truth volumes to score against")
    clusters = kmeans(latents, K, seed)
    emb, _ = gaussian_encode(net, model)
    vols, scores, best = [], [], []
    for c in clusters.centers:
        v = decode_volume_at(net, c, model, flags, embeddings=emb)
        s, b = score_against_gt(v, gt_volumes)
        vols.append(v)
        scores.append(s)
        best.append(b)
    return ClusterScores(np.array(scores), np.array(best), vols, clusters)


def cluster_fsc(dataset, latents, K: int, gt_volumes, seed=0,
                min_images: int = 10) -> ClusterScores:
    """Cluster particles by latent, back-project each cluster, score against GT."""
    if len(gt_volumes) == 0:
        raise ValueError("no ground-truth volumes to score against")
    clusters = kmeans(latents, K, seed)
    vols, scores, best = [], [], []
    for k in range(K):
        idx = np.flatnonzero(clusters.assignments == k)
        if len(idx) < min_images:
            log.warning("cluster %d has %d images (< %d); score omitted", k, len(idx), min_images)
            vols.append(None)
            scores.append(np.nan)
            best.append(-1)
            continue
        v = backproject(dataset.images[idx], [dataset.poses[i] for i in idx],
                        [dataset.ctfs[i] for i in idx], dataset.pixel_size)
        s, b = score_against_gt(v, gt_volumes)
        vols.append(v)
        scores.append(s)
        best.append(b)
    return ClusterScores(np.array(scores), np.array(best), vols, clusters)


def _nearest_index(points, centers, chunk=4096):
    out = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        d2 = ((points[s:s + chunk, None, :] - centers[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = np.argmin(d2, axis=1)  # first index wins ties
    return out


def map_to_atoms(model: GaussianModel, deformation: Deformation | None,
                 atoms: AtomModel) -> AtomModel:
    """Move each atom by the displacement of its nearest consensus Gaussian."""
    if len(model) == 0:
        raise ValueError("empty Gaussian model")
    vox = atoms.coords / model.pixel_size
    nearest = _nearest_index(vox, model.positions)
    if deformation is None:
        return AtomModel(atoms.coords.copy(), nearest)
    shift = deformation.delta_position[nearest] * model.pixel_size
    return AtomModel(atoms.coords + shift, nearest)


def rmsd(atoms_a: AtomModel, atoms_b: AtomModel) -> float:
    a = atoms_a.coords if isinstance(atoms_a, AtomModel) else np.asarray(atoms_a, float)
    b = atoms_b.coords if isinstance(atoms_b, AtomModel) else np.asarray(atoms_b, float)
    if a.shape != b.shape:
        raise ValueError(f"atom counts differ: {len(a)} vs {len(b)}")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def latent_angles(latents) -> np.ndarray:
    """Polar angle of each latent in the plane of its first two principal axes."""
    comps, _, mean = pca(latents)
    proj = (np.asarray(latents, float) - mean) @ comps[:2].T
    return np.arctan2(proj[:, 1], proj[:, 0])


def circular_rank_correlation(a, b) -> float:
    """Rank correlation between two circular variables, in [0, 1].

    Angles are replaced by uniformly spaced rank angles and compared through
    the mean resultant of their difference and of their sum, so the value is
    invariant to a phase offset and to reflection of either variable.
    """
    a = np.asarray(a, float) % (2 * np.pi)
    b = np.asarray(b, float) % (2 * np.pi)
    n = a.size
    ra = 2 * np.pi * rankdata(a) / n
    rb = 2 * np.pi * rankdata(b) / n
    same = np.abs(np.mean(np.exp(1j * (ra - rb)))) ** 2
    flip = np.abs(np.mean(np.exp(1j * (ra + rb)))) ** 2
    return float(max(same, flip))
