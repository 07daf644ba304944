"""Reconstruction loss, neighbor graphs and geometric regularizers."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree

from .core import GaussianModel

__all__ = [
    "NeighborGraph",
    "GraphPair",
    "LossWeights",
    "LossTerms",
    "LossGradients",
    "mean_nn_distance",
    "build_neighbor_graph",
    "build_graphs",
    "loss_rec",
    "loss_emb",
    "loss_geo1",
    "loss_geo2",
    "total_loss",
]

DISPLACEMENT_FLOOR = 1e-6


@dataclass
class NeighborGraph:
    """Undirected edges ``(src < dst)`` with rest lengths and weights."""

    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    radius: float

    def __len__(self):
        return self.src.size

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist(),
                        self.weights.tolist(), self.distances.tolist()))


@dataclass
class GraphPair:
    """The wide graph (embedding and orientation terms) and the tight rigidity graph."""

    wide: NeighborGraph
    tight: NeighborGraph
    d_mean: float


@dataclass
class LossWeights:
    lambda_emb: float = 1e-3
    lambda_geo1: float = 1.0
    lambda_geo2: float = 0.1
    lambda_omega: float = 0.1
    kl_weight: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


@dataclass
class LossTerms:
    rec: float = 0.0
    emb: float = 0.0
    geo1: float = 0.0
    geo2: float = 0.0
    kl: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return asdict(self)


@dataclass
class LossGradients:
    rendered: np.ndarray
    displacements: np.ndarray
    embeddings: np.ndarray
    latent_mean: np.ndarray | None = None
    latent_logvar: np.ndarray | None = None


def mean_nn_distance(model: GaussianModel | np.ndarray) -> float:
    pos = model.positions if isinstance(model, GaussianModel) else np.asarray(model, float)
    if len(pos) < 2:
        raise ValueError("mean nearest-neighbor distance needs at least two Gaussians")
    dist, _ = cKDTree(pos).query(pos, k=2)
    return float(dist[:, 1].mean())


def build_neighbor_graph(model: GaussianModel | np.ndarray, mu: float,
                         lambda_omega: float) -> NeighborGraph:
    """All unordered pairs closer than ``mu`` with weights ``exp(-lambda * d^2)``."""
    if not mu > 0:
        raise ValueError(f"radius must be positive, got {mu}")
    pos = model.positions if isinstance(model, GaussianModel) else np.asarray(model, float)
    pairs = cKDTree(pos).query_pairs(mu, output_type="ndarray")
    if len(pairs):
        pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    else:
        pairs = np.zeros((0, 2), dtype=np.int64)
    src, dst = pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64)
    d = np.linalg.norm(pos[src] - pos[dst], axis=1)
    return NeighborGraph(src, dst, np.exp(-lambda_omega * d**2), d, float(mu))


def build_graphs(model: GaussianModel, lambda_omega: float,
                 wide_factor: float = 2.5, tight_factor: float = 1.5) -> GraphPair:
    d_mean = mean_nn_distance(model)
    return GraphPair(
        wide=build_neighbor_graph(model, wide_factor * d_mean, lambda_omega),
        tight=build_neighbor_graph(model, tight_factor * d_mean, lambda_omega),
        d_mean=d_mean,
    )


def loss_rec(rendered, observed):
    """L1 distance summed over pixels; the subgradient at ties is 0."""
    rendered = np.asarray(rendered, dtype=float)
    observed = np.asarray(observed, dtype=float)
    if rendered.shape != observed.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {observed.shape}")
    diff = rendered - observed
    return float(np.abs(diff).sum()), np.sign(diff)


def _scatter_rows(n, src, dst, vals):
    out = np.zeros((n,) + vals.shape[1:])
    np.add.at(out, src, vals)
    np.add.at(out, dst, -vals)
    return out


def loss_emb(embeddings, graph: NeighborGraph):
    emb = np.asarray(embeddings, dtype=float)
    diff = emb[graph.src] - emb[graph.dst]
    w = graph.weights[:, None]
    value = float((w * diff**2).sum())
    return value, _scatter_rows(len(emb), graph.src, graph.dst, 2.0 * w * diff)


def loss_geo1(consensus_positions, deformed_positions, graph: NeighborGraph):
    """Weighted squared change of neighbor distances (local rigidity)."""
    pos = np.asarray(deformed_positions, dtype=float)
    vec = pos[graph.src] - pos[graph.dst]
    dhat = np.linalg.norm(vec, axis=1)
    rest = np.linalg.norm(np.asarray(consensus_positions, float)[graph.src]
                          - np.asarray(consensus_positions, float)[graph.dst], axis=1)
    stretch = dhat - rest
    value = float((graph.weights * stretch**2).sum())
    safe = np.where(dhat > 0, dhat, 1.0)
    coef = np.where(dhat > 0, 2.0 * graph.weights * stretch / safe, 0.0)
    return value, _scatter_rows(len(pos), graph.src, graph.dst, coef[:, None] * vec)


def loss_geo2(displacements, graph: NeighborGraph, floor: float = DISPLACEMENT_FLOOR):
    """Weighted ``1 - cos`` between neighbor displacement directions.

    Pairs where either displacement is shorter than ``floor`` contribute 0.
    """
    v = np.asarray(displacements, dtype=float)
    u, w = v[graph.src], v[graph.dst]
    nu = np.linalg.norm(u, axis=1)
    nw = np.linalg.norm(w, axis=1)
    ok = (nu >= floor) & (nw >= floor)
    nu_s = np.where(ok, nu, 1.0)
    nw_s = np.where(ok, nw, 1.0)
    cos = np.where(ok, (u * w).sum(1) / (nu_s * nw_s), 1.0)
    weight = graph.weights * ok
    value = float((weight * np.maximum(1.0 - cos, 0.0)).sum())  # rounding can push cos past 1
    gu = -weight[:, None] * (w / (nu_s * nw_s)[:, None] - cos[:, None] * u / (nu_s**2)[:, None])
    gw = -weight[:, None] * (u / (nu_s * nw_s)[:, None] - cos[:, None] * w / (nw_s**2)[:, None])
    grad = np.zeros_like(v)
    np.add.at(grad, graph.src, gu)
    np.add.at(grad, graph.dst, gw)
    return value, grad


def total_loss(rendered, observed, displacements, consensus_positions, embeddings,
               graphs: GraphPair, weights: LossWeights, latent_mean=None,
               latent_logvar=None):
    """Combine all terms for a batch.

    Parameters
    ----------
    rendered, observed : ndarray, shape (B, H, W)
    displacements : ndarray, shape (B, N, 3)
        Per-particle position changes; deformed positions are consensus + these.
    consensus_positions : ndarray, shape (N, 3)
    embeddings : ndarray, shape (N, j)
    latent_mean, latent_logvar : ndarray, shape (B, i), optional
        Supply both to include the KL term.

    Returns
    -------
    LossTerms, LossGradients
    """
    from .net import kl_divergence

    rendered = np.asarray(rendered, float)
    observed = np.asarray(observed, float)
    disp = np.asarray(displacements, float)
    terms = LossTerms()
    terms.rec, g_img = loss_rec(rendered, observed)
    terms.emb, g_emb = loss_emb(embeddings, graphs.wide)
    g_disp = np.zeros_like(disp)
    for k in range(disp.shape[0]):
        v1, g1 = loss_geo1(consensus_positions, consensus_positions + disp[k], graphs.tight)
        v2, g2 = loss_geo2(disp[k], graphs.wide)
        terms.geo1 += v1
        terms.geo2 += v2
        g_disp[k] = weights.lambda_geo1 * g1 + weights.lambda_geo2 * g2
    g_mean = g_logvar = None
    if latent_mean is not None and latent_logvar is not None:
        terms.kl, g_mean, g_logvar = kl_divergence(latent_mean, latent_logvar)
        g_mean *= weights.kl_weight
        g_logvar *= weights.kl_weight
    terms.total = (terms.rec + weights.lambda_emb * terms.emb
                   + weights.lambda_geo1 * terms.geo1 + weights.lambda_geo2 * terms.geo2
                   + weights.kl_weight * terms.kl)
    grads = LossGradients(g_img, g_disp, weights.lambda_emb * g_emb, g_mean, g_logvar)
    return terms, grads
