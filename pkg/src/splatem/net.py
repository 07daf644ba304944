"""Dual-encoder, single-decoder MLP network with hand-derived backpropagation.

The image encoder maps a particle image to a latent code, the Gaussian encoder
maps each consensus Gaussian to an embedding, and the decoder maps the
concatenation ``[z, embedding]`` of every Gaussian to its parameter changes.
All passes are plain numpy; every forward returns the cache its backward needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .core import Deformation, GaussianModel

__all__ = [
    "DenseLayer",
    "MLP",
    "NetworkConfig",
    "NetworkState",
    "LatentCode",
    "ChannelFlags",
    "positional_encode",
    "gaussian_features",
    "standardize_images",
    "image_encode",
    "image_encoder_backward",
    "gaussian_encode",
    "gaussian_encoder_backward",
    "decode_deformation",
    "decoder_backward",
    "network_backward",
    "kl_divergence",
]


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ValueError("weights and biases disagree on output width")

    def forward(self, x):
        pre = x @ self.weights.T + self.biases
        out = np.maximum(pre, 0.0) if self.activation == "relu" else pre
        return out, (x, pre)

    def backward(self, cache, grad_out):
        x, pre = cache
        if self.activation == "relu":
            grad_out = grad_out * (pre > 0)
        dW = grad_out.T @ x
        db = grad_out.sum(0)
        return grad_out @ self.weights, dW, db


class MLP:
    """Stack of dense layers; hidden layers use ReLU, the last one is linear."""

    def __init__(self, layers: list[DenseLayer]):
        self.layers = layers
        for a, b in zip(layers, layers[1:]):
            if a.weights.shape[0] != b.weights.shape[1]:
                raise ValueError("layer shapes are inconsistent along the stack")

    @classmethod
    def create(cls, sizes: Sequence[int], rng: np.random.Generator, zero_last=False):
        layers = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            if last and zero_last:
                W = np.zeros((fan_out, fan_in))
            else:
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            layers.append(DenseLayer(W, np.zeros(fan_out), "identity" if last else "relu"))
        return cls(layers)

    @property
    def in_features(self):
        return self.layers[0].weights.shape[1]

    @property
    def out_features(self):
        return self.layers[-1].weights.shape[0]

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, grad_out):
        """Return the input gradient and a list of ``(dW, db)`` per layer."""
        if caches is None or len(caches) != len(self.layers):
            raise RuntimeError("backward called without a matching forward cache")
        grads = [None] * len(self.layers)
        for k in range(len(self.layers) - 1, -1, -1):
            grad_out, dW, db = self.layers[k].backward(caches[k], grad_out)
            grads[k] = (dW, db)
        return grad_out, grads


@dataclass
class NetworkConfig:
    latent_dim: int = 8
    embedding_dim: int = 32
    image_encoder_hidden: tuple = (256, 256, 256)
    gaussian_encoder_hidden: tuple = (128, 128)
    decoder_hidden: tuple = (128, 128)
    pe_bands: int = 6
    kl_weight: float = 1e-4
    variational: bool = False
    max_displacement_frac: float = 0.25

    def __post_init__(self):
        self.image_encoder_hidden = tuple(int(w) for w in self.image_encoder_hidden)
        self.gaussian_encoder_hidden = tuple(int(w) for w in self.gaussian_encoder_hidden)
        self.decoder_hidden = tuple(int(w) for w in self.decoder_hidden)
        if self.latent_dim < 1 or self.embedding_dim < 1 or self.pe_bands < 0:
            raise ValueError("latent_dim and embedding_dim must be >= 1, pe_bands >= 0")

    def to_dict(self):
        d = asdict(self)
        for k in ("image_encoder_hidden", "gaussian_encoder_hidden", "decoder_hidden"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class ChannelFlags:
    """Which deformation channels the decoder may change."""

    density: bool = True
    scale: bool = True
    position: bool = True

    def mask(self) -> np.ndarray:
        return np.array([self.density, self.scale] + [self.position] * 3, dtype=float)


class NetworkState:
    """Parameters of the three MLPs plus the geometry they were built for."""

    def __init__(self, config: NetworkConfig, box_size: int, image_encoder: MLP,
                 gaussian_encoder: MLP, decoder: MLP):
        self.config = config
        self.box_size = int(box_size)
        self.image_encoder = image_encoder
        self.gaussian_encoder = gaussian_encoder
        self.decoder = decoder
        i, j = config.latent_dim, config.embedding_dim
        if image_encoder.in_features != box_size**2 or image_encoder.out_features != 2 * i:
            raise ValueError("image encoder shape does not match config")
        if gaussian_encoder.in_features != 5 + 6 * config.pe_bands:
            raise ValueError("gaussian encoder input width does not match pe_bands")
        if gaussian_encoder.out_features != j:
            raise ValueError("gaussian encoder output width does not match embedding_dim")
        if decoder.in_features != i + j or decoder.out_features != 5:
            raise ValueError("decoder shape does not match config")

    @classmethod
    def create(cls, config: NetworkConfig, box_size: int, rng) -> "NetworkState":
        rng = np.random.default_rng(rng)
        i, j = config.latent_dim, config.embedding_dim
        img = MLP.create([box_size**2, *config.image_encoder_hidden, 2 * i], rng)
        gen = MLP.create([5 + 6 * config.pe_bands, *config.gaussian_encoder_hidden, j], rng)
        dec = MLP.create([i + j, *config.decoder_hidden, 5], rng, zero_last=True)
        return cls(config, box_size, img, gen, dec)

    @property
    def max_displacement(self) -> float:
        return self.config.max_displacement_frac * self.box_size

    def modules(self):
        return {"image_encoder": self.image_encoder,
                "gaussian_encoder": self.gaussian_encoder,
                "decoder": self.decoder}

    def parameters(self) -> dict[str, np.ndarray]:
        """Ordered mapping of parameter name to the live array (mutable views)."""
        out = {}
        for name, mlp in self.modules().items():
            for k, layer in enumerate(mlp.layers):
                out[f"{name}.{k}.weights"] = layer.weights
                out[f"{name}.{k}.biases"] = layer.biases
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.parameters().items()}

    def copy(self) -> "NetworkState":
        def dup(mlp):
            return MLP([DenseLayer(l.weights.copy(), l.biases.copy(), l.activation)
                        for l in mlp.layers])
        return NetworkState(self.config, self.box_size, dup(self.image_encoder),
                            dup(self.gaussian_encoder), dup(self.decoder))


def _accumulate(grads: dict, prefix: str, layer_grads):
    for k, (dW, db) in enumerate(layer_grads):
        grads[f"{prefix}.{k}.weights"] += dW
        grads[f"{prefix}.{k}.biases"] += db


def positional_encode(p, L: int) -> np.ndarray:
    """Sinusoidal features of normalized positions.

    ``p`` has shape ``(..., 3)`` with entries in ``[-1, 1]``. The output holds
    the ``3L`` sines followed by the ``3L`` cosines of ``2**l * pi * p_a``,
    ordered with the band ``l`` major and the axis ``a`` minor.
    """
    p = np.asarray(p, dtype=float)
    if L == 0:
        return np.zeros(p.shape[:-1] + (0,))
    freqs = (2.0 ** np.arange(L)) * np.pi
    arg = (freqs[:, None] * p[..., None, :]).reshape(p.shape[:-1] + (3 * L,))
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def gaussian_features(model: GaussianModel, L: int) -> np.ndarray:
    """Per-Gaussian encoder input ``[d, s, PE(p / half), p / half]``."""
    half = model.box_size / 2
    pn = model.positions / half
    return np.column_stack([model.densities, model.scales, positional_encode(pn, L), pn])


def standardize_images(images: np.ndarray) -> np.ndarray:
    flat = np.asarray(images, dtype=float).reshape(len(images), -1)
    mu = flat.mean(1, keepdims=True)
    sd = flat.std(1, keepdims=True)
    return (flat - mu) / np.where(sd > 1e-12, sd, 1.0)


@dataclass
class LatentCode:
    mean: np.ndarray
    log_variance: np.ndarray
    sample: np.ndarray
    noise: np.ndarray | None = None
    cache: list | None = field(default=None, repr=False)


def image_encode(net: NetworkState, images, rng=None, deterministic=False) -> LatentCode:
    """Encode a batch of images ``(B, H, W)`` (or a single ``(H, W)`` image).

    With ``variational`` enabled and ``deterministic=False`` the sample is
    ``mean + exp(log_var / 2) * eps``; otherwise it equals the mean.
    """
    images = np.asarray(images, dtype=float)
    single = images.ndim == 2
    if single:
        images = images[None]
    if images.shape[1:] != (net.box_size, net.box_size):
        raise ValueError(
            f"image shape {images.shape[1:]} does not match network box {net.box_size}")
    x = standardize_images(images)
    out, cache = net.image_encoder.forward(x)
    i = net.config.latent_dim
    mean, logvar = out[:, :i], out[:, i:]
    noise = None
    if net.config.variational and not deterministic:
        rng = np.random.default_rng(rng)
        noise = rng.standard_normal(mean.shape)
        sample = mean + np.exp(0.5 * logvar) * noise
    else:
        sample = mean.copy()
    if single:
        mean, logvar, sample = mean[0], logvar[0], sample[0]
        noise = None if noise is None else noise[0]
    return LatentCode(mean, logvar, sample, noise, cache)


def image_encoder_backward(net: NetworkState, code: LatentCode, d_sample,
                           d_mean=None, d_logvar=None, grads=None):
    """Backpropagate latent gradients into the image encoder parameters."""
    if code.cache is None:
        raise RuntimeError("latent code carries no forward cache")
    d_sample = np.atleast_2d(d_sample)
    mean = np.atleast_2d(code.mean)
    logvar = np.atleast_2d(code.log_variance)
    gm = d_sample.copy()
    gl = np.zeros_like(logvar)
    if code.noise is not None:
        gl += d_sample * np.atleast_2d(code.noise) * 0.5 * np.exp(0.5 * logvar)
    if d_mean is not None:
        gm += np.atleast_2d(d_mean)
    if d_logvar is not None:
        gl += np.atleast_2d(d_logvar)
    grads = net.zero_grads() if grads is None else grads
    _, layer_grads = net.image_encoder.backward(code.cache, np.concatenate([gm, gl], 1))
    _accumulate(grads, "image_encoder", layer_grads)
    return grads


def gaussian_encode(net: NetworkState, model: GaussianModel):
    """Embed every Gaussian of the consensus model.

    Returns
    -------
    embeddings : ndarray, shape (N, j)
    cache : list
        Forward cache for :func:`gaussian_encoder_backward`.
    """
    feats = gaussian_features(model, net.config.pe_bands)
    return net.gaussian_encoder.forward(feats)


def gaussian_encoder_backward(net: NetworkState, cache, d_embeddings, grads=None):
    grads = net.zero_grads() if grads is None else grads
    _, layer_grads = net.gaussian_encoder.backward(cache, d_embeddings)
    _accumulate(grads, "gaussian_encoder", layer_grads)
    return grads


@dataclass
class DecoderCache:
    mlp_cache: list
    tanh: np.ndarray  # (B, N, 3)
    mask: np.ndarray
    batch: int
    n: int


def decode_deformation(net: NetworkState, z, embeddings, flags: ChannelFlags = ChannelFlags()):
    """Predict per-Gaussian parameter changes for one or more latent codes.

    Parameters
    ----------
    z : ndarray, shape (i,) or (B, i)
    embeddings : ndarray, shape (N, j)
    flags : ChannelFlags
        Disabled channels are returned as exact zeros.

    Returns
    -------
    deformations : Deformation or list of Deformation
    cache : DecoderCache
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    emb = np.asarray(embeddings, dtype=float)
    i, j = net.config.latent_dim, net.config.embedding_dim
    if z.shape[1] != i or emb.ndim != 2 or emb.shape[1] != j:
        raise ValueError(f"expected z of width {i} and embeddings of width {j}")
    B, N = z.shape[0], emb.shape[0]
    inp = np.concatenate([np.repeat(z, N, axis=0), np.tile(emb, (B, 1))], axis=1)
    raw, mlp_cache = net.decoder.forward(inp)
    raw = raw.reshape(B, N, 5)
    mask = flags.mask()
    th = np.tanh(raw[..., 2:5])
    out = np.concatenate([raw[..., :2], net.max_displacement * th], axis=-1) * mask
    defs = [Deformation.from_array(o) for o in out]
    cache = DecoderCache(mlp_cache, th, mask, B, N)
    return (defs[0] if single else defs), cache


def decoder_backward(net: NetworkState, cache: DecoderCache, d_deform, grads=None):
    """Backpropagate deformation gradients ``(B, N, 5)`` through the decoder.

    Returns the parameter gradients plus gradients w.r.t. the latent codes
    ``(B, i)`` and the embeddings ``(N, j)``.
    """
    if cache is None:
        raise RuntimeError("decoder backward called without a forward cache")
    d = np.asarray(d_deform, dtype=float).reshape(cache.batch, cache.n, 5) * cache.mask
    g_raw = d.copy()
    g_raw[..., 2:5] *= net.max_displacement * (1.0 - cache.tanh**2)
    g_in, layer_grads = net.decoder.backward(cache.mlp_cache, g_raw.reshape(-1, 5))
    grads = net.zero_grads() if grads is None else grads
    _accumulate(grads, "decoder", layer_grads)
    i = net.config.latent_dim
    g_in = g_in.reshape(cache.batch, cache.n, -1)
    return grads, g_in[..., :i].sum(1), g_in[..., i:].sum(0)


def network_backward(net: NetworkState, code: LatentCode, emb_cache, dec_cache,
                     d_deform, d_embeddings=None, d_mean=None, d_logvar=None):
    """Full reverse pass: deformation gradients to every network parameter.

    ``d_embeddings`` adds direct embedding gradients (e.g. from the
    embedding-smoothness loss); ``d_mean``/``d_logvar`` carry KL gradients.

    Returns
    -------
    grads : dict
        Parameter gradients keyed like :meth:`NetworkState.parameters`.
    d_z : ndarray
        Gradient w.r.t. the latent samples.
    d_emb : ndarray
        Total gradient w.r.t. the embeddings.
    """
    grads, d_z, d_emb = decoder_backward(net, dec_cache, d_deform)
    if d_embeddings is not None:
        d_emb = d_emb + d_embeddings
    image_encoder_backward(net, code, d_z, d_mean, d_logvar, grads)
    gaussian_encoder_backward(net, emb_cache, d_emb, grads)
    return grads, d_z, d_emb


def kl_divergence(mean, log_variance):
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over all entries, with gradients."""
    mean = np.asarray(mean, dtype=float)
    lv = np.asarray(log_variance, dtype=float)
    var = np.exp(lv)
    value = 0.5 * float(np.sum(mean**2 + var - lv - 1.0))
    return value, mean.copy(), 0.5 * (var - 1.0)
