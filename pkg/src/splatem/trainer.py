"""Minibatch training of the deformation network against particle images."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, asdict, fields
from typing import Sequence

import numpy as np

from .core import GaussianModel, render, render_backward
from .net import (
    ChannelFlags,
    NetworkConfig,
    NetworkState,
    decode_deformation,
    decoder_backward,
    gaussian_encode,
    gaussian_encoder_backward,
    image_encode,
    image_encoder_backward,
)
from .objective import GraphPair, LossTerms, LossWeights, build_graphs, total_loss

log = logging.getLogger(__name__)

__all__ = [
    "ParticleDataset",
    "TrainConfig",
    "TrainState",
    "adam_step",
    "loss_and_gradients",
    "train",
    "extract_latents",
]


@dataclass
class ParticleDataset:
    """Particle images with their fixed poses and optics."""

    images: np.ndarray
    poses: list
    ctfs: list
    pixel_size: float = 1.0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 3:
            raise ValueError("images must be a (M, H, W) stack")
        if not (len(self.poses) == len(self.ctfs) == len(self.images)):
            raise ValueError("images, poses and ctfs must have equal length")

    def __len__(self):
        return len(self.images)

    def subset(self, index) -> "ParticleDataset":
        index = np.asarray(index, dtype=np.int64)
        return ParticleDataset(self.images[index], [self.poses[i] for i in index],
                               [self.ctfs[i] for i in index], self.pixel_size)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_density: bool = True
    train_scale: bool = True
    train_position: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    checkpoint_interval: int = 0
    truncate: float = 4.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")

    @property
    def flags(self) -> ChannelFlags:
        return ChannelFlags(self.train_density, self.train_scale, self.train_position)

    def to_flat_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("weights", "network")}
        out.update(asdict(self.weights))
        out.update(self.network.to_dict())
        return out

    @classmethod
    def from_flat_dict(cls, values: dict) -> "TrainConfig":
        own = {f.name for f in fields(cls)} - {"weights", "network"}
        wkeys = {f.name for f in fields(LossWeights)}
        nkeys = {f.name for f in fields(NetworkConfig)}
        unknown = set(values) - own - wkeys - nkeys
        if unknown:
            raise KeyError(f"unknown configuration keys: {sorted(unknown)}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
        return cls(
            **{k: v for k, v in values.items() if k in own},
            weights=LossWeights(**{k: v for k, v in values.items() if k in wkeys}),
            network=NetworkConfig(**{k: v for k, v in values.items() if k in nkeys}),
        )


@dataclass
class TrainState:
    net: NetworkState
    moment1: dict
    moment2: dict
    step_counts: dict
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, net: NetworkState, seed) -> "TrainState":
        params = net.parameters()
        return cls(net, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()},
                   {k: 0 for k in params}, np.random.default_rng(seed))

    @property
    def step(self) -> int:
        return max(self.step_counts.values(), default=0)


def adam_step(state: TrainState, grads: dict, lr: float, beta1=0.9, beta2=0.999,
              eps=1e-8, names: Sequence[str] | None = None) -> TrainState:
    """Bias-corrected Adam update of the named parameters, in place."""
    params = state.net.parameters()
    for name in (grads if names is None else names):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        t = state.step_counts[name] + 1
        state.step_counts[name] = t
        m, v = state.moment1[name], state.moment2[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return state


def _batch_backward(net, model, graphs, embeddings, images, poses, ctfs, weights,
                    flags, rng, truncate, deterministic=False):
    """Forward and backward for one minibatch with fixed embeddings.

    Returns loss terms, parameter gradients (image encoder and decoder; the
    Gaussian-encoder entries stay zero) and the gradient w.r.t. embeddings.
    """
    code = image_encode(net, images, rng, deterministic=deterministic)
    defs, dec_cache = decode_deformation(net, code.sample, embeddings, flags)
    rendered = np.stack([render(model, d, p, c, truncate)
                         for d, p, c in zip(defs, poses, ctfs)])
    disp = np.stack([d.delta_position for d in defs])
    use_kl = net.config.variational and not deterministic
    terms, lg = total_loss(rendered, images, disp, model.positions, embeddings, graphs,
                           weights, code.mean if use_kl else None,
                           code.log_variance if use_kl else None)
    d_deform = np.stack([render_backward(model, d, p, c, g, truncate).as_array()
                         for d, p, c, g in zip(defs, poses, ctfs, lg.rendered)])
    d_deform[..., 2:5] += lg.displacements
    grads, d_z, d_emb = decoder_backward(net, dec_cache, d_deform)
    image_encoder_backward(net, code, d_z, lg.latent_mean, lg.latent_logvar, grads)
    return terms, grads, d_emb + lg.embeddings, rendered


def loss_and_gradients(net: NetworkState, model: GaussianModel, graphs: GraphPair,
                       images, poses, ctfs, weights: LossWeights,
                       flags: ChannelFlags = ChannelFlags(), rng=None,
                       truncate: float | None = 4.0, deterministic=False):
    """Total batch loss and its gradient w.r.t. every network parameter.

    This is the full pipeline (Gaussian encoder included) used both by the
    trainer's building blocks and by gradient checks.
    """
    embeddings, emb_cache = gaussian_encode(net, model)
    terms, grads, d_emb, _ = _batch_backward(net, model, graphs, embeddings, images,
                                             poses, ctfs, weights, flags,
                                             np.random.default_rng(rng), truncate,
                                             deterministic)
    gaussian_encoder_backward(net, emb_cache, d_emb, grads)
    return terms, grads


def _check_finite(terms: LossTerms, epoch: int, batch: int):
    for name, value in terms.as_dict().items():
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss term {name!r} = {value} at epoch {epoch}, batch {batch}")


def train(dataset: ParticleDataset, model: GaussianModel, config: TrainConfig,
          state: TrainState | None = None, out_dir: str | None = None):
    """Optimize the network; returns the final state and per-particle latents.

    Passing a ``state`` restored from a checkpoint continues training from its
    epoch with its optimizer moments and random stream.
    """
    from . import io

    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    bad = np.flatnonzero(~np.isfinite(dataset.images).all(axis=(1, 2)))
    if bad.size:
        raise ValueError(f"particle images contain non-finite values (first at index {bad[0]})")
    if state is None:
        seed = np.random.SeedSequence(config.seed)
        net_seed, loop_seed = seed.spawn(2)
        net = NetworkState.create(config.network, model.box_size, np.random.default_rng(net_seed))
        state = TrainState.create(net, loop_seed)
    net = state.net
    graphs = build_graphs(model, config.weights.lambda_omega)
    flags = config.flags
    names = list(net.parameters())
    enc_names = [n for n in names if n.startswith("gaussian_encoder.")]
    other_names = [n for n in names if n not in enc_names]
    M = len(dataset)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    while state.epoch < config.epochs:
        epoch = state.epoch
        embeddings, emb_cache = gaussian_encode(net, model)
        d_emb_total = np.zeros_like(embeddings)
        perm = state.rng.permutation(M)
        sums = LossTerms()
        for b, start in enumerate(range(0, M, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            terms, grads, d_emb, _ = _batch_backward(
                net, model, graphs, embeddings, dataset.images[idx],
                [dataset.poses[i] for i in idx], [dataset.ctfs[i] for i in idx],
                config.weights, flags, state.rng, config.truncate)
            _check_finite(terms, epoch, b)
            adam_step(state, grads, config.learning_rate, config.adam_beta1,
                      config.adam_beta2, config.adam_eps, names=other_names)
            d_emb_total += d_emb
            for k, v in terms.as_dict().items():
                setattr(sums, k, getattr(sums, k) + v)
        enc_grads = gaussian_encoder_backward(net, emb_cache, d_emb_total)
        adam_step(state, enc_grads, config.learning_rate, config.adam_beta1,
                  config.adam_beta2, config.adam_eps, names=enc_names)
        row = {"epoch": epoch + 1, **{k: v / M for k, v in sums.as_dict().items()}}
        state.history.append(row)
        state.epoch += 1
        log.info("epoch %d  total %.6g  rec %.6g", row["epoch"], row["total"], row["rec"])
        if out_dir and config.checkpoint_interval and state.epoch % config.checkpoint_interval == 0:
            io.save_checkpoint(os.path.join(out_dir, f"checkpoint_{state.epoch:04d}.ckpt"),
                               state, config, model)
    if out_dir:
        io.save_checkpoint(os.path.join(out_dir, "checkpoint_final.ckpt"), state, config, model)
        io.write_loss_history(os.path.join(out_dir, "loss_history.csv"), state.history)
    return state, extract_latents(state, dataset)


def extract_latents(state: TrainState | NetworkState, dataset, batch_size: int = 256):
    """Deterministic encoder means for every particle, in dataset order."""
    net = state.net if isinstance(state, TrainState) else state
    images = dataset.images if isinstance(dataset, ParticleDataset) else np.asarray(dataset)
    out = [image_encode(net, images[s:s + batch_size], deterministic=True).mean
           for s in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, net.config.latent_dim))
    return np.concatenate(out, axis=0)
