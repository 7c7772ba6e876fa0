"""Observation encoder, landmark refinement and landmark-to-parameter networks.

Point sets are B x N x 3 tensors; parameter outputs are whitened, i.e. the
network predicts (alpha - mean) / std per coordinate.
"""

from __future__ import annotations

import zlib

import numpy as np

from ..morphable import N_EXPR, N_POSE, N_SHAPE
from ..tensorcore.layers import MLP, Block, Module, pool
from ..tensorcore.tensor import affine, concat, global_max_pool, repeat_rows

HEAD_DIMS = {"p": N_POSE, "s": N_SHAPE, "e": N_EXPR}


def sub_rng(seed, name):
    """Independent init stream per sub-network, stable across ablation modes."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Heads(Module):
    """Separate decoders for the pose, shape and expression blocks."""

    def __init__(self, n_in, hidden, blocks, seed, prefix, dtype):
        super().__init__()
        self.blocks = tuple(blocks)
        for m in self.blocks:
            setattr(self, m, MLP(n_in, tuple(hidden) + (HEAD_DIMS[m],), sub_rng(seed, f"{prefix}.{m}"),
                                 dtype, plain_last=True))

    def __call__(self, feat):
        return {m: getattr(self, m)(feat) for m in self.blocks}

    def zero_last(self):
        for m in self.blocks:
            getattr(self, m).layers[-1].fc.zero_()


class ObservationEncoder(Module):
    """Flat MLP trunk whose last layer is read as ``n_cells`` feature cells, then pooled."""

    def __init__(self, cfg, seed, dtype):
        super().__init__()
        self.cfg = cfg
        sizes = tuple(cfg.hidden) + (cfg.n_cells * cfg.latent_dim,)
        self.trunk = MLP(cfg.observation_dim, sizes, sub_rng(seed, "encoder"), dtype)
        self.heads = Heads(cfg.latent_dim, cfg.head_hidden, "pse", seed, "encoder.heads", dtype)

    def __call__(self, obs):
        if obs.ndim != 2 or obs.shape[1] != self.cfg.observation_dim:
            raise ValueError(f"observation must be B x {self.cfg.observation_dim}, got {obs.shape}")
        cells = self.trunk(obs).reshape(obs.shape[0], self.cfg.n_cells, self.cfg.latent_dim)
        z = pool(cells, self.cfg.pooling)
        return z, self.heads(z)


class Mafa(Module):
    """Multi-attribute landmark refinement with a skip connection from the input points."""

    def __init__(self, cfg, seed, dtype):
        super().__init__()
        self.cfg = cfg
        rng = lambda name: sub_rng(seed, f"mafa.{name}")  # noqa: E731
        self.low = MLP(3, cfg.low_level_channels, rng("low"), dtype)
        glob = tuple(cfg.global_point_hidden) + (cfg.global_point_channels,)
        self.glob = MLP(cfg.low_level_dim, glob, rng("global"), dtype)
        if cfg.attributes in ("point+image", "all"):
            self.adapt_z = Block(cfg.latent_dim, cfg.latent_dim, rng("adapt_z"), dtype)
        if cfg.attributes == "all":
            self.adapt_s = Block(N_SHAPE, N_SHAPE, rng("adapt_s"), dtype)
            self.adapt_e = Block(N_EXPR, N_EXPR, rng("adapt_e"), dtype)
        self.decoder = MLP(cfg.per_point_dim, tuple(cfg.decoder_hidden) + (3,), rng("decoder"),
                           dtype, plain_last=True)

    def __call__(self, coarse, z, shape, expr, feat_points=None):
        """``feat_points`` (default ``coarse``) feeds the point features; the skip always adds ``coarse``."""
        b, n, c = coarse.shape
        if c != 3:
            raise ValueError(f"landmarks must be B x N x 3, got {coarse.shape}")
        low = self.low(coarse if feat_points is None else feat_points)
        parts = [global_max_pool(self.glob(low))]
        if self.cfg.attributes in ("point+image", "all"):
            parts.append(self.adapt_z(z))
        if self.cfg.attributes == "all":
            parts += [self.adapt_s(shape), self.adapt_e(expr)]
        fused = concat(parts, axis=1)
        return coarse + self.decode(low, fused)

    def decode(self, low, fused):
        """Decoder over per-point features [low | fused repeated N times].

        The first layer's weight is split by input rows so the fused half is
        multiplied once per sample and broadcast over points; this equals the
        affine map of the concatenated B x N x per_point_dim tensor.
        """
        first, rest = self.decoder.layers[0], self.decoder.layers[1:]
        k = low.shape[2]
        w = first.fc.weight
        h = affine(low, w[:k], first.fc.bias) + affine(fused, w[k:]).reshape(fused.shape[0], 1, -1)
        h = first.activate(h)
        for layer in rest:
            h = layer(h)
        return h

    def decode_concat(self, low, fused):
        """Reference path: materialize the repeated per-point features explicitly."""
        return self.decoder(concat([low, repeat_rows(fused, low.shape[1])], axis=2))

    def zero_last(self):
        self.decoder.layers[-1].fc.zero_()


class LandmarkToParams(Module):
    """Per-point encoder, max-pool and separate heads regressing parameters from landmarks."""

    def __init__(self, channels, head_hidden, blocks, seed, dtype, fuse=None):
        super().__init__()
        self.encoder = MLP(3, tuple(channels), sub_rng(seed, "l2m.encoder"), dtype)
        feat = channels[-1]
        self.fuse = fuse
        if fuse is not None:
            self.adapt_z = Block(fuse, fuse, sub_rng(seed, "l2m.adapt_z"), dtype)
            self.adapt_s = Block(N_SHAPE, N_SHAPE, sub_rng(seed, "l2m.adapt_s"), dtype)
            self.adapt_e = Block(N_EXPR, N_EXPR, sub_rng(seed, "l2m.adapt_e"), dtype)
            feat += fuse + N_SHAPE + N_EXPR
        self.heads = Heads(feat, head_hidden, blocks, seed, "l2m.heads", dtype)

    def __call__(self, points, z=None, shape=None, expr=None):
        if points.ndim != 3 or points.shape[2] != 3:
            raise ValueError(f"landmarks must be B x N x 3, got {points.shape}")
        feat = global_max_pool(self.encoder(points))
        if self.fuse is not None:
            feat = concat([feat, self.adapt_z(z), self.adapt_s(shape), self.adapt_e(expr)], axis=1)
        return self.heads(feat)
