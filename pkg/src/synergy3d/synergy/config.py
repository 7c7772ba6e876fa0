from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .. import textconfig
from ..morphable import N_EXPR, N_LANDMARKS, N_SHAPE

MODES = {
    "baseline": (False, False),
    "mafa": (True, False),
    "l2m": (False, True),
    "full": (True, True),
}

MAFA_ATTRIBUTES = ("point", "point+image", "all")
L2M_TARGETS = {"pose": ("p",), "shape+expr": ("s", "e"), "all": ("p", "s", "e")}


@dataclass(frozen=True)
class EncoderConfig:
    observation_dim: int = 3 * N_LANDMARKS
    hidden: tuple = (512, 512)
    n_cells: int = 49
    latent_dim: int = 1280
    pooling: str = "average"
    head_hidden: tuple = ()

    def __post_init__(self):
        if self.latent_dim <= 0 or self.n_cells <= 0:
            raise ValueError("latent_dim and n_cells must be positive")
        if self.pooling not in ("average", "max"):
            raise ValueError(f"pooling must be 'average' or 'max', got {self.pooling!r}")


@dataclass(frozen=True)
class MafaConfig:
    latent_dim: int = 1280
    low_level_channels: tuple = (64, 64)
    global_point_hidden: tuple = (128,)
    global_point_channels: int = 1024
    decoder_hidden: tuple = (512, 256, 128)
    attributes: str = "all"

    @property
    def low_level_dim(self) -> int:
        return self.low_level_channels[-1]

    @property
    def fused_dim(self) -> int:
        dim = self.global_point_channels
        if self.attributes in ("point+image", "all"):
            dim += self.latent_dim
        if self.attributes == "all":
            dim += N_SHAPE + N_EXPR
        return dim

    @property
    def per_point_dim(self) -> int:
        return self.fused_dim + self.low_level_dim


@dataclass(frozen=True)
class LossWeights:
    l3dmm: float = 0.02
    lmk: float = 0.03
    l3dmm_lmk: float = 0.02
    consistency: float = 0.001

    def __post_init__(self):
        for name in ("l3dmm", "lmk", "l3dmm_lmk", "consistency"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class NetConfig:
    """Everything that defines a synergy network; serialized as ``key = value`` text."""

    n_landmarks: int = N_LANDMARKS
    # observation encoder
    encoder_hidden: tuple = (512, 512)
    n_cells: int = 49
    latent_dim: int = 1280
    pooling: str = "average"
    head_hidden: tuple = ()
    # landmark refinement
    use_mafa: bool = True
    mafa_attributes: str = "all"
    low_level_channels: tuple = (64, 64)
    global_point_hidden: tuple = (128,)
    global_point_channels: int = 1024
    mafa_decoder_hidden: tuple = (512, 256, 128)
    # landmarks back to parameters
    use_l2m: bool = True
    l2m_channels: tuple = (64, 64, 1024)
    l2m_head_hidden: tuple = ()
    l2m_targets: str = "all"
    l2m_input: str = "refined"
    l2m_fuse_attributes: bool = False
    # losses and observation noise
    smooth_l1_beta: float = 1.0
    lambda_3dmm: float = 0.02
    lambda_lmk: float = 0.03
    lambda_3dmm_lmk: float = 0.02
    lambda_consistency: float = 0.001
    consistency_stop_grad: str = "none"
    noise_frac: float = 0.01
    batch_norm_eps: float = 1e-5
    batch_norm_momentum: float = 0.1

    def __post_init__(self):
        if self.mafa_attributes not in MAFA_ATTRIBUTES:
            raise ValueError(f"mafa_attributes must be one of {MAFA_ATTRIBUTES}")
        if self.l2m_targets not in L2M_TARGETS:
            raise ValueError(f"l2m_targets must be one of {tuple(L2M_TARGETS)}")
        if self.l2m_input not in ("refined", "coarse"):
            raise ValueError("l2m_input must be 'refined' or 'coarse'")
        if self.consistency_stop_grad not in ("none", "alpha", "alpha_hat"):
            raise ValueError("consistency_stop_grad must be none, alpha or alpha_hat")
        if self.smooth_l1_beta <= 0:
            raise ValueError("smooth_l1_beta must be positive")
        self.encoder, self.mafa, self.loss_weights  # validate sub-configs

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(3 * self.n_landmarks, self.encoder_hidden, self.n_cells,
                             self.latent_dim, self.pooling, self.head_hidden)

    @property
    def mafa(self) -> MafaConfig:
        return MafaConfig(self.latent_dim, self.low_level_channels, self.global_point_hidden,
                          self.global_point_channels, self.mafa_decoder_hidden, self.mafa_attributes)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_3dmm, self.lambda_lmk, self.lambda_3dmm_lmk, self.lambda_consistency)

    @property
    def mode(self) -> str:
        for name, flags in MODES.items():
            if flags == (self.use_mafa, self.use_l2m):
                return name
        raise AssertionError("unreachable")

    def with_mode(self, mode: str) -> "NetConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {tuple(MODES)}")
        use_mafa, use_l2m = MODES[mode]
        return dataclasses.replace(self, use_mafa=use_mafa, use_l2m=use_l2m)


def load_net_config(path) -> NetConfig:
    return textconfig.load(NetConfig, path)


def desk_config(**overrides) -> NetConfig:
    """Narrow network sized for CPU ablation runs of a few minutes each."""
    values = dict(
        encoder_hidden=(256,), n_cells=2, latent_dim=256,
        low_level_channels=(16, 16), global_point_hidden=(32,), global_point_channels=64,
        mafa_decoder_hidden=(64, 32), l2m_channels=(16, 32, 64),
    )
    values.update(overrides)
    return NetConfig(**values)
