"""The full synergy pipeline: observation -> parameters -> landmarks -> refined
landmarks -> parameters again."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..morphable import N_PARAMS, N_POSE, FaceBasis, ParamVector, compose_pose_params, decompose_pose
from ..tensorcore.layers import Module
from ..tensorcore.tensor import Tensor, affine, concat, matmul
from . import losses
from .config import L2M_TARGETS, NetConfig
from .networks import LandmarkToParams, Mafa, ObservationEncoder

BLOCKS = ParamVector.BLOCKS


@dataclass
class ForwardResult:
    z: Tensor
    alpha: Tensor  # whitened, B x 62
    coarse: Tensor  # B x N x 3
    refined: Tensor
    alpha_hat: dict | None  # whitened blocks

    def __iter__(self):
        return iter((self.alpha, self.coarse, self.refined, self.alpha_hat))

    def __len__(self):
        return 4


class SynergyNet(Module):
    def __init__(self, cfg: NetConfig, basis: FaceBasis | None = None, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.encoder = ObservationEncoder(cfg.encoder, seed, dtype)
        if cfg.use_mafa:
            self.mafa = Mafa(cfg.mafa, seed, dtype)
        if cfg.use_l2m:
            fuse = cfg.latent_dim if cfg.l2m_fuse_attributes else None
            self.l2m = LandmarkToParams(cfg.l2m_channels, cfg.l2m_head_hidden, L2M_TARGETS[cfg.l2m_targets],
                                        seed, dtype, fuse)
        self.register_buffer("param_mean", np.zeros(N_PARAMS, dtype=dtype))
        self.register_buffer("param_std", np.ones(N_PARAMS, dtype=dtype))
        # fixed input standardization, the analogue of image mean/std normalization
        obs_dim = cfg.encoder.observation_dim
        self.register_buffer("obs_mean", np.zeros(obs_dim, dtype=dtype))
        self.register_buffer("obs_scale", np.ones(obs_dim, dtype=dtype))
        self.register_buffer("point_mean", np.zeros(3, dtype=dtype))
        self.register_buffer("point_scale", np.ones(3, dtype=dtype))
        for mod in self._all_modules():
            for name, value in (("eps", cfg.batch_norm_eps), ("momentum", cfg.batch_norm_momentum)):
                if hasattr(mod, "running_mean"):
                    setattr(mod, name, value)
        self._lmk_mean = None
        self._lmk_basis = None
        if basis is not None:
            self.attach_basis(basis)

    def _all_modules(self):
        stack = [self]
        while stack:
            m = stack.pop()
            yield m
            stack.extend(m._children.values())

    def attach_basis(self, basis: FaceBasis):
        if basis.n_landmarks != self.cfg.n_landmarks:
            raise ValueError(f"basis has {basis.n_landmarks} landmarks, network expects {self.cfg.n_landmarks}")
        mean_l, joint_l = basis.landmark_subset()
        self._lmk_mean = Tensor(mean_l.astype(self.dtype))
        self._lmk_basis = Tensor(np.ascontiguousarray(joint_l.T).astype(self.dtype))

    def set_param_stats(self, mean, std):
        std = np.where(np.asarray(std) > 1e-6, std, 1.0)
        self.param_mean[...] = mean
        self.param_std[...] = std

    def set_input_stats(self, observations, landmarks):
        """Standardize inputs from training data: observations S x D, landmarks S x 3 x N."""
        obs = np.asarray(observations, dtype=np.float64)
        sd = obs.std(axis=0)
        self.obs_mean[...] = obs.mean(axis=0)
        self.obs_scale[...] = 1.0 / np.where(sd > 1e-6, sd, 1.0)
        pts = np.asarray(landmarks, dtype=np.float64).transpose(1, 0, 2).reshape(3, -1)
        sd = pts.std(axis=1)
        self.point_mean[...] = pts.mean(axis=1)
        self.point_scale[...] = 1.0 / np.where(sd > 1e-6, sd, 1.0)

    def _points_in(self, pts):
        return (pts - self.point_mean) * self.point_scale

    def whiten(self, params):
        return (np.asarray(params) - self.param_mean) / self.param_std

    def unwhiten(self, alpha):
        return np.asarray(alpha) * self.param_std + self.param_mean

    # -- pieces --------------------------------------------------------------

    def encode_and_regress(self, obs):
        z, heads = self.encoder(obs)
        return z, concat([heads["p"], heads["s"], heads["e"]], axis=1)

    def landmarks_from_params(self, alpha):
        """Differentiable morphable reconstruction and similarity transform on landmark rows.

        The pose block is used as given ([scale*R | t]); no projection onto SO(3).
        """
        if self._lmk_basis is None:
            raise RuntimeError("attach a FaceBasis before running the geometry path")
        b = alpha.shape[0]
        raw = alpha * self.param_std + self.param_mean
        pose = raw[:, :N_POSE].reshape(b, 3, 4)
        frontal = affine(raw[:, N_POSE:], self._lmk_basis, self._lmk_mean)
        frontal = frontal.reshape(b, -1, 3).transpose(0, 2, 1)
        aligned = matmul(pose[:, :, :3], frontal) + pose[:, :, 3:]
        return aligned.transpose(0, 2, 1)

    def forward(self, obs) -> ForwardResult:
        obs = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=self.dtype))
        z, alpha = self.encode_and_regress((obs - self.obs_mean) * self.obs_scale)
        shape, expr = alpha[:, BLOCKS["s"]], alpha[:, BLOCKS["e"]]
        coarse = self.landmarks_from_params(alpha)
        if self.cfg.use_mafa:
            refined = self.mafa(coarse, z, shape, expr, self._points_in(coarse))
        else:
            refined = coarse
        alpha_hat = None
        if self.cfg.use_l2m:
            src = self._points_in(refined if self.cfg.l2m_input == "refined" else coarse)
            if self.cfg.l2m_fuse_attributes:
                alpha_hat = self.l2m(src, z, shape, expr)
            else:
                alpha_hat = self.l2m(src)
        return ForwardResult(z, alpha, coarse, refined, alpha_hat)

    __call__ = forward

    def losses(self, out: ForwardResult, alpha_gt, lmk_gt):
        """Loss components for a batch; ``alpha_gt`` whitened B x 62, ``lmk_gt`` B x N x 3."""
        cfg = self.cfg
        comps = {
            "l3dmm": losses.loss_3dmm(out.alpha, Tensor(np.asarray(alpha_gt, dtype=self.dtype))),
            "lmk": losses.loss_landmark(out.refined, Tensor(np.asarray(lmk_gt, dtype=self.dtype)),
                                        cfg.smooth_l1_beta),
        }
        if out.alpha_hat is not None:
            gt = Tensor(np.asarray(alpha_gt, dtype=self.dtype))
            comps["l3dmm_lmk"] = losses.loss_landmark_geometry(out.alpha_hat, gt)
            comps["consistency"] = losses.loss_consistency(out.alpha, out.alpha_hat, cfg.consistency_stop_grad)
        return comps, losses.loss_total(comps, cfg.loss_weights)

    def zero_mafa_output(self):
        self.mafa.zero_last()

    # -- inference -------------------------------------------------------------

    def predict(self, observations, batch_size=512):
        """Eval-mode outputs as float64 numpy arrays.

        Returns (params S x 62 with the pose block projected to a scaled
        rotation, refined landmarks S x 3 x N, coarse landmarks S x 3 x N).
        """
        was_training = self.training
        self.eval()
        obs = np.asarray(observations, dtype=self.dtype)
        if obs.ndim == 1:
            obs = obs[None]
        params, refined, coarse = [], [], []
        try:
            for start in range(0, len(obs), batch_size):
                out = self.forward(Tensor(obs[start:start + batch_size]))
                raw = self.unwhiten(out.alpha.data).astype(np.float64)
                for row in raw:
                    try:
                        row[:N_POSE] = compose_pose_params(decompose_pose(row[:N_POSE]))
                    except ValueError:
                        pass  # degenerate pose stays raw; callers see it in the metrics
                params.append(raw)
                refined.append(out.refined.data.transpose(0, 2, 1).astype(np.float64))
                coarse.append(out.coarse.data.transpose(0, 2, 1).astype(np.float64))
        finally:
            self.train(was_training)
        return np.concatenate(params), np.concatenate(refined), np.concatenate(coarse)


def synergy_forward(observation, basis: FaceBasis, model: SynergyNet, mode: str | None = None):
    """Run the cycle once; ``mode`` (baseline/mafa/l2m/full) must match the model's config."""
    if mode is not None and mode != model.cfg.mode:
        raise ValueError(f"model was built for mode {model.cfg.mode!r}, not {mode!r}")
    if model._lmk_basis is None:
        model.attach_basis(basis)
    return model.forward(observation)
