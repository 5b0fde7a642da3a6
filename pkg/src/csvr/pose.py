"""Generative pose prediction: conditional 1D-conv GAN over pose sequences.

Pose tensors are time-major, ``[B, T, 2N]``; the networks transpose to
channels-first internally.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import POSE_TAP_LAYERS, ModelConfig
from .exceptions import ConfigValueError, DataShapeError, GradientUnavailableError
from .layers import activation, check_shape, mlp2

ENCODER_DEPTH = 6
# Frame-to-frame joint motion is ~0.01 in normalised image units; both networks
# work on displacements from the last observed pose, multiplied by this factor.
MOTION_SCALE = 10.0


def relative_motion(poses: torch.Tensor, pose_in: torch.Tensor) -> torch.Tensor:
    """Scaled displacement of ``poses`` from the last observed pose in ``pose_in``."""
    return MOTION_SCALE * (poses - pose_in[:, -1:, :])


class PoseGenerator(nn.Module):
    """Six-layer temporal-conv encoder, up-conv decoder, and the f_d align head.

    The encoder sees displacements from the last observed pose, so its features
    describe motion rather than where the actor stands. The decoder predicts
    offsets from that pose; noise enters by concatenation at the bottleneck.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.pose_width
        act = cfg.activation
        layers = []
        c_in = cfg.pose_dim
        for k in range(1, ENCODER_DEPTH + 1):
            stride = 2 if k % 2 == 0 else 1
            layers.append(nn.Sequential(nn.Conv1d(c_in, width, 3, stride=stride, padding=1),
                                        activation(act)))
            c_in = width
        self.encoder = nn.ModuleList(layers)
        enc_len = cfg.clip_len
        for k in range(1, ENCODER_DEPTH + 1):
            if k % 2 == 0:
                enc_len = (enc_len - 1) // 2 + 1
        self.seed_len = math.ceil(cfg.future_len / 4)
        self.bottleneck = nn.Linear(width * enc_len + cfg.noise_dims[0], width * self.seed_len)
        self.decoder = nn.Sequential(
            activation(act),
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1), activation(act),
            nn.ConvTranspose1d(width, width, 4, stride=2, padding=1), activation(act),
        )
        self.to_pose = nn.Conv1d(width, cfg.pose_dim, 1)
        self.align_conv = nn.Sequential(nn.Conv1d(width, width, 3, padding=1), activation(act))
        self.align_mlp = mlp2(width, width, cfg.feature_dim, act)

    def _check(self, pose_in):
        check_shape(pose_in, (self.cfg.clip_len, self.cfg.pose_dim), "pose_in")

    def encode(self, pose_in: torch.Tensor) -> list:
        """Outputs of encoder layers 1..6, each ``[B, width, T_k]``."""
        self._check(pose_in)
        h = relative_motion(pose_in, pose_in).transpose(1, 2)
        outs = []
        for layer in self.encoder:
            h = layer(h)
            outs.append(h)
        return outs

    def forward(self, pose_in: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        check_shape(z, (self.cfg.noise_dims[0],), "z_p")
        if z.shape[0] != pose_in.shape[0]:
            raise DataShapeError(f"z_p batch {z.shape[0]} != pose batch {pose_in.shape[0]}")
        h = self.encode(pose_in)[-1]
        code = self.bottleneck(torch.cat([h.flatten(1), z], dim=1))
        code = code.view(-1, self.cfg.pose_width, self.seed_len)
        out = self.to_pose(self.decoder(code)[:, :, :self.cfg.future_len]).transpose(1, 2)
        return pose_in[:, -1:, :] + out / MOTION_SCALE

    def dynamic_feature(self, pose_in: torch.Tensor, layer: int | None = None) -> torch.Tensor:
        layer = self.cfg.pose_tap_layer if layer is None else layer
        if layer not in POSE_TAP_LAYERS:
            raise ConfigValueError("layer", f"pose tap layer must be one of {POSE_TAP_LAYERS}")
        h = self.encode(pose_in)[layer - 1]
        return self.align_mlp(self.align_conv(h).mean(dim=2))


class PoseDiscriminator(nn.Module):
    """Scores a pose sequence given the observed poses it should continue.

    The condition is projected per frame and concatenated along time.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = cfg.pose_width
        act = cfg.activation
        self.cond_proj = nn.Linear(cfg.pose_dim, cfg.pose_dim)
        self.body = nn.Sequential(
            nn.Conv1d(cfg.pose_dim, width, 3, padding=1), activation(act),
            nn.Conv1d(width, width, 3, stride=2, padding=1), activation(act),
            nn.Conv1d(width, width, 3, stride=2, padding=1), activation(act),
        )
        self.score = nn.Linear(width, 1)

    def forward(self, poses: torch.Tensor, pose_in: torch.Tensor) -> torch.Tensor:
        check_shape(poses, (self.cfg.future_len, self.cfg.pose_dim), "pose sequence")
        check_shape(pose_in, (self.cfg.clip_len, self.cfg.pose_dim), "pose condition")
        seq = torch.cat([self.cond_proj(relative_motion(pose_in, pose_in)),
                         relative_motion(poses, pose_in)], dim=1).transpose(1, 2)
        return self.score(self.body(seq).mean(dim=2)).squeeze(1)


def pose_generate(G: PoseGenerator, pose_in: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Predict the next T' poses. Accepts a single sequence or a batch."""
    single = pose_in.dim() == 2
    if single:
        pose_in, z = pose_in.unsqueeze(0), z.reshape(1, -1)
    out = G(pose_in, z)
    return out[0] if single else out


def pose_recon_loss(pose_gen: torch.Tensor, pose_gt: torch.Tensor) -> torch.Tensor:
    """Mean over frames of the squared per-frame pose error (batch-averaged)."""
    if pose_gen.shape != pose_gt.shape:
        raise DataShapeError(f"pose shapes differ: {tuple(pose_gen.shape)} vs {tuple(pose_gt.shape)}")
    return ((pose_gen - pose_gt) ** 2).sum(dim=-1).mean()


def gradient_penalty(D, pose_real, pose_fake, pose_in, eps=None, generator=None) -> torch.Tensor:
    """WGAN-GP term: mean of (||grad_P D(P | pose_in)||_2 - 1)^2 at interpolates.

    ``eps`` holds one mixing weight per sample; drawn from U(0, 1) when omitted.
    """
    if pose_real.shape != pose_fake.shape:
        raise DataShapeError("real and fake pose batches must share a shape")
    batch = pose_real.shape[0]
    if eps is None:
        eps = torch.rand(batch, generator=generator, dtype=pose_real.dtype, device=pose_real.device)
    eps = eps.reshape(batch, *([1] * (pose_real.dim() - 1)))
    mixed = eps * pose_real + (1 - eps) * pose_fake
    if not mixed.requires_grad:
        mixed = mixed.clone().requires_grad_(True)
    scores = D(mixed, pose_in)
    if not isinstance(scores, torch.Tensor) or not scores.requires_grad:
        raise GradientUnavailableError("discriminator output carries no autograd graph")
    (grad,) = torch.autograd.grad(scores.sum(), mixed, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(mixed)
    norms = torch.linalg.vector_norm(grad.reshape(batch, -1), dim=1)
    return ((norms - 1) ** 2).mean()


class PoseLosses(NamedTuple):
    generator: torch.Tensor
    discriminator: torch.Tensor
    recon: torch.Tensor
    penalty: torch.Tensor
    pose_gen: torch.Tensor


def pose_discriminator_loss(D, pose_in, pose_gt, pose_gen, gp_lambda, eps=None, generator=None):
    """Logistic real/fake loss plus the weighted gradient penalty.

    Returns ``(loss, penalty)``. ``pose_gen`` should already be detached when
    generator parameters must not receive gradient.
    """
    real = D(pose_gt, pose_in)
    fake = D(pose_gen, pose_in)
    adv = -(F.logsigmoid(real).mean() + F.logsigmoid(-fake).mean())
    if gp_lambda == 0:
        penalty = torch.zeros((), dtype=adv.dtype, device=adv.device)
        return adv, penalty
    penalty = gradient_penalty(D, pose_gt, pose_gen, pose_in, eps, generator)
    return adv + gp_lambda * penalty, penalty


def pose_generator_loss(D, pose_in, pose_gt, pose_gen, non_saturating=False, recon_weight=1.0):
    """Adversarial generator term plus the weighted pose L2 term; returns ``(loss, recon)``."""
    fake = D(pose_gen, pose_in)
    adv = -F.logsigmoid(fake).mean() if non_saturating else F.logsigmoid(-fake).mean()
    recon = pose_recon_loss(pose_gen, pose_gt)
    return adv + recon_weight * recon, recon


def pose_branch_losses(G, D, pose_in, pose_gt, z, gp_lambda=10.0, non_saturating=False,
                       eps=None, generator=None, recon_weight=1.0) -> PoseLosses:
    """Both sides of the pose objective from one shared generator pass."""
    if pose_in.shape[0] == 0:
        raise DataShapeError("empty pose batch")
    pose_gen = G(pose_in, z)
    loss_d, penalty = pose_discriminator_loss(D, pose_in, pose_gt, pose_gen.detach(), gp_lambda,
                                              eps, generator)
    loss_g, recon = pose_generator_loss(D, pose_in, pose_gt, pose_gen, non_saturating,
                                           recon_weight)
    return PoseLosses(loss_g, loss_d, recon, penalty, pose_gen)


def extract_dynamic_feature(G: PoseGenerator, pose_in: torch.Tensor, layer: int = 6) -> torch.Tensor:
    """f_d in R^C from encoder layer ``layer`` (2, 4 or 6)."""
    single = pose_in.dim() == 2
    out = G.dynamic_feature(pose_in.unsqueeze(0) if single else pose_in, layer)
    return out[0] if single else out
