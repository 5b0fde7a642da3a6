"""Collaborative video generation: reconstructor and predictor GANs.

Generators are conditioned on the integrated feature f_i plus noise; the
discriminators score clips alone. Clip tensors are ``[B, T, Ch, H, W]``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .exceptions import DataShapeError
from .layers import activation, check_shape


class VideoGenerator(nn.Module):
    """Projects (f_i, z) to a coarse volume, then upsamples x2 in (t, h, w) twice.

    The last x2 spatial step runs per frame; a sigmoid bounds pixels to [0, 1].
    """

    def __init__(self, cfg: ModelConfig, out_len: int, noise_dim: int):
        super().__init__()
        self.cfg = cfg
        self.out_len = out_len
        self.noise_dim = noise_dim
        g = cfg.generator_width
        h, w = cfg.frame_size
        self.seed_shape = (2 * g, math.ceil(out_len / 4), math.ceil(h / 8), math.ceil(w / 8))
        self.project = nn.Linear(cfg.feature_dim + noise_dim, math.prod(self.seed_shape))
        self.act = activation(cfg.activation)
        self.up1 = nn.Conv3d(2 * g, g, 3, padding=1)
        self.up2 = nn.Conv3d(g, g, 3, padding=1)
        self.to_rgb = nn.Conv2d(g, cfg.channels, 3, padding=1)

    def forward(self, f_i: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        check_shape(f_i, (self.cfg.feature_dim,), "f_i")
        check_shape(z, (self.noise_dim,), "z_v")
        if f_i.shape[0] != z.shape[0]:
            raise DataShapeError("f_i and z_v batch sizes differ")
        h = self.act(self.project(torch.cat([f_i, z], dim=1))).view(-1, *self.seed_shape)
        h = self.act(self.up1(F.interpolate(h, scale_factor=2)))
        h = self.act(self.up2(F.interpolate(h, scale_factor=2)))
        b, c, t, hh, ww = h.shape
        frames = h.transpose(1, 2).reshape(b * t, c, hh, ww)
        frames = F.interpolate(frames, scale_factor=2, mode="bilinear", align_corners=False)
        video = torch.sigmoid(self.to_rgb(frames)).view(b, t, -1, 2 * hh, 2 * ww)
        height, width = self.cfg.frame_size
        return video[:, :self.out_len, :, :height, :width]


class VideoDiscriminator(nn.Module):
    """Single-scale 3D-conv critic returning one real score per clip."""

    def __init__(self, cfg: ModelConfig, clip_len: int):
        super().__init__()
        self.cfg = cfg
        self.clip_len = clip_len
        d = cfg.discriminator_width
        act = cfg.activation
        self.body = nn.Sequential(
            nn.Conv3d(cfg.channels, d, 4, stride=2, padding=1), activation(act),
            nn.Conv3d(d, 2 * d, 4, stride=2, padding=1), activation(act),
            nn.Conv3d(2 * d, 4 * d, 3, stride=2, padding=1), activation(act),
        )
        self.score = nn.Linear(4 * d, 1)

    def forward(self, clip: torch.Tensor) -> torch.Tensor:
        check_shape(clip, (self.clip_len, self.cfg.channels, *self.cfg.frame_size), "clip")
        return self.score(self.body(clip.transpose(1, 2)).mean(dim=(2, 3, 4))).squeeze(1)


def generate_video(G: VideoGenerator, f_i: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    single = f_i.dim() == 1
    out = G(f_i.unsqueeze(0) if single else f_i, z.reshape(1, -1) if single else z)
    return out[0] if single else out


def video_pixel_loss(gen: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over (t, h, w) of the squared per-pixel colour error; channels summed."""
    if gen.shape != target.shape:
        raise DataShapeError(f"clip shapes differ: {tuple(gen.shape)} vs {tuple(target.shape)}")
    return ((gen - target) ** 2).sum(dim=-3).mean()


class VideoLosses(NamedTuple):
    recon_G: torch.Tensor
    recon_D: torch.Tensor
    pred_G: torch.Tensor
    pred_D: torch.Tensor
    video_G: torch.Tensor
    recon_pixel: torch.Tensor
    pred_pixel: torch.Tensor


def _gan_terms(G, D, f_i, target, z, non_saturating):
    fake = G(f_i, z)
    real_score = D(target)
    fake_score_d = D(fake.detach())
    loss_d = -(F.logsigmoid(real_score).mean() + F.logsigmoid(-fake_score_d).mean())
    fake_score = D(fake)
    adv = -F.logsigmoid(fake_score).mean() if non_saturating else F.logsigmoid(-fake_score).mean()
    pixel = video_pixel_loss(fake, target)
    return adv + pixel, loss_d, pixel


def video_branch_losses(recon, pred, f_i, target_recon, target_pred, z_recon, z_pred,
                        use_recon=True, use_pred=True, non_saturating=False) -> VideoLosses:
    """Losses of both video GANs from one batch of integrated features.

    ``recon``/``pred`` are ``(generator, discriminator)`` pairs. The generator
    side of the branch is the average of the two generator objectives; with
    one objective disabled it is that objective alone and the other reads 0.
    """
    if f_i.shape[0] == 0:
        raise DataShapeError("empty feature batch")
    if not (use_recon or use_pred):
        raise ValueError("at least one of the video objectives must be active")
    zero = f_i.new_zeros(())
    r_g = r_d = r_pix = p_g = p_d = p_pix = zero
    if use_recon:
        r_g, r_d, r_pix = _gan_terms(*recon, f_i, target_recon, z_recon, non_saturating)
    if use_pred:
        p_g, p_d, p_pix = _gan_terms(*pred, f_i, target_pred, z_pred, non_saturating)
    if use_recon and use_pred:
        video = (r_g + p_g) / 2
    else:
        video = r_g if use_recon else p_g
    return VideoLosses(r_g, r_d, p_g, p_d, video, r_pix, p_pix)


def average_video_loss(recon_loss, pred_loss):
    return (recon_loss + pred_loss) / 2
