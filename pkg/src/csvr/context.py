"""Discriminative context matching between clips and their I-frames.

The V-Network is a small residual 3D-conv backbone; its width list comes from
``ModelConfig.encoder_widths`` and stands in for the usual video backbones.
The I-Network is the 2D analogue. Both end in global average pooling and a
two-layer projection head.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .exceptions import DataShapeError, ZeroNormError
from .layers import activation, check_shape, mlp2


class _Res3d(nn.Module):
    def __init__(self, c_in, c_out, act):
        super().__init__()
        self.conv1 = nn.Conv3d(c_in, c_out, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(c_out)
        self.skip = nn.Sequential(nn.Conv3d(c_in, c_out, 1, stride=2, bias=False), nn.BatchNorm3d(c_out))
        self.act = activation(act)

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        return self.act(self.bn2(self.conv2(h)) + self.skip(x))


class _Res2d(nn.Module):
    def __init__(self, c_in, c_out, act):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride=2, bias=False), nn.BatchNorm2d(c_out))
        self.act = activation(act)

    def forward(self, x):
        h = self.act(self.bn1(self.conv1(x)))
        return self.act(self.bn2(self.conv2(h)) + self.skip(x))


class VideoEncoder(nn.Module):
    """V-Network: clip ``[B, T, Ch, H, W]`` -> (x_pool ``[B, C1]``, x* ``[B, C]``)."""

    def __init__(self, cfg: ModelConfig, num_classes: int | None = None, dropout: float = 0.3):
        super().__init__()
        self.cfg = cfg
        widths = cfg.encoder_widths
        act = cfg.activation
        self.stem = nn.Sequential(
            nn.Conv3d(cfg.channels, widths[0], 3, stride=(1, 2, 2), padding=1, bias=False),
            nn.BatchNorm3d(widths[0]), activation(act))
        self.blocks = nn.Sequential(*[_Res3d(a, b, act) for a, b in zip(widths[:-1], widths[1:])])
        self.head = mlp2(widths[-1], widths[-1], cfg.feature_dim, act)
        self.classifier = None
        if num_classes is not None:
            self.reset_classifier(num_classes, dropout)

    def reset_classifier(self, num_classes: int, dropout: float = 0.3):
        """Attach a fresh classifier over x_pool: parameter-free BN, dropout, linear.

        The BN keeps the head equally well conditioned whatever the scale of
        the pretrained features.
        """
        dim = self.cfg.video_feature_dim
        self.classifier = nn.Sequential(nn.BatchNorm1d(dim, affine=False), nn.Dropout(dropout),
                                        nn.Linear(dim, num_classes))
        return self.classifier

    def feature_map(self, clip: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        check_shape(clip, (cfg.clip_len, cfg.channels, *cfg.frame_size), "clip")
        return self.blocks(self.stem(clip.transpose(1, 2)))

    def pool(self, clip: torch.Tensor) -> torch.Tensor:
        return self.feature_map(clip).mean(dim=(2, 3, 4))

    def forward(self, clip: torch.Tensor):
        x_pool = self.pool(clip)
        return x_pool, self.head(x_pool)

    def logits(self, clip: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise RuntimeError("no classifier attached; call reset_classifier first")
        return self.classifier(self.pool(clip))


class IFrameEncoder(nn.Module):
    """I-Network: frame ``[B, Ch, H, W]`` -> (z_pool ``[B, C2]``, z* ``[B, C]``)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.iframe_widths
        act = cfg.activation
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.channels, widths[0], 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]), activation(act))
        self.blocks = nn.Sequential(*[_Res2d(a, b, act) for a, b in zip(widths[:-1], widths[1:])])
        self.head = mlp2(widths[-1], widths[-1], cfg.feature_dim, act)

    def feature_map(self, frame: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        check_shape(frame, (cfg.channels, *cfg.frame_size), "I-frame")
        return self.blocks(self.stem(frame))

    def forward(self, frame: torch.Tensor):
        z_pool = self.feature_map(frame).mean(dim=(2, 3))
        return z_pool, self.head(z_pool)


def encode_clip(V: VideoEncoder, clip: torch.Tensor):
    single = clip.dim() == 4
    x_pool, x_star = V(clip.unsqueeze(0) if single else clip)
    return (x_pool[0], x_star[0]) if single else (x_pool, x_star)


def encode_iframe(I: IFrameEncoder, frame: torch.Tensor) -> torch.Tensor:
    single = frame.dim() == 3
    _, z_star = I(frame.unsqueeze(0) if single else frame)
    return z_star[0] if single else z_star


def _norms(v: torch.Tensor, what: str) -> torch.Tensor:
    n = torch.linalg.vector_norm(v, dim=-1)
    if bool((n == 0).any()):
        raise ZeroNormError(f"{what} has zero norm; cosine similarity undefined")
    return n


def cosine_similarity(z: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """(z . x) / (|z| |x|) along the last axis, broadcasting leading axes."""
    return (z * x).sum(dim=-1) / (_norms(z, "z") * _norms(x, "x"))


def _cos_matrix(x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """cos(z_m, x_i) for every row i of ``x`` and row m of ``z``."""
    return (x @ z.T) / (_norms(x, "x")[:, None] * _norms(z, "z")[None, :])


def mi_infonce(x_stars: torch.Tensor, positives, tau: float, negatives=None) -> torch.Tensor:
    """Multi-instance InfoNCE over clips and their I-frames.

    ``positives[i]`` is ``[n_i, C]``: every I-frame of clip ``i``.
    ``negatives[i]`` defaults to the I-frames of every other clip in the batch.
    All positives of a clip share one softmax ratio.
    """
    batch = x_stars.shape[0]
    if batch < 1 or len(positives) != batch:
        raise DataShapeError("need one positive list per clip")
    for i, pos in enumerate(positives):
        if pos.dim() != 2 or pos.shape[0] == 0:
            raise DataShapeError(f"clip {i} has no positive I-frames")
    if negatives is None:
        negatives = [torch.cat([positives[k] for k in range(batch) if k != i], dim=0)
                     if batch > 1 else x_stars.new_zeros((0, x_stars.shape[1]))
                     for i in range(batch)]
    terms = []
    for i in range(batch):
        x = x_stars[i:i + 1]
        pos = _cos_matrix(x, positives[i])[0] / tau
        if negatives[i].shape[0]:
            neg = _cos_matrix(x, negatives[i])[0] / tau
            everything = torch.cat([pos, neg])
        else:
            everything = pos
        terms.append(torch.logsumexp(everything, 0) - torch.logsumexp(pos, 0))
    return torch.stack(terms).mean()


def _single_positives(x_stars, z_stars):
    if isinstance(z_stars, (list, tuple)):
        for i, z in enumerate(z_stars):
            if z.dim() == 2 and z.shape[0] != 1:
                raise DataShapeError(
                    f"clip {i} has {z.shape[0]} positives; subsample one I-frame per clip")
        z_stars = torch.stack([z.reshape(-1) for z in z_stars])
    if z_stars.shape != x_stars.shape:
        raise DataShapeError(f"x* {tuple(x_stars.shape)} vs z* {tuple(z_stars.shape)}")
    return z_stars


def infonce(x_stars: torch.Tensor, z_stars, tau: float) -> torch.Tensor:
    """Single-positive InfoNCE; I-frames of the other clips are the negatives."""
    z_stars = _single_positives(x_stars, z_stars)
    logits = _cos_matrix(x_stars, z_stars) / tau
    target = torch.arange(x_stars.shape[0], device=x_stars.device)
    return F.cross_entropy(logits, target)


def l2_match(x_stars: torch.Tensor, z_stars) -> torch.Tensor:
    """Batch mean of ||z* - x*||^2 (one positive per clip)."""
    z_stars = _single_positives(x_stars, z_stars)
    return ((z_stars - x_stars) ** 2).sum(dim=-1).mean()


def sample_negatives(owners, episode_ids, count: int, generator: torch.Generator | None = None):
    """Pick ``count`` I-frame rows per clip from clips of *other* episodes.

    ``owners[m]`` is the clip row owning I-frame ``m``; ``episode_ids[i]`` the
    episode of clip ``i``. Returns one index tensor per clip; it may be shorter
    than ``count`` if the batch holds too few foreign I-frames.
    """
    owners = torch.as_tensor(owners)
    episode_ids = torch.as_tensor(episode_ids)
    frame_episode = episode_ids[owners]
    picks = []
    for i in range(len(episode_ids)):
        pool = torch.nonzero(frame_episode != episode_ids[i]).flatten()
        if pool.numel() > count:
            pool = pool[torch.randperm(pool.numel(), generator=generator)[:count]]
        picks.append(pool)
    return picks
