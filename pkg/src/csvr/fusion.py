"""Integration layer fusing the dynamic and static features.

f_s is batch-normalised, re-scaled and shifted by parameters computed from
f_d, then blended back with f_s through a sigmoid attention mask. The maps
from f_d and from the normalised f_s are 1x1 convolutions over a length-C
vector, i.e. dense C x C affine maps.
"""

from __future__ import annotations

import logging

import torch
from torch import nn

from .exceptions import DataShapeError

log = logging.getLogger(__name__)

EPS = 1e-5


def batch_normalize(f_s: torch.Tensor, eps: float = EPS):
    """Return ``(f_bar, mu, sigma)`` with channelwise batch statistics.

    sigma is the population standard deviation floored at ``eps``.
    """
    if f_s.dim() != 2 or f_s.shape[0] < 1:
        raise DataShapeError(f"expected a [B, C] batch, got {tuple(f_s.shape)}")
    if f_s.shape[0] == 1:
        log.warning("batch_normalize called with B=1; normalised feature is identically zero")
    mu = f_s.mean(dim=0)
    var = ((f_s - mu) ** 2).mean(dim=0)
    sigma = torch.sqrt(torch.clamp(var, min=eps * eps))
    return (f_s - mu) / sigma, mu, sigma


class IntegrationLayer(nn.Module):
    def __init__(self, dim: int, eps: float = EPS, momentum: float = 0.1):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.momentum = momentum
        self.gamma_map = nn.Linear(dim, dim)
        self.beta_map = nn.Linear(dim, dim)
        self.mask_map = nn.Linear(dim, dim)
        with torch.no_grad():
            self.gamma_map.bias.add_(1.0)
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def reset_bias_only(self):
        """Zero weights, gamma bias 1, beta and mask biases 0."""
        with torch.no_grad():
            for lin in (self.gamma_map, self.beta_map, self.mask_map):
                lin.weight.zero_()
                lin.bias.zero_()
            self.gamma_map.bias.fill_(1.0)
        return self

    def normalize(self, f_s: torch.Tensor) -> torch.Tensor:
        if self.training:
            f_bar, mu, sigma = batch_normalize(f_s, self.eps)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1 - m).add_(m * mu.detach())
                self.running_var.mul_(1 - m).add_(m * (sigma.detach() ** 2))
            return f_bar
        sigma = torch.sqrt(torch.clamp(self.running_var, min=self.eps * self.eps))
        return (f_s - self.running_mean) / sigma

    def modulation(self, f_d: torch.Tensor):
        if f_d.shape[-1] != self.dim:
            raise DataShapeError(f"f_d has dimension {f_d.shape[-1]}, expected {self.dim}")
        return self.gamma_map(f_d), self.beta_map(f_d)

    def mask(self, f_bar: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mask_map(f_bar))

    def forward(self, f_d: torch.Tensor, f_s: torch.Tensor) -> torch.Tensor:
        if f_d.shape != f_s.shape:
            raise DataShapeError(f"f_d {tuple(f_d.shape)} and f_s {tuple(f_s.shape)} differ")
        f_bar = self.normalize(f_s)
        gamma, beta = self.modulation(f_d)
        denorm = gamma * f_bar + beta
        m = self.mask(f_bar)
        return (1 - m) * denorm + m * f_s


def modulation_params(f_d: torch.Tensor, layer: IntegrationLayer):
    """``(gamma_d, beta_d)``, both shaped like ``f_d``."""
    return layer.modulation(f_d)


def integrate(f_d: torch.Tensor, f_s: torch.Tensor, layer: IntegrationLayer) -> torch.Tensor:
    """f_i for a batch: (1 - M) * (gamma_d * f_bar + beta_d) + M * f_s."""
    return layer(f_d, f_s)
