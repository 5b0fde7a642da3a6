import torch
from torch import nn

from .exceptions import DataShapeError


def activation(name: str) -> nn.Module:
    if name == "silu":
        return nn.SiLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(0.2)
    raise ValueError(f"unknown activation {name!r}")


def mlp2(d_in: int, d_hidden: int, d_out: int, act: str) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_hidden), activation(act), nn.Linear(d_hidden, d_out))


def check_shape(x: torch.Tensor, tail: tuple, what: str) -> None:
    """Raise DataShapeError unless ``x`` ends with ``tail`` (None matches any size)."""
    shape = tuple(x.shape)
    ok = len(shape) >= len(tail) and all(
        t is None or s == t for s, t in zip(shape[len(shape) - len(tail):], tail))
    if not ok:
        want = tuple("*" if t is None else t for t in tail)
        raise DataShapeError(f"{what}: expected trailing shape {want}, got {shape}")
