"""Slim U-Net backbone and the probability head."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


@dataclass
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 16
    depth: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ConfigError(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class ConvBlock(nn.Sequential):
    def __init__(self, in_c: int, out_c: int):
        super().__init__(
            nn.Conv2d(in_c, out_c, 3, padding=1, bias=False),
            nn.GroupNorm(_groups(out_c), out_c),
            nn.LeakyReLU(0.01),
            nn.Conv2d(out_c, out_c, 3, padding=1, bias=False),
            nn.GroupNorm(_groups(out_c), out_c),
            nn.LeakyReLU(0.01),
        )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; ``depth`` pooling steps."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(config.depth + 1)]
        self.inc = ConvBlock(config.in_channels, widths[0])
        self.down = nn.ModuleList(ConvBlock(widths[i], widths[i + 1]) for i in range(config.depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(config.depth))
        )
        self.dec = nn.ModuleList(ConvBlock(2 * widths[i], widths[i]) for i in reversed(range(config.depth)))
        self.head = nn.Conv2d(widths[0], config.num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_input(x, self.config)
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([skips.pop(), up(h)], dim=1))
        return self.head(h)


def check_input(x: torch.Tensor, config: NetworkConfig) -> None:
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(f"expected images [B, {config.in_channels}, H, W], got {list(x.shape)}")
    k = 2 ** config.depth
    if x.shape[-1] % k or x.shape[-2] % k:
        raise ShapeError(f"spatial size {tuple(x.shape[-2:])} not divisible by 2**depth = {k}")


def init_network(config: NetworkConfig) -> UNet:
    """Build a network whose parameters depend only on ``config`` (including its seed)."""
    config.validate()
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(config.seed)
        net = UNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return net


def forward(net: nn.Module, images: torch.Tensor) -> torch.Tensor:
    return net(images)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities over dim 1, max-subtracted for stability."""
    shifted = logits - logits.amax(dim=1, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=1, keepdim=True)


def parameter_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def zero_parameters(net: nn.Module) -> None:
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()


@torch.no_grad()
def predict_proba(net: nn.Module, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    was_training = net.training
    net.eval()
    out = [softmax(net(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    net.train(was_training)
    return torch.cat(out)
