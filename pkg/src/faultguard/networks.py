"""Fully connected generator/discriminator pair shared by the ADS and the gray-box attacker."""

from __future__ import annotations

import torch
import torch.nn as nn

from faultguard.dataset import N_FEATURES

GENERATOR_WIDTHS = (128, 128, 128)
DISCRIMINATOR_WIDTHS = (512, 256, 128, 64)


class GeneratorNet(nn.Module):
    """latent -> 128 -> 128 -> 128 -> 51: four linear layers, ReLU between them, linear output."""

    def __init__(self, latent_dim: int = 64, n_features: int = N_FEATURES):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_features = n_features
        widths = [latent_dim, *GENERATOR_WIDTHS, n_features]
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class DiscriminatorNet(nn.Module):
    """51 -> 512 -> 256 -> 128 -> 64 -> 1 with LeakyReLU(0.2); ``forward`` returns logits."""

    def __init__(self, n_features: int = N_FEATURES):
        super().__init__()
        self.n_features = n_features
        widths = [n_features, *DISCRIMINATOR_WIDTHS, 1]
        layers = []
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                layers.append(nn.LeakyReLU(0.2))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).squeeze(-1)

    def score(self, x: torch.Tensor) -> torch.Tensor:
        """Realness in (0, 1)."""
        return torch.sigmoid(self.forward(x))


def n_linear(module: nn.Module) -> int:
    return sum(isinstance(m, nn.Linear) for m in module.modules())


def seeded_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-draw every parameter uniformly in +-1/sqrt(fan_in) from a private generator."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / m.in_features ** 0.5
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                m.bias.copy_(torch.rand(m.bias.shape, generator=gen) * 2 * bound - bound)
    return module
