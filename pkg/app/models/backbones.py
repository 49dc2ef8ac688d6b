"""Backbone encoders f(.)

resnet-cifar-18-variant: 3×3 stem, no max-pool, four stages of two basic
blocks, global average pool. tiny-conv: three conv layers, for tests.
"""
import torch
import torch.nn as nn
import torch.nn.functional as F


class ResidualBlock(nn.Module):
    """Two 3×3 convolutions with a skip connection; downsamples when stride > 1"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.first_conv = nn.Conv2d(
            in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False
        )
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.second_conv = nn.Conv2d(
            out_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False
        )
        self.bn2 = nn.BatchNorm2d(out_channels)

        self.shortcut = nn.Sequential()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.first_conv(x)))
        out = self.bn2(self.second_conv(out))
        out = out + self.shortcut(x)
        return F.relu(out)


class ResNetCifar(nn.Module):
    """Small-image residual network; stage widths d/8, d/4, d/2, d"""

    def __init__(self, output_dim: int = 512, blocks_per_stage=(2, 2, 2, 2)):
        super().__init__()
        widths = [output_dim // 8, output_dim // 4, output_dim // 2, output_dim]
        self.in_channels = widths[0]

        self.conv1 = nn.Conv2d(3, widths[0], kernel_size=3, stride=1, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.stages = nn.Sequential(*[
            self._make_stack(width, blocks, first_block_stride=1 if i == 0 else 2)
            for i, (width, blocks) in enumerate(zip(widths, blocks_per_stage))
        ])
        self.avg_pool = nn.AdaptiveAvgPool2d((1, 1))
        self.output_dim = output_dim

    def _make_stack(self, out_channels: int, num_blocks: int, first_block_stride: int):
        strides = [first_block_stride] + [1] * (num_blocks - 1)
        layers = []
        for stride in strides:
            layers.append(ResidualBlock(self.in_channels, out_channels, stride))
            self.in_channels = out_channels
        return nn.Sequential(*layers)

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.stages(out)
        out = self.avg_pool(out)
        return torch.flatten(out, 1)


class TinyConv(nn.Module):
    """Three conv-BN-ReLU layers and a global average pool"""

    def __init__(self, output_dim: int = 64):
        super().__init__()
        widths = [max(output_dim // 4, 4), max(output_dim // 2, 4), output_dim]
        layers = []
        in_channels = 3
        for i, width in enumerate(widths):
            layers += [
                nn.Conv2d(in_channels, width, kernel_size=3, stride=1 if i == 0 else 2, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            in_channels = width
        self.features = nn.Sequential(*layers)
        self.avg_pool = nn.AdaptiveAvgPool2d((1, 1))
        self.output_dim = output_dim

    def forward(self, x):
        return torch.flatten(self.avg_pool(self.features(x)), 1)


def mlp(in_dim: int, hidden_dim: int, out_dim: int, batch_norm: bool = True) -> nn.Sequential:
    """Two-layer MLP; batch-norm + ReLU on the hidden layer only"""
    hidden = [nn.Linear(in_dim, hidden_dim)]
    if batch_norm:
        hidden.append(nn.BatchNorm1d(hidden_dim))
    hidden.append(nn.ReLU(inplace=True))
    return nn.Sequential(*hidden, nn.Linear(hidden_dim, out_dim))
