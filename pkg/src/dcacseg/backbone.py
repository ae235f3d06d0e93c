"""2-D U-Net backbone exposing multiscale encoder features and the pre-head decoder map."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .planner import PlanConfig

NEGATIVE_SLOPE = 0.01


class DecoderOutput(NamedTuple):
    pre_head: torch.Tensor         # (B, base_channels, P, P)
    baseline_logits: torch.Tensor  # (B, num_classes, P, P)


class ConvBlock(nn.Sequential):
    """conv 3x3 -> instance norm -> leaky ReLU"""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(NEGATIVE_SLOPE),
        )


class UNet(nn.Module):
    """Encoder stage ``s`` holds two conv blocks; stages ``s >= 1`` downsample
    with a stride-2 first convolution. The decoder upsamples with transposed
    convolutions, concatenates the skip and applies two conv blocks.

    The returned encoder features are taken either after the last activation
    of each stage (``"post_act"``) or from the stage's first convolution
    before its instance normalisation (``"pre_norm"``). Instance
    normalisation fixes every channel's spatial mean, so globally pooled
    post-activation maps carry little information about image appearance.
    """

    def __init__(self, plan: PlanConfig, in_channels: int = 3):
        super().__init__()
        ch = plan.channels
        self.depth = plan.depth
        self.feature_tap = plan.feature_tap
        self.patch_size = plan.patch_size
        self.encoder = nn.ModuleList()
        prev = in_channels
        for s, c in enumerate(ch):
            self.encoder.append(nn.Sequential(ConvBlock(prev, c, stride=1 if s == 0 else 2),
                                              ConvBlock(c, c)))
            prev = c
        self.upsample = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for s in reversed(range(plan.depth)):
            self.upsample.append(nn.ConvTranspose2d(ch[s + 1], ch[s], 2, stride=2))
            self.decoder.append(nn.Sequential(ConvBlock(2 * ch[s], ch[s]), ConvBlock(ch[s], ch[s])))
        self.final = nn.Conv2d(ch[0], plan.num_classes, 1)

    def forward(self, x: torch.Tensor) -> tuple[list[torch.Tensor], DecoderOutput]:
        if x.shape[-1] % 2 ** self.depth or x.shape[-2] % 2 ** self.depth:
            raise ValueError(f"input spatial size {tuple(x.shape[-2:])} not divisible by 2^{self.depth}")
        skips, features = [], []
        for stage in self.encoder:
            first, second = stage
            conv, norm, act = first
            y = conv(x)
            x = second(act(norm(y)))
            skips.append(x)
            features.append(y if self.feature_tap == "pre_norm" else x)
        for i, (up, block) in enumerate(zip(self.upsample, self.decoder)):
            skip = skips[self.depth - 1 - i]
            x = block(torch.cat([up(x), skip], dim=1))
        return features, DecoderOutput(x, self.final(x))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """He-uniform for convolutions, zero biases, unit/zero affine norm parameters."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_uniform_(m.weight, a=NEGATIVE_SLOPE, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build(plan: PlanConfig, seed: int | None = None) -> UNet:
    net = UNet(plan)
    gen = torch.Generator().manual_seed(plan.seed if seed is None else seed)
    init_weights(net, gen)
    return net
