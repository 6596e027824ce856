"""The five learnable components: content encoder, pattern encoder, generator,
discriminator, and segmenter.

The content encoder is a residual downsampling trunk with a pyramid-pooling
head; the pattern encoder is a stack of stride-2 conv/BN/ReLU units with
global average pooling; the generator runs residual blocks with adaptive
instance normalization driven by the pattern code, then upsamples back to
image resolution; the discriminator emits a patch-level probability map; the
segmenter decodes content codes into per-class probability maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

NORM_EPS = 1e-5


def group_norm(channels: int) -> nn.GroupNorm:
    """Batch-independent normalization for the trunk and segmenter.

    Batch statistics would mix the five recomposition streams seen during
    adversarial training and poison evaluation-time behavior; groups of 8
    channels keep the 1x1 pyramid-pooled maps normalizing over a real set.
    """
    return nn.GroupNorm(max(1, channels // 8), channels, eps=NORM_EPS)


@dataclass
class NetworkConfig:
    base_channels: int = 32
    content_stride: int = 8
    content_channels: Optional[int] = None   # default 4 * base_channels
    pattern_dim: int = 8
    num_adain_blocks: int = 4
    num_down_units: int = 4                  # pattern encoder and discriminator
    num_classes: int = 5
    domain_aware: bool = True                # False: one pattern encoder per domain
    dual_discriminator: bool = False
    pool_scales: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self) -> None:
        if self.content_channels is None:
            self.content_channels = 4 * self.base_channels

    def validate(self) -> None:
        positive = {
            "base_channels": self.base_channels,
            "content_channels": self.content_channels,
            "pattern_dim": self.pattern_dim,
            "num_adain_blocks": self.num_adain_blocks,
            "num_down_units": self.num_down_units,
        }
        for name, value in positive.items():
            if value is None or value < 1:
                raise ConfigurationError(f"{name} must be positive, got {value}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        n = self.content_stride
        if n < 2 or (n & (n - 1)) != 0:
            raise ConfigurationError(f"content_stride must be a power of two >= 2, got {n}")
        if len(self.pool_scales) < 3:
            raise ConfigurationError("pyramid pooling needs at least 3 scales")


def adain(
    feature: torch.Tensor,
    scale: torch.Tensor,
    shift: torch.Tensor,
    eps: float = NORM_EPS,
) -> torch.Tensor:
    """Normalize each channel over its spatial positions, then rescale and shift.

    Accepts (C, h, w) with (C,) parameters or (B, C, h, w) with (C,) or (B, C)
    parameters.
    """
    single = feature.dim() == 3
    x = feature.unsqueeze(0) if single else feature
    if x.dim() != 4:
        raise ValueError(f"feature must be 3D or 4D, got {feature.dim()}D")
    scale = scale.reshape(-1, x.shape[1]) if scale.dim() <= 2 else scale
    shift = shift.reshape(-1, x.shape[1]) if shift.dim() <= 2 else shift
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    normed = (x - mean) / torch.sqrt(var + eps)
    out = normed * scale.unsqueeze(-1).unsqueeze(-1) + shift.unsqueeze(-1).unsqueeze(-1)
    return out.squeeze(0) if single else out


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = group_norm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class PyramidPooling(nn.Module):
    """Pool at several scales, project, upsample, concatenate with the input."""

    def __init__(self, in_channels: int, branch_channels: int, scales: tuple[int, ...]):
        super().__init__()
        self.scales = scales
        self.branches = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(in_channels, branch_channels, 1, bias=False),
                group_norm(branch_channels),
                nn.ReLU(inplace=True),
            )
            for _ in scales
        )
        self.out_channels = in_channels + branch_channels * len(scales)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [x]
        for scale, branch in zip(self.scales, self.branches):
            pooled = F.adaptive_avg_pool2d(x, scale)
            outs.append(F.interpolate(branch(pooled), size=x.shape[2:], mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


class ContentEncoder(nn.Module):
    """Residual downsampling trunk + pyramid pooling emitting the content map."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        b = config.base_channels
        self.stride = config.content_stride
        n_down = int(math.log2(self.stride))
        self.stem = nn.Sequential(
            nn.Conv2d(1, b, 3, padding=1, bias=False),
            group_norm(b),
            nn.ReLU(inplace=True),
        )
        downs = []
        ch = b
        for _ in range(n_down):
            out_ch = min(ch * 2, 4 * b)
            downs.append(
                nn.Sequential(
                    nn.Conv2d(ch, out_ch, 3, stride=2, padding=1, bias=False),
                    group_norm(out_ch),
                    nn.ReLU(inplace=True),
                    ResidualBlock(out_ch),
                )
            )
            ch = out_ch
        self.downs = nn.Sequential(*downs)
        self.pyramid = PyramidPooling(ch, b, config.pool_scales)
        self.fuse = nn.Sequential(
            nn.Conv2d(self.pyramid.out_channels, config.content_channels, 3, padding=1, bias=False),
            group_norm(config.content_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} not divisible by stride {self.stride}"
            )
        h = self.stem(x)
        h = self.downs(h)
        h = self.pyramid(h)
        return self.fuse(h)


class PatternEncoder(nn.Module):
    """Stride-2 conv/BN/ReLU units, global average pooling, 1x1 projection.

    When domain_aware, the domain controller enters as an extra constant
    input channel so every layer sees which domain it is encoding.
    """

    def __init__(self, config: NetworkConfig, domain_aware: bool):
        super().__init__()
        b = config.base_channels
        self.domain_aware = domain_aware
        in_ch = 2 if domain_aware else 1
        units = []
        ch = in_ch
        out_ch = b
        for _ in range(config.num_down_units):
            units.append(
                nn.Sequential(
                    nn.Conv2d(ch, out_ch, 4, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(out_ch, eps=NORM_EPS),
                    nn.ReLU(inplace=True),
                )
            )
            ch = out_ch
            out_ch = min(out_ch * 2, 4 * b)
        self.units = nn.Sequential(*units)
        self.project = nn.Conv2d(ch, config.pattern_dim, 1)

    def forward(self, x: torch.Tensor, domain: Optional[int] = None) -> torch.Tensor:
        if self.domain_aware:
            if domain not in (0, 1):
                raise ValueError(f"domain controller must be 0 or 1, got {domain}")
            flag = torch.full_like(x[:, :1], float(domain))
            x = torch.cat([x, flag], dim=1)
        h = self.units(x)
        h = F.adaptive_avg_pool2d(h, 1)
        return self.project(h).flatten(1)


class AdainResidualBlock(nn.Module):
    """Residual block whose two normalizations take external (scale, shift)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, params: tuple[torch.Tensor, ...]) -> torch.Tensor:
        s1, b1, s2, b2 = params
        h = F.relu(adain(self.conv1(x), s1, b1))
        h = adain(self.conv2(h), s2, b2)
        return x + h


class Generator(nn.Module):
    """Recompose an image from a content map and a pattern vector.

    A two-layer mapper turns the pattern code into per-normalization
    (scale, shift) pairs; residual AdaIN blocks consume the content map;
    nearest-neighbor upsampling stages restore input resolution; a logistic
    head bounds the output to [0, 1].
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        cc = config.content_channels
        self.blocks = nn.ModuleList(
            AdainResidualBlock(cc) for _ in range(config.num_adain_blocks)
        )
        self.params_per_block = 4 * cc  # two AdaINs, each (scale, shift) of cc
        hidden = max(2 * cc, 64)
        self.mapper = nn.Sequential(
            nn.Linear(config.pattern_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, config.num_adain_blocks * self.params_per_block),
        )
        ups = []
        ch = cc
        for _ in range(int(math.log2(config.content_stride))):
            out_ch = max(ch // 2, config.base_channels)
            ups.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, out_ch, 3, padding=1, bias=False),
                    # one-group norm: per-channel normalization here would wash
                    # the pattern-injected global statistics back out
                    nn.GroupNorm(1, out_ch, eps=NORM_EPS),
                    nn.ReLU(inplace=True),
                )
            )
            ch = out_ch
        self.ups = nn.Sequential(*ups)
        self.head = nn.Conv2d(ch, 1, 3, padding=1)

    def forward(self, content: torch.Tensor, pattern: torch.Tensor) -> torch.Tensor:
        if content.shape[0] != pattern.shape[0]:
            raise ValueError(
                f"batch mismatch: content {content.shape[0]} vs pattern {pattern.shape[0]}"
            )
        raw = self.mapper(pattern)
        cc = content.shape[1]
        h = content
        for i, block in enumerate(self.blocks):
            chunk = raw[:, i * self.params_per_block : (i + 1) * self.params_per_block]
            s1, b1, s2, b2 = chunk.split(cc, dim=1)
            # raw scales start near zero; offset so AdaIN opens at identity gain
            h = block(h, (1.0 + s1, b1, 1.0 + s2, b2))
        h = self.ups(h)
        return torch.sigmoid(self.head(h))


class Discriminator(nn.Module):
    """Patch-level scores in (0, 1): stride-2 conv/IN/LeakyReLU units + 1x1 head."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        b = config.base_channels
        units = []
        ch = 1
        out_ch = b
        for i in range(config.num_down_units):
            layers = [nn.Conv2d(ch, out_ch, 4, stride=2, padding=1)]
            if i > 0:
                # the first unit stays norm-free so absolute intensity, the
                # strongest domain cue, remains visible to the score map
                layers.append(nn.InstanceNorm2d(out_ch, eps=NORM_EPS, affine=True))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            units.append(nn.Sequential(*layers))
            ch = out_ch
            out_ch = min(out_ch * 2, 4 * b)
        self.units = nn.Sequential(*units)
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.units(x)))


class Segmenter(nn.Module):
    """Fully convolutional decoder from content codes to per-class probabilities."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        ch = config.content_channels
        stages = []
        for _ in range(int(math.log2(config.content_stride))):
            out_ch = max(ch // 2, config.base_channels)
            stages.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, out_ch, 3, padding=1, bias=False),
                    group_norm(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            ch = out_ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(ch, config.num_classes, 1)

    def forward(self, content: torch.Tensor) -> torch.Tensor:
        h = self.stages(content)
        return torch.softmax(self.head(h), dim=1)


class Networks(nn.Module):
    """Container bundling the five components behind variant-aware dispatch.

    ``adversarial=False`` builds only the supervised pair (content encoder +
    segmenter), which is all the source-only baseline and inference need.
    """

    def __init__(self, config: NetworkConfig, adversarial: bool = True):
        super().__init__()
        config.validate()
        self.config = config
        self.adversarial = adversarial
        self.content_encoder = ContentEncoder(config)
        self.segmenter = Segmenter(config)
        if adversarial:
            if config.domain_aware:
                self.pattern_encoders = nn.ModuleList([PatternEncoder(config, True)])
            else:
                self.pattern_encoders = nn.ModuleList(
                    [PatternEncoder(config, False), PatternEncoder(config, False)]
                )
            self.generator = Generator(config)
            n_disc = 2 if config.dual_discriminator else 1
            self.discriminators = nn.ModuleList(Discriminator(config) for _ in range(n_disc))
        else:
            self.pattern_encoders = nn.ModuleList()
            self.generator = None
            self.discriminators = nn.ModuleList()

    def content_encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.content_encoder(x)

    def pattern_encode(self, x: torch.Tensor, domain: int) -> torch.Tensor:
        if domain not in (0, 1):
            raise ValueError(f"domain controller must be 0 or 1, got {domain}")
        if self.config.domain_aware:
            return self.pattern_encoders[0](x, domain)
        return self.pattern_encoders[domain](x)

    def generate(self, content: torch.Tensor, pattern: torch.Tensor) -> torch.Tensor:
        return self.generator(content, pattern)

    def discriminate(self, x: torch.Tensor, direction: int = 0) -> torch.Tensor:
        disc = self.discriminators[direction if self.config.dual_discriminator else 0]
        return disc(x)

    def segment(self, content: torch.Tensor) -> torch.Tensor:
        return self.segmenter(content)

    def generator_side_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.content_encoder, self.segmenter]
        mods.extend(self.pattern_encoders)
        if self.generator is not None:
            mods.append(self.generator)
        return mods


def _init_weights(module: nn.Module, gan_style: bool) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            if gan_style:
                nn.init.normal_(m.weight, 0.0, 0.02)
            else:
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.InstanceNorm2d, nn.GroupNorm)):
            if m.weight is not None:
                nn.init.ones_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_networks(config: NetworkConfig, seed: int, adversarial: bool = True) -> Networks:
    """Deterministically initialized networks; same seed gives identical weights."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        nets = Networks(config, adversarial=adversarial)
        _init_weights(nets.content_encoder, gan_style=False)
        _init_weights(nets.segmenter, gan_style=False)
        for enc in nets.pattern_encoders:
            _init_weights(enc, gan_style=True)
        if nets.generator is not None:
            _init_weights(nets.generator, gan_style=True)
        for disc in nets.discriminators:
            _init_weights(disc, gan_style=True)
    return nets
