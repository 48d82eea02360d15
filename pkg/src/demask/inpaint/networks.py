"""Inpainting networks: a U-shaped generator conditioned on landmarks and a
mask channel, and a patch discriminator whose receptive field is exactly
70 pixels.

The generator encodes with three stride-2 blocks, runs seven dilated
residual blocks, fuses long-range context (spatial self-attention over the
post-dilation features) with the pre-dilation features through learned
scalar gates, and decodes with nearest-upsampling stages; each decoder
stage first fuses its encoder shortcut through a 1x1 convolution. Output
is tanh, rescaled to [0, 1].
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils import spectral_norm as apply_spectral_norm

from ..errors import ConfigError, ShapeMismatchError
from ..imaging import BinaryMask, ImageTensor


@dataclass(frozen=True)
class GeneratorConfig:
    input_size: int = 256
    down_blocks: int = 3
    dilated_blocks: int = 7
    dilation_rates: tuple = (2, 4, 8, 2, 4, 8, 2)
    base_channels: int = 64
    attention: bool = True

    def __post_init__(self):
        if self.down_blocks < 1:
            raise ConfigError("down_blocks must be >= 1")
        if self.dilated_blocks < 1:
            raise ConfigError("dilated_blocks must be >= 1")
        if len(self.dilation_rates) != self.dilated_blocks:
            raise ConfigError("need one dilation rate per dilated block")
        if any(r < 1 for r in self.dilation_rates):
            raise ConfigError("dilation rates must be >= 1")
        if self.input_size % (2 ** self.down_blocks) != 0:
            raise ConfigError("input_size must be divisible by 2^down_blocks")


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_channels: int = 4  # image + one landmark channel
    layers: tuple = (64, 128, 256, 512)
    spectral_norm: bool = True

    def __post_init__(self):
        if self.input_channels < 1 or len(self.layers) < 1:
            raise ConfigError("discriminator needs input channels and conv layers")
        rf = receptive_field(discriminator_layer_specs(self.layers))
        if rf != 70:
            raise ConfigError(
                f"patch architecture must have a 70px receptive field, got {rf}")


def receptive_field(layer_specs) -> int:
    """Receptive field of a conv stack via the standard recurrence.

    `layer_specs` is a sequence of (kernel, stride, dilation) triples in
    forward order.
    """
    rf, jump = 1, 1
    for kernel, stride, dilation in layer_specs:
        keff = dilation * (kernel - 1) + 1
        rf += (keff - 1) * jump
        jump *= stride
    return rf


def discriminator_layer_specs(layers=(64, 128, 256, 512)):
    """(kernel, stride, dilation) of every conv, including the score head."""
    specs = []
    for i in range(len(layers)):
        stride = 2 if i < len(layers) - 1 else 1
        specs.append((4, stride, 1))
    specs.append((4, 1, 1))  # score conv
    return specs


def _norm(ch):
    return nn.InstanceNorm2d(ch, affine=True, track_running_stats=False)


class DilatedResidualBlock(nn.Module):
    """x + branch(x); the branch dilates its first conv to widen context."""

    def __init__(self, ch, rate):
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=rate, dilation=rate), _norm(ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch, ch, 3, padding=1), _norm(ch))

    def forward(self, x):
        return x + self.branch(x)


class LongShortAttention(nn.Module):
    """Fuses distant spatial context with the pre-dilation feature map.

    Long-term path: dot-product self-attention over the post-dilation map
    (attention rows are softmax-normalized). Short-term path: the feature
    map from before the dilated chain. Both enter through learned scalar
    gates that start at zero, so the block is initially a pass-through.
    """

    def __init__(self, ch):
        super().__init__()
        key_dim = max(ch // 8, 1)
        self.key_dim = key_dim
        self.query = nn.Conv2d(ch, key_dim, 1)
        self.key = nn.Conv2d(ch, key_dim, 1)
        self.value = nn.Conv2d(ch, ch, 1)
        self.long_gate = nn.Parameter(torch.zeros(1))
        self.short_gate = nn.Parameter(torch.zeros(1))

    def attention_weights(self, long_feat):
        b, _, h, w = long_feat.shape
        q = self.query(long_feat).flatten(2).transpose(1, 2)  # (B, HW, K)
        k = self.key(long_feat).flatten(2)                    # (B, K, HW)
        return torch.softmax(q @ k / math.sqrt(self.key_dim), dim=-1)

    def forward(self, short_feat, long_feat):
        b, c, h, w = long_feat.shape
        attn = self.attention_weights(long_feat)
        v = self.value(long_feat).flatten(2)                  # (B, C, HW)
        ctx = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return long_feat + self.long_gate * ctx + self.short_gate * short_feat


class InpaintGenerator(nn.Module):
    """Landmark- and mask-conditioned encoder/decoder with dilated core."""

    in_channels = 5  # RGB (masked out) + landmark channel + mask channel

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        b = config.base_channels
        chans = [b] + [min(b * 2 ** (i + 1), 8 * b) for i in range(config.down_blocks)]
        self.stem = nn.Sequential(
            nn.Conv2d(self.in_channels, b, 7, padding=3), _norm(b), nn.ReLU(inplace=True))
        self.downs = nn.ModuleList()
        for i in range(config.down_blocks):
            self.downs.append(nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1),
                _norm(chans[i + 1]), nn.ReLU(inplace=True)))
        core = chans[-1]
        self.dilated = nn.Sequential(*[
            DilatedResidualBlock(core, r) for r in config.dilation_rates])
        self.attention = LongShortAttention(core) if config.attention else None
        self.fuse = nn.ModuleList()
        self.ups = nn.ModuleList()
        up_in = core
        for skip_ch in reversed(chans[:-1]):
            self.fuse.append(nn.Conv2d(up_in + skip_ch, skip_ch, 1))
            self.ups.append(nn.Sequential(
                nn.Conv2d(skip_ch, skip_ch, 3, padding=1), _norm(skip_ch),
                nn.ReLU(inplace=True)))
            up_in = skip_ch
        self.head = nn.Conv2d(b, 3, 7, padding=3)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"generator expects {self.in_channels} input channels, got {x.shape[1]}")
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ShapeMismatchError(
                f"generator expects {self.config.input_size}px input, "
                f"got {tuple(x.shape[-2:])}")
        feat = self.stem(x)
        skips = [feat]
        for down in self.downs:
            feat = down(feat)
            skips.append(feat)
        short = feat
        feat = self.dilated(feat)
        if self.attention is not None:
            feat = self.attention(short, feat)
        for fuse, up, skip in zip(self.fuse, self.ups, reversed(skips[:-1])):
            feat = nn.functional.interpolate(feat, scale_factor=2, mode="nearest")
            feat = fuse(torch.cat([feat, skip], dim=1))
            feat = up(feat)
        return (torch.tanh(self.head(feat)) + 1.0) / 2.0


class PatchDiscriminator(nn.Module):
    """Strided conv stack scoring one value per 70x70 receptive patch."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.config = config
        layers = []
        in_ch = config.input_channels
        specs = discriminator_layer_specs(config.layers)
        for ch, (kernel, stride, _) in zip(config.layers, specs):
            conv = nn.Conv2d(in_ch, ch, kernel, stride=stride, padding=1)
            if config.spectral_norm:
                conv = apply_spectral_norm(conv)
            layers += [conv, nn.LeakyReLU(0.2, inplace=True)]
            in_ch = ch
        score = nn.Conv2d(in_ch, 1, specs[-1][0], stride=specs[-1][1], padding=1)
        if config.spectral_norm:
            score = apply_spectral_norm(score)
        layers.append(score)
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.shape[1] != self.config.input_channels:
            raise ShapeMismatchError(
                f"discriminator expects {self.config.input_channels} channels, "
                f"got {x.shape[1]}")
        return self.net(x)

    def layer_specs(self):
        return discriminator_layer_specs(self.config.layers)


class RandomFeatureExtractor(nn.Module):
    """Frozen seed-deterministic conv stack exposing 5 feature taps.

    Stands in for a pretrained perceptual backbone behind the same
    interface: call it with a (B, 3, H, W) image and get an ordered list of
    feature maps, one per tap. Any module with that contract (e.g. VGG-19
    relu taps) can replace it.
    """

    def __init__(self, seed: int = 0, in_channels: int = 3,
                 tap_channels: tuple = (8, 16, 24, 32, 48)):
        super().__init__()
        if len(tap_channels) < 2:
            raise ConfigError("a feature extractor needs at least 2 taps")
        gen = torch.Generator().manual_seed(seed)
        self.stages = nn.ModuleList()
        prev = in_channels
        for i, ch in enumerate(tap_channels):
            conv = nn.Conv2d(prev, ch, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                  / math.sqrt(fan_in))
                conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
            self.stages.append(conv)
            prev = ch
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x):
        taps = []
        for conv in self.stages:
            x = torch.tanh(conv(x))
            taps.append(x)
        return taps


class IdentityFeatureExtractor(nn.Module):
    """Single tap returning the raw image; useful for loss cross-checks."""

    def forward(self, x):
        return [x]


def _to_image_tensor_batch(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
    else:
        data = image.data if isinstance(image, ImageTensor) else np.asarray(image)
        t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))
        if t.ndim == 3 and t.shape[-1] in (1, 3):
            t = t.permute(2, 0, 1)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.shape[1] == 1:
        t = t.expand(-1, 3, -1, -1)
    return t


def _to_map_batch(m, like: torch.Tensor) -> torch.Tensor:
    if isinstance(m, BinaryMask):
        m = m.data
    if not isinstance(m, torch.Tensor):
        m = torch.from_numpy(np.ascontiguousarray(np.asarray(m), dtype=np.float32))
    if m.ndim == 2:
        m = m.unsqueeze(0).unsqueeze(0)
    elif m.ndim == 3:
        m = m.unsqueeze(1)
    if m.shape[0] == 1 and like.shape[0] > 1:
        m = m.expand(like.shape[0], -1, -1, -1)
    if m.shape[-2:] != like.shape[-2:]:
        raise ShapeMismatchError(
            f"conditioning map {tuple(m.shape[-2:])} does not match image "
            f"{tuple(like.shape[-2:])}")
    return m.to(like.dtype)


def assemble_generator_input(ground: torch.Tensor, landmark_channel: torch.Tensor,
                             mask: torch.Tensor) -> torch.Tensor:
    """[masked-out image shifted to [-1, 1]; landmark channel; mask channel]."""
    visible = ground * (1.0 - mask)
    return torch.cat([visible * 2.0 - 1.0, landmark_channel, mask], dim=1)


def generate(generator: InpaintGenerator, ground, landmark_channel, mask) -> ImageTensor:
    """Full-frame inpainting forward pass (inference, no gradients).

    `ground` is the image whose masked region is to be filled; the caller
    merges the result with the original pixels.
    """
    g = _to_image_tensor_batch(ground)
    lm = _to_map_batch(landmark_channel, g)
    m = _to_map_batch(mask, g)
    x = assemble_generator_input(g, lm, m)
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        out = generator(x)
    if was_training:
        generator.train()
    arr = out[0].permute(1, 2, 0).numpy().astype(np.float32)
    return ImageTensor(np.clip(arr, 0.0, 1.0))


def discriminate(discriminator: PatchDiscriminator, image, landmark_channel) -> torch.Tensor:
    """Patch score map for an image/landmark pair (no sigmoid; LSGAN scores)."""
    img = _to_image_tensor_batch(image)
    lm = _to_map_batch(landmark_channel, img)
    return discriminator(torch.cat([img * 2.0 - 1.0, lm], dim=1))
