"""Loss terms for the inpainting pair: masked style distance between Gram
matrices, mask-size-normalized pixel distance, tap-normalized perceptual
distance, total variation, and the least-squares adversarial pair. All
distances are l1.
"""

from dataclasses import dataclass

import torch

from ..errors import DegenerateMaskError, NumericError, ParameterError, ShapeMismatchError
from .networks import _to_image_tensor_batch, _to_map_batch, discriminate


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the generator's total objective."""

    lambda_perc: float = 0.1
    lambda_style: float = 250.0
    lambda_tv: float = 0.1
    lambda_adv: float = 0.01

    def __post_init__(self):
        if min(self.lambda_perc, self.lambda_style, self.lambda_tv, self.lambda_adv) < 0:
            raise ParameterError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    pixel: float
    perceptual: float
    style: float
    tv: float
    adv_generator: float
    total: float
    adv_discriminator: float | None = None


def _pair(pred, gt):
    p = _to_image_tensor_batch(pred)
    g = _to_image_tensor_batch(gt).to(p.dtype)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"image shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    return p, g


def gram(features) -> torch.Tensor:
    """Channel inner-product matrix G[i, j] = sum_hw f_i f_j / (N * H * W)."""
    f = features if isinstance(features, torch.Tensor) else torch.as_tensor(features)
    squeeze = f.ndim == 3
    if squeeze:
        f = f.unsqueeze(0)
    b, n, h, w = f.shape
    flat = f.reshape(b, n, h * w)
    g = flat @ flat.transpose(1, 2) / (n * h * w)
    return g[0] if squeeze else g


def style_loss(pred, gt, mask, extractor) -> torch.Tensor:
    """Sum over taps of |gram(tap(pred * mask)) - gram(tap(gt * mask))|_1 / N_i^2."""
    p, g = _pair(pred, gt)
    m = _to_map_batch(mask, p)
    taps_p = extractor(p * m)
    taps_g = extractor(g * m)
    total = p.new_zeros(())
    for fp, fg in zip(taps_p, taps_g):
        n_i = fp.shape[1]
        diff = (gram(fp) - gram(fg)).abs().flatten(1).sum(1)  # (B,)
        total = total + diff.mean() / (n_i * n_i)
    return total


def pixel_loss(pred, gt, mask) -> torch.Tensor:
    """Full-frame l1 distance divided by (mask pixel count * channels)."""
    p, g = _pair(pred, gt)
    m = _to_map_batch(mask, p)
    counts = m.flatten(1).sum(1)
    if (counts == 0).any():
        raise DegenerateMaskError("pixel loss is undefined for an empty mask")
    l1 = (p - g).abs().flatten(1).sum(1)
    return (l1 / (counts * p.shape[1])).mean()


def perceptual_loss(pred, gt, extractor) -> torch.Tensor:
    """Sum over taps of the l1 feature distance, each normalized by N*H*W."""
    p, g = _pair(pred, gt)
    total = p.new_zeros(())
    for fp, fg in zip(extractor(p), extractor(g)):
        _, n, h, w = fp.shape
        total = total + (fp - fg).abs().flatten(1).sum(1).mean() / (n * h * w)
    return total


def tv_loss(pred) -> torch.Tensor:
    """Mean absolute forward difference, horizontal plus vertical."""
    p = _to_image_tensor_batch(pred)
    b, c, h, w = p.shape
    dh = (p[:, :, :, 1:] - p[:, :, :, :-1]).abs().sum()
    dv = (p[:, :, 1:, :] - p[:, :, :-1, :]).abs().sum()
    return (dh + dv) / (b * c * h * w)


def adversarial_losses(discriminator, pred, gt, landmark_channel):
    """LSGAN pair: (generator loss, discriminator loss).

    The generator term scores only the fake branch against the real target;
    the discriminator term sees the fake scores with the generator detached.
    """
    p, g = _pair(pred, gt)
    fake_scores = discriminate(discriminator, p, landmark_channel)
    real_scores = discriminate(discriminator, g, landmark_channel)
    fake_detached = discriminate(discriminator, p.detach(), landmark_channel)
    adv_g = ((fake_scores - 1.0) ** 2).mean()
    adv_d = (fake_detached ** 2).mean() + ((real_scores - 1.0) ** 2).mean()
    return adv_g, adv_d


GENERATOR_TERMS = ("pixel", "perceptual", "style", "tv", "adv_generator")


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    """Weighted sum of the five generator terms, with a per-term breakdown.

    `parts` maps each name in GENERATOR_TERMS to a scalar (tensor or float).
    A non-finite part aborts with the offending term named.
    """
    vals = {}
    for name in GENERATOR_TERMS:
        v = parts[name]
        t = v if isinstance(v, torch.Tensor) else torch.as_tensor(
            float(v), dtype=torch.float64)
        if not torch.isfinite(t):
            raise NumericError(f"loss term {name!r} is non-finite: {float(t)!r}")
        vals[name] = t
    total = (vals["pixel"]
             + weights.lambda_perc * vals["perceptual"]
             + weights.lambda_style * vals["style"]
             + weights.lambda_tv * vals["tv"]
             + weights.lambda_adv * vals["adv_generator"])
    breakdown = LossBreakdown(
        pixel=float(vals["pixel"]), perceptual=float(vals["perceptual"]),
        style=float(vals["style"]), tv=float(vals["tv"]),
        adv_generator=float(vals["adv_generator"]), total=float(total))
    return total, breakdown
