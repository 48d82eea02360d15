"""Binary mask prediction and mask utilities.

Covers the overlap rule used to accept proposal regions (IoU >= threshold),
polygon-annotation ingestion and rasterization, morphological dilation used
to absorb residual mask fringe before inpainting, and a lightweight
encoder-decoder segmenter that maps a masked face image to a {0,1} map.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .errors import (
    AnnotationError,
    ConfigError,
    ParameterError,
    ShapeMismatchError,
)
from .imaging import BinaryMask, ImageTensor


@dataclass(frozen=True)
class PolygonAnnotation:
    """A hand-labeled mask outline: ordered vertices in pixel coordinates."""

    vertices: np.ndarray
    image_size: int

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
            raise AnnotationError(f"need >= 3 (x, y) vertices, got shape {verts.shape}")
        if verts.min() < 0 or verts.max() > self.image_size:
            raise AnnotationError("vertices must lie within the image bounds")
        object.__setattr__(self, "vertices", verts)

    def area(self) -> float:
        """Shoelace area of the outline, in pixel^2 at annotation scale."""
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class SegmenterConfig:
    input_size: int = 256
    base_channels: int = 32
    depth: int = 4

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError("depth and base_channels must be >= 1")
        if self.input_size % (2 ** self.depth) != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^{self.depth}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"iou shape mismatch: {a.data.shape} vs {b.data.shape}")
    am = a.data.astype(bool)
    bm = b.data.astype(bool)
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(am, bm).sum() / union)


def classify_proposals(proposals, ground: BinaryMask, threshold: float = 0.5):
    """Mark each proposal positive when its IoU with ground reaches threshold.

    The rule is inclusive: IoU exactly equal to the threshold is positive.
    """
    if not 0.0 < threshold <= 1.0:
        raise ParameterError(f"threshold must be in (0, 1], got {threshold}")
    return [iou(p, ground) >= threshold for p in proposals]


def polygon_to_mask(annotation: PolygonAnnotation, size: int) -> BinaryMask:
    """Rasterize a polygon with the even-odd rule on pixel centers.

    A pixel belongs to the mask when its center (c + 0.5, r + 0.5) is inside
    the outline. Vertices are rescaled when the annotation was drawn at a
    different resolution.
    """
    if annotation.area() == 0.0:
        raise AnnotationError("polygon has zero area")
    scale = size / annotation.image_size
    verts = annotation.vertices * scale
    ys = np.arange(size) + 0.5
    xs = np.arange(size) + 0.5
    inside = np.zeros((size, size), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if y1 == y2:
            continue
        row_hit = (y1 <= ys) != (y2 <= ys)
        x_cross = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= row_hit[:, None] & (xs[None, :] < x_cross[:, None])
    return BinaryMask(inside.astype(np.float32))


def load_labelme(path):
    """Parse a Labelme-style JSON file into polygon annotations.

    Expected fields: imageHeight, imageWidth and shapes[].points (lists of
    [x, y]); anything else in the file is ignored.
    """
    with open(path) as fh:
        doc = json.load(fh)
    try:
        height = int(doc["imageHeight"])
        width = int(doc["imageWidth"])
        shapes = doc["shapes"]
    except KeyError as exc:
        raise AnnotationError(f"{path}: missing field {exc}") from exc
    if height != width:
        raise AnnotationError(f"{path}: only square annotations supported "
                              f"({height}x{width})")
    annotations = []
    for shape in shapes:
        pts = np.asarray(shape["points"], dtype=np.float64)
        annotations.append(PolygonAnnotation(np.clip(pts, 0, height), height))
    if not annotations:
        raise AnnotationError(f"{path}: no shapes present")
    return annotations


def labelme_to_mask(path, size: int) -> BinaryMask:
    """Union of all annotated polygons in a Labelme file, rasterized."""
    combined = np.zeros((size, size), dtype=bool)
    for ann in load_labelme(path):
        combined |= polygon_to_mask(ann, size).data.astype(bool)
    return BinaryMask(combined.astype(np.float32))


def dilate_mask(mask: BinaryMask, radius: float) -> BinaryMask:
    """Morphological dilation with a Euclidean disc of the given radius."""
    if radius < 0:
        raise ParameterError("radius must be >= 0")
    if radius == 0 or mask.mask_pixel_count == 0:
        return BinaryMask(mask.data.copy())
    dist = ndimage.distance_transform_edt(mask.data == 0)
    return BinaryMask((dist <= radius).astype(np.float32))


def segmentation_loss(prob_map, ground) -> torch.Tensor:
    """Mean binary cross-entropy between per-pixel probabilities and a mask.

    Probabilities are clamped to [1e-7, 1 - 1e-7] to keep the logs finite.
    """
    probs = prob_map if isinstance(prob_map, torch.Tensor) else torch.as_tensor(
        np.asarray(prob_map, dtype=np.float64))
    target = ground.data if isinstance(ground, BinaryMask) else ground
    target_t = target if isinstance(target, torch.Tensor) else torch.as_tensor(
        np.asarray(target))
    target_t = target_t.to(probs.dtype)
    if probs.shape != target_t.shape:
        raise ShapeMismatchError(
            f"probability map {tuple(probs.shape)} vs mask {tuple(target_t.shape)}")
    p = probs.clamp(1e-7, 1.0 - 1e-7)
    return -(target_t * torch.log(p) + (1.0 - target_t) * torch.log1p(-p)).mean()


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), _norm(out_ch), nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1), _norm(out_ch), nn.ReLU(inplace=True))

    def forward(self, x):
        return self.net(x)


class MaskSegmenter(nn.Module):
    """U-shaped encoder-decoder emitting one logit per pixel."""

    def __init__(self, config: SegmenterConfig = SegmenterConfig()):
        super().__init__()
        self.config = config
        b = config.base_channels
        chans = [b * min(2 ** i, 8) for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        in_ch = 3
        for ch in chans[:-1]:
            self.encoders.append(ConvBlock(in_ch, ch))
            in_ch = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(chans[-2], chans[-1])
        self.decoders = nn.ModuleList()
        up_in = chans[-1]
        for ch in reversed(chans[:-1]):
            self.decoders.append(ConvBlock(up_in + ch, ch))
            up_in = ch
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x):
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ShapeMismatchError(
                f"expected {self.config.input_size}px input, got {tuple(x.shape[-2:])}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)


def predict_mask(model: MaskSegmenter, image: ImageTensor,
                 threshold: float = 0.5) -> BinaryMask:
    """Forward pass producing per-pixel probabilities, binarized at threshold."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    if image.height != model.config.input_size or image.width != model.config.input_size:
        raise ShapeMismatchError(
            f"image is {image.height}x{image.width}, segmenter expects "
            f"{model.config.input_size}")
    x = torch.from_numpy(np.ascontiguousarray(image.data, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = torch.sigmoid(model(x))[0, 0]
    if was_training:
        model.train()
    return BinaryMask((probs.numpy() >= threshold).astype(np.float32))
