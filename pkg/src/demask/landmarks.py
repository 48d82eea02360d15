"""98-point landmark representation, heatmap rendering, and the heatmap
regression loss stack (adaptive wing + weighted loss map), plus a
size-parameterized stacked-hourglass predictor.

Coordinate convention: a landmark (x, y) is normalized to [0,1] x [0,1];
pixel (row r, col c) of an S x S map has center ((c + 0.5) / S, (r + 0.5) / S).
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .errors import ConfigError, ParameterError, ShapeMismatchError
from .imaging import ImageTensor

NUM_LANDMARKS = 98


@dataclass(frozen=True)
class LandmarkSet:
    """Exactly 98 (x, y) points with normalized coordinates in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise ShapeMismatchError(
                f"expected ({NUM_LANDMARKS}, 2) points, got {pts.shape}")
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ParameterError("landmark coordinates must lie in [0, 1]")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class HeatmapStack:
    """98 per-landmark heatmaps with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[0] != NUM_LANDMARKS:
            raise ShapeMismatchError(
                f"expected ({NUM_LANDMARKS}, H, W) heatmaps, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ParameterError("heatmap values must lie in [0, 1]")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        object.__setattr__(self, "data", arr)

    @property
    def size(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class AdaptiveWingParams:
    """Shape parameters of the adaptive wing loss.

    The linear-branch constants are derived from these at call time so the
    piecewise loss stays continuous and C1 at the threshold.
    """

    omega: float = 14.0
    theta: float = 0.5
    epsilon: float = 1.0
    alpha: float = 2.1

    def __post_init__(self):
        if min(self.omega, self.theta, self.epsilon, self.alpha) <= 0:
            raise ParameterError("adaptive wing parameters must be strictly positive")
        if self.theta >= 1.0:
            raise ParameterError("theta must be < 1")


@dataclass(frozen=True)
class LandmarkPredictorConfig:
    num_stacks: int = 2
    base_channels: int = 64
    heatmap_size: int = 64
    input_size: int = 256
    hg_depth: int = 3

    def __post_init__(self):
        if self.num_stacks < 1:
            raise ConfigError("num_stacks must be >= 1")
        if self.input_size % self.heatmap_size != 0:
            raise ConfigError("heatmap_size must divide input_size")
        if self.input_size // self.heatmap_size not in (1, 2, 4):
            raise ConfigError("input_size / heatmap_size must be 1, 2 or 4")
        if self.heatmap_size < 2 ** self.hg_depth:
            raise ConfigError("hg_depth too deep for heatmap_size")


def load_landmarks(path) -> LandmarkSet:
    """Read a plain-text landmark file: 98 lines of "x y" normalized floats."""
    pts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            x, y = line.split()
            pts.append((float(x), float(y)))
    if len(pts) != NUM_LANDMARKS:
        raise ParameterError(f"{path}: expected {NUM_LANDMARKS} points, got {len(pts)}")
    return LandmarkSet(np.array(pts))


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    with open(path, "w") as fh:
        for x, y in landmarks.points:
            fh.write(f"{x:.8f} {y:.8f}\n")


def render_heatmaps(landmarks: LandmarkSet, size: int, sigma: float) -> HeatmapStack:
    """Render one unnormalized Gaussian per landmark.

    Each landmark is snapped to its nearest pixel center so the channel peak
    is exactly 1; channel k holds exp(-d^2 / (2 sigma^2)) with d the pixel
    distance from the snapped peak.
    """
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    cols = np.clip(np.rint(landmarks.points[:, 0] * size - 0.5), 0, size - 1)
    rows = np.clip(np.rint(landmarks.points[:, 1] * size - 0.5), 0, size - 1)
    grid = np.arange(size, dtype=np.float64)
    dy2 = (grid[None, :, None] - rows[:, None, None]) ** 2
    dx2 = (grid[None, None, :] - cols[:, None, None]) ** 2
    stack = np.exp(-(dy2 + dx2) / (2.0 * sigma * sigma))
    return HeatmapStack(stack)


def render_guidance(landmarks: LandmarkSet, size: int, sigma: float) -> np.ndarray:
    """Single-channel landmark image: per-pixel max over the 98 heatmaps."""
    return render_heatmaps(landmarks, size, sigma).data.max(axis=0)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, HeatmapStack):
        x = x.data
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def adaptive_wing_loss(pred, gt, params: AdaptiveWingParams = AdaptiveWingParams(),
                       weight_map=None) -> torch.Tensor:
    """Adaptive wing loss between predicted and ground-truth heatmaps.

    With y the ground-truth value and d = |y - pred|, the loss is
    omega * ln(1 + (d / eps)^(alpha - y)) for d < theta and A*d - C beyond,
    where A and C are derived so the two branches join with matching value
    and slope at d = theta. The mean is taken over all elements, each
    multiplied by its weight when `weight_map` is given.
    """
    pred_t = _as_tensor(pred)
    gt_t = _as_tensor(gt).to(pred_t.dtype)
    if pred_t.shape != gt_t.shape:
        raise ShapeMismatchError(f"heatmap shapes differ: {pred_t.shape} vs {gt_t.shape}")
    omega, theta, eps, alpha = params.omega, params.theta, params.epsilon, params.alpha

    delta = (gt_t - pred_t).abs()
    k = alpha - gt_t
    ratio = (theta / eps) ** k
    # A: slope of the log branch at theta; C: offset making the values agree
    a = omega * k * ratio / (theta * (1.0 + ratio))
    c = theta * a - omega * torch.log1p(ratio)
    log_branch = omega * torch.log1p((delta / eps) ** k)
    linear_branch = a * delta - c
    loss = torch.where(delta < theta, log_branch, linear_branch)
    if weight_map is not None:
        w = _as_tensor(weight_map).to(loss.dtype)
        if w.shape != loss.shape:
            raise ShapeMismatchError(f"weight map shape {w.shape} != loss shape {loss.shape}")
        loss = loss * w
    return loss.mean()


def weighted_loss_map(gt, dilation_radius: int, boost: float = 10.0) -> np.ndarray:
    """Per-pixel weights 1 + boost on (dilated) foreground, 1 elsewhere.

    Foreground is where the ground-truth heatmaps, grey-dilated with a disc
    of the given radius, reach at least 0.2.
    """
    if boost < 0:
        raise ParameterError("boost must be >= 0")
    arr = gt.data if isinstance(gt, HeatmapStack) else np.asarray(gt)
    if dilation_radius > 0:
        span = np.arange(-dilation_radius, dilation_radius + 1)
        disc = (span[:, None] ** 2 + span[None, :] ** 2) <= dilation_radius ** 2
        if arr.ndim == 3:
            footprint = disc[None, :, :]
        else:
            footprint = disc
        dilated = ndimage.maximum_filter(arr, footprint=footprint, mode="constant")
    else:
        dilated = arr
    return 1.0 + boost * (dilated >= 0.2).astype(np.float64)


def peak_decode(heatmaps: HeatmapStack) -> LandmarkSet:
    """Argmax decode of each channel; ties resolve to the smallest row, then
    smallest column (row-major argmax). Returns pixel-center coordinates."""
    arr = heatmaps.data
    size_h, size_w = arr.shape[1], arr.shape[2]
    flat = arr.reshape(arr.shape[0], -1).argmax(axis=1)
    rows, cols = np.divmod(flat, size_w)
    pts = np.stack([(cols + 0.5) / size_w, (rows + 0.5) / size_h], axis=1)
    return LandmarkSet(pts)


def _norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.skip = (nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch
                     else nn.Identity())

    def forward(self, x):
        y = self.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.relu(y + self.skip(x))


class Hourglass(nn.Module):
    """Recursive down/up module with a residual skip at every level."""

    def __init__(self, depth, ch):
        super().__init__()
        self.up1 = ResidualBlock(ch, ch)
        self.pool = nn.MaxPool2d(2)
        self.low1 = ResidualBlock(ch, ch)
        self.low2 = Hourglass(depth - 1, ch) if depth > 1 else ResidualBlock(ch, ch)
        self.low3 = ResidualBlock(ch, ch)

    def forward(self, x):
        up = self.up1(x)
        low = self.low3(self.low2(self.low1(self.pool(x))))
        return up + nn.functional.interpolate(low, scale_factor=2, mode="nearest")


class LandmarkPredictor(nn.Module):
    """Stacked hourglass network emitting 98 sigmoid heatmaps per stack."""

    def __init__(self, config: LandmarkPredictorConfig = LandmarkPredictorConfig()):
        super().__init__()
        self.config = config
        ch = config.base_channels
        factor = config.input_size // config.heatmap_size
        stem = [nn.Conv2d(3, ch, 7, stride=2 if factor >= 2 else 1, padding=3),
                _norm(ch), nn.ReLU(inplace=True), ResidualBlock(ch, ch)]
        if factor == 4:
            stem.insert(3, nn.MaxPool2d(2))
        self.stem = nn.Sequential(*stem)
        self.stages = nn.ModuleList()
        self.heads = nn.ModuleList()
        self.remap_feat = nn.ModuleList()
        self.remap_pred = nn.ModuleList()
        for s in range(config.num_stacks):
            self.stages.append(nn.Sequential(
                Hourglass(config.hg_depth, ch), ResidualBlock(ch, ch)))
            self.heads.append(nn.Conv2d(ch, NUM_LANDMARKS, 1))
            if s < config.num_stacks - 1:
                self.remap_feat.append(nn.Conv2d(ch, ch, 1))
                self.remap_pred.append(nn.Conv2d(NUM_LANDMARKS, ch, 1))

    def forward(self, x):
        """Returns one sigmoid heatmap tensor (B, 98, S, S) per stack."""
        if x.shape[-1] != self.config.input_size or x.shape[-2] != self.config.input_size:
            raise ShapeMismatchError(
                f"expected {self.config.input_size}px input, got {tuple(x.shape[-2:])}")
        feat = self.stem(x)
        outputs = []
        for s in range(self.config.num_stacks):
            stage_out = self.stages[s](feat)
            logits = self.heads[s](stage_out)
            outputs.append(torch.sigmoid(logits))
            if s < self.config.num_stacks - 1:
                feat = feat + self.remap_feat[s](stage_out) + self.remap_pred[s](logits)
        return outputs


def predict_landmarks(model: LandmarkPredictor, image: ImageTensor):
    """Run the predictor on one image; returns (HeatmapStack, LandmarkSet)."""
    if image.height != model.config.input_size or image.width != model.config.input_size:
        raise ShapeMismatchError(
            f"image is {image.height}x{image.width}, model expects "
            f"{model.config.input_size}")
    x = torch.from_numpy(np.ascontiguousarray(image.data, dtype=np.float32))
    x = x.permute(2, 0, 1).unsqueeze(0)
    if x.shape[1] == 1:
        x = x.expand(-1, 3, -1, -1)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        stacks = model(x)
    if was_training:
        model.train()
    heat = HeatmapStack(stacks[-1][0].clamp(0.0, 1.0).numpy())
    return heat, peak_decode(heat)
