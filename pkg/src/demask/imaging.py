"""Image data model, mask-aware composition, and full-reference quality metrics.

Images are stored as H x W x C float arrays with values in [0, 1]; binary
masks are H x W arrays whose entries are exactly 0 or 1. All operations here
are pure functions on immutable inputs.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ImageFormatError, ShapeMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class ImageTensor:
    """An H x W x C image with float values in [0, 1].

    Parameters
    ----------
    data : np.ndarray
      Array of shape (H, W, C) with C in {1, 3} and floating dtype.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeMismatchError(
                f"image must be H x W x C with C in {{1, 3}}, got shape {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ShapeMismatchError(f"image dimensions must be positive, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            raise ImageFormatError(f"image dtype must be floating, got {arr.dtype}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ImageFormatError(
                f"image values must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    """An H x W segmentation map whose entries are exactly 0 or 1."""

    data: np.ndarray
    mask_pixel_count: int = field(init=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeMismatchError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] <= 0 or arr.shape[1] <= 0:
            raise ShapeMismatchError(f"mask dimensions must be positive, got {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ImageFormatError("mask entries must be exactly 0 or 1")
        arr = arr.astype(np.float32)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "mask_pixel_count", int(arr.sum()))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def _require_same_hw(a_shape, b_shape, what: str):
    if a_shape[:2] != b_shape[:2]:
        raise ShapeMismatchError(f"{what}: {a_shape[:2]} vs {b_shape[:2]}")


def resize_bilinear(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping.

    Output pixel (r, c) samples the source at
    ((r + 0.5) * H_in / H_out - 0.5, (c + 0.5) * W_in / W_out - 0.5).
    """
    arr = np.asarray(data, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    in_h, in_w = arr.shape[:2]

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i0c = np.clip(i0, 0, n_in - 1)
        i1c = np.clip(i0 + 1, 0, n_in - 1)
        return i0c, i1c, frac

    r0, r1, fr = axis_coords(out_h, in_h)
    c0, c1, fc = axis_coords(out_w, in_w)
    rows = arr[r0] * (1.0 - fr)[:, None, None] + arr[r1] * fr[:, None, None]
    out = rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    out = np.clip(out, 0.0, 1.0)
    if squeeze:
        out = out[:, :, 0]
    return out


def load_image(path, target_size: int) -> ImageTensor:
    """Load a PNG/JPEG file, convert to RGB and resize to target_size square.

    Raises FileNotFoundError for a missing file and ImageFormatError when the
    bytes do not decode.
    """
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
    except FileNotFoundError:
        raise
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"cannot decode image file {path}") from exc
    arr = np.asarray(rgb, dtype=np.float64) / 255.0
    if arr.shape[0] != target_size or arr.shape[1] != target_size:
        arr = resize_bilinear(arr, target_size, target_size)
    return ImageTensor(arr.astype(np.float32))


def save_image(image: ImageTensor, path) -> None:
    """Write an image as 8-bit PNG, rounding values from [0, 1] * 255."""
    arr = np.rint(np.asarray(image.data, dtype=np.float64) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def compose(image: ImageTensor, mask: BinaryMask) -> ImageTensor:
    """Elementwise product of an image and a mask broadcast over channels."""
    _require_same_hw(image.data.shape, mask.data.shape, "compose shape mismatch")
    out = image.data * mask.data.astype(image.data.dtype)[:, :, None]
    return ImageTensor(out)


def merge_inpainted(ground: ImageTensor, generated: ImageTensor,
                    mask: BinaryMask) -> ImageTensor:
    """Select generated pixels inside the mask and ground pixels outside.

    Pixels where the mask is 0 are bit-identical to `ground`.
    """
    _require_same_hw(ground.data.shape, generated.data.shape, "merge shape mismatch")
    _require_same_hw(ground.data.shape, mask.data.shape, "merge mask shape mismatch")
    if ground.data.shape != generated.data.shape:
        raise ShapeMismatchError(
            f"merge channel mismatch: {ground.data.shape} vs {generated.data.shape}")
    sel = mask.data.astype(bool)[:, :, None]
    out = np.where(sel, generated.data.astype(ground.data.dtype), ground.data)
    return ImageTensor(out)


def psnr(a: ImageTensor, b: ImageTensor, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"psnr shape mismatch: {a.data.shape} vs {b.data.shape}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """2-D Gaussian weight window normalized to sum 1."""
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    win = SSIM_WINDOW
    half = win // 2
    coords = np.arange(win) - (win - 1) / 2.0
    kern = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    kern = kern / kern.sum()

    def smooth(x):
        y = ndimage.correlate1d(x, kern, axis=0, mode="constant")
        y = ndimage.correlate1d(y, kern, axis=1, mode="constant")
        return y[half:-half, half:-half]

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: ImageTensor, b: ImageTensor, data_range: float = 1.0) -> float:
    """Structural similarity over an 11x11 Gaussian window (sigma 1.5).

    Three-channel inputs score as the mean of per-channel SSIM. Only windows
    fully inside the image contribute.
    """
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"ssim shape mismatch: {a.data.shape} vs {b.data.shape}")
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"image {a.data.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    xa = a.data.astype(np.float64)
    xb = b.data.astype(np.float64)
    scores = [_ssim_single(xa[:, :, c], xb[:, :, c], data_range)
              for c in range(a.channels)]
    return float(np.mean(scores))
