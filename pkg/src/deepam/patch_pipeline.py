"""Image plumbing for patch-based super-resolution.

Images are plain 2-D float64 arrays of luminance values in [0,1]
("GrayImage" in the docs below). Color handling, the Matlab-convention
bicubic resampler, patch extraction with mean removal, overlap-averaged
reconstruction and PSNR all live here.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

# Matlab rgb2ycbcr transform for inputs scaled to [0,1]; outputs on the
# 8-bit scale (Y in [16,235], chroma in [16,240]).
_RGB2YCBCR = np.array([
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
])
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])


@dataclass(frozen=True)
class PatchGeometry:
    """Patch sizes for the LR/HR pairing.

    p: LR patch side, s: integer upscaling factor, crop_side: side of the
    central HR patch that is actually emitted at reconstruction, stride:
    sampling step in LR pixels.
    """
    p: int = 6
    s: int = 2
    crop_side: int = 8
    stride: int = 1

    def __post_init__(self):
        if self.p < 1 or self.s < 1 or self.stride < 1:
            raise ValueError("patch geometry fields must be positive")
        if self.crop_side > self.hr_side:
            raise ValueError("crop_side cannot exceed the HR patch side")

    @property
    def hr_side(self) -> int:
        return self.s * self.p

    @property
    def d0(self) -> int:
        return self.p * self.p

    @property
    def d_out(self) -> int:
        return self.hr_side * self.hr_side


@dataclass
class PatchDataset:
    """Paired mean-removed LR/HR patch matrices.

    x0 is d0 x N, y is d_out x N; lr_means holds the removed LR patch
    means (the same scalar is subtracted from the paired HR patch and
    restored at reconstruction). positions are LR-domain top-left
    coordinates, kept for inference.
    """
    x0: np.ndarray
    y: np.ndarray
    lr_means: np.ndarray
    positions: np.ndarray
    geom: PatchGeometry = field(default_factory=PatchGeometry)

    @property
    def n(self) -> int:
        return self.x0.shape[1]


def to_luminance(rgb):
    """BT.601 luminance of an H x W x 3 array with channels in [0,255], scaled to [0,1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError("expected a 3-channel image, got shape %s" % (rgb.shape,))
    y = rgb @ (_RGB2YCBCR[0] / 255.0) + _YCBCR_OFFSET[0]
    return y / 255.0


def rgb_to_ycbcr(rgb):
    """Full YCbCr conversion, channels in [0,255] -> three planes each scaled to [0,1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError("expected a 3-channel image, got shape %s" % (rgb.shape,))
    ycc = rgb @ (_RGB2YCBCR.T / 255.0) + _YCBCR_OFFSET
    return ycc / 255.0


def ycbcr_to_rgb(ycc):
    """Inverse of rgb_to_ycbcr; returns float channels on the [0,255] scale, unclipped."""
    ycc = np.asarray(ycc, dtype=np.float64) * 255.0 - _YCBCR_OFFSET
    return ycc @ np.linalg.inv(_RGB2YCBCR / 255.0).T


def _keys_cubic(x):
    """Keys interpolation kernel with a = -0.5 (the Matlab 'cubic' kernel)."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = 1.5 * ax3 - 2.5 * ax2 + 1.0
    outer = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _contributions(in_len, out_len, scale):
    """Sample positions and normalized kernel weights for one dimension.

    Mirrors the Matlab imresize weight computation: output pixel x maps to
    u = x/scale + 0.5*(1 - 1/scale) in input coordinates, the kernel is
    stretched by 1/scale when downscaling (antialiasing), weights are
    normalized to sum to one, and out-of-range sample indices are folded
    back by symmetric boundary extension.
    """
    x = np.arange(1.0, out_len + 1.0)
    u = x / scale + 0.5 * (1.0 - 1.0 / scale)
    kernel_width = 4.0 if scale >= 1.0 else 4.0 / scale
    left = np.floor(u - kernel_width / 2.0)
    p = int(math.ceil(kernel_width)) + 2
    indices = left[:, None] + np.arange(p)[None, :]
    if scale < 1.0:
        weights = scale * _keys_cubic(scale * (u[:, None] - indices))
    else:
        weights = _keys_cubic(u[:, None] - indices)
    weights = weights / np.sum(weights, axis=1, keepdims=True)
    aux = np.concatenate([np.arange(in_len), np.arange(in_len - 1, -1, -1)])
    indices = aux[np.mod(indices.astype(np.int64) - 1, 2 * in_len)]
    keep = ~np.all(weights == 0.0, axis=0)
    return weights[:, keep], indices[:, keep]


def _resize_along_axis(img, out_len, scale, axis):
    weights, indices = _contributions(img.shape[axis], out_len, scale)
    if axis == 0:
        return np.einsum("ok,okw->ow", weights, img[indices, :])
    return np.einsum("ok,hok->ho", weights, img[:, indices])


def resize_bicubic(img, scale):
    """Resample a GrayImage by `scale` with the Matlab-convention bicubic kernel.

    Keys cubic (a = -0.5), antialiased by stretching the kernel by 1/scale
    when scale < 1, symmetric boundary extension, per-pixel weight
    normalization. Output dimensions are round(input * scale), half away
    from zero.
    """
    img = np.asarray(img, dtype=np.float64)
    if scale <= 0:
        raise ConfigError("scale must be positive")
    out_h = int(math.floor(img.shape[0] * scale + 0.5))
    out_w = int(math.floor(img.shape[1] * scale + 0.5))
    if out_h < 1 or out_w < 1:
        raise ConfigError("requested output dimension is zero")
    out = _resize_along_axis(img, out_h, scale, axis=0)
    out = _resize_along_axis(out, out_w, scale, axis=1)
    return out


def modcrop(img, s):
    """Crop trailing rows/columns so both dimensions are multiples of s."""
    h, w = img.shape[0] - img.shape[0] % s, img.shape[1] - img.shape[1] % s
    if h < 1 or w < 1:
        raise DataError("image smaller than the scale factor")
    return np.asarray(img, dtype=np.float64)[:h, :w]


def extract_lr_patches(lr, geom, stride=None):
    """All p x p patches of an LR image at the given stride, mean-removed.

    Returns (x0, lr_means, positions) with x0 of shape d0 x N.
    """
    lr = np.asarray(lr, dtype=np.float64)
    stride = geom.stride if stride is None else int(stride)
    p = geom.p
    if lr.shape[0] < p or lr.shape[1] < p:
        raise DataError("image too small for a single %dx%d patch" % (p, p))
    rows = range(0, lr.shape[0] - p + 1, stride)
    cols = range(0, lr.shape[1] - p + 1, stride)
    positions = np.array([(i, j) for i in rows for j in cols], dtype=np.int64)
    n = len(positions)
    x0 = np.empty((p * p, n))
    for k, (i, j) in enumerate(positions):
        x0[:, k] = lr[i:i + p, j:j + p].ravel()
    lr_means = x0.mean(axis=0)
    x0 -= lr_means
    return x0, lr_means, positions


def extract_pairs(hr, geom=None, stride_train=None, noise_sigma=0.0, noise_seed=0):
    """Build the paired LR/HR training matrices from one HR image.

    The HR image is cropped to a multiple of s, degraded by
    resize_bicubic(1/s) (plus optional Gaussian noise on the LR image),
    and every LR patch is paired with the s-times-larger HR patch at the
    corresponding location. Both columns have the LR patch mean removed.
    """
    geom = geom or PatchGeometry()
    hr = modcrop(np.asarray(hr, dtype=np.float64), geom.s)
    lr = resize_bicubic(hr, 1.0 / geom.s)
    if noise_sigma > 0:
        lr = add_gaussian_noise(lr, noise_sigma, noise_seed)
    x0, lr_means, positions = extract_lr_patches(lr, geom, stride_train)
    side = geom.hr_side
    y = np.empty((side * side, len(positions)))
    for k, (i, j) in enumerate(positions):
        y[:, k] = hr[geom.s * i:geom.s * i + side, geom.s * j:geom.s * j + side].ravel()
    y -= lr_means
    return PatchDataset(x0=x0, y=y, lr_means=lr_means, positions=positions, geom=geom)


def reconstruct(hr_patches, lr_means, positions, geom, out_size, fallback=None):
    """Overlap-average predicted HR patches into an image.

    hr_patches holds full hr_side^2 patch columns; only the central
    crop_side x crop_side block of each is used, with its LR mean added
    back. Overlapping pixels are averaged by per-pixel counts. Pixels no
    crop covers are taken from `fallback` (the bicubic-upscaled LR image)
    when provided, else left at zero.
    """
    hr_patches = np.asarray(hr_patches, dtype=np.float64)
    h, w = out_size
    side, crop = geom.hr_side, geom.crop_side
    off = (side - crop) // 2
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    for k, (i, j) in enumerate(np.asarray(positions)):
        r = geom.s * int(i) + off
        c = geom.s * int(j) + off
        if r < 0 or c < 0 or r + crop > h or c + crop > w:
            raise ValueError("patch position (%d,%d) falls outside the output" % (i, j))
        block = hr_patches[:, k].reshape(side, side)[off:off + crop, off:off + crop]
        acc[r:r + crop, c:c + crop] += block + lr_means[k]
        cnt[r:r + crop, c:c + crop] += 1.0
    covered = cnt > 0
    out = np.zeros((h, w)) if fallback is None else np.array(fallback, dtype=np.float64)
    out[covered] = acc[covered] / cnt[covered]
    return out


def psnr(a, b):
    """Peak signal-to-noise ratio in dB on the 8-bit scale.

    Both images are clipped to [0,1] and scaled by 255 before the MSE;
    identical images return math.inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ: %s vs %s" % (a.shape, b.shape))
    diff = 255.0 * (np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0))
    mse = np.mean(diff * diff)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def add_gaussian_noise(img, sigma, seed):
    """i.i.d. zero-mean Gaussian noise, deterministic for a given seed. No clipping."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    img = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return img + rng.normal(0.0, sigma, img.shape)


_READABLE = (".png", ".bmp")


def load_image(path):
    """Read a PNG/BMP file; returns a [0,1] gray array or an H x W x 3 array in [0,255]."""
    name = str(path).lower()
    if not name.endswith(_READABLE):
        raise DataError("unsupported image format: %s" % path)
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I", "I;16", "F"):
                arr = np.asarray(im.convert("F"), dtype=np.float64)
                peak = 65535.0 if im.mode in ("I", "I;16") else 255.0
                return arr / peak
            return np.asarray(im.convert("RGB"), dtype=np.float64)
    except DataError:
        raise
    except Exception as exc:
        raise DataError("cannot read image %s: %s" % (path, exc)) from exc


def load_luminance(path):
    """Read an image file and return its luminance plane in [0,1]."""
    arr = load_image(path)
    if arr.ndim == 2:
        return arr
    return to_luminance(arr)


def save_png(path, img):
    """Write a GrayImage (2-D, [0,1]) or an RGB array ([0,255]) as PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        data = np.clip(img, 0.0, 1.0) * 255.0
    else:
        data = np.clip(img, 0.0, 255.0)
    Image.fromarray(np.round(data).astype(np.uint8)).save(path, format="PNG")
