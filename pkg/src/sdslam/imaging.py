"""Intensity images, gradients, bilinear sampling, pyramids, rectification.

Images hold row-major float intensities in [0, 1] regardless of the source
bit depth, so residual magnitudes (and Huber thresholds) are comparable
across datasets. Images are immutable once constructed.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PilImage

from .errors import DimensionMismatch, ImageTooSmall, IoFailure, TooManyLevels

LUT_MAGIC = b"SDRLUT01"


@dataclass(frozen=True)
class Image:
    """Grayscale intensity image, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 2:
            raise ValueError("image data must be 2-D")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @classmethod
    def from_file(cls, path):
        """Load an 8- or 16-bit grayscale PNG/PGM, normalized to [0, 1]."""
        try:
            with PilImage.open(path) as img:
                arr = np.asarray(img)
        except OSError as exc:
            raise IoFailure(f"cannot read image {path}: {exc}") from exc
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        if arr.dtype == np.uint8:
            return cls(arr / 255.0)
        if arr.dtype == np.uint16:
            return cls(arr / 65535.0)
        return cls(arr.astype(np.float64))


@dataclass(frozen=True)
class ImagePyramid:
    """Multi-resolution stack, level 0 full size, each level half the previous."""

    levels: tuple

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


@dataclass(frozen=True)
class RectificationMap:
    """Per-pixel sub-pixel source coordinates for one camera.

    map_x/map_y have the dimensions of the full-resolution rectified image;
    the output is additionally downsampled by the integer factor.
    Entries set to a negative coordinate are invalid.
    """

    map_x: np.ndarray
    map_y: np.ndarray
    factor: int = 1

    def __post_init__(self):
        if self.map_x.shape != self.map_y.shape:
            raise DimensionMismatch("map planes differ in shape")
        if self.factor < 1:
            raise ValueError("downsample factor must be >= 1")

    @classmethod
    def identity(cls, width, height, factor=1):
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(xs, ys, factor)

    @classmethod
    def from_file(cls, path, factor=1):
        """Read one camera's LUT: 16-byte header (magic, width, height as
        uint32 LE) followed by two row-major float32 planes (x then y)."""
        try:
            raw = open(path, "rb").read()
        except OSError as exc:
            raise IoFailure(f"cannot read LUT {path}: {exc}") from exc
        if len(raw) < 16 or raw[:8] != LUT_MAGIC:
            raise IoFailure(f"{path}: bad LUT magic")
        width, height = struct.unpack("<II", raw[8:16])
        n = width * height
        expected = 16 + 2 * 4 * n
        if len(raw) != expected:
            raise IoFailure(f"{path}: LUT size {len(raw)} != expected {expected}")
        planes = np.frombuffer(raw, dtype="<f4", offset=16)
        map_x = planes[:n].reshape(height, width).astype(np.float64)
        map_y = planes[n:].reshape(height, width).astype(np.float64)
        return cls(map_x, map_y, factor)

    def to_file(self, path):
        h, w = self.map_x.shape
        with open(path, "wb") as f:
            f.write(LUT_MAGIC)
            f.write(struct.pack("<II", w, h))
            f.write(self.map_x.astype("<f4").tobytes())
            f.write(self.map_y.astype("<f4").tobytes())


def sample_bilinear(img: Image, u):
    """Bilinear sample at sub-pixel u = (x, y); None when the sample falls
    outside [0, width-1] x [0, height-1]."""
    x, y = float(u[0]), float(u[1])
    if x < 0 or y < 0 or x > img.width - 1 or y > img.height - 1:
        return None
    # Base index clamped so exact edge coordinates interpolate to the
    # border pixel instead of reading past the array.
    x0 = min(int(np.floor(x)), img.width - 2)
    y0 = min(int(np.floor(y)), img.height - 2)
    fx, fy = x - x0, y - y0
    d = img.data
    top = d[y0, x0] * (1 - fx) + d[y0, x0 + 1] * fx
    bot = d[y0 + 1, x0] * (1 - fx) + d[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def sample_bilinear_many(data, uv):
    """Vectorized bilinear sampling of a 2-D array at (N, 2) coordinates.

    Returns (values, valid); invalid samples (out of bounds or with a
    non-finite neighbor) get value 0.
    """
    h, w = data.shape
    x = uv[:, 0]
    y = uv[:, 1]
    valid = (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
    x0c = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0c = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = np.clip(x - x0c, 0.0, 1.0)
    fy = np.clip(y - y0c, 0.0, 1.0)
    tl = data[y0c, x0c]
    tr = data[y0c, x0c + 1]
    bl = data[y0c + 1, x0c]
    br = data[y0c + 1, x0c + 1]
    vals = (tl * (1 - fx) + tr * fx) * (1 - fy) + (bl * (1 - fx) + br * fx) * fy
    finite = np.isfinite(tl) & np.isfinite(tr) & np.isfinite(bl) & np.isfinite(br)
    valid &= finite
    vals = np.where(valid, vals, 0.0)
    return vals, valid


def sample_bilinear_with_grad(data, uv):
    """Like sample_bilinear_many, also returning the exact derivative of
    the bilinear interpolant w.r.t. x and y at each sample."""
    h, w = data.shape
    x = uv[:, 0]
    y = uv[:, 1]
    valid = (x >= 0) & (y >= 0) & (x <= w - 1) & (y <= h - 1)
    x0c = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0c = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0c
    fy = y - y0c
    tl = data[y0c, x0c]
    tr = data[y0c, x0c + 1]
    bl = data[y0c + 1, x0c]
    br = data[y0c + 1, x0c + 1]
    vals = (tl * (1 - fx) + tr * fx) * (1 - fy) + (bl * (1 - fx) + br * fx) * fy
    gx = (tr - tl) * (1 - fy) + (br - bl) * fy
    gy = (bl - tl) * (1 - fx) + (br - tr) * fx
    finite = np.isfinite(tl) & np.isfinite(tr) & np.isfinite(bl) & np.isfinite(br)
    valid &= finite
    vals = np.where(valid, vals, 0.0)
    gx = np.where(valid, gx, 0.0)
    gy = np.where(valid, gy, 0.0)
    return vals, gx, gy, valid


def gradient(img: Image):
    """Central-difference gradient, shape (H, W, 2) as (gx, gy).

    Border pixels are zero; semi-dense selection excludes them anyway.
    """
    if img.width < 3 or img.height < 3:
        raise ImageTooSmall(f"{img.width}x{img.height} too small for gradients")
    d = img.data
    g = np.zeros((img.height, img.width, 2))
    g[1:-1, 1:-1, 0] = (d[1:-1, 2:] - d[1:-1, :-2]) / 2.0
    g[1:-1, 1:-1, 1] = (d[2:, 1:-1] - d[:-2, 1:-1]) / 2.0
    return g


def gradient_magnitude(img: Image):
    g = gradient(img)
    return np.hypot(g[:, :, 0], g[:, :, 1])


def _halve(data):
    """2x2 block average, dimensions floored."""
    h, w = data.shape
    h2, w2 = h // 2, w // 2
    c = data[: 2 * h2, : 2 * w2]
    return (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2]) / 4.0


def build_pyramid(img: Image, levels: int) -> ImagePyramid:
    """Coarse-to-fine pyramid of 2x2 block averages."""
    if levels < 1:
        raise TooManyLevels("need at least one level")
    if min(img.width, img.height) // (2 ** (levels - 1)) < 8:
        raise TooManyLevels(
            f"{levels} levels would shrink {img.width}x{img.height} below 8x8"
        )
    out = [img]
    data = img.data
    for _ in range(levels - 1):
        data = _halve(data)
        out.append(Image(data))
    return ImagePyramid(tuple(out))


def rectify(raw: Image, rect_map: RectificationMap):
    """Apply a lookup-table rectification with optional downsampling.

    Returns (Image, validity mask) at the output resolution (map size
    divided by the downsample factor). Invalid samples give intensity 0.
    """
    h, w = rect_map.map_x.shape
    if (h, w) != (raw.height, raw.width):
        raise DimensionMismatch(
            f"map {w}x{h} does not match image {raw.width}x{raw.height}"
        )
    uv = np.stack([rect_map.map_x.ravel(), rect_map.map_y.ravel()], axis=1)
    vals, valid = sample_bilinear_many(raw.data, uv)
    full = vals.reshape(h, w)
    mask = valid.reshape(h, w)
    c = rect_map.factor
    if c > 1:
        h2, w2 = h // c, w // c
        full = full[: h2 * c, : w2 * c].reshape(h2, c, w2, c).mean(axis=(1, 3))
        mask = mask[: h2 * c, : w2 * c].reshape(h2, c, w2, c).all(axis=(1, 3))
        full = np.where(mask, full, 0.0)
    return Image(full), mask
