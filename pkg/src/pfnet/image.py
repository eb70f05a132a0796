"""Image I/O, resampling, degradation, color conversion, histogram matching.

Images are carried as :class:`ImagePlane`: a C x H x W float array in the
nominal [0, 255] range plus a colorspace tag. File formats are 8-bit PNG
and binary PPM/PGM (P6/P5, maxval 255).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

_CHANNELS = {"RGB": 3, "YCbCr": 3, "Y": 1}


class ImageIOError(Exception):
    """Raised for unreadable, unsupported or truncated image files."""


@dataclass
class ImagePlane:
    """A C x H x W real-valued image with values nominally in [0, 255]."""

    values: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"image values must be CxHxW, got shape {self.values.shape}")
        if self.colorspace not in _CHANNELS:
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        if self.values.shape[0] != _CHANNELS[self.colorspace]:
            raise ValueError(
                f"colorspace {self.colorspace} needs {_CHANNELS[self.colorspace]} channels, "
                f"got {self.values.shape[0]}")

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    def copy(self):
        return ImagePlane(self.values.copy(), self.colorspace)

    def quantized(self):
        """Clamp to [0, 255] and round half-away-from-zero to integers."""
        return np.floor(np.clip(self.values, 0.0, 255.0) + 0.5)

    def to_bytes(self):
        return self.quantized().astype(np.uint8)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def load_image(path):
    """Read an 8-bit PNG, PPM or PGM file into an ImagePlane."""
    if not os.path.exists(path):
        raise ImageIOError(f"no such image file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic in (b"P6", b"P5"):
        return _load_pnm(path)
    if magic == b"\x89P":
        return _load_png(path)
    raise ImageIOError(f"unsupported image format in {path} (magic {magic!r})")


def save_image(image, path):
    """Write an image as 8-bit PNG or binary PPM/PGM, chosen by extension."""
    ext = os.path.splitext(path)[1].lower()
    data = image.to_bytes()
    if ext in (".ppm", ".pgm"):
        _save_pnm(data, path)
    elif ext == ".png":
        if data.shape[0] == 1:
            pil = Image.fromarray(data[0], mode="L")
        else:
            pil = Image.fromarray(data.transpose(1, 2, 0), mode="RGB")
        pil.save(path, format="PNG")
    else:
        raise ImageIOError(f"unsupported output format {ext!r} for {path}")


def _load_png(path):
    try:
        with Image.open(path) as pil:
            pil.load()
            if pil.mode == "L":
                arr = np.asarray(pil, dtype=np.float64)[None]
                return ImagePlane(arr, "Y")
            rgb = pil.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1)
            return ImagePlane(arr, "RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageIOError(f"cannot decode PNG {path}: {exc}") from exc


def _load_pnm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        header, offset = _parse_pnm_header(raw)
    except ValueError as exc:
        raise ImageIOError(f"bad PPM/PGM header in {path}: {exc}") from exc
    magic, w, h, maxval = header
    if maxval != 255:
        raise ImageIOError(f"unsupported maxval {maxval} in {path} (only 255)")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = raw[offset:offset + need]
    if len(payload) < need:
        raise ImageIOError(f"truncated PPM/PGM file {path}: "
                           f"expected {need} pixel bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    arr = arr.transpose(2, 0, 1).astype(np.float64)
    return ImagePlane(arr, "RGB" if channels == 3 else "Y")


def _parse_pnm_header(raw):
    # magic, whitespace-separated width/height/maxval, comments allowed
    pos = 2
    magic = raw[:2]
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("header ended early")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    return (magic, fields[0], fields[1], fields[2]), pos


def _save_pnm(data, path):
    channels, h, w = data.shape
    if channels == 3:
        magic, body = b"P6", data.transpose(1, 2, 0).tobytes()
    elif channels == 1:
        magic, body = b"P5", data[0].tobytes()
    else:
        raise ImageIOError(f"PPM/PGM supports 1 or 3 channels, got {channels}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _cubic_kernel(t):
    # cubic convolution kernel with a = -0.5 (Catmull-Rom family)
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    inner = 1.5 * at3 - 2.5 * at2 + 1.0
    outer = -0.5 * at3 + 2.5 * at2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, inner, np.where(at < 2.0, outer, 0.0))


def _bicubic_matrix(n_in, n_out):
    # rows: output samples; 4 taps per row, edge taps clamped
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    mat = np.zeros((n_out, n_in))
    for j in range(-1, 3):
        tap = base + j
        weight = _cubic_kernel(src - tap)
        tap = np.clip(tap, 0, n_in - 1)
        np.add.at(mat, (np.arange(n_out), tap), weight)
    return mat


def resize_bicubic(image, out_h, out_w):
    """Separable bicubic resampling (a = -0.5), edge samples clamped."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    mh = _bicubic_matrix(image.height, out_h)
    mw = _bicubic_matrix(image.width, out_w)
    out = np.einsum("oh,chw,pw->cop", mh, image.values, mw, optimize=True)
    return ImagePlane(out, image.colorspace)


def _symmetric_indices(n, pad):
    # half-sample symmetric reflection: edge pixels repeat (… 1 0 | 0 1 … n-1 | n-1 n-2 …)
    idx = np.arange(-pad, n + pad)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


def gaussian_blur(image, sigma):
    """Separable Gaussian blur, kernel radius ceil(3*sigma), reflect boundary."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    out = image.values
    for axis in (1, 2):
        n = out.shape[axis]
        idx = _symmetric_indices(n, radius)
        padded = np.take(out, idx, axis=axis)
        win = np.lib.stride_tricks.sliding_window_view(padded, 2 * radius + 1, axis=axis)
        out = np.tensordot(win, kernel, axes=([-1], [0]))
    return ImagePlane(out, image.colorspace)


# ---------------------------------------------------------------------------
# color
# ---------------------------------------------------------------------------

def rgb_to_ycbcr(image):
    """Full-range BT.601 RGB -> YCbCr; Cb and Cr are offset by 128."""
    if image.colorspace != "RGB":
        raise ValueError(f"rgb_to_ycbcr needs an RGB image, got {image.colorspace}")
    r, g, b = image.values
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 + (b - y) * (0.5 / (1.0 - 0.114))
    cr = 128.0 + (r - y) * (0.5 / (1.0 - 0.299))
    return ImagePlane(np.stack([y, cb, cr]), "YCbCr")


def y_channel(image):
    """Extract the luma channel as a single-plane image."""
    if image.colorspace == "Y":
        return image.copy()
    if image.colorspace == "YCbCr":
        return ImagePlane(image.values[:1].copy(), "Y")
    if image.colorspace == "RGB":
        return ImagePlane(rgb_to_ycbcr(image).values[:1], "Y")
    raise ValueError(f"cannot extract Y from colorspace {image.colorspace}")


# ---------------------------------------------------------------------------
# histogram matching
# ---------------------------------------------------------------------------

def histogram_match(source, reference):
    """Monotone per-channel CDF remapping of source onto reference's histogram.

    Both images are quantized to 256 bins; each source bin maps to the
    smallest reference value whose CDF reaches the source bin's CDF. The
    reference may have a different spatial size.
    """
    if source.channels != reference.channels:
        raise ValueError(f"channel mismatch: source has {source.channels}, "
                         f"reference has {reference.channels}")
    src_q = source.quantized().astype(np.int64)
    ref_q = reference.quantized().astype(np.int64)
    out = np.empty_like(source.values)
    for c in range(source.channels):
        src_hist = np.bincount(src_q[c].ravel(), minlength=256)
        ref_hist = np.bincount(ref_q[c].ravel(), minlength=256)
        src_cdf = np.cumsum(src_hist) / src_hist.sum()
        ref_cdf = np.cumsum(ref_hist) / ref_hist.sum()
        mapping = np.searchsorted(ref_cdf, src_cdf, side="left")
        mapping = np.minimum(mapping, 255)
        out[c] = mapping[src_q[c]].astype(np.float64)
    return ImagePlane(out, source.colorspace)
