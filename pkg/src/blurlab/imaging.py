"""Images and the blur degradation pipeline.

Images are float64 arrays in [0, 1], shaped (height, width, channels)
with 1 (gray) or 3 (RGB) channels, immutable after construction.

Blur is always applied at a fixed *canonical* scale so that a kernel's
physical footprint is consistent across examples; the blurred result is
quantized to 8-bit levels (as a camera would) and only then resized to
the network's operating scale.  ``degrade_eval`` is the deterministic
evaluation pipeline; ``degrade_train`` adds the training-time scale and
crop augmentation around the same core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ImageFormatError, InvalidParameterError
from .psf import Kernel

__all__ = [
    "Image",
    "resize",
    "resize_array",
    "quantize8",
    "convolve",
    "center_crop",
    "random_crop",
    "degrade_eval",
    "degrade_train",
    "assign_kernel",
    "laplacian_energy",
    "save_image",
    "load_image",
]

# Kernels with more cells than this go through the FFT route when the
# caller asks for automatic method choice.
_AUTO_FFT_AREA = 49


@dataclass(frozen=True)
class Image:
    """An immutable float image in [0, 1], shape (h, w, c), c in {1, 3}."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise InvalidParameterError(f"image must be (h, w, c) with c in {{1, 3}}, got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidParameterError(f"image must be non-empty, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidParameterError("image values must be finite")
        if v.min() < 0.0 or v.max() > 1.0:
            raise InvalidParameterError(
                f"image values must lie in [0, 1], got [{v.min()}, {v.max()}]"
            )
        v = v.copy() if v.base is not None or v is self.values else v
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def plane(self) -> np.ndarray:
        """The (h, w) array of a single-channel image."""
        if self.channels != 1:
            raise InvalidParameterError("plane() requires a single-channel image")
        return self.values[:, :, 0]


def resize_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an (h, w) or (h, w, c) array, without clamping.

    Uses the pixel-center convention ``src = (dst + 0.5) * (in/out) - 0.5``
    with edge clamping; resizing to the original shape returns the values
    unchanged.
    """
    if out_h < 1 or out_w < 1:
        raise InvalidParameterError(f"resize target must be positive, got {(out_h, out_w)}")
    squeeze = arr.ndim == 2
    a = arr[:, :, None] if squeeze else arr
    h, w = a.shape[:2]
    if (out_h, out_w) == (h, w):
        out = a.copy()
        return out[:, :, 0] if squeeze else out

    rows = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    cols = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None, None]
    fc = (cols - c0)[None, :, None]
    out = (
        a[np.ix_(r0, c0)] * (1 - fr) * (1 - fc)
        + a[np.ix_(r0, c1)] * (1 - fr) * fc
        + a[np.ix_(r1, c0)] * fr * (1 - fc)
        + a[np.ix_(r1, c1)] * fr * fc
    )
    return out[:, :, 0] if squeeze else out


def _scaled_shape(h: int, w: int, target: int, mode: str) -> tuple[int, int]:
    if target < 1:
        raise InvalidParameterError(f"scale target must be >= 1, got {target}")
    if mode == "min_side":
        if h <= w:
            return target, max(target, round(w * target / h))
        return max(target, round(h * target / w)), target
    if mode == "geometric_mean":
        s = target / math.sqrt(h * w)
        return max(1, round(h * s)), max(1, round(w * s))
    raise InvalidParameterError(f"unknown scale mode {mode!r}")


def resize(image: Image, target: int, mode: str = "min_side") -> Image:
    """Resize so the min side (or geometric mean of sides) equals ``target``.

    Aspect ratio is preserved up to rounding; values are clamped back to
    [0, 1] to absorb bilinear overshoot at the boundaries of the float
    budget.
    """
    out_h, out_w = _scaled_shape(image.height, image.width, target, mode)
    out = resize_array(image.values, out_h, out_w)
    return Image(np.clip(out, 0.0, 1.0))


def quantize8(image: Image) -> Image:
    """Quantize to the 256 8-bit levels, rounding half up: v -> round(v*255)/255."""
    codes = np.floor(image.values * 255.0 + 0.5)
    return Image(codes / 255.0)


def convolve(image: Image, kernel: Kernel, method: str = "auto") -> Image:
    """Convolve per channel with symmetric (edge-mirroring) padding.

    ``method`` is ``"direct"`` (spatial accumulation, the reference
    route), ``"fft"`` (frequency domain), or ``"auto"`` which picks fft
    for kernels with more than 49 cells.  Both routes compute true
    convolution on the same padded input and agree to ~1e-6.
    """
    kh, kw = kernel.shape
    if kh > 2 * image.height or kw > 2 * image.width:
        raise InvalidParameterError(
            f"kernel {kernel.shape} larger than twice the image extent "
            f"({image.height}x{image.width})"
        )
    if method == "auto":
        method = "fft" if kernel.area > _AUTO_FFT_AREA else "direct"
    if method not in ("direct", "fft"):
        raise InvalidParameterError(f"unknown convolution method {method!r}")
    if kh == 1 and kw == 1:
        return Image(image.values * kernel.weights[0, 0])

    ry, rx = kh // 2, kw // 2
    out = np.empty_like(image.values)
    k = kernel.weights
    for c in range(image.channels):
        padded = np.pad(image.values[:, :, c], ((ry, ry), (rx, rx)), mode="symmetric")
        if method == "direct":
            out[:, :, c] = _convolve_direct(padded, k)
        else:
            out[:, :, c] = _convolve_fft(padded, k)
    return Image(np.clip(out, 0.0, 1.0))


def _convolve_direct(padded: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-mode true convolution by shifting and accumulating slices."""
    kh, kw = k.shape
    h = padded.shape[0] - kh + 1
    w = padded.shape[1] - kw + 1
    out = np.zeros((h, w))
    for u, v in zip(*np.nonzero(k)):
        out += k[u, v] * padded[kh - 1 - u : kh - 1 - u + h, kw - 1 - v : kw - 1 - v + w]
    return out


def _convolve_fft(padded: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Valid-mode true convolution via zero-padded real FFTs."""
    kh, kw = k.shape
    fh = padded.shape[0] + kh - 1
    fw = padded.shape[1] + kw - 1
    spec = np.fft.rfft2(padded, s=(fh, fw)) * np.fft.rfft2(k, s=(fh, fw))
    full = np.fft.irfft2(spec, s=(fh, fw))
    h = padded.shape[0] - kh + 1
    w = padded.shape[1] - kw + 1
    return full[kh - 1 : kh - 1 + h, kw - 1 : kw - 1 + w]


def center_crop(image: Image, size: int) -> Image:
    """The centered size x size crop (offsets round down)."""
    if size < 1 or size > image.height or size > image.width:
        raise InvalidParameterError(
            f"crop {size} does not fit image {image.height}x{image.width}"
        )
    r = (image.height - size) // 2
    c = (image.width - size) // 2
    return Image(image.values[r : r + size, c : c + size])


def random_crop(image: Image, size: int, rng: np.random.Generator) -> Image:
    """A uniformly random size x size crop; draws row offset then column."""
    if size < 1 or size > image.height or size > image.width:
        raise InvalidParameterError(
            f"crop {size} does not fit image {image.height}x{image.width}"
        )
    r = int(rng.integers(0, image.height - size + 1))
    c = int(rng.integers(0, image.width - size + 1))
    return Image(image.values[r : r + size, c : c + size])


def degrade_eval(
    image: Image,
    kernel: Kernel,
    canonical: int,
    net_scale: int,
    mode: str = "min_side",
) -> Image:
    """Deterministic evaluation degradation.

    Resize to the canonical blur scale, convolve, quantize to 8 bits,
    then resize to the network scale.  With a delta kernel and
    ``canonical == net_scale`` this reduces to ``quantize8(resize(...))``.
    """
    at_canonical = resize(image, canonical, mode)
    blurred = quantize8(convolve(at_canonical, kernel))
    return resize(blurred, net_scale, mode)


def degrade_train(
    image: Image,
    kernel: Kernel,
    pre_scales: tuple[int, ...],
    canonical: int,
    net_scale: int,
    crop: int,
    rng: np.random.Generator,
) -> Image:
    """Training-time degradation with scale and crop augmentation.

    A pre-blur scale is drawn uniformly from ``pre_scales``; the image is
    resized there, blurred and quantized, then resized by the *exact
    factor* ``net_scale / canonical`` (so the blur footprint relative to
    the network input stays consistent regardless of the drawn scale),
    and finally a random crop is taken.
    """
    if not pre_scales:
        raise InvalidParameterError("pre_scales must be non-empty")
    s = int(pre_scales[int(rng.integers(0, len(pre_scales)))])
    at_s = resize(image, s, "min_side")
    blurred = quantize8(convolve(at_s, kernel))
    factor = net_scale / canonical
    out_h = round(blurred.height * factor)
    out_w = round(blurred.width * factor)
    if crop > out_h or crop > out_w:
        raise InvalidParameterError(
            f"crop {crop} does not fit post-resize image {out_h}x{out_w} "
            f"(pre_scale {s}, factor {factor:.4f})"
        )
    resized = Image(np.clip(resize_array(blurred.values, out_h, out_w), 0.0, 1.0))
    return random_crop(resized, crop, rng)


def assign_kernel(item_id: int, bank_size: int) -> int:
    """Stable kernel-bank index for an item id (Knuth multiplicative hash)."""
    if item_id < 0:
        raise InvalidParameterError(f"item_id must be >= 0, got {item_id}")
    if bank_size < 1:
        raise InvalidParameterError(f"bank_size must be >= 1, got {bank_size}")
    return ((int(item_id) * 2654435761) % (2**32)) % bank_size


def laplacian_energy(image: Image) -> float:
    """Sum of |4-neighbor Laplacian| over interior pixels, summed over channels.

    A simple measure of high-frequency content; blur drives it down.
    """
    v = image.values
    lap = 4.0 * v[1:-1, 1:-1] - v[:-2, 1:-1] - v[2:, 1:-1] - v[1:-1, :-2] - v[1:-1, 2:]
    return float(np.abs(lap).sum())


# ---------------------------------------------------------------------------
# Binary PPM (P6) / PGM (P5) with 8-bit depth


def save_image(image: Image, path: str) -> None:
    """Write gray images as binary PGM (P5) and RGB as binary PPM (P6).

    Values map v -> round(v * 255) (half up); loading maps code c back to
    c / 255, so a quantized image round-trips bit-exactly.
    """
    codes = np.floor(image.values * 255.0 + 0.5).astype(np.uint8)
    magic = "P5" if image.channels == 1 else "P6"
    header = f"{magic}\n{image.width} {image.height}\n255\n".encode("ascii")
    body = codes[:, :, 0].tobytes() if image.channels == 1 else codes.tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read whitespace/comment-delimited header tokens; returns tokens and offset."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ImageFormatError("truncated image header")
        ch = data[i : i + 1]
        if ch == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # single whitespace byte after maxval


def load_image(path: str) -> Image:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if data[:2] == b"P5" else 3
    try:
        tokens, offset = _read_header_tokens(data, 4)
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except (ValueError, ImageFormatError) as exc:
        raise ImageFormatError(f"{path}: malformed header: {exc}") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (need 255)")
    need = w * h * channels
    body = data[offset : offset + need]
    if len(body) != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    codes = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    return Image(codes.astype(np.float64) / 255.0)
