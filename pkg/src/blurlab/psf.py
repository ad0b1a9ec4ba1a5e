"""Point-spread-function construction.

Four blur families are provided: defocus disks, horizontal/vertical
motion boxes, isotropic Gaussians, and synthetic camera-shake
trajectories.  Every constructor returns a :class:`Kernel` whose weights
are non-negative, odd-sized in both dimensions, and sum to one, so that
convolution preserves mean intensity.

Kernels can be written to and read from a small text format (``PSF1``)
that round-trips values to better than 1e-8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateKernelError, InvalidParameterError, KernelFormatError
from .seeding import generator

__all__ = [
    "KINDS",
    "Kernel",
    "normalize",
    "delta_kernel",
    "disk_kernel",
    "box_kernel",
    "gaussian_kernel",
    "camera_shake_kernel",
    "save_kernel",
    "load_kernel",
]

KINDS = frozenset({"delta", "disk", "box_h", "box_v", "gaussian", "camera_shake"})

# Camera-shake geometry: trajectories live on a 15x15 grid and are
# centered inside a 17x17 canvas.
_SHAKE_GRID = 15
_SHAKE_CANVAS = 17
_SHAKE_POINTS = 6

_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Kernel:
    """A 2-D convolution kernel with unit total weight.

    ``weights`` is a read-only float64 array with odd height and width.
    ``kind`` names the constructor family and ``params`` records the
    construction parameters (used by the PSF1 file format).
    """

    weights: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise InvalidParameterError(f"kernel weights must be 2-D, got shape {w.shape}")
        if w.shape[0] % 2 == 0 or w.shape[1] % 2 == 0:
            raise InvalidParameterError(f"kernel extent must be odd in both axes, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise InvalidParameterError("kernel weights must be finite")
        if np.any(w < 0):
            raise InvalidParameterError("kernel weights must be non-negative")
        total = float(w.sum())
        if abs(total - 1.0) > _SUM_TOL:
            raise InvalidParameterError(f"kernel weights must sum to 1 (got {total!r})")
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown kernel kind {self.kind!r}")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape  # type: ignore[return-value]

    @property
    def area(self) -> int:
        """Number of cells in the kernel grid (used by convolution method choice)."""
        return int(self.weights.size)


def normalize(weights: np.ndarray) -> np.ndarray:
    """Scale a non-negative weight grid to unit sum.

    Raises :class:`DegenerateKernelError` when the total weight is not
    strictly positive.
    """
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if not math.isfinite(total) or total <= 0.0:
        raise DegenerateKernelError(f"cannot normalize kernel with total weight {total!r}")
    return w / total


def delta_kernel() -> Kernel:
    """The 1x1 identity kernel (no blur)."""
    return Kernel(np.array([[1.0]]), "delta", {})


def _trim_zero_border(w: np.ndarray) -> np.ndarray:
    """Symmetrically drop all-zero border rows/columns, keeping odd extents."""
    while w.shape[0] > 1 and not w[0].any() and not w[-1].any():
        w = w[1:-1]
    while w.shape[1] > 1 and not w[:, 0].any() and not w[:, -1].any():
        w = w[:, 1:-1]
    return w


def disk_kernel(radius: float) -> Kernel:
    """Uniform defocus disk of the given radius in pixels.

    A grid cell belongs to the disk when its center lies within
    ``radius`` of the kernel center; member cells share the weight
    equally.  All-zero border rows/columns are trimmed, so tiny radii
    (< 1) collapse to the 1x1 identity.
    """
    if not (radius > 0 and math.isfinite(radius)):
        raise InvalidParameterError(f"disk radius must be positive and finite, got {radius!r}")
    half = math.ceil(radius)
    coords = np.arange(-half, half + 1, dtype=np.float64)
    dy, dx = np.meshgrid(coords, coords, indexing="ij")
    member = (dy * dy + dx * dx) <= radius * radius
    w = _trim_zero_border(member.astype(np.float64))
    return Kernel(normalize(w), "disk", {"radius": float(radius)})


def box_kernel(length: int, orientation: str) -> Kernel:
    """Uniform 1-D motion box, horizontal (``"h"``) or vertical (``"v"``).

    Even lengths are padded to odd extent with one trailing zero so the
    motion segment stays contiguous and its centroid stays as close to
    the grid center as possible.
    """
    if orientation not in ("h", "v"):
        raise InvalidParameterError(f"box orientation must be 'h' or 'v', got {orientation!r}")
    if not isinstance(length, (int, np.integer)) or length < 1:
        raise InvalidParameterError(f"box length must be a positive integer, got {length!r}")
    n = int(length)
    row = np.full(n, 1.0 / n)
    if n % 2 == 0:
        row = np.append(row, 0.0)
    w = row[None, :] if orientation == "h" else row[:, None]
    return Kernel(w, "box_h" if orientation == "h" else "box_v", {"length": n})


def gaussian_kernel(sigma: float) -> Kernel:
    """Isotropic Gaussian blur truncated at three standard deviations.

    The grid side is ``2*ceil(3*sigma) + 1``; weights are the sampled
    density at cell centers, normalized to unit sum.
    """
    if not (sigma > 0 and math.isfinite(sigma)):
        raise InvalidParameterError(f"gaussian sigma must be positive and finite, got {sigma!r}")
    half = math.ceil(3.0 * sigma)
    coords = np.arange(-half, half + 1, dtype=np.float64)
    dy, dx = np.meshgrid(coords, coords, indexing="ij")
    w = np.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))
    return Kernel(normalize(w), "gaussian", {"sigma": float(sigma)})


# ---------------------------------------------------------------------------
# Camera shake


def _catmull_rom(points: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Evaluate a uniform Catmull-Rom spline through ``points`` at ``t``.

    ``t`` is a global parameter in ``[0, len(points) - 1]``; integer
    values hit the control points exactly.  Endpoint tangents come from
    duplicated end control points.
    """
    n_seg = len(points) - 1
    ext = np.vstack([points[:1], points, points[-1:]])
    seg = np.clip(np.floor(t).astype(int), 0, n_seg - 1)
    u = (t - seg)[:, None]
    p0, p1, p2, p3 = ext[seg], ext[seg + 1], ext[seg + 2], ext[seg + 3]
    return 0.5 * (
        2.0 * p1
        + (p2 - p0) * u
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u**2
        + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u**3
    )


def _splat_bilinear(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray, w: np.ndarray) -> None:
    """Accumulate point masses into a grid with bilinear weights.

    Contributions falling outside the canvas are discarded.
    """
    h, wid = canvas.shape
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = ys - y0
    fx = xs - x0
    for dy_, dx_, frac in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy_
        xx = x0 + dx_
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < wid)
        np.add.at(canvas, (yy[ok], xx[ok]), w[ok] * frac[ok])


def _translate_bilinear(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Shift an image by a real-valued offset with bilinear resampling.

    Samples falling outside the source are treated as zero, so mass near
    the border can be lost; callers renormalize afterwards.
    """
    h, w = img.shape
    rows = np.arange(h, dtype=np.float64)[:, None] - dy
    cols = np.arange(w, dtype=np.float64)[None, :] - dx
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros_like(img)
    for dr, dc, frac in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.zeros_like(img)
        vals[ok] = img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)][ok]
        out += vals * frac
    return out


def _center_of_mass(img: np.ndarray) -> tuple[float, float]:
    total = img.sum()
    rows = np.arange(img.shape[0], dtype=np.float64)
    cols = np.arange(img.shape[1], dtype=np.float64)
    return (
        float((img.sum(axis=1) * rows).sum() / total),
        float((img.sum(axis=0) * cols).sum() / total),
    )


def camera_shake_kernel(seed: int) -> Kernel:
    """Synthesize a camera-shake kernel from a 64-bit seed.

    Procedure
    ---------
    1. Draw six control points uniformly on the 15x15 trajectory grid
       and six intensities uniformly in [0.25, 1].
    2. Pass a uniform Catmull-Rom spline through the points and sample
       it at ``max(64, ceil(20 * arc_length))`` evenly spaced parameter
       values; each sample's weight interpolates the intensities of its
       segment's endpoints.
    3. Splat the samples bilinearly onto the 15x15 grid, embed the
       result in a 17x17 canvas, and translate it (bilinearly) so its
       center of mass lands on the center pixel.
    4. Clamp tiny negatives and normalize to unit sum.

    The result is a pure function of the seed.
    """
    rng = generator(int(seed))
    pts = rng.uniform(0.0, _SHAKE_GRID, size=(_SHAKE_POINTS, 2))  # (y, x) rows
    intensities = rng.uniform(0.25, 1.0, size=_SHAKE_POINTS)

    n_seg = _SHAKE_POINTS - 1
    # Arc length from a fixed fine sampling, then the final sample count.
    t_fine = np.linspace(0.0, n_seg, 64 * n_seg + 1)
    path = _catmull_rom(pts, t_fine)
    arc = float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())
    n_samples = max(64, math.ceil(20.0 * arc))

    t = np.linspace(0.0, n_seg, n_samples)
    samples = _catmull_rom(pts, t)
    seg = np.clip(np.floor(t).astype(int), 0, n_seg - 1)
    u = t - seg
    w = (1.0 - u) * intensities[seg] + u * intensities[seg + 1]

    grid = np.zeros((_SHAKE_GRID, _SHAKE_GRID))
    _splat_bilinear(grid, samples[:, 0], samples[:, 1], w)

    canvas = np.zeros((_SHAKE_CANVAS, _SHAKE_CANVAS))
    canvas[1 : 1 + _SHAKE_GRID, 1 : 1 + _SHAKE_GRID] = grid
    if canvas.sum() <= 0.0:
        raise DegenerateKernelError(f"camera shake seed {seed} produced an empty trajectory")

    # Center the mass on the middle pixel.  Translating can clip mass at
    # the canvas border, which moves the center of mass again, so refine
    # the offset iteratively -- always resampling the original embedding
    # once per attempt rather than compounding resamples.
    center = (_SHAKE_CANVAS - 1) / 2.0
    com_r, com_c = _center_of_mass(canvas)
    dr, dc = center - com_r, center - com_c
    shifted = canvas
    for _ in range(12):
        if abs(dr) < 1e-12 and abs(dc) < 1e-12:
            break
        shifted = _translate_bilinear(canvas, dr, dc)
        if shifted.sum() <= 0.0:
            raise DegenerateKernelError(f"camera shake seed {seed} lost all mass while centering")
        com_r, com_c = _center_of_mass(shifted)
        err_r, err_c = center - com_r, center - com_c
        if abs(err_r) < 0.01 and abs(err_c) < 0.01:
            break
        dr += err_r
        dc += err_c

    canvas = np.clip(shifted, 0.0, None)
    return Kernel(normalize(canvas), "camera_shake", {"seed": int(seed)})


# ---------------------------------------------------------------------------
# PSF1 text format


def save_kernel(kernel: Kernel, path: str) -> None:
    """Write a kernel as PSF1 text.

    Line 1: ``PSF1 <height> <width> <kind>``; line 2: ``params`` with
    ``key=value`` tokens; then one row of weights per line with 17
    significant digits (round-trips float64 exactly).
    """
    h, w = kernel.shape
    lines = [f"PSF1 {h} {w} {kernel.kind}"]
    tokens = []
    for key in sorted(kernel.params):
        val = kernel.params[key]
        tokens.append(f"{key}={val:d}" if isinstance(val, int) else f"{key}={val!r}")
    lines.append(" ".join(["params"] + tokens))
    for row in kernel.weights:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_kernel(path: str) -> Kernel:
    """Read a PSF1 file back into a :class:`Kernel`."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise KernelFormatError(f"{path}: empty PSF file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "PSF1":
        raise KernelFormatError(f"{path}: line 1: malformed PSF1 header {lines[0]!r}")
    try:
        h, w = int(head[1]), int(head[2])
    except ValueError:
        raise KernelFormatError(f"{path}: line 1: non-integer kernel extent") from None
    kind = head[3]
    if kind not in KINDS:
        raise KernelFormatError(f"{path}: line 1: unknown kernel kind {kind!r}")
    if len(lines) < 2 or not lines[1].startswith("params"):
        raise KernelFormatError(f"{path}: line 2: expected a params line")
    params: dict = {}
    for token in lines[1].split()[1:]:
        if "=" not in token:
            raise KernelFormatError(f"{path}: line 2: malformed params token {token!r}")
        key, _, val = token.partition("=")
        try:
            params[key] = int(val)
        except ValueError:
            try:
                params[key] = float(val)
            except ValueError:
                raise KernelFormatError(
                    f"{path}: line 2: non-numeric params value {token!r}"
                ) from None
    rows = lines[2:]
    if len(rows) != h:
        raise KernelFormatError(f"{path}: expected {h} weight rows, found {len(rows)}")
    grid = np.empty((h, w))
    for i, row in enumerate(rows):
        cells = row.split()
        if len(cells) != w:
            raise KernelFormatError(f"{path}: line {i + 3}: expected {w} cells, found {len(cells)}")
        try:
            grid[i] = [float(c) for c in cells]
        except ValueError:
            raise KernelFormatError(f"{path}: line {i + 3}: non-numeric cell") from None
    try:
        return Kernel(grid, kind, params)
    except InvalidParameterError as exc:
        raise KernelFormatError(f"{path}: invalid kernel: {exc}") from exc
