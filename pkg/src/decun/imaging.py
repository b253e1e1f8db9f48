"""Image grids, periodic convolution, kernels, metrics and file I/O.

Images are plain 2-D ``float64`` numpy arrays with nominal range [0, 1].
All convolutions are circular, so every filter is diagonalised by the 2-D
DFT; this is what lets the u-subproblem be solved by pointwise division.
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
from PIL import Image, UnidentifiedImageError
from scipy.signal import convolve2d

from .errors import DimensionError, ImageFormatError, ParameterError

PSNR_SENTINEL = 99.0

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def fft_workers():
    """Worker threads for the real FFTs, from ``DECUN_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("DECUN_THREADS", "1")))
    except ValueError:
        return 1


def rfft2(x):
    return scipy.fft.rfft2(x, workers=fft_workers())


def irfft2(x, shape):
    return scipy.fft.irfft2(x, s=shape, workers=fft_workers())


def as_grid(data, name="image"):
    """Validate ``data`` as a finite, non-empty 2-D grid and return a float copy."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"{name} has a zero-sized dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains NaN or Inf samples")
    return arr


def as_kernel(taps, name="kernel"):
    """Validate a blur kernel: finite, odd-sized in both directions."""
    arr = as_grid(taps, name)
    if arr.shape[0] % 2 == 0 or arr.shape[1] % 2 == 0:
        raise DimensionError(f"{name} dimensions must be odd, got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SpectralOperator:
    """Unnormalised 2-D DFT coefficients of a grid (or of a padded filter)."""

    coefficients: np.ndarray

    @property
    def height(self):
        return self.coefficients.shape[0]

    @property
    def width(self):
        return self.coefficients.shape[1]

    def __mul__(self, other):
        if not isinstance(other, SpectralOperator):
            return NotImplemented
        if other.coefficients.shape != self.coefficients.shape:
            raise DimensionError("spectral operators have different grid sizes")
        return SpectralOperator(self.coefficients * other.coefficients)


def spectral_transform(grid):
    """Forward DFT (unnormalised: a constant ``c`` maps to ``c*H*W`` at DC)."""
    arr = as_grid(grid, "grid")
    return SpectralOperator(np.fft.fft2(arr))


def inverse_spectral(op):
    """Inverse of :func:`spectral_transform`; returns the real part."""
    coeffs = np.asarray(op.coefficients)
    if coeffs.ndim != 2 or 0 in coeffs.shape:
        raise DimensionError(f"spectral operator has invalid shape {coeffs.shape}")
    return np.real(np.fft.ifft2(coeffs))


def pad_filter(taps, shape):
    """Embed a centred filter in a zero grid of ``shape`` with its centre at (0, 0).

    ``taps`` may carry leading batch axes; the last two are the footprint.
    """
    taps = np.asarray(taps, dtype=np.float64)
    fh, fw = taps.shape[-2:]
    h, w = shape
    if fh > h or fw > w:
        raise DimensionError(f"filter {fh}x{fw} does not fit in a {h}x{w} grid")
    out = np.zeros(taps.shape[:-2] + (h, w))
    out[..., :fh, :fw] = taps
    return np.roll(out, (-(fh // 2), -(fw // 2)), axis=(-2, -1))


def filter_spectrum(taps, shape, real=False):
    """DFT of a centred filter padded to ``shape``.

    With ``real=True`` the half spectrum from ``rfft2`` is returned, which is
    what the solvers use internally.
    """
    padded = pad_filter(taps, shape)
    if real:
        return rfft2(padded)
    return np.fft.fft2(padded)


def circular_convolve(image, kernel):
    """Periodic 2-D convolution ``k * u`` with a centred kernel."""
    image = as_grid(image)
    kernel = as_grid(kernel, "kernel")
    if kernel.shape[0] > image.shape[0] or kernel.shape[1] > image.shape[1]:
        raise DimensionError(
            f"kernel {kernel.shape} is larger than image {image.shape}")
    k_hat = filter_spectrum(kernel, image.shape, real=True)
    return irfft2(k_hat * rfft2(image), image.shape)


def add_gaussian_noise(image, sigma, seed=None):
    """Add i.i.d. zero-mean Gaussian noise; identical seeds give identical output."""
    image = as_grid(image)
    if not sigma >= 0:
        raise ParameterError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return image
    rng = np.random.default_rng(seed)
    return image + sigma * rng.standard_normal(image.shape)


def generate_linear_motion_kernel(length, angle):
    """Rasterise a straight motion trajectory into a normalised blur kernel.

    ``max(1, round(length))`` evenly spaced points cover a centred segment of
    the given length (unit spacing for integer lengths). Each point is
    splatted bilinearly onto the pixel grid. ``angle`` is measured
    counter-clockwise from the +x axis, with rows growing downwards. The
    result is cropped symmetrically, so it stays centred and odd-sized.
    """
    if not 0 <= length <= 20:
        raise ParameterError(f"motion length must lie in [0, 20], got {length}")
    if not 0 <= angle <= np.pi:
        raise ParameterError(f"motion angle must lie in [0, pi], got {angle}")
    n = max(1, int(round(length)))
    if n == 1:
        return np.ones((1, 1))
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, n)
    # rounding kills cos(pi/2) ~ 6e-17 style residue that would leak taps
    xs = np.round(t * np.cos(angle), 12)
    ys = np.round(-t * np.sin(angle), 12)
    r = int(np.ceil(max(np.abs(xs).max(), np.abs(ys).max())))
    size = 2 * r + 1
    k = np.zeros((size, size))
    for x, y in zip(xs + r, ys + r):
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if wx * wy > 0:
                    k[y0 + dy, x0 + dx] += wx * wy
    rows = np.flatnonzero(k.sum(axis=1))
    cols = np.flatnonzero(k.sum(axis=0))
    hr = int(np.abs(rows - r).max())
    hc = int(np.abs(cols - r).max())
    k = k[r - hr:r + hr + 1, r - hc:r + hc + 1]
    return k / k.sum()


def _check_pair(reference, test):
    reference = as_grid(reference, "reference")
    test = as_grid(test, "test")
    if reference.shape != test.shape:
        raise DimensionError(
            f"shape mismatch: {reference.shape} vs {test.shape}")
    return reference, test


def psnr(reference, test, peak=1.0, cap=PSNR_SENTINEL):
    """Peak signal-to-noise ratio in dB; identical inputs report ``cap``."""
    reference, test = _check_pair(reference, test)
    mse = np.mean((reference - test) ** 2)
    if mse == 0:
        return float(cap)
    return float(min(10 * np.log10(peak ** 2 / mse), cap))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(reference, test, data_range=1.0):
    """Mean structural similarity over all fully-contained 11x11 windows."""
    reference, test = _check_pair(reference, test)
    if min(reference.shape) < SSIM_WINDOW:
        raise DimensionError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def filt(a):
        return convolve2d(a, win, mode="valid")

    mu_x = filt(reference)
    mu_y = filt(test)
    sxx = filt(reference * reference) - mu_x * mu_x
    syy = filt(test * test) - mu_y * mu_y
    sxy = filt(reference * test) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


_FORMATS = {".pgm": "PPM", ".png": "PNG"}


def _format_for(path):
    fmt = _FORMATS.get(Path(path).suffix.lower())
    if fmt is None:
        raise ImageFormatError(
            f"unsupported image format {Path(path).suffix!r} (use .pgm or .png)")
    return fmt


def load_image(path):
    """Read an 8-bit grayscale PGM (P5) or PNG; samples are scaled by 1/255."""
    _format_for(path)
    try:
        with Image.open(path) as img:
            if img.mode == "1":
                img = img.convert("L")
            if img.mode != "L":
                raise ImageFormatError(
                    f"{path}: only 8-bit grayscale is supported, got mode {img.mode}")
            data = np.asarray(img, dtype=np.float64)
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: cannot decode image ({exc})") from exc
    return data / 255.0


def store_image(grid, path):
    """Write ``grid`` as 8-bit grayscale after clamping to [0, 1]."""
    fmt = _format_for(path)
    grid = as_grid(grid)
    q = np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path, format=fmt)


def load_kernel(path):
    """Parse the kernel text format: ``H W`` then H rows of W taps.

    Taps are renormalised to sum to one.
    """
    try:
        lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
        h, w = (int(v) for v in lines[0])
        rows = [[float(v) for v in ln] for ln in lines[1:]]
    except (ValueError, IndexError) as exc:
        raise ImageFormatError(f"{path}: malformed kernel file ({exc})") from exc
    if len(rows) != h or any(len(r) != w for r in rows):
        raise ImageFormatError(f"{path}: expected {h} rows of {w} taps")
    taps = as_kernel(rows)
    total = taps.sum()
    if total <= 0:
        raise ImageFormatError(f"{path}: kernel taps must have a positive sum")
    return taps / total


def save_kernel(taps, path):
    taps = as_kernel(taps)
    lines = [f"{taps.shape[0]} {taps.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in taps]
    Path(path).write_text("\n".join(lines) + "\n")


def synthetic_scene(size=64, seed=0, shapes=8):
    """Deterministic piecewise-smooth test image in [0, 1].

    A soft intensity ramp overlaid with random discs and rectangles; used
    wherever the workflow needs sharp images without an external dataset.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.3 + 0.2 * xx + 0.1 * yy
    for _ in range(shapes):
        cx, cy, r = rng.random(3)
        r = 0.05 + 0.2 * r
        value = rng.random()
        if rng.random() < 0.5:
            img[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = value
        else:
            img[(np.abs(xx - cx) < r) & (np.abs(yy - cy) < 0.7 * r)] = value
    return img
