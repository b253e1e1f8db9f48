"""Half-quadratic splitting for TV-regularised deconvolution.

Solves ``min_u mu/2 ||y - k*u||^2 + sum_i ||d_i * u||_1`` through the
relaxation

    mu/2 ||y - Ku||^2 + sum_i ||w_i||_1 + beta/2 sum_i ||D_i u - w_i||^2

by alternating an exact u-solve (a pointwise division in the DFT domain,
since every operator is circulant) with elementwise soft-thresholding of
``D_i u``. The layer update defined here is shared with the unrolled
network in :mod:`decun.network`, so the two agree bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, IllPosedError, ParameterError
from .imaging import as_grid, circular_convolve, filter_spectrum, irfft2, rfft2

SINGULAR_TOL = 1e-12


def gradient_filters(footprint=(3, 3)):
    """Difference pair with taps ``[-1, 1]`` (horizontal) and its transpose.

    The taps sit at the centre and right of (resp. below) the centre of an
    odd footprint. Applied as a convolution the horizontal filter gives
    ``u[r, c-1] - u[r, c]``; its magnitude spectrum equals that of the
    forward difference, so the TV term and every spectral quantity agree.
    """
    fh, fw = footprint
    if fh < 3 or fw < 3 or fh % 2 == 0 or fw % 2 == 0:
        raise DimensionError(f"footprint must be odd and at least 3x3, got {footprint}")
    bank = np.zeros((2, fh, fw))
    ch, cw = fh // 2, fw // 2
    bank[0, ch, cw] = -1.0
    bank[0, ch, cw + 1] = 1.0
    bank[1, ch, cw] = -1.0
    bank[1, ch + 1, cw] = 1.0
    return bank


def soft_threshold(x, lam):
    """Elementwise ``sgn(x) * max(|x| - lam, 0)`` with ``sgn(0) = 0``."""
    lam = np.asarray(lam)
    if np.any(lam < 0):
        raise ParameterError(f"threshold must be >= 0, got {lam}")
    # x - clip(x) equals sgn(x) * max(|x| - lam, 0) exactly, in two passes
    return x - np.clip(x, -lam, lam)


def isotropic_shrink_2d(v, lam):
    """Shrink the Euclidean norm of 2-vectors (last axis) by ``lam``.

    ``max(||v|| - lam, 0) * v / ||v||``, with ``0 -> 0``.
    """
    if lam < 0:
        raise ParameterError(f"threshold must be >= 0, got {lam}")
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 2:
        raise DimensionError(f"expected 2-vectors on the last axis, got {v.shape}")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.divide(np.maximum(norm - lam, 0.0), norm,
                      out=np.zeros_like(norm), where=norm > 0)
    return scale * v


class Observation:
    """Spectra of a blurred observation ``y`` and its kernel on one grid."""

    def __init__(self, y, kernel):
        y = as_grid(y, "observation")
        kernel = as_grid(kernel, "kernel")
        self.shape = y.shape
        self.y = y
        self.k_hat = filter_spectrum(kernel, y.shape, real=True)
        self.k_power = self.k_hat.real ** 2 + self.k_hat.imag ** 2
        self.kty_hat = np.conj(self.k_hat) * rfft2(y)


def system_diagonal(d_hat, ratio, k_power, layer=None):
    """Diagonal of ``M = D^T D + (mu/beta) K^T K`` in the DFT basis.

    ``d_hat`` has shape ``(..., C, H, W//2+1)``; ``ratio`` is ``mu/beta``
    broadcastable against ``(...)``. Raises :class:`IllPosedError` when the
    diagonal dips below ``SINGULAR_TOL``.
    """
    ratio = np.asarray(ratio, dtype=np.float64)[..., None, None]
    m = np.sum(d_hat.real ** 2 + d_hat.imag ** 2, axis=-3) + ratio * k_power
    if m.min() <= SINGULAR_TOL:
        flat = int(np.argmin(m))
        idx = np.unravel_index(flat, m.shape)
        where = f" at layer {layer}" if layer is not None else ""
        raise IllPosedError(
            f"kernel and filters share a null space{where}: M vanishes at "
            f"frequency bin {idx[-2:]} (value {m[idx]:.3e})",
            bin_index=tuple(int(i) for i in idx[-2:]), layer=layer)
    return m


def h_map(w, d_hat, beta, mu, obs, layer=None):
    """Affine part of a layer: solve for u, return ``(u_hat, D u)``.

    Broadcasts over leading axes: ``w`` is ``(..., C, H, W)``, ``d_hat`` is
    ``(..., C, H, W//2+1)`` and ``beta`` is shaped like ``(...)``. ``obs``
    needs ``shape``, ``k_power`` and ``kty_hat`` (possibly batched).
    """
    beta = np.asarray(beta, dtype=np.float64)
    ratio = mu / beta
    m = system_diagonal(d_hat, ratio, obs.k_power, layer)
    rhs = (np.sum(np.conj(d_hat) * rfft2(w), axis=-3)
           + ratio[..., None, None] * obs.kty_hat)
    u_hat = rhs / m
    return u_hat, irfft2(d_hat * u_hat[..., None, :, :], obs.shape)


def layer_update(w, d_hat, beta, mu, obs, layer=None):
    """One HQS step: exact u-solve, then ``w <- s_{1/beta}(D u)``.

    Returns ``(u, w_next)``; shapes as in :func:`h_map`.
    """
    beta = np.asarray(beta, dtype=np.float64)
    u_hat, z = h_map(w, d_hat, beta, mu, obs, layer)
    return irfft2(u_hat, obs.shape), soft_threshold(z, 1.0 / beta[..., None, None, None])


def apply_filters(u, filters):
    """``D u`` for a filter bank ``(C, fh, fw)``, returning ``(C, H, W)``."""
    d_hat = filter_spectrum(filters, u.shape, real=True)
    return irfft2(d_hat * rfft2(u), u.shape)


def adjoint_filters(w, filters):
    """``D^T w = sum_i d_i^T w_i`` for stacked channels ``w``."""
    shape = w.shape[-2:]
    d_hat = filter_spectrum(filters, shape, real=True)
    return irfft2(np.sum(np.conj(d_hat) * rfft2(w), axis=0), shape)


def _check_w(w, channels, shape):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (channels,) + tuple(shape):
        raise DimensionError(
            f"w must have shape {(channels,) + tuple(shape)}, got {w.shape}")
    return w


def solve_u(w, filters, kernel, y, mu, beta):
    """Solve ``(D^T D + (mu/beta) K^T K) u = D^T w + (mu/beta) K^T y``."""
    if mu <= 0 or beta <= 0:
        raise ParameterError("mu and beta must be positive")
    obs = Observation(y, kernel)
    filters = np.asarray(filters, dtype=np.float64)
    w = _check_w(w, filters.shape[0], obs.shape)
    d_hat = filter_spectrum(filters, obs.shape, real=True)
    ratio = mu / beta
    m = system_diagonal(d_hat, ratio, obs.k_power)
    rhs = np.sum(np.conj(d_hat) * rfft2(w), axis=0) + ratio * obs.kty_hat
    return irfft2(rhs / m, obs.shape)


@dataclass(frozen=True)
class HqsConfig:
    mu: float
    beta: float
    iterations: int
    filters: np.ndarray = None

    def __post_init__(self):
        if not self.mu > 0 or not self.beta > 0:
            raise ParameterError("mu and beta must be positive")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ParameterError(f"iterations must be an integer >= 1, got {self.iterations}")
        filters = gradient_filters() if self.filters is None else self.filters
        filters = np.array(filters, dtype=np.float64)
        if filters.ndim != 3:
            raise DimensionError(f"filters must be (C, fh, fw), got {filters.shape}")
        filters.setflags(write=False)
        object.__setattr__(self, "filters", filters)


@dataclass
class SplitState:
    """Latent image ``u`` and the C gradient surrogates ``w``."""

    u: np.ndarray
    w: np.ndarray


def _iterate(y, kernel, config, initial_w, record):
    obs = Observation(y, kernel)
    c = config.filters.shape[0]
    w = np.zeros((c,) + obs.shape) if initial_w is None else _check_w(
        initial_w, c, obs.shape)
    d_hat = filter_spectrum(config.filters, obs.shape, real=True)
    trace = [w] if record else None
    u = None
    for _ in range(config.iterations):
        u, w = layer_update(w, d_hat, config.beta, config.mu, obs)
        if record:
            trace.append(w)
    return SplitState(u=u, w=w), trace


def hqs_run(y, kernel, config, initial_w=None, record=False):
    """Run ``config.iterations`` HQS alternations from ``initial_w`` (zeros).

    Returns ``(u, trace)``; ``trace`` lists the w iterates (initial one
    included) when ``record`` is set, else ``None``.
    """
    state, trace = _iterate(y, kernel, config, initial_w, record)
    return state.u, trace


def hqs_state(y, kernel, config, initial_w=None):
    """Like :func:`hqs_run` but returns the final :class:`SplitState`."""
    return _iterate(y, kernel, config, initial_w, False)[0]


def energy(u, w, y, kernel, filters, mu, beta):
    """Relaxed objective minimised by alternating the two HQS half-steps."""
    residual = y - circular_convolve(u, kernel)
    gap = apply_filters(u, filters) - w
    return (0.5 * mu * np.sum(residual ** 2) + np.sum(np.abs(w))
            + 0.5 * beta * np.sum(gap ** 2))
