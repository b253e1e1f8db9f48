"""Fixed points, error traces, spectral radii and rate bounds.

For a layer with filters D and penalty beta the affine part of the update is
``h(w) = G w + c`` with ``G = D M^{-1} D^T``. Every operator is circulant,
so G is block-diagonalised by the DFT. At each frequency it is the rank-one
matrix ``d d^H / (|d|^2 + (mu/beta)|k|^2)``, whose only nonzero eigenvalue
is ``S / (S + (mu/beta)|k|^2)`` with ``S = sum_i |d_i|^2``. G is symmetric
positive semidefinite, so ``sqrt(rho(G^2)) = rho(G)``.

Error traces are measured against the fixed point of plain HQS with the
limit pair ``(D_bar, beta_bar)``. With a summable schedule the recursion

    ||w^{l+1} - w*|| <= lambda_max ||w^l - w*|| + b_l,
    b_l = 3 |xi_l| ||u*|| + 2 |gamma_l| / beta_bar^2

unrolls into the discrete convolution evaluated by
:func:`rate_bound_general`. The exponential and p-series schedules have the
closed forms :func:`rate_bound_geometric` and :func:`rate_bound_pseries`.
"""

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConvergenceError, DegenerateReferenceError, IllPosedError,
                     ParameterError)
from .hqs import HqsConfig, Observation, gradient_filters, hqs_run, layer_update, solve_u
from .imaging import (add_gaussian_noise, circular_convolve, filter_spectrum,
                      generate_linear_motion_kernel, synthetic_scene)
from .network import DecunModel, decun_forward, layer_params

FIXED_POINT_TOL = 1e-9
FIXED_POINT_FAIL = 1e-5
DEGENERATE_TOL = 1e-12


@dataclass
class FixedPoint:
    w: np.ndarray
    u: np.ndarray
    residual: float


def fixed_point(filters, beta_bar, mu, y, kernel, iterations=500,
                tol=FIXED_POINT_TOL, fail_tol=FIXED_POINT_FAIL):
    """Reference fixed point from ``iterations`` HQS steps with ``(D_bar, beta_bar)``.

    ``residual`` is the relative change made by one further step. Above
    ``tol`` a warning is issued; above ``fail_tol`` a
    :class:`ConvergenceError` carrying the residual is raised. ``u`` is
    re-solved from the returned ``w``.
    """
    config = HqsConfig(mu=mu, beta=beta_bar, iterations=iterations, filters=filters)
    _, trace = hqs_run(y, kernel, config, record=True)
    w_star = trace[-1]
    obs = Observation(y, kernel)
    d_hat = filter_spectrum(config.filters, obs.shape, real=True)
    _, w_next = layer_update(w_star, d_hat, beta_bar, mu, obs)
    scale = np.linalg.norm(w_star)
    residual = float(np.linalg.norm(w_next - w_star) / (scale if scale > 0 else 1.0))
    if residual > fail_tol:
        raise ConvergenceError(
            f"fixed point not reached after {iterations} iterations "
            f"(relative residual {residual:.3e})", residual=residual)
    if residual > tol:
        warnings.warn(f"fixed-point residual {residual:.3e} exceeds {tol:.0e}",
                      RuntimeWarning, stacklevel=2)
    u_star = solve_u(w_star, config.filters, kernel, y, mu, beta_bar)
    return FixedPoint(w=w_star, u=u_star, residual=residual)


def spectral_radius_G(filters, kernel, mu, beta, shape):
    """``rho(D M^{-1} D^T)`` from the per-frequency eigenvalue formula."""
    if not mu > 0 or not beta > 0:
        raise ParameterError("mu and beta must be positive")
    filters = np.asarray(filters, dtype=np.float64)
    d_hat = filter_spectrum(filters, shape, real=True)
    k_hat = filter_spectrum(kernel, shape, real=True)
    s = np.sum(d_hat.real ** 2 + d_hat.imag ** 2, axis=0)
    data = (mu / beta) * (k_hat.real ** 2 + k_hat.imag ** 2)
    den = s + data
    if den.min() <= DEGENERATE_TOL:
        idx = np.unravel_index(int(np.argmin(den)), den.shape)
        raise IllPosedError(
            f"filters and kernel both vanish at frequency bin {tuple(int(i) for i in idx)}",
            bin_index=tuple(int(i) for i in idx))
    return float(np.max(s / den))


def layer_lambdas(model, kernel, shape, layers=None):
    """``lambda_l = sqrt(rho((G^l)^2)) = rho(G^l)`` for ``l = 1..layers``."""
    layers = model.layers if layers is None else layers
    out = []
    for l in range(1, layers + 1):
        filters, beta = layer_params(model, l)
        out.append(spectral_radius_G(filters, kernel, model.mu, beta, shape))
    return np.array(out)


def lambda_max(model, kernel, shape, l0_window=None):
    """``max(lambda_1, ..., lambda_l0, sqrt((1 + rho(G*)) / 2))``."""
    l0 = model.layers if l0_window is None else int(l0_window)
    if l0 < 1 or l0 > model.layers:
        raise ParameterError(f"l0_window must lie in 1..{model.layers}, got {l0_window}")
    rho_star = spectral_radius_G(model.d_bar, kernel, model.mu, model.beta_bar, shape)
    tail = np.sqrt(0.5 * (1.0 + rho_star))
    return float(max(layer_lambdas(model, kernel, shape, l0).max(), tail))


def b_sequence(schedule, u_star_norm, beta_bar, L):
    """``b_l = 3|xi_l| ||u*|| + 2|gamma_l| / beta_bar^2`` for ``l = 0..L``."""
    out = np.empty(L + 1)
    for l in range(L + 1):
        xi, gamma = schedule.coefficients(l)
        out[l] = 3 * abs(xi) * u_star_norm + 2 * abs(gamma) / beta_bar ** 2
    return out


def rate_bound_general(b, lambda_max, w0_dist):
    """``lambda^{l+1} w0_dist + sum_{i<=l} lambda^{l-i} b_i`` for ``l = 0..len(b)-1``.

    Evaluated by the running recursion ``B_l = lambda B_{l-1} + b_l``.
    """
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(b))
    acc = 0.0
    for l, bl in enumerate(b):
        acc = lambda_max * acc + bl
        out[l] = lambda_max ** (l + 1) * w0_dist + acc
    return out


def _check_lambda(lambda_max):
    if not 0 < lambda_max < 1:
        raise ParameterError(f"lambda_max must lie in (0, 1), got {lambda_max}")


def rate_bound_geometric(xi, gamma, lambda_max, w0_dist, u_star_norm, beta_bar, L):
    """Closed form of the general bound for ``xi_l = xi^l``, ``gamma_l = gamma^l``.

    Values for ``l = 0..L-1``. Each geometric sum is written as
    ``(r^{l+1} - lambda^{l+1}) / (r - lambda)``; numerator and denominator
    always share a sign, so every term is positive whichever side of
    ``lambda_max`` the ratio ``r`` lies on.
    """
    _check_lambda(lambda_max)
    for name, r in (("xi", xi), ("gamma", gamma)):
        if r == lambda_max:
            raise ParameterError(
                f"{name} equals lambda_max, the closed form is singular; "
                "use rate_bound_general with b_sequence instead")
    l = np.arange(L) + 1
    lam = lambda_max ** l
    return (lam * w0_dist
            + 3 * u_star_norm * (xi ** l - lam) / (xi - lambda_max)
            + 2 / beta_bar ** 2 * (gamma ** l - lam) / (gamma - lambda_max))


def rate_bound_pseries(p, lambda_max, w0_dist, u_star_norm, beta_bar, L):
    """Bound for ``xi_l = gamma_l = (1/(l+1))^p``, values for ``l = 0..L-1``."""
    _check_lambda(lambda_max)
    if not p >= 1:
        raise ParameterError(f"p must be >= 1, got {p}")
    terms = (1.0 / np.arange(1, L + 1)) ** p
    scale = 3 * u_star_norm + 2 / beta_bar ** 2
    return rate_bound_general(scale * terms, lambda_max, w0_dist)


@dataclass
class ConvergenceTrace:
    """Per-layer rows ``l = 1..L``; ``bound`` is relative like ``error``."""

    l: np.ndarray
    error: np.ndarray
    lambda_l: np.ndarray
    bound: np.ndarray = None

    @property
    def log_error(self):
        with np.errstate(divide="ignore"):
            return np.where(self.error > 0, np.log(self.error), -np.inf)

    def write_csv(self, path):
        lines = ["l,error,log_error,lambda_l,bound"]
        bound = self.bound if self.bound is not None else [np.nan] * len(self.l)
        for row in zip(self.l, self.error, self.log_error, self.lambda_l, bound):
            lines.append(f"{int(row[0])}," + ",".join(f"{float(v):.17g}" for v in row[1:]))
        Path(path).write_text("\n".join(lines) + "\n")


def read_trace_csv(path):
    data = np.genfromtxt(path, delimiter=",", names=True)
    data = np.atleast_1d(data)
    bound = data["bound"]
    return ConvergenceTrace(l=data["l"].astype(int), error=data["error"],
                            lambda_l=data["lambda_l"],
                            bound=None if np.all(np.isnan(bound)) else bound)


def distances(model, y, kernel, w_star, w0=None):
    """``||w^l - w*||`` for ``l = 0..L`` (absolute)."""
    _, trace = decun_forward(model, y, kernel, w0=w0, record=True)
    return np.array([np.linalg.norm(w - w_star) for w in trace.w])


def error_trace(model, y, kernel, w_star, bound=None):
    """Relative errors ``||w^l - w*|| / ||w*||`` for ``l = 1..L``.

    ``bound`` (absolute, one value per layer) is stored relative as well.
    """
    scale = np.linalg.norm(w_star)
    if scale <= DEGENERATE_TOL:
        raise DegenerateReferenceError("reference fixed point w* is zero")
    dist = distances(model, y, kernel, w_star)
    shape = np.shape(y)
    return ConvergenceTrace(
        l=np.arange(1, model.layers + 1),
        error=dist[1:] / scale,
        lambda_l=layer_lambdas(model, kernel, shape),
        bound=None if bound is None else np.asarray(bound) / scale)


def schedule_bound(model, kernel, shape, fp, w0_dist):
    """Absolute bound on ``||w^l - w*||`` for ``l = 1..L``, or None.

    Exponential and p-series use their closed forms. The zero schedule has
    ``b = 0`` and reduces to the pure q-linear envelope. The random schedule
    is not summable and gets no bound.
    """
    schedule = model.schedule
    L = model.layers
    lam = lambda_max(model, kernel, shape)
    u_norm = float(np.linalg.norm(fp.u))
    if schedule.kind == "exponential":
        if lam in (schedule.xi, schedule.gamma):
            return rate_bound_general(b_sequence(schedule, u_norm, model.beta_bar, L)[:L],
                                      lam, w0_dist)
        return rate_bound_geometric(schedule.xi, schedule.gamma, lam, w0_dist, u_norm,
                                    model.beta_bar, L)
    if schedule.kind == "p_series":
        return rate_bound_pseries(schedule.p, lam, w0_dist, u_norm, model.beta_bar, L)
    if schedule.kind == "zero":
        return rate_bound_general(np.zeros(L), lam, w0_dist)
    return None


def is_divergent(errors, window=10, rise=2.0, floor=1e-6):
    """Flag a trace whose tail has climbed away from its best value.

    Divergent when the final error is above ``floor`` and the median of the
    last ``window`` errors exceeds ``rise`` times the smallest error seen
    before that window. Slowly converging (even oscillating) traces pass;
    traces that drift back up do not.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if len(errors) <= window or errors[-1] <= floor:
        return False
    return bool(np.median(errors[-window:]) > rise * errors[:-window].min())


@dataclass
class SimulationInstance:
    """A synthetic deconvolution problem and the ingredients of a DECUN model."""

    u_true: np.ndarray
    y: np.ndarray
    kernel: np.ndarray
    d_bar: np.ndarray
    e_banks: np.ndarray
    beta_bar: float
    mu: float

    def model(self, schedule, layers=None):
        layers = self.e_banks.shape[0] if layers is None else layers
        if layers > self.e_banks.shape[0]:
            raise ParameterError(
                f"instance only has {self.e_banks.shape[0]} perturbation banks")
        return DecunModel(self.d_bar, self.e_banks[:layers], self.beta_bar, self.mu,
                          schedule)


def operator_norm(filters, shape):
    """Spectral norm of ``u -> (f_1 * u, ..., f_C * u)`` on a periodic grid."""
    f_hat = filter_spectrum(filters, shape, real=True)
    return float(np.sqrt(np.max(np.sum(f_hat.real ** 2 + f_hat.imag ** 2, axis=0))))


def reference_instance(size=64, layers=30, seed=0, kernel_length=7, kernel_angle=0.9,
                       beta_bar=10.0, mu=5e4, noise_sigma=1e-5, e_seed=1, e_norm=0.5):
    """The simulation problem used for convergence studies.

    A synthetic scene blurred by a linear motion kernel with light noise,
    gradient limit filters, and zero-mean random perturbation banks scaled
    to operator norm ``e_norm`` (so each ``||E^l|| <= 1``).
    """
    u_true = synthetic_scene(size, seed)
    kernel = generate_linear_motion_kernel(kernel_length, kernel_angle)
    y = add_gaussian_noise(circular_convolve(u_true, kernel), noise_sigma, seed)
    d_bar = gradient_filters()
    rng = np.random.default_rng(e_seed)
    e_banks = rng.standard_normal((layers,) + d_bar.shape)
    e_banks -= e_banks.mean(axis=(2, 3), keepdims=True)
    for bank in e_banks:
        bank *= e_norm / operator_norm(bank, u_true.shape)
    return SimulationInstance(u_true=u_true, y=y, kernel=kernel, d_bar=d_bar,
                              e_banks=e_banks, beta_bar=float(beta_bar), mu=float(mu))


@dataclass
class SimulationResult:
    trace: ConvergenceTrace
    fixed_point: FixedPoint
    lambda_max: float
    divergent: bool


def simulate(instance, schedule, layers=30, fixed_point_iters=500, fp=None):
    """Error trace of a DECUN model on ``instance`` against the HQS fixed point."""
    if fp is None:
        fp = fixed_point(instance.d_bar, instance.beta_bar, instance.mu, instance.y,
                         instance.kernel, iterations=fixed_point_iters)
    model = instance.model(schedule, layers)
    shape = instance.y.shape
    w0_dist = float(np.linalg.norm(fp.w))  # w0 = 0
    bound = schedule_bound(model, instance.kernel, shape, fp, w0_dist)
    trace = error_trace(model, instance.y, instance.kernel, fp.w, bound)
    lam = lambda_max(model, instance.kernel, shape)
    return SimulationResult(trace=trace, fixed_point=fp, lambda_max=lam,
                            divergent=is_divergent(trace.error))
