"""Desk-scale training of DECUN parameters by finite differences and Adam.

Trainable scalars are the limit filters ``D_bar``, the perturbation banks
``E^1..E^L`` and ``beta_bar``; ``mu`` and the schedule stay fixed. The
gradient is a central difference per scalar. All perturbed copies of the
model run together as one batched forward pass. A parameter that first
enters at layer ``l`` only needs the layers from ``l`` on, so those
evaluations restart from the cached unperturbed input to layer ``l``.

``beta_bar`` is optimised in log space, which keeps it positive; after each
step every ``E^l`` is clipped to the Frobenius ball of radius
``e_norm_bound`` and ``beta_bar`` is floored at ``beta_floor``.
"""

import csv
from dataclasses import asdict, dataclass
from types import SimpleNamespace

import numpy as np

from .errors import DimensionError, DivergenceError, NumericalInstabilityError, ParameterError
from .hqs import HqsConfig, h_map, hqs_run, soft_threshold
from .imaging import (add_gaussian_noise, as_grid, circular_convolve, filter_spectrum,
                      generate_linear_motion_kernel, irfft2, psnr, rfft2, ssim)
from .network import BETA_CLAMP_FRACTION, DecunModel, ScheduleSpec, decun_forward

MAX_KERNEL_LENGTH = 20.0


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    learning_rate: float = 0.02
    steps: int = 200
    batch_size: int = 2
    fd_step: float = 1e-5
    seed: int = 0
    e_norm_bound: float = 10.0
    beta_floor: float = 1e-2
    chunk_size: int = 64
    divergence_loss: float = 1e6

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.fd_step > 0:
            raise ParameterError("fd_step must be positive")
        if not self.e_norm_bound > 0:
            raise ParameterError("e_norm_bound must be positive")
        if not self.beta_floor > 0:
            raise ParameterError("beta_floor must be positive")
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be >= 0")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ParameterError("steps must be a non-negative integer")
        if self.batch_size < 1 or self.chunk_size < 1:
            raise ParameterError("batch_size and chunk_size must be >= 1")

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SamplePair:
    sharp: np.ndarray
    blurred: np.ndarray
    kernel: np.ndarray
    noise_sigma: float


def loss(prediction, target, alpha=0.5):
    """``alpha * MSE + (1 - alpha) * MAE``."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise DimensionError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return float(alpha * np.mean(diff ** 2) + (1 - alpha) * np.mean(np.abs(diff)))


def _batch_loss(pred, target, alpha):
    # pred (P, B, H, W), target (B, H, W) -> (P,)
    diff = pred - target
    axes = tuple(range(1, diff.ndim))
    return alpha * np.mean(diff ** 2, axis=axes) + (1 - alpha) * np.mean(np.abs(diff), axis=axes)


def random_kernels(n, seed, max_length=MAX_KERNEL_LENGTH):
    """``n`` linear motion kernels, length ~ U[0, max_length], angle ~ U[0, pi]."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = rng.uniform(0, max_length)
        angle = rng.uniform(0, np.pi)
        out.append(generate_linear_motion_kernel(length, angle))
    return out


def make_pair(sharp, kernel, noise_sigma, seed):
    blurred = add_gaussian_noise(circular_convolve(sharp, kernel), noise_sigma, seed)
    return SamplePair(sharp=as_grid(sharp), blurred=blurred, kernel=np.array(kernel),
                      noise_sigma=float(noise_sigma))


def synthesize_dataset(sharp_images, n_kernels, noise_sigma, seed, pairing="all",
                       kernels=None):
    """Blur/noise pairs from sharp images and random motion kernels.

    With ``pairing="all"`` every image is blurred by every kernel; with
    ``"cycle"`` image ``i`` uses kernel ``i mod n_kernels``. Noise for pair
    ``j`` is seeded by ``(seed, j)``, so pairs can be built independently.
    Explicit ``kernels`` replace the random draw.
    """
    images = list(sharp_images)
    if not images:
        raise ParameterError("need at least one sharp image")
    if not noise_sigma >= 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if kernels is None:
        if n_kernels < 1:
            raise ParameterError("n_kernels must be >= 1")
        kernels = random_kernels(n_kernels, seed)
    kernels = list(kernels)
    if pairing == "all":
        combos = [(img, k) for img in images for k in kernels]
    elif pairing == "cycle":
        combos = [(img, kernels[i % len(kernels)]) for i, img in enumerate(images)]
    else:
        raise ParameterError(f"unknown pairing {pairing!r}")
    return [make_pair(img, k, noise_sigma, [seed, j]) for j, (img, k) in enumerate(combos)]


class DecunParameters:
    """Flat vector view of a :class:`DecunModel`'s trainable scalars.

    Layout: ``D_bar`` taps, then ``E^1..E^L`` taps, then ``beta_bar``.
    """

    def __init__(self, model):
        self.template = model
        self.layers = model.layers
        self.bank_shape = model.d_bar.shape
        self.bank_size = model.d_bar.size
        self.n = (self.layers + 1) * self.bank_size + 1
        self.mu = model.mu
        self.first_layer = np.concatenate([
            np.ones(self.bank_size, dtype=int),
            np.repeat(np.arange(1, self.layers + 1), self.bank_size),
            [1]])
        self.log_mask = np.zeros(self.n, dtype=bool)
        self.log_mask[-1] = True
        sched = model.schedule
        self.coefficients = [sched.coefficients(l) for l in range(1, self.layers + 1)]
        self.clamp = sched.kind == "gaussian_random"

    def pack(self, model):
        return np.concatenate([model.d_bar.ravel(), model.e_banks.ravel(), [model.beta_bar]])

    def unpack(self, theta):
        c = self.bank_size
        d_bar = theta[:c].reshape(self.bank_shape)
        e_banks = theta[c:-1].reshape((self.layers,) + self.bank_shape)
        return self.template.replace(d_bar=d_bar, e_banks=e_banks, beta_bar=float(theta[-1]))

    def layer_taps(self, thetas, l):
        """Filters ``(P, C, fh, fw)`` and penalties ``(P,)`` of layer ``l``."""
        c = self.bank_size
        xi, gamma = self.coefficients[l - 1]
        d_bar = thetas[:, :c]
        taps = d_bar if xi == 0 else d_bar + xi * thetas[:, l * c:(l + 1) * c]
        beta_bar = thetas[:, -1]
        beta = beta_bar + gamma
        if self.clamp:
            beta = np.maximum(beta, BETA_CLAMP_FRACTION * beta_bar)
        return taps.reshape((-1,) + self.bank_shape), beta

    def project(self, theta, config):
        theta = theta.copy()
        c = self.bank_size
        banks = theta[c:-1].reshape(self.layers, c)
        norms = np.sqrt(np.sum(banks ** 2, axis=1))
        over = norms > config.e_norm_bound
        banks[over] *= (config.e_norm_bound / norms[over])[:, None]
        theta[c:-1] = banks.ravel()
        theta[-1] = max(theta[-1], config.beta_floor)
        return theta


def stack_observations(pairs):
    """Batched spectra ``(B, H, W//2+1)`` shared by every model copy."""
    shape = pairs[0].blurred.shape
    if any(p.blurred.shape != shape for p in pairs):
        raise DimensionError("all pairs in a batch must have the same size")
    k_hat = np.array([filter_spectrum(p.kernel, shape, real=True) for p in pairs])
    y_hat = rfft2(np.array([p.blurred for p in pairs]))
    return SimpleNamespace(shape=shape,
                           k_power=k_hat.real ** 2 + k_hat.imag ** 2,
                           kty_hat=np.conj(k_hat) * y_hat)


def batched_forward(params, thetas, obs, start=1, w_in=None, keep_inputs=False):
    """Run layers ``start..L`` for every row of ``thetas`` over the whole batch.

    ``w_in`` is the input to layer ``start``, shaped ``(B, C, H, W)`` (shared
    by all rows) or ``(P, B, C, H, W)``. Returns ``u^L`` as ``(P, B, H, W)``
    and, with ``keep_inputs``, the list of layer inputs.
    """
    thetas = np.atleast_2d(thetas)
    n_batch = obs.k_power.shape[0]
    channels = params.bank_shape[0]
    if w_in is None:
        w = np.zeros((1, n_batch, channels) + obs.shape)
    else:
        w = w_in if w_in.ndim == 5 else w_in[None]
    inputs = {}
    u_hat = None
    for l in range(start, params.layers + 1):
        if keep_inputs:
            inputs[l] = w
        taps, beta = params.layer_taps(thetas, l)
        d_hat = filter_spectrum(taps, obs.shape, real=True)[:, None]
        u_hat, z = h_map(w, d_hat, beta[:, None], params.mu, obs, layer=l)
        w = soft_threshold(z, 1.0 / beta[:, None, None, None, None])
    u = irfft2(u_hat, obs.shape)
    return (u, inputs) if keep_inputs else u


def fd_steps(theta, config):
    return config.fd_step * np.maximum(1.0, np.abs(theta))


def gradient_fd(params, theta, pairs, config, scale=1.0):
    """Central-difference gradient of ``scale * loss`` over ``pairs``.

    Returns ``(gradient, base_loss)``.
    """
    obs = stack_observations(pairs)
    targets = np.array([p.sharp for p in pairs])
    u, inputs = batched_forward(params, theta[None], obs, keep_inputs=True)
    base = scale * float(_batch_loss(u, targets, config.alpha)[0])
    if not np.isfinite(base):
        raise NumericalInstabilityError("loss is not finite at the current parameters")
    h = fd_steps(theta, config)
    grad = np.zeros_like(theta)
    for start in range(1, params.layers + 1):
        idx = np.flatnonzero(params.first_layer == start)
        if idx.size == 0:
            continue
        for lo in range(0, idx.size, max(1, config.chunk_size // 2)):
            chunk = idx[lo:lo + max(1, config.chunk_size // 2)]
            rows = np.repeat(theta[None], 2 * chunk.size, axis=0)
            ar = np.arange(chunk.size)
            rows[2 * ar, chunk] += h[chunk]
            rows[2 * ar + 1, chunk] -= h[chunk]
            pred = batched_forward(params, rows, obs, start, inputs[start][0])
            vals = scale * _batch_loss(pred, targets, config.alpha)
            bad = ~np.isfinite(vals)
            if np.any(bad):
                j = chunk[np.flatnonzero(bad)[0] // 2]
                raise NumericalInstabilityError(
                    f"non-finite loss when perturbing parameter {j} "
                    f"({describe_parameter(params, j)})")
            grad[chunk] = (vals[0::2] - vals[1::2]) / (2 * h[chunk])
    return grad, base


def describe_parameter(params, j):
    c = params.bank_size
    if j == params.n - 1:
        return "beta_bar"
    if j < c:
        return f"D_bar tap {np.unravel_index(j, params.bank_shape)}"
    layer, tap = divmod(j - c, c)
    return f"E^{layer + 1} tap {np.unravel_index(tap, params.bank_shape)}"


def gradient(model, batch, config):
    """Finite-difference gradient of the training loss, in the packed layout
    of :class:`DecunParameters` (``D_bar``, ``E^1..E^L``, ``beta_bar``)."""
    params = DecunParameters(model)
    return gradient_fd(params, params.pack(model), list(batch), config)[0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_direction(state, g, beta1=0.9, beta2=0.999, eps=1e-8):
    """Update the moments in place and return the bias-corrected step direction."""
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    return m_hat / (np.sqrt(v_hat) + eps)


def optimize(params, theta, dataset, config, callback=None):
    """Adam on a generic parameterisation; returns ``(theta, loss_history)``.

    ``params`` supplies ``n``, ``first_layer``, ``log_mask``, ``layers``,
    ``bank_shape``, ``mu``, ``layer_taps`` and ``project``. Entries flagged
    in ``log_mask`` are updated multiplicatively (Adam on their logarithm).
    """
    dataset = list(dataset)
    if not dataset:
        raise ParameterError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    state = AdamState(m=np.zeros(params.n), v=np.zeros(params.n))
    theta = np.array(theta, dtype=np.float64)
    history = []
    batch_size = min(config.batch_size, len(dataset))
    for step in range(int(config.steps)):
        picks = rng.choice(len(dataset), size=batch_size, replace=False)
        g, value = gradient_fd(params, theta, [dataset[i] for i in picks], config)
        history.append(value)
        if not value < config.divergence_loss:
            raise DivergenceError(
                f"training loss {value:.3e} exceeded {config.divergence_loss:.0e} "
                f"at step {step}", history=history)
        # chain rule for the log-parameterised entries
        g = np.where(params.log_mask, g * theta, g)
        direction = adam_direction(state, g)
        delta = config.learning_rate * direction
        theta = np.where(params.log_mask, theta * np.exp(-delta), theta - delta)
        theta = params.project(theta, config)
        if callback is not None:
            callback(step, value, theta)
    return theta, history


def train(model, dataset, config, callback=None):
    """Train ``D_bar``, ``E^l`` and ``beta_bar``; returns ``(model, history)``."""
    # the bound is enforced by projection, so the working template leaves it open
    params = DecunParameters(model.replace(e_norm_bound=np.inf))
    theta = params.project(params.pack(model), config)
    theta, history = optimize(params, theta, dataset, config, callback)
    return params.unpack(theta).replace(e_norm_bound=config.e_norm_bound), history


def predict(params, theta, pairs):
    """Restorations ``(B, H, W)`` for one parameter vector."""
    return batched_forward(params, theta[None], stack_observations(list(pairs)))[0]


def evaluate_outputs(outputs, pairs):
    """Mean PSNR and SSIM of restorations against the sharp images."""
    pairs = list(pairs)
    p = [psnr(pair.sharp, out) for out, pair in zip(outputs, pairs)]
    s = [ssim(pair.sharp, out) for out, pair in zip(outputs, pairs)]
    return float(np.mean(p)), float(np.mean(s))


def evaluate_model(model, pairs):
    outs = [decun_forward(model, p.blurred, p.kernel)[0] for p in pairs]
    return evaluate_outputs(outs, pairs)


def evaluate_hqs(config, pairs):
    outs = [hqs_run(p.blurred, p.kernel, config)[0] for p in pairs]
    return evaluate_outputs(outs, pairs)


def initial_model(layers=10, filters=2, beta_bar=256.0, mu=5e4, schedule=None,
                  e_norm_bound=10.0, seed=0):
    """Start point for training: the hand-set HQS model (gradient filters, E = 0)."""
    schedule = ScheduleSpec.exponential(0.5) if schedule is None else schedule
    return DecunModel.build(layers, filters=filters, beta_bar=beta_bar, mu=mu,
                            schedule=schedule, seed=seed, e_norm_bound=e_norm_bound)


def hand_set_hqs(model):
    """The classic HQS solver matching a model's limit pair and depth."""
    return HqsConfig(mu=model.mu, beta=model.beta_bar, iterations=model.layers,
                     filters=model.d_bar)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, value in enumerate(history):
            writer.writerow([step, f"{value:.17g}"])
