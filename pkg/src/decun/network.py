"""The unrolled DECUN network.

Layer ``l`` (1-based) runs one HQS step with its own filters and penalty,

    D^l = D_bar + xi_l E^l,    beta^l = beta_bar + gamma_l,

where ``(xi_l, gamma_l)`` come from a fixed :class:`ScheduleSpec`. When the
schedule is absolutely summable the layers approach the limit pair
``(D_bar, beta_bar)``, so the network converges to the fixed point of plain
HQS run with that pair.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ModelFileError, ModelValidityError, ParameterError
from .hqs import Observation, gradient_filters, h_map, layer_update
from .imaging import filter_spectrum, irfft2

MODEL_FORMAT = "decun-model"
MODEL_VERSION = 1

SCHEDULE_KINDS = ("exponential", "p_series", "gaussian_random", "zero")

# gaussian_random draws may not push beta below this fraction of beta_bar
BETA_CLAMP_FRACTION = 0.05


@dataclass(frozen=True)
class ScheduleSpec:
    """Perturbation sequences ``(xi_l, gamma_l)``.

    * ``exponential``: ``xi_l = xi**l``, ``gamma_l = gamma**l``
    * ``p_series``: ``xi_l = gamma_l = (1/(l+1))**p``
    * ``gaussian_random``: independent draws with std ``sigma_slope * l``,
      seeded per layer so any layer can be evaluated on its own
    * ``zero``: all zeros (plain HQS)

    ``coefficients(0)`` is defined too (it is the ``i = 0`` term of the rate
    bounds); networks only evaluate ``l >= 1``.
    """

    kind: str
    xi: float = 0.0
    gamma: float = 0.0
    p: float = 1.0
    seed: int = 0
    sigma_slope: float = 1.0 / 60.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ParameterError(
                f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.kind == "exponential":
            if not (0 < self.xi < 1 and 0 < self.gamma < 1):
                raise ParameterError(
                    f"exponential schedule needs 0 < xi, gamma < 1, got {self.xi}, {self.gamma}")
        elif self.kind == "p_series":
            if not self.p >= 1:
                raise ParameterError(f"p-series schedule needs p >= 1, got {self.p}")
        elif self.kind == "gaussian_random":
            if not self.sigma_slope >= 0:
                raise ParameterError("sigma_slope must be >= 0")

    @classmethod
    def exponential(cls, xi, gamma=None):
        return cls("exponential", xi=float(xi), gamma=float(xi if gamma is None else gamma))

    @classmethod
    def p_series(cls, p):
        return cls("p_series", p=float(p))

    @classmethod
    def gaussian_random(cls, seed=0, sigma_slope=1.0 / 60.0):
        return cls("gaussian_random", seed=int(seed), sigma_slope=float(sigma_slope))

    @classmethod
    def zero(cls):
        return cls("zero")

    @property
    def summable(self):
        """True when both sequences have a finite sum of absolute values."""
        if self.kind == "p_series":
            return self.p > 1
        return self.kind in ("exponential", "zero")

    def coefficients(self, l):
        """Return ``(xi_l, gamma_l)`` for layer index ``l >= 0``."""
        if int(l) != l or l < 0:
            raise ParameterError(f"layer index must be a non-negative integer, got {l}")
        l = int(l)
        if self.kind == "exponential":
            return self.xi ** l, self.gamma ** l
        if self.kind == "p_series":
            c = (1.0 / (l + 1)) ** self.p
            return c, c
        if self.kind == "gaussian_random":
            sigma = self.sigma_slope * l
            xi, gamma = np.random.default_rng([self.seed, l]).standard_normal(2)
            return float(sigma * xi), float(sigma * gamma)
        return 0.0, 0.0

    def to_dict(self):
        out = {"kind": self.kind}
        if self.kind == "exponential":
            out.update(xi=self.xi, gamma=self.gamma)
        elif self.kind == "p_series":
            out.update(p=self.p)
        elif self.kind == "gaussian_random":
            out.update(seed=self.seed, sigma_slope=self.sigma_slope)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        kind = data.pop("kind", None)
        try:
            return cls(kind, **data)
        except TypeError as exc:
            raise ParameterError(f"bad schedule fields: {exc}") from exc


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DecunModel:
    """Limit filters ``d_bar`` (C, fh, fw), perturbations ``e_banks``
    (L, C, fh, fw), limit penalty ``beta_bar`` and data weight ``mu``."""

    d_bar: np.ndarray
    e_banks: np.ndarray
    beta_bar: float
    mu: float
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec.zero)
    e_norm_bound: float = 10.0

    def __post_init__(self):
        d_bar = _frozen(self.d_bar)
        e_banks = _frozen(self.e_banks)
        if d_bar.ndim != 3 or d_bar.shape[0] < 1:
            raise DimensionError(f"d_bar must be (C, fh, fw) with C >= 1, got {d_bar.shape}")
        fh, fw = d_bar.shape[1:]
        if fh % 2 == 0 or fw % 2 == 0:
            raise DimensionError(f"filter footprint must be odd, got {fh}x{fw}")
        if e_banks.ndim != 4 or e_banks.shape[1:] != d_bar.shape or e_banks.shape[0] < 1:
            raise DimensionError(
                f"e_banks must be (L, {d_bar.shape[0]}, {fh}, {fw}) with L >= 1, "
                f"got {e_banks.shape}")
        if not (np.all(np.isfinite(d_bar)) and np.all(np.isfinite(e_banks))):
            raise ModelValidityError("filter taps must be finite")
        if not self.beta_bar > 0 or not np.isfinite(self.beta_bar):
            raise ModelValidityError(f"beta_bar must be positive, got {self.beta_bar}")
        if not self.mu > 0 or not np.isfinite(self.mu):
            raise ModelValidityError(f"mu must be positive, got {self.mu}")
        if not self.e_norm_bound > 0:
            raise ModelValidityError("e_norm_bound must be positive")
        norms = np.sqrt(np.sum(e_banks ** 2, axis=(1, 2, 3)))
        worst = int(np.argmax(norms))
        if norms[worst] > self.e_norm_bound * (1 + 1e-12):
            raise ModelValidityError(
                f"E^{worst + 1} has Frobenius norm {norms[worst]:.6g} above the bound "
                f"{self.e_norm_bound}")
        object.__setattr__(self, "d_bar", d_bar)
        object.__setattr__(self, "e_banks", e_banks)
        object.__setattr__(self, "beta_bar", float(self.beta_bar))
        object.__setattr__(self, "mu", float(self.mu))

    @classmethod
    def build(cls, layers, filters=2, footprint=(3, 3), beta_bar=1.0, mu=5e4,
              schedule=None, seed=None, e_scale=0.0, e_norm_bound=10.0):
        """Convenience constructor.

        ``d_bar`` starts from the gradient pair; channels past the second get
        small seeded random taps. ``e_banks`` are zero unless ``e_scale`` > 0,
        in which case each bank is seeded noise with that Frobenius norm.
        """
        if layers < 1 or filters < 1:
            raise ParameterError("layers and filters must be >= 1")
        rng = np.random.default_rng(seed)
        d_bar = np.zeros((filters,) + tuple(footprint))
        grads = gradient_filters(footprint)
        d_bar[:min(2, filters)] = grads[:min(2, filters)]
        if filters > 2:
            d_bar[2:] = 0.1 * rng.standard_normal(d_bar[2:].shape)
        e_banks = np.zeros((layers, filters) + tuple(footprint))
        if e_scale > 0:
            e_banks = rng.standard_normal(e_banks.shape)
            e_banks *= e_scale / np.sqrt(np.sum(e_banks ** 2, axis=(1, 2, 3), keepdims=True))
        return cls(d_bar, e_banks, beta_bar, mu,
                   ScheduleSpec.zero() if schedule is None else schedule, e_norm_bound)

    @property
    def layers(self):
        return self.e_banks.shape[0]

    @property
    def filters(self):
        return self.d_bar.shape[0]

    @property
    def footprint(self):
        return self.d_bar.shape[1:]

    @property
    def parameter_count(self):
        """Trainable scalars: ``(C*L + C) * fh*fw + 1`` (the +1 is beta_bar)."""
        fh, fw = self.footprint
        return (self.filters * self.layers + self.filters) * fh * fw + 1

    def replace(self, **changes):
        fields = dict(d_bar=self.d_bar, e_banks=self.e_banks, beta_bar=self.beta_bar,
                      mu=self.mu, schedule=self.schedule, e_norm_bound=self.e_norm_bound)
        fields.update(changes)
        return DecunModel(**fields)


def parameter_count(model):
    return model.parameter_count


def layer_params(model, l):
    """Filters and penalty ``(D^l, beta^l)`` of layer ``l`` (1-based)."""
    if int(l) != l or not 1 <= l <= model.layers:
        raise ParameterError(f"layer index must lie in 1..{model.layers}, got {l}")
    xi, gamma = model.schedule.coefficients(int(l))
    beta = model.beta_bar + gamma
    if model.schedule.kind == "gaussian_random":
        beta = max(beta, BETA_CLAMP_FRACTION * model.beta_bar)
    if not beta > 0:
        raise ModelValidityError(f"layer {l}: beta = {beta} is not positive")
    if xi == 0:
        return model.d_bar, beta
    return model.d_bar + xi * model.e_banks[int(l) - 1], beta


@dataclass
class LayerTrace:
    """``w[0]`` is the initial state; ``w[l]`` and ``u[l-1]`` come from layer l."""

    w: list
    u: list


def _initial_w(model, shape, w0):
    full = (model.filters,) + tuple(shape)
    if w0 is None:
        return np.zeros(full)
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.shape != full:
        raise DimensionError(f"w0 must have shape {full}, got {w0.shape}")
    return w0


def decun_forward(model, y, kernel, w0=None, record=False):
    """Run all L layers; return ``(u^L, trace)`` (trace is None unless ``record``)."""
    obs = Observation(y, kernel)
    w = _initial_w(model, obs.shape, w0)
    trace = LayerTrace(w=[w], u=[]) if record else None
    u = None
    for l in range(1, model.layers + 1):
        filters, beta = layer_params(model, l)
        d_hat = filter_spectrum(filters, obs.shape, real=True)
        u, w = layer_update(w, d_hat, beta, model.mu, obs, layer=l)
        if record:
            trace.w.append(w)
            trace.u.append(u)
    return u, trace


def apply_h(model, l, w, y, kernel):
    """The affine map ``h^l(w) = D^l u^l(w)`` of layer ``l``, before shrinkage."""
    obs = Observation(y, kernel)
    w = _initial_w(model, obs.shape, w)
    filters, beta = layer_params(model, l)
    d_hat = filter_spectrum(filters, obs.shape, real=True)
    return h_map(w, d_hat, beta, model.mu, obs, layer=l)[1]


def layer_u(model, l, w, y, kernel):
    """``u^l`` produced by layer ``l`` from input ``w``."""
    obs = Observation(y, kernel)
    w = _initial_w(model, obs.shape, w)
    filters, beta = layer_params(model, l)
    d_hat = filter_spectrum(filters, obs.shape, real=True)
    return irfft2(h_map(w, d_hat, beta, model.mu, obs, layer=l)[0], obs.shape)


def model_to_dict(model):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layers": model.layers,
        "filters": model.filters,
        "footprint": list(model.footprint),
        "mu": model.mu,
        "beta_bar": model.beta_bar,
        "e_norm_bound": model.e_norm_bound,
        "schedule": model.schedule.to_dict(),
        "d_bar": model.d_bar.reshape(model.filters, -1).tolist(),
        "e_banks": model.e_banks.reshape(model.layers, model.filters, -1).tolist(),
    }


def model_from_dict(data):
    if not isinstance(data, dict) or data.get("format") != MODEL_FORMAT:
        raise ModelFileError("not a DECUN model file")
    if data.get("version") != MODEL_VERSION:
        raise ModelFileError(
            f"unsupported model version {data.get('version')!r} (expected {MODEL_VERSION})")
    try:
        layers, filters = int(data["layers"]), int(data["filters"])
        fh, fw = (int(v) for v in data["footprint"])
        d_bar = np.array(data["d_bar"], dtype=np.float64).reshape(filters, fh, fw)
        e_banks = np.array(data["e_banks"], dtype=np.float64).reshape(layers, filters, fh, fw)
        return DecunModel(d_bar, e_banks, float(data["beta_bar"]), float(data["mu"]),
                          ScheduleSpec.from_dict(data["schedule"]),
                          float(data["e_norm_bound"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (ParameterError, DimensionError)):
            raise ModelFileError(f"invalid model contents: {exc}") from exc
        raise ModelFileError(f"malformed model file: {exc!r}") from exc


def save_model(model, path):
    """Write the model as JSON; floats use shortest round-trip repr."""
    text = json.dumps(model_to_dict(model), indent=1) + "\n"
    Path(path).write_text(text)


def load_model(path):
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: malformed model file ({exc})") from exc
    return model_from_dict(data)
