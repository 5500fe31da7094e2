"""RBM representation, energies, conditionals, block Gibbs sampling and exact
enumeration oracles for small systems.

Conventions
-----------
Two binary conventions are supported, fixed per model and shared by both
layers: ``ZeroOne`` (units in {0, 1}) and ``PlusMinus`` (units in {-1, +1}).
The weight matrix is stored hidden-major, ``W.shape == (Nh, Nv)``, and the
joint energy is

    H(v, h) = -h.W.v - theta.v - eta.h
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

ENUMERATION_CAP = 25
_CHUNK = 1 << 15


class Convention(str, enum.Enum):
    ZERO_ONE = "ZeroOne"
    PLUS_MINUS = "PlusMinus"

    @classmethod
    def parse(cls, value: "str | Convention") -> "Convention":
        if isinstance(value, Convention):
            return value
        for c in cls:
            if value.lower() in (c.value.lower(), c.name.lower()):
                return c
        raise ValueError(f"unknown convention {value!r}")

    @property
    def low(self) -> float:
        return 0.0 if self is Convention.ZERO_ONE else -1.0


class DimensionError(ValueError):
    pass


class EnumerationError(ValueError):
    pass


@dataclass(frozen=True)
class RbmModel:
    """Immutable RBM parameters.

    Attributes
    ----------
    weights : (Nh, Nv) array
    visible_bias : (Nv,) array
    hidden_bias : (Nh,) array
    convention : Convention
    """

    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    convention: Convention = Convention.ZERO_ONE

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        vb = np.array(self.visible_bias, dtype=np.float64).reshape(-1)
        hb = np.array(self.hidden_bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or w.shape != (hb.size, vb.size):
            raise DimensionError(
                f"weights shape {w.shape} inconsistent with Nh={hb.size}, Nv={vb.size}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(vb)) and np.all(np.isfinite(hb))):
            raise ValueError("RBM parameters must be finite")
        for arr in (w, vb, hb):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "visible_bias", vb)
        object.__setattr__(self, "hidden_bias", hb)
        object.__setattr__(self, "convention", Convention.parse(self.convention))

    @property
    def num_visible(self) -> int:
        return self.visible_bias.size

    @property
    def num_hidden(self) -> int:
        return self.hidden_bias.size

    @classmethod
    def zeros(cls, num_visible, num_hidden, convention=Convention.ZERO_ONE) -> "RbmModel":
        return cls(
            np.zeros((num_hidden, num_visible)),
            np.zeros(num_visible),
            np.zeros(num_hidden),
            convention,
        )

    @classmethod
    def random(cls, num_visible, num_hidden, rng, scale=1.0, convention=Convention.ZERO_ONE):
        rng = np.random.default_rng(rng)
        return cls(
            scale * rng.standard_normal((num_hidden, num_visible)),
            scale * rng.standard_normal(num_visible),
            scale * rng.standard_normal(num_hidden),
            convention,
        )

    def scaled(self, beta: float) -> "RbmModel":
        """Model with every parameter multiplied by ``beta``."""
        return replace(
            self,
            weights=beta * self.weights,
            visible_bias=beta * self.visible_bias,
            hidden_bias=beta * self.hidden_bias,
        )

    def with_params(self, weights=None, visible_bias=None, hidden_bias=None) -> "RbmModel":
        return RbmModel(
            self.weights if weights is None else weights,
            self.visible_bias if visible_bias is None else visible_bias,
            self.hidden_bias if hidden_bias is None else hidden_bias,
            self.convention,
        )

    @property
    def is_factorized(self) -> bool:
        return not np.any(self.weights)

    def same_parameters(self, other: "RbmModel") -> bool:
        return (
            self.convention == other.convention
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.visible_bias, other.visible_bias)
            and np.array_equal(self.hidden_bias, other.hidden_bias)
        )


def _check_visible(model: RbmModel, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.num_visible:
        raise DimensionError(f"visible length {v.shape[-1]} != Nv={model.num_visible}")
    return v


def _check_hidden(model: RbmModel, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != model.num_hidden:
        raise DimensionError(f"hidden length {h.shape[-1]} != Nh={model.num_hidden}")
    return h


def log_partition_unit(x, convention: Convention) -> np.ndarray:
    """log sum_{s} exp(s * x) for a single unit: softplus or log 2cosh."""
    x = np.asarray(x, dtype=np.float64)
    if convention is Convention.ZERO_ONE:
        return np.logaddexp(0.0, x)
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax))


def mean_unit(x, convention: Convention) -> np.ndarray:
    """Conditional mean of a unit with input field ``x``."""
    if convention is Convention.ZERO_ONE:
        return expit(x)
    return np.tanh(x)


def energy(model: RbmModel, v, h) -> np.ndarray:
    """Joint energy H(v, h); broadcasts over leading batch dimensions."""
    v = _check_visible(model, v)
    h = _check_hidden(model, h)
    coupling = np.einsum("...a,...a->...", h, v @ model.weights.T)
    return -coupling - v @ model.visible_bias - h @ model.hidden_bias


def hidden_field(model: RbmModel, v) -> np.ndarray:
    return _check_visible(model, v) @ model.weights.T + model.hidden_bias


def visible_field(model: RbmModel, h) -> np.ndarray:
    return _check_hidden(model, h) @ model.weights + model.visible_bias


def marginal_energy(model: RbmModel, v) -> np.ndarray:
    """Visible free energy H(v) = -log sum_h exp(-H(v, h))."""
    v = _check_visible(model, v)
    x = v @ model.weights.T + model.hidden_bias
    return -(v @ model.visible_bias) - log_partition_unit(x, model.convention).sum(axis=-1)


def hidden_marginal_energy(model: RbmModel, h) -> np.ndarray:
    """Hidden free energy, the visible units summed out."""
    h = _check_hidden(model, h)
    x = h @ model.weights + model.visible_bias
    return -(h @ model.hidden_bias) - log_partition_unit(x, model.convention).sum(axis=-1)


def _up_probability(x, convention: Convention) -> np.ndarray:
    # expit is branch-stable for any |x|
    return expit(x) if convention is Convention.ZERO_ONE else expit(2.0 * x)


def hidden_conditional(model: RbmModel, v) -> np.ndarray:
    """p(h_a = up | v) for each hidden unit."""
    return _up_probability(hidden_field(model, v), model.convention)


def visible_conditional(model: RbmModel, h) -> np.ndarray:
    """p(v_i = up | h) for each visible unit."""
    return _up_probability(visible_field(model, h), model.convention)


def _bernoulli(prob: np.ndarray, rng: np.random.Generator, convention: Convention) -> np.ndarray:
    up = rng.random(prob.shape) < prob
    if convention is Convention.ZERO_ONE:
        return up.astype(np.float64)
    return np.where(up, 1.0, -1.0)


def sample_hidden(model: RbmModel, v, rng) -> np.ndarray:
    return _bernoulli(hidden_conditional(model, v), rng, model.convention)


def sample_visible(model: RbmModel, h, rng) -> np.ndarray:
    return _bernoulli(visible_conditional(model, h), rng, model.convention)


@dataclass
class ChainPopulation:
    """R chain states with per-chain log importance weights.

    ``log_weight`` holds ``-W`` where ``W`` is the accumulated work of each
    chain, so importance weights are ``exp(log_weight)``.
    """

    v: np.ndarray
    h: np.ndarray
    log_weight: np.ndarray = field(default=None)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        self.h = np.asarray(self.h, dtype=np.float64)
        if self.v.ndim != 2 or self.h.ndim != 2 or self.v.shape[0] != self.h.shape[0]:
            raise DimensionError("population v and h must be 2-D with equal chain counts")
        if self.log_weight is None:
            self.log_weight = np.zeros(self.v.shape[0])
        self.log_weight = np.asarray(self.log_weight, dtype=np.float64)
        if self.log_weight.shape != (self.v.shape[0],):
            raise DimensionError("log_weight must have one entry per chain")

    @property
    def size(self) -> int:
        return self.v.shape[0]

    def copy(self) -> "ChainPopulation":
        return ChainPopulation(self.v.copy(), self.h.copy(), self.log_weight.copy())

    @classmethod
    def from_visible(cls, model: RbmModel, v, rng) -> "ChainPopulation":
        v = _check_visible(model, v)
        return cls(v, sample_hidden(model, v, rng))

    @classmethod
    def random(cls, model: RbmModel, count: int, rng) -> "ChainPopulation":
        rng = np.random.default_rng(rng)
        v = _bernoulli(np.full((count, model.num_visible), 0.5), rng, model.convention)
        return cls.from_visible(model, v, rng)


def ags_step(model: RbmModel, population: ChainPopulation, k: int, rng) -> ChainPopulation:
    """Advance every chain by ``k`` alternations (h | v, then v | h).

    Returns a new population; the stored ``h`` is the hidden state that
    generated the stored ``v`` so that ``(v, h)`` is a joint sample.
    """
    if k < 1:
        raise ValueError("ags_step requires k >= 1")
    v, h = population.v, population.h
    for _ in range(k):
        h = sample_hidden(model, v, rng)
        v = sample_visible(model, h, rng)
    return ChainPopulation(v, h, population.log_weight.copy())


def all_states(n: int, convention: Convention) -> np.ndarray:
    """All 2**n binary vectors, first coordinate varying slowest."""
    if n == 0:
        return np.zeros((1, 0))
    bits = ((np.arange(2**n)[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.float64)
    if convention is Convention.PLUS_MINUS:
        bits = 2.0 * bits - 1.0
    return bits


def _state_chunks(n: int, convention: Convention):
    total = 2**n
    for start in range(0, total, _CHUNK):
        idx = np.arange(start, min(start + _CHUNK, total))
        bits = ((idx[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.float64)
        if convention is Convention.PLUS_MINUS:
            bits = 2.0 * bits - 1.0
        yield bits


def exact_log_partition(model: RbmModel, layer: str | None = None) -> float:
    """log Z by enumerating the smaller layer (or ``layer`` if given)."""
    if layer is None:
        layer = "hidden" if model.num_hidden <= model.num_visible else "visible"
    n = model.num_hidden if layer == "hidden" else model.num_visible
    if min(model.num_visible, model.num_hidden) > ENUMERATION_CAP or n > ENUMERATION_CAP:
        raise EnumerationError(
            f"refusing to enumerate 2^{n} states (cap is 2^{ENUMERATION_CAP})"
        )
    free = hidden_marginal_energy if layer == "hidden" else marginal_energy
    parts = [logsumexp(-free(model, chunk)) for chunk in _state_chunks(n, model.convention)]
    return float(logsumexp(parts))


def exact_log_likelihood(model: RbmModel, data, log_z: float | None = None) -> float:
    """Mean log p(v) over rows of ``data``."""
    if log_z is None:
        log_z = exact_log_partition(model)
    return float(np.mean(-marginal_energy(model, data)) - log_z)


def exact_visible_distribution(model: RbmModel) -> tuple[np.ndarray, np.ndarray]:
    """All visible states and their exact probabilities (Nv must be small)."""
    if model.num_visible > ENUMERATION_CAP:
        raise EnumerationError("too many visible units to tabulate p(v)")
    states = all_states(model.num_visible, model.convention)
    logp = -marginal_energy(model, states)
    logp -= logsumexp(logp)
    return states, np.exp(logp)


def exact_moments(model: RbmModel) -> dict[str, np.ndarray]:
    """Exact <v>, <h>, <v h^T> (shape Nh x Nv) under the model."""
    states, p = exact_visible_distribution(model)
    hmean = mean_unit(hidden_field(model, states), model.convention)
    return {
        "v": p @ states,
        "h": p @ hmean,
        "vh": (hmean * p[:, None]).T @ states,
    }


def exact_sample(model: RbmModel, count: int, rng) -> ChainPopulation:
    """Independent joint samples by enumeration of the smaller layer.

    Factorized models (W = 0) are sampled directly at any size.
    """
    rng = np.random.default_rng(rng)
    conv = model.convention
    if model.is_factorized:
        v = _bernoulli(np.broadcast_to(_up_probability(model.visible_bias, conv),
                                       (count, model.num_visible)), rng, conv)
        h = _bernoulli(np.broadcast_to(_up_probability(model.hidden_bias, conv),
                                       (count, model.num_hidden)), rng, conv)
        return ChainPopulation(v, h)
    nv, nh = model.num_visible, model.num_hidden
    if nv <= 20 and (nv <= nh or nh > 20):
        states, p = exact_visible_distribution(model)
        idx = rng.choice(len(p), size=count, p=p)
        v = states[idx]
        return ChainPopulation(v, sample_hidden(model, v, rng))
    if nh <= 20:
        states = all_states(model.num_hidden, conv)
        logp = -hidden_marginal_energy(model, states)
        p = np.exp(logp - logsumexp(logp))
        h = states[rng.choice(len(p), size=count, p=p)]
        return ChainPopulation(sample_visible(model, h, rng), h)
    raise EnumerationError("model too large for exact sampling")


def exact_sampler(model: RbmModel):
    """Callable ``(count, rng) -> ChainPopulation`` drawing exact samples."""

    def draw(count, rng):
        return exact_sample(model, count, rng)

    return draw


def factorized_log_partition(model: RbmModel) -> float:
    """log Z of a W = 0 model."""
    if not model.is_factorized:
        raise ValueError("model has nonzero couplings")
    conv = model.convention
    return float(
        log_partition_unit(model.visible_bias, conv).sum()
        + log_partition_unit(model.hidden_bias, conv).sum()
    )


def to_plus_minus(model: RbmModel) -> tuple[RbmModel, float]:
    """Exact reparameterization of a ZeroOne model in PlusMinus variables.

    With v = (s + 1)/2, h = (t + 1)/2, ``H(v, h) = H'(s, t) - offset``;
    probabilities of corresponding states are identical and
    ``log Z = log Z' + offset``.
    """
    if model.convention is Convention.PLUS_MINUS:
        return model, 0.0
    w, th, et = model.weights, model.visible_bias, model.hidden_bias
    new = RbmModel(
        w / 4.0,
        th / 2.0 + w.sum(axis=0) / 4.0,
        et / 2.0 + w.sum(axis=1) / 4.0,
        Convention.PLUS_MINUS,
    )
    offset = w.sum() / 4.0 + th.sum() / 2.0 + et.sum() / 2.0
    return new, float(offset)


def to_zero_one(model: RbmModel) -> tuple[RbmModel, float]:
    """Inverse of :func:`to_plus_minus`; returns (model, offset) with
    ``H_pm(s, t) = H_01(v, h) - offset``."""
    if model.convention is Convention.ZERO_ONE:
        return model, 0.0
    w, th, et = model.weights, model.visible_bias, model.hidden_bias
    new = RbmModel(
        4.0 * w,
        2.0 * th - 2.0 * w.sum(axis=0),
        2.0 * et - 2.0 * w.sum(axis=1),
        Convention.ZERO_ONE,
    )
    offset = w.sum() - th.sum() - et.sum()
    return new, float(offset)


def convert_model(model: RbmModel, convention) -> RbmModel:
    convention = Convention.parse(convention)
    if convention is Convention.PLUS_MINUS:
        return to_plus_minus(model)[0]
    return to_zero_one(model)[0]


def convert_states(x, source, target) -> np.ndarray:
    source, target = Convention.parse(source), Convention.parse(target)
    x = np.asarray(x, dtype=np.float64)
    if source is target:
        return x
    if target is Convention.PLUS_MINUS:
        return 2.0 * x - 1.0
    return (x + 1.0) / 2.0


# --- RBM1 file format -------------------------------------------------------

RBM_MAGIC = "RBM1"


class FormatError(ValueError):
    pass


def _parse_meta(line: str) -> dict[str, str]:
    meta = {}
    for token in line.split():
        if "=" not in token:
            raise FormatError(f"malformed metadata token {token!r}")
        key, value = token.split("=", 1)
        meta[key] = value
    return meta


def dumps_model(model: RbmModel, update_index: int = 0) -> bytes:
    head = (
        f"{RBM_MAGIC}\nNv={model.num_visible} Nh={model.num_hidden} "
        f"convention={model.convention.value} t={int(update_index)}\n"
    ).encode("ascii")
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (model.visible_bias, model.hidden_bias, model.weights)
    )
    return head + body


def loads_model(payload: bytes) -> tuple[RbmModel, int]:
    stream = io.BytesIO(payload)
    magic = stream.readline().rstrip(b"\n")
    if magic != RBM_MAGIC.encode():
        raise FormatError(f"bad magic {magic[:8]!r}, expected {RBM_MAGIC}")
    meta = _parse_meta(stream.readline().decode("ascii"))
    try:
        nv, nh = int(meta["Nv"]), int(meta["Nh"])
        conv = Convention.parse(meta["convention"])
        t = int(meta.get("t", 0))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad RBM1 metadata: {exc}") from None
    need = 8 * (nv + nh + nv * nh)
    raw = stream.read()
    if len(raw) < need:
        raise FormatError(f"truncated RBM1 payload: {len(raw)} of {need} bytes")
    arr = np.frombuffer(raw[:need], dtype="<f8")
    model = RbmModel(
        arr[nv + nh:].reshape(nh, nv), arr[:nv], arr[nv:nv + nh], conv
    )
    return model, t


def save_model(path, model: RbmModel, update_index: int = 0) -> None:
    Path(path).write_bytes(dumps_model(model, update_index))


def load_model(path) -> tuple[RbmModel, int]:
    return loads_model(Path(path).read_bytes())
