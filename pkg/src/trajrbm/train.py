"""Persistent contrastive divergence with trajectory checkpointing.

Besides the parameter updates, the persistent chains carry importance
weights that turn the training run itself into an annealed importance
sampling path between consecutive parameter sets (online trajectory AIS).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import logit, logsumexp

from .core import (
    ChainPopulation,
    Convention,
    EnumerationError,
    RbmModel,
    ags_step,
    energy,
    exact_log_partition,
    exact_moments,
    exact_sample,
    factorized_log_partition,
    load_model,
    marginal_energy,
    mean_unit,
    hidden_field,
    save_model,
    ENUMERATION_CAP,
)

log = logging.getLogger(__name__)

REWEIGHTING = ("none", "jarzynski")


@dataclass
class TrainConfig:
    """PCD hyperparameters (defaults are the full-scale values)."""

    learning_rate: float = 0.01
    batch_size: int = 2000
    chain_count: int = 2000
    gibbs_steps: int = 100
    total_updates: int = 10000
    ladder_acceptance_target: float = 0.25
    seed: int = 0
    reweighting: str = "none"
    ess_threshold: float = 0.5
    eval_interval: int = 100
    weight_noise: float = 0.01
    trais_chains: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 < self.ladder_acceptance_target < 1.0:
            raise ValueError("ladder_acceptance_target must lie in (0, 1)")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")
        if self.reweighting not in REWEIGHTING:
            raise ValueError(f"reweighting must be one of {REWEIGHTING}")
        for name in ("batch_size", "chain_count", "gibbs_steps", "eval_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.weight_noise < 0.0:
            raise ValueError("weight_noise must be >= 0")
        if self.trais_chains < 0:
            raise ValueError("trais_chains must be >= 0")
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        base = dict(batch_size=128, chain_count=128, gibbs_steps=10)
        base.update(overrides)
        return cls(**base)

    def dumps(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def loads(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            default = getattr(cls, key)
            kw[key] = type(default)(value)
        return cls(**kw)


@dataclass
class Checkpoint:
    update: int
    model: RbmModel
    log_z: float
    ll_train: float
    ll_test: float = float("nan")


@dataclass
class TrajectoryLadder:
    checkpoints: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    config: TrainConfig | None = None

    def __len__(self) -> int:
        return len(self.checkpoints)

    @property
    def models(self) -> list:
        return [c.model for c in self.checkpoints]

    @property
    def updates(self) -> list:
        return [c.update for c in self.checkpoints]

    @property
    def final(self) -> RbmModel:
        return self.checkpoints[-1].model

    def append(self, ckpt: Checkpoint) -> None:
        if self.checkpoints and ckpt.update <= self.checkpoints[-1].update:
            raise ValueError("checkpoint update indices must increase")
        self.checkpoints.append(ckpt)


# --- elementary pieces -------------------------------------------------------

def log_mean_exp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(logsumexp(x) - np.log(x.size))


def ess(log_weight) -> float:
    """Normalized effective sample size (sum w)^2 / (R sum w^2) in (0, 1]."""
    lw = np.asarray(log_weight, dtype=np.float64)
    if not np.isfinite(lw).any():
        raise FloatingPointError("all importance weights vanish")
    return float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)) / lw.size)


def normalized_weights(log_weight) -> np.ndarray:
    lw = np.asarray(log_weight, dtype=np.float64)
    return np.exp(lw - logsumexp(lw))


def resample(population: ChainPopulation, rng) -> tuple[ChainPopulation, float]:
    """Multinomial resampling proportional to the weights.

    Returns the equally weighted population and ``log mean w``, which carries
    the normalization forward.
    """
    rng = np.random.default_rng(rng)
    lw = population.log_weight
    level = log_mean_exp(lw)
    idx = rng.choice(population.size, size=population.size, p=normalized_weights(lw))
    return ChainPopulation(population.v[idx], population.h[idx]), level


def init_visible_bias(data: np.ndarray, convention=Convention.ZERO_ONE, clip: float = 1e-4):
    """Visible bias reproducing the data marginals in a coupling-free model."""
    convention = Convention.parse(convention)
    x = np.asarray(data, dtype=np.float64)
    p_up = x.mean(axis=0) if convention is Convention.ZERO_ONE else (x.mean(axis=0) + 1.0) / 2.0
    p_up = np.clip(p_up, clip, 1.0 - clip)
    return logit(p_up) if convention is Convention.ZERO_ONE else logit(p_up) / 2.0


def zero_init_model(data: np.ndarray, num_hidden: int, convention=Convention.ZERO_ONE) -> RbmModel:
    convention = Convention.parse(convention)
    nv = np.asarray(data).shape[1]
    return RbmModel(np.zeros((num_hidden, nv)), init_visible_bias(data, convention),
                    np.zeros(num_hidden), convention)


def gradient_estimate(model: RbmModel, minibatch, population: ChainPopulation,
                      weights=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Log-likelihood gradient (dW, dtheta, deta).

    Positive phase: conditional hidden means on the data rows. Negative
    phase: chain states with their conditional hidden means, averaged with
    ``weights`` (normalized) when given.
    """
    data = np.asarray(minibatch, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("empty minibatch")
    conv = model.convention
    h_data = mean_unit(hidden_field(model, data), conv)
    v_model = population.v
    h_model = mean_unit(hidden_field(model, v_model), conv)
    if weights is None:
        w = np.full(population.size, 1.0 / population.size)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    d_w = h_data.T @ data / data.shape[0] - (h_model * w[:, None]).T @ v_model
    d_theta = data.mean(axis=0) - w @ v_model
    d_eta = h_data.mean(axis=0) - w @ h_model
    return d_w, d_theta, d_eta


def exact_gradient(model: RbmModel, data) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of the mean log-likelihood with enumerated model moments."""
    data = np.asarray(data, dtype=np.float64)
    mom = exact_moments(model)
    h_data = mean_unit(hidden_field(model, data), model.convention)
    return (h_data.T @ data / len(data) - mom["vh"],
            data.mean(axis=0) - mom["v"],
            h_data.mean(axis=0) - mom["h"])


def apply_gradient(model: RbmModel, grad, learning_rate: float) -> RbmModel:
    d_w, d_theta, d_eta = grad
    return model.with_params(
        weights=model.weights + learning_rate * d_w,
        visible_bias=model.visible_bias + learning_rate * d_theta,
        hidden_bias=model.hidden_bias + learning_rate * d_eta,
    )


def energy_shift(model_prev: RbmModel, model_next: RbmModel, v) -> np.ndarray:
    """H_next(v) - H_prev(v) with marginal (hidden-summed) energies."""
    return marginal_energy(model_next, v) - marginal_energy(model_prev, v)


@dataclass
class TraisState:
    """Running online trajectory-AIS normalization.

    ``log Z_t = log_z0 + offset + log mean exp(log_weight)``; ``offset``
    absorbs the weight levels removed at each resampling.
    """

    log_z0: float
    offset: float = 0.0

    def estimate(self, population: ChainPopulation) -> float:
        return self.log_z0 + self.offset + log_mean_exp(population.log_weight)


def online_trais_update(population: ChainPopulation, model_prev: RbmModel,
                        model_next: RbmModel, state: TraisState):
    """Add ``-(H_next - H_prev)`` at the current chain states to the log weights.

    Must be called before the chains are advanced under ``model_next``.
    Returns the reweighted population and the updated log Z estimate.
    """
    lw = population.log_weight - energy_shift(model_prev, model_next, population.v)
    out = ChainPopulation(population.v, population.h, lw)
    return out, state.estimate(out)


def jarzynski_step(population: ChainPopulation, model_prev: RbmModel, model_next: RbmModel,
                   ess_threshold: float, rng, state: TraisState | None = None) -> ChainPopulation:
    """Work update ``W += H_next(x) - H_prev(x)``; resample when ESS < threshold.

    When ``state`` is given its offset absorbs the removed weight level so
    that the running log Z estimate is unaffected by resampling.
    """
    pop = ChainPopulation(population.v, population.h,
                          population.log_weight - energy_shift(model_prev, model_next, population.v))
    if ess(pop.log_weight) < ess_threshold:
        pop, level = resample(pop, rng)
        if state is not None:
            state.offset += level
    return pop


def pair_acceptance(dh_upper, dh_lower, w_upper=None, w_lower=None) -> float:
    """Mean of min(1, exp(dh_upper[r] - dh_lower[s])) over weighted pairs.

    ``dh = H_upper - H_lower`` evaluated on samples of the upper model
    (``dh_upper``) and of the lower model (``dh_lower``). Evaluated exactly
    over all pairs in O(n log n) by sorting.
    """
    x = np.asarray(dh_upper, dtype=np.float64)
    y = np.asarray(dh_lower, dtype=np.float64)
    a = np.full(x.size, 1.0 / x.size) if w_upper is None else np.asarray(w_upper) / np.sum(w_upper)
    b = np.full(y.size, 1.0 / y.size) if w_lower is None else np.asarray(w_lower) / np.sum(w_lower)
    order = np.argsort(x)
    xs, as_ = x[order], a[order]
    # split point: upper samples with x_r >= y_s accept with probability 1
    cut = np.searchsorted(xs, y, side="left")
    tail = np.concatenate([np.cumsum(as_[::-1])[::-1], [0.0]])
    with np.errstate(divide="ignore"):
        log_terms = np.log(as_) + xs
    log_prefix = np.concatenate([[-np.inf], np.logaddexp.accumulate(log_terms)])
    below = np.exp(np.minimum(log_prefix[cut] - y, 0.0))
    return float(np.clip(b @ (tail[cut] + below), 0.0, 1.0))


def swap_acceptance_estimate(model_saved: RbmModel, model_current: RbmModel,
                             population: ChainPopulation,
                             saved_population: ChainPopulation | None = None) -> float:
    """Exchange acceptance between the saved and the current model.

    With ``saved_population`` (chains that represented the saved law when it
    was saved) the two samples are compared directly. Without it the current
    chains are reweighted by exp(H_current - H_saved) to stand in for the
    saved law; that needs no extra state but its variance grows quickly as
    the two laws separate.
    """
    dh = energy(model_current, population.v, population.h) - energy(model_saved, population.v, population.h)
    lw = population.log_weight
    if saved_population is None:
        return pair_acceptance(dh, dh, normalized_weights(lw), normalized_weights(lw + dh))
    sp = saved_population
    dh_saved = energy(model_current, sp.v, sp.h) - energy(model_saved, sp.v, sp.h)
    return pair_acceptance(dh, dh_saved, normalized_weights(lw), normalized_weights(sp.log_weight))


def initial_sampler(model: RbmModel, rcm=None):
    """Equilibrium sampler used to seed the chains for ``model``."""
    if model.is_factorized or min(model.num_visible, model.num_hidden) <= 20:
        return lambda count, rng: exact_sample(model, count, rng)
    if rcm is not None:
        from .lowrank import rcm_sampler

        return rcm_sampler(rcm, model)
    raise EnumerationError("no equilibrium sampler for the initial model; give an RCM")


def initial_log_partition(model: RbmModel, rcm=None) -> float:
    if model.is_factorized:
        return factorized_log_partition(model)
    if min(model.num_visible, model.num_hidden) <= ENUMERATION_CAP:
        return exact_log_partition(model)
    if rcm is not None:
        from .lowrank import mesh_log_partition

        return mesh_log_partition(rcm, model)
    raise EnumerationError("log Z of the initial model is unknown; give an RCM")


def _check_finite(model: RbmModel, grad, learning_rate: float, update: int) -> None:
    """Refuse an update that would produce non-finite parameters."""
    names = ("weights", "visible_bias", "hidden_bias")
    with np.errstate(all="ignore"):
        for name, g in zip(names, grad):
            arr = getattr(model, name) + learning_rate * g
            if not np.all(np.isfinite(arr)):
                bad = int(np.sum(~np.isfinite(arr)))
                raise FloatingPointError(f"non-finite {name} at update {update} ({bad} entries)")


def _minibatches(n: int, batch: int, rng):
    while True:
        order = rng.permutation(n)
        if batch >= n:
            yield order
            continue
        for start in range(0, n - batch + 1, batch):
            yield order[start:start + batch]


def pcd_train(init_model: RbmModel, dataset, config: TrainConfig, test_data=None,
              rcm=None, log_z0: float | None = None, callback=None,
              metrics_stream=None) -> TrajectoryLadder:
    """Train with persistent chains and return the checkpoint ladder.

    Per update: estimate the gradient on the chains, update the parameters,
    advance the chains ``k`` AGS steps under the model they were sampling,
    then reweight them by the energy shift (online trajectory AIS). A
    checkpoint is saved whenever the estimated exchange acceptance between
    the last saved model and the current one drops below the target; the
    final model is always saved.

    ``callback(update, model, population, log_z)`` runs at every evaluation
    interval.
    """
    from .data import BinaryDataset

    if isinstance(dataset, BinaryDataset):
        if test_data is None and len(dataset.test):
            test_data = dataset.test
        data = dataset.train
    else:
        data = np.asarray(dataset, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    model = init_model
    state = TraisState(initial_log_partition(model, rcm) if log_z0 is None else float(log_z0))
    sampler = initial_sampler(model, rcm)
    population = sampler(config.chain_count, rng)
    # optional estimator chains that never feed the gradient
    separate = config.trais_chains > 0
    est = sampler(config.trais_chains, rng) if separate else None
    batches = _minibatches(len(data), config.batch_size, rng)
    jarzynski = config.reweighting == "jarzynski"

    ladder = TrajectoryLadder(config=config)

    def lls(log_z):
        tr = float(np.mean(-marginal_energy(model, data))) - log_z
        te = float(np.mean(-marginal_energy(model, test_data))) - log_z if test_data is not None else float("nan")
        return tr, te

    def record(t, log_z):
        tr, te = lls(log_z)
        rec = {"t": t, "logZ": log_z, "ll_train": tr, "ll_test": te,
               "ess": ess((est if separate else population).log_weight),
               "checkpoints": len(ladder)}
        ladder.metrics.append(rec)
        if metrics_stream is not None:
            metrics_stream.write(format_metrics(rec))
            metrics_stream.flush()
        if callback is not None:
            callback(t, model, est if separate else population, log_z)

    ladder.append(Checkpoint(0, model, state.log_z0, *lls(state.log_z0)))
    # the chains at the last checkpoint, kept as a sample of its law
    saved, saved_chains = model, (est if separate else population).copy()
    record(0, state.log_z0)
    log_z = state.log_z0
    if (model.is_factorized and config.weight_noise > 0.0 and config.learning_rate > 0.0
            and config.total_updates > 0):
        # W = 0 is a fixed point of the PCD dynamics; the symmetry-breaking
        # perturbation is the first segment of the importance-sampling path
        noisy = model.with_params(weights=config.weight_noise * rng.standard_normal(model.weights.shape))
        if separate:
            est, log_z = online_trais_update(est, model, noisy, state)
        else:
            population, log_z = online_trais_update(population, model, noisy, state)
        model = noisy
    for t in range(1, config.total_updates + 1):
        batch = data[next(batches)]
        weights = normalized_weights(population.log_weight) if jarzynski else None
        grad = gradient_estimate(model, batch, population, weights)
        _check_finite(model, grad, config.learning_rate, t)
        new = apply_gradient(model, grad, config.learning_rate)
        # the chains that picked the update are moved on (under the model they
        # sample) before they weigh it; weighing the very states the gradient
        # was computed on biases log Z by about -lr tr(Fisher) / R per update
        population = ags_step(model, population, config.gibbs_steps, rng)
        if separate:
            if jarzynski:
                population = jarzynski_step(population, model, new, config.ess_threshold, rng)
            est = ags_step(model, est, config.gibbs_steps, rng)
            est = jarzynski_step(est, model, new, config.ess_threshold, rng, state)
            log_z = state.estimate(est)
        elif jarzynski:
            population = jarzynski_step(population, model, new, config.ess_threshold, rng, state)
            log_z = state.estimate(population)
        else:
            population, log_z = online_trais_update(population, model, new, state)
        model = new
        last = t == config.total_updates
        if not model.same_parameters(saved):
            chains = est if separate else population
            acc = swap_acceptance_estimate(saved, model, chains, saved_chains)
            if acc < config.ladder_acceptance_target or last:
                ladder.append(Checkpoint(t, model, log_z, *lls(log_z)))
                saved, saved_chains = model, chains.copy()
        elif last:
            ladder.append(Checkpoint(t, model, log_z, *lls(log_z)))
        if t % config.eval_interval == 0 or last:
            record(t, log_z)
    return ladder


# --- ladder directory ----------------------------------------------------------

METRIC_KEYS = ("t", "logZ", "ll_train", "ll_test", "ess", "checkpoints")


def format_metrics(rec: dict) -> str:
    return " ".join(f"{k}={rec[k]!r}" if isinstance(rec[k], float) else f"{k}={rec[k]}"
                    for k in METRIC_KEYS) + "\n"


def save_ladder(directory, ladder: TrajectoryLadder) -> None:
    """Write ``ladder.idx``, one RBM1 file per checkpoint, ``config`` and ``metrics``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for c in ladder.checkpoints:
        name = f"model_{c.update:08d}.rbm"
        save_model(out / name, c.model, c.update)
        lines.append(f"{c.update} {name} {c.log_z!r} {c.ll_train!r} {c.ll_test!r}\n")
    (out / "ladder.idx").write_text("".join(lines))
    if ladder.config is not None:
        (out / "config").write_text(ladder.config.dumps())
    (out / "metrics").write_text("".join(format_metrics(r) for r in ladder.metrics))


def load_ladder(directory) -> TrajectoryLadder:
    src = Path(directory)
    idx = src / "ladder.idx"
    if not idx.exists():
        raise FileNotFoundError(f"no ladder.idx in {src}")
    ladder = TrajectoryLadder()
    for lineno, line in enumerate(idx.read_text().splitlines(), 1):
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"ladder.idx line {lineno}: expected 5 fields")
        model, _ = load_model(src / parts[1])
        ladder.append(Checkpoint(int(parts[0]), model, float(parts[2]),
                                 float(parts[3]), float(parts[4])))
    if (src / "config").exists():
        ladder.config = TrainConfig.loads((src / "config").read_text())
    if (src / "metrics").exists():
        for line in (src / "metrics").read_text().splitlines():
            rec = dict(item.split("=", 1) for item in line.split())
            ladder.metrics.append({k: (int(rec[k]) if k in ("t", "checkpoints") else float(rec[k]))
                                   for k in METRIC_KEYS})
    return ladder
