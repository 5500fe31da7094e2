"""Replica-exchange samplers over a ladder of models.

The same sweep drives ordinary parallel tempering (a ladder of tempered
copies of one model) and parallel trajectory tempering (a ladder of
checkpoints saved along training): ``k`` AGS steps per model, then one pass
of adjacent exchanges from the easiest model to the target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    ChainPopulation,
    DimensionError,
    RbmModel,
    ags_step,
    energy,
    exact_sample,
    marginal_energy,
)
from .train import pair_acceptance


class NonErgodicError(ValueError):
    pass


def _check_ladder(models) -> None:
    if not models:
        raise ValueError("empty ladder")
    ref = models[0]
    for m in models[1:]:
        if m.convention is not ref.convention:
            raise DimensionError("mixed conventions in ladder")
        if (m.num_visible, m.num_hidden) != (ref.num_visible, ref.num_hidden):
            raise DimensionError("mixed dimensions in ladder")


def swap_probability(model_t: RbmModel, model_tm1: RbmModel, x_t: ChainPopulation,
                     x_tm1: ChainPopulation) -> np.ndarray:
    """min(1, exp(dH(x_t) - dH(x_tm1))) with dH = H_t - H_{t-1} on joint states."""
    d_t = energy(model_t, x_t.v, x_t.h) - energy(model_tm1, x_t.v, x_t.h)
    d_tm1 = energy(model_t, x_tm1.v, x_tm1.h) - energy(model_tm1, x_tm1.v, x_tm1.h)
    return np.exp(np.minimum(d_t - d_tm1, 0.0))


def swap_attempt(model_t: RbmModel, model_tm1: RbmModel, x_t: ChainPopulation,
                 x_tm1: ChainPopulation, rng):
    """Metropolis exchange of full (v, h) states, independently per chain.

    Returns (accepted mask, new x_t, new x_tm1).
    """
    p = swap_probability(model_t, model_tm1, x_t, x_tm1)
    acc = np.random.default_rng(rng).random(p.shape) < p
    sel = acc[:, None]
    new_t = ChainPopulation(np.where(sel, x_tm1.v, x_t.v), np.where(sel, x_tm1.h, x_t.h),
                            x_t.log_weight.copy())
    new_tm1 = ChainPopulation(np.where(sel, x_t.v, x_tm1.v), np.where(sel, x_t.h, x_tm1.h),
                              x_tm1.log_weight.copy())
    return acc, new_t, new_tm1


@dataclass
class LadderSampler:
    """Final state and diagnostics of a ladder run."""

    models: list
    populations: list
    attempts: np.ndarray
    accepts: np.ndarray
    history: np.ndarray | None = None        # (sweeps, chains, models): model index of each walker
    samples: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    sweeps: int = 0
    ags_steps: int = 0
    # stepping-stone accumulators: logsumexp over model j-1 samples of -(H_j - H_{j-1})
    log_ratio_sums: np.ndarray | None = None
    ratio_counts: np.ndarray | None = None

    @property
    def acceptance(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.accepts / self.attempts

    @property
    def chain_count(self) -> int:
        return self.populations[0].size

    def acceptance_table(self) -> str:
        rows = ["pair attempts accepts rate"]
        for j, (n, a) in enumerate(zip(self.attempts, self.accepts)):
            rate = a / n if n else float("nan")
            rows.append(f"{j}-{j + 1} {int(n)} {int(a)} {rate:.6f}")
        return "\n".join(rows) + "\n"


def _default_start(model: RbmModel, count: int, rng) -> ChainPopulation:
    if model.is_factorized or min(model.num_visible, model.num_hidden) <= 20:
        return exact_sample(model, count, rng)
    return ChainPopulation.random(model, count, rng)


def pass_through(models, count: int, rng, head_sampler=None, k: int = 1) -> list:
    """Initial populations: a sample of the first model passed along the
    ladder with ``k`` AGS steps at each subsequent model."""
    first = head_sampler(count, rng) if head_sampler is not None else _default_start(models[0], count, rng)
    pops = [first]
    for m in models[1:]:
        pops.append(ags_step(m, pops[-1], k, rng))
    return pops


def ptt_run(models, chain_count: int, sweeps: int, k: int = 1, rng=None, head_sampler=None,
            init=None, init_steps: int = 1, stride: int = 1, observer=None,
            store_samples: bool = False, record_history: bool = False,
            accumulate_ratios: bool = False) -> LadderSampler:
    """Parallel trajectory tempering over an ordered ladder (index 0 easiest).

    Every sweep: refresh index 0 from ``head_sampler`` when one is given
    (AGS otherwise), ``k`` AGS steps on every other model, then exchange
    attempts on the pairs (0,1), (1,2), ... in that order. Every ``stride``
    sweeps the target-model visible states are passed to ``observer`` (and
    stored when ``store_samples``). With ``accumulate_ratios`` the samples of
    every model also feed the stepping-stone partition-function ratios.
    """
    models = list(models)
    _check_ladder(models)
    rng = np.random.default_rng(rng)
    n = len(models)
    pops = list(init) if init is not None else pass_through(models, chain_count, rng, head_sampler, init_steps)
    if any(p.size != pops[0].size for p in pops) or len(pops) != n:
        raise DimensionError("one population per model, equal chain counts")
    count = pops[0].size
    attempts = np.zeros(max(n - 1, 0))
    accepts = np.zeros(max(n - 1, 0))
    walker = np.tile(np.arange(n), (count, 1))       # walker[r, j]: walker id at model j
    history = np.empty((sweeps, count, n), dtype=np.int16) if record_history else None
    out = LadderSampler(models, pops, attempts, accepts, history)
    if accumulate_ratios:
        out.log_ratio_sums = np.full(max(n - 1, 0), -np.inf)
        out.ratio_counts = np.zeros(max(n - 1, 0), dtype=np.int64)
    for s in range(sweeps):
        for j, m in enumerate(models):
            if j == 0 and head_sampler is not None:
                pops[0] = head_sampler(count, rng)
            else:
                pops[j] = ags_step(m, pops[j], k, rng)
        for j in range(n - 1):
            acc, pops[j + 1], pops[j] = swap_attempt(models[j + 1], models[j], pops[j + 1], pops[j], rng)
            attempts[j] += count
            accepts[j] += acc.sum()
            if acc.any():
                w_lo = walker[acc, j].copy()
                walker[acc, j] = walker[acc, j + 1]
                walker[acc, j + 1] = w_lo
        if record_history:
            # position of each walker: invert the permutation per chain column
            pos = np.empty_like(walker)
            np.put_along_axis(pos, walker, np.arange(n)[None, :].repeat(count, 0), axis=1)
            history[s] = pos
        if (s + 1) % stride == 0:
            v = pops[-1].v
            if observer is not None:
                out.observations.append(observer(v))
            if store_samples:
                out.samples.append(v.copy())
            if accumulate_ratios:
                for j in range(1, n):
                    x = pops[j - 1].v
                    lw = marginal_energy(models[j - 1], x) - marginal_energy(models[j], x)
                    out.log_ratio_sums[j - 1] = np.logaddexp(out.log_ratio_sums[j - 1], logsumexp(lw))
                    out.ratio_counts[j - 1] += x.shape[0]
    out.sweeps = sweeps
    out.ags_steps = sweeps * n * k
    return out


def default_betas(n: int) -> np.ndarray:
    """n inverse temperatures from 0 to 1 inclusive."""
    if n < 1:
        raise ValueError("need at least one temperature")
    return np.array([1.0]) if n == 1 else np.linspace(0.0, 1.0, n)


def tempered_ladder(model: RbmModel, betas, reference: RbmModel | None = None) -> list:
    """beta-scaled copies of ``model``; with a factorized ``reference`` the
    biases are interpolated to it instead of scaled to zero."""
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(np.diff(betas) <= 0) or betas[-1] != 1.0:
        raise ValueError("betas must be strictly ascending and end at 1")
    if reference is None:
        return [model.scaled(b) for b in betas]
    if not reference.is_factorized:
        raise ValueError("the reference model must have zero couplings")
    return [model.with_params(weights=b * model.weights,
                              visible_bias=b * model.visible_bias + (1 - b) * reference.visible_bias,
                              hidden_bias=b * model.hidden_bias + (1 - b) * reference.hidden_bias)
            for b in betas]


def pt_run(model: RbmModel, betas, chain_count: int, sweeps: int, k: int = 1, rng=None,
           reference: RbmModel | None = None, **kwargs) -> LadderSampler:
    """Parallel tempering; the beta = 0 end is sampled exactly every sweep."""
    ladder = tempered_ladder(model, betas, reference)
    head = None
    if len(ladder) > 1 and ladder[0].is_factorized:
        head = lambda count, g: exact_sample(ladder[0], count, g)  # noqa: E731
    return ptt_run(ladder, chain_count, sweeps, k=k, rng=rng, head_sampler=head, **kwargs)


@dataclass
class LadderSelection:
    indices: list
    acceptance: np.ndarray     # estimated acceptance between consecutive kept models
    flagged: list              # kept pairs that are consecutive checkpoints below target
    matrix: np.ndarray         # estimated acceptance for every ordered pair (i < j)


def acceptance_matrix(models, probes: list) -> np.ndarray:
    """Estimated exchange acceptance for every pair i < j from per-model
    joint-state probe populations (the same energies the swap move uses)."""
    n = len(models)
    energies = [[energy(m, p.v, p.h) for m in models] for p in probes]  # energies[s][m]
    mat = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            on_j = energies[j][j] - energies[j][i]
            on_i = energies[i][j] - energies[i][i]
            mat[i, j] = mat[j, i] = pair_acceptance(on_j, on_i)
    return mat


EXACT_PROBE_CAP = 20


def select_ladder(models, target_acceptance: float, probe_count: int = 1000, rng=None,
                  head_sampler=None, probe_steps: int = 10, probes=None,
                  exact_probes: bool | None = None) -> LadderSelection:
    """Fewest checkpoints from first to last whose consecutive estimated
    acceptance is at least ``target_acceptance``.

    Computed as a shortest path over the pairs that meet the target; a pair
    of consecutive checkpoints is always allowed (and flagged if it misses
    the target), so a path exists.

    Probes are exact samples of every model when its smaller layer can be
    enumerated (``exact_probes=None`` decides automatically); otherwise a
    sample of the first model is passed through the ladder with
    ``probe_steps`` AGS steps per model. Short AGS burn-in overestimates the
    acceptance on multimodal models, so exact probes are preferred.
    """
    models = list(models)
    if len(models) < 2:
        raise ValueError("need at least two checkpoints")
    _check_ladder(models)
    if probes is None:
        rng = np.random.default_rng(rng)
        if exact_probes is None:
            exact_probes = all(min(m.num_visible, m.num_hidden) <= EXACT_PROBE_CAP for m in models)
        if exact_probes:
            probes = [exact_sample(m, probe_count, rng) for m in models]
        else:
            probes = pass_through(models, probe_count, rng, head_sampler, probe_steps)
    mat = acceptance_matrix(models, probes)
    n = len(models)
    dist = np.full(n, np.inf)
    prev = np.full(n, -1)
    dist[0] = 0
    for j in range(1, n):
        for i in range(j):
            if (mat[i, j] >= target_acceptance or i == j - 1) and dist[i] + 1 < dist[j]:
                dist[j], prev[j] = dist[i] + 1, i
    path = [n - 1]
    while path[-1] != 0:
        path.append(int(prev[path[-1]]))
    path = path[::-1]
    acc = np.array([mat[a, b] for a, b in zip(path[:-1], path[1:])])
    flagged = [(a, b) for a, b in zip(path[:-1], path[1:]) if mat[a, b] < target_acceptance]
    return LadderSelection(path, acc, flagged, mat)


# --- index random walk diagnostics ---------------------------------------------

@dataclass
class AutocorrelationResult:
    curve: np.ndarray
    per_start: np.ndarray
    tau_int: float
    tau_int_err: float
    tau_exp: float
    tau_exp_err: float
    window: int
    length: int

    @property
    def thermalized(self) -> bool:
        """Run length of at least 20 tau_exp."""
        return bool(np.isfinite(self.tau_exp) and self.length >= 20.0 * self.tau_exp)

    def table(self) -> str:
        lines = ["t C(t)"] + [f"{t} {c:.8f}" for t, c in enumerate(self.curve)]
        lines.append(f"tau_exp={self.tau_exp:.6g} tau_exp_err={self.tau_exp_err:.6g}")
        lines.append(f"tau_int={self.tau_int:.6g} tau_int_err={self.tau_int_err:.6g}")
        return "\n".join(lines) + "\n"


def _autocov(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Sum over walkers of the lag products, divided by the number of time
    origins; x is (T, walkers)."""
    T = x.shape[0]
    size = 1 << int(np.ceil(np.log2(2 * T)))
    out = np.zeros(max_lag + 1)
    for start in range(0, x.shape[1], 256):
        f = np.fft.rfft(x[:, start:start + 256], n=size, axis=0)
        ac = np.fft.irfft(f * np.conj(f), n=size, axis=0)[: max_lag + 1]
        out += ac.sum(axis=1)
    return out / (T - np.arange(max_lag + 1))


def tau_int_self_consistent(curve: np.ndarray, c: float = 6.0) -> tuple[float, int]:
    """tau = 1/2 + sum_{t=1}^{W} C(t) with the smallest window W >= c tau(W)."""
    partial = 0.5 + np.cumsum(curve[1:])
    for w in range(1, len(curve)):
        if w >= c * partial[w - 1]:
            return float(partial[w - 1]), w
    return float(partial[-1]), len(curve) - 1


def tau_exp_fit(curve: np.ndarray, lo: float = 0.05, hi: float = 0.5) -> float:
    """-1/slope of log C(t) over the first stretch with lo <= C <= hi."""
    inside = (curve >= lo) & (curve <= hi)
    inside[0] = False
    idx = np.nonzero(inside)[0]
    if idx.size == 0:
        return float("nan")
    # first contiguous run
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    run = idx[: breaks[0] + 1] if breaks.size else idx
    if run.size < 2:
        # a single point still fixes the slope through C(0) = 1
        return float(-run[0] / np.log(curve[run[0]]))
    slope = np.polyfit(run, np.log(curve[run]), 1)[0]
    return float(-1.0 / slope) if slope < 0 else float("inf")


def _curve(traj: np.ndarray, center: float, max_lag: int) -> np.ndarray:
    x = traj.astype(np.float64) - center
    cov = _autocov(x, max_lag)
    if cov[0] <= 0:
        raise NonErgodicError("non-ergodic run: the model index never varies")
    return cov / cov[0]


def index_autocorrelation(history, ladder_size: int | None = None, max_lag: int | None = None,
                          start_index=None) -> AutocorrelationResult:
    """Autocorrelation of the model index visited by each walker.

    ``history`` is (T, walkers) or (T, chains, models) as recorded by
    :func:`ptt_run`; in the latter case walker ``w`` of every chain column
    starts at model ``w`` and a separate curve is formed per start index.
    ``<n> = (N_m - 1) / 2`` is used as the mean.
    """
    h = np.asarray(history)
    if h.ndim == 3:
        T, chains, n_models = h.shape
        start = np.repeat(np.arange(n_models)[None], chains, axis=0).ravel()
        h = h.reshape(T, chains * n_models)
    elif h.ndim == 2:
        T = h.shape[0]
        n_models = ladder_size if ladder_size is not None else int(h.max()) + 1
        start = np.asarray(start_index) if start_index is not None else h[0]
    else:
        raise ValueError("history must be 2-D or 3-D")
    if ladder_size is not None:
        n_models = ladder_size
    if T < 3:
        raise ValueError("history too short")
    if not np.any(h[1:] != h[:-1]):
        raise NonErgodicError("non-ergodic run: no walker ever changes model index")
    max_lag = min(T // 2, 1000) if max_lag is None else min(max_lag, T - 1)
    center = (n_models - 1) / 2.0
    curve = _curve(h, center, max_lag)
    per_start, taus_int, taus_exp = [], [], []
    for m in np.unique(start):
        try:
            cm = _curve(h[:, start == m], center, max_lag)
        except NonErgodicError:
            continue
        per_start.append(cm)
        taus_int.append(tau_int_self_consistent(cm)[0])
        taus_exp.append(tau_exp_fit(cm))
    tau_int, window = tau_int_self_consistent(curve)

    def sem(vals):
        vals = np.asarray(vals, dtype=float)
        vals = vals[np.isfinite(vals)]
        return float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float("nan")

    return AutocorrelationResult(curve, np.array(per_start), tau_int, sem(taus_int),
                                 tau_exp_fit(curve), sem(taus_exp), window, T)


def ar1_index_walk(n_models: int, length: int, walkers: int, rho: float, rng=None) -> np.ndarray:
    """Synthetic index walk: keep the index with probability rho, otherwise
    draw a fresh uniform index. Its autocorrelation is exactly rho**t."""
    rng = np.random.default_rng(rng)
    out = np.empty((length, walkers), dtype=np.int64)
    out[0] = rng.integers(n_models, size=walkers)
    for t in range(1, length):
        fresh = rng.integers(n_models, size=walkers)
        stay = rng.random(walkers) < rho
        out[t] = np.where(stay, out[t - 1], fresh)
    return out
