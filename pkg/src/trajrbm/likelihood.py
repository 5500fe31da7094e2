"""Partition-function and log-likelihood estimators.

All estimators work with log weights and log-mean-exp reductions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import (
    ChainPopulation,
    Convention,
    RbmModel,
    ags_step,
    marginal_energy,
)
from .train import init_visible_bias, initial_log_partition, initial_sampler, log_mean_exp
from .sample import default_betas, tempered_ladder

MIN_RATIO_SAMPLES = 100


class ScheduleKind(str, enum.Enum):
    FLAT = "TemperatureFlat"
    REFERENCE = "TemperatureReference"
    TRAJECTORY = "Trajectory"


@dataclass
class AisSchedule:
    """Interpolation path for AIS.

    ``points`` holds inverse temperatures for the temperature kinds and
    ``RbmModel`` checkpoints (time-ordered) for the trajectory kind.
    """

    kind: ScheduleKind
    points: list
    steps: int = 1
    walkers: int = 1000
    reference: RbmModel | None = None

    def __post_init__(self):
        self.kind = ScheduleKind(self.kind)
        if len(self.points) < 1:
            raise ValueError("schedule needs at least one point")
        if self.kind is not ScheduleKind.TRAJECTORY:
            b = np.asarray(self.points, dtype=np.float64)
            if b[0] != 0.0 or b[-1] != 1.0 or np.any(np.diff(b) <= 0):
                raise ValueError("betas must ascend strictly from 0 to 1")
            if self.kind is ScheduleKind.REFERENCE and self.reference is None:
                raise ValueError("reference schedule needs a reference model")
        if self.steps < 1 or self.walkers < 1:
            raise ValueError("steps and walkers must be >= 1")

    @classmethod
    def flat(cls, n_beta: int, steps: int = 1, walkers: int = 1000) -> "AisSchedule":
        return cls(ScheduleKind.FLAT, list(default_betas(n_beta)), steps, walkers)

    @classmethod
    def with_reference(cls, n_beta: int, reference: RbmModel, steps: int = 1,
                       walkers: int = 1000) -> "AisSchedule":
        return cls(ScheduleKind.REFERENCE, list(default_betas(n_beta)), steps, walkers, reference)

    @classmethod
    def trajectory(cls, models, steps: int = 1, walkers: int = 1000) -> "AisSchedule":
        return cls(ScheduleKind.TRAJECTORY, list(models), steps, walkers)

    def models(self, target: RbmModel | None) -> list:
        if self.kind is ScheduleKind.TRAJECTORY:
            return list(self.points)
        if self.kind is ScheduleKind.FLAT:
            return tempered_ladder(target, self.points)
        return tempered_ladder(target, self.points, self.reference)

    @property
    def budget(self) -> int:
        """AGS steps per walker over the whole path."""
        return self.steps * (len(self.points) - 1)


@dataclass
class AisResult:
    log_z: float
    stderr: float
    log_weights: np.ndarray = field(repr=False)
    log_z0: float = 0.0

    @property
    def ess(self) -> float:
        lw = self.log_weights
        return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)) / lw.size)


def jackknife_log_mean_exp(log_weights) -> tuple[float, float]:
    """(log mean exp(lw), jackknife standard error)."""
    lw = np.asarray(log_weights, dtype=np.float64)
    n = lw.size
    est = log_mean_exp(lw)
    if n < 2:
        return est, float("nan")
    top = lw.max()
    w = np.exp(lw - top)
    total = w.sum()
    rest = np.maximum(total - w, np.finfo(float).tiny * total)
    loo = top + np.log(rest / (n - 1))
    var = (n - 1) / n * np.sum((loo - loo.mean()) ** 2)
    return est, float(np.sqrt(var))


def ais_estimate(target: RbmModel | None, schedule: AisSchedule, seed=0,
                 log_z0: float | None = None, head_sampler=None, rcm=None) -> AisResult:
    """Forward annealed importance sampling along ``schedule``.

    Walkers start from exact samples of the first model. At every hop
    (i-1, i) the weight picks up ``-(H_i - H_{i-1})`` at the current state,
    then the walkers take ``steps`` AGS steps under model i (the kernel after
    the final hop is skipped since it does not change the weights).
    """
    rng = np.random.default_rng(seed)
    models = schedule.models(target)
    first = models[0]
    lz0 = initial_log_partition(first, rcm) if log_z0 is None else float(log_z0)
    if len(models) == 1:
        return AisResult(lz0, 0.0, np.zeros(schedule.walkers), lz0)
    sampler = head_sampler or initial_sampler(first, rcm)
    pop: ChainPopulation = sampler(schedule.walkers, rng)
    lw = np.zeros(pop.size)
    for i in range(1, len(models)):
        lw -= marginal_energy(models[i], pop.v) - marginal_energy(models[i - 1], pop.v)
        if i < len(models) - 1:
            pop = ags_step(models[i], pop, schedule.steps, rng)
    est, err = jackknife_log_mean_exp(lw)
    return AisResult(lz0 + est, err, lw, lz0)


@dataclass
class LadderLikelihood:
    log_z: np.ndarray
    log_ratio: np.ndarray
    counts: np.ndarray
    ll_train: float
    ll_test: float
    flagged: list


def ptt_log_likelihood(models, sampler_output, log_z0: float, data=None,
                       test_data=None) -> LadderLikelihood:
    """Stepping-stone log Z along the ladder from the accumulated PTT ratios.

    ``log Z_t = log Z_{t-1} + log mean exp(-(H_t - H_{t-1}))`` over samples
    of model t-1. Pairs with fewer than 100 samples are flagged.
    """
    out = sampler_output
    if out.log_ratio_sums is None:
        raise ValueError("run ptt_run with accumulate_ratios=True")
    counts = out.ratio_counts
    with np.errstate(divide="ignore"):
        ratio = out.log_ratio_sums - np.log(np.maximum(counts, 1))
    log_z = np.concatenate([[log_z0], log_z0 + np.cumsum(ratio)])
    flagged = [j for j, c in enumerate(counts) if c < MIN_RATIO_SAMPLES]
    target = list(models)[-1]

    def ll(x):
        if x is None or len(x) == 0:
            return float("nan")
        return float(np.mean(-marginal_energy(target, x)) - log_z[-1])

    return LadderLikelihood(log_z, ratio, counts, ll(data), ll(test_data), flagged)


def reference_model(data, num_hidden: int, convention=Convention.ZERO_ONE,
                    clip: float = 1e-4) -> RbmModel:
    """Factorized model with the data's per-site marginals."""
    convention = Convention.parse(convention)
    data = np.asarray(data, dtype=np.float64)
    return RbmModel(np.zeros((num_hidden, data.shape[1])),
                    init_visible_bias(data, convention, clip), np.zeros(num_hidden), convention)


def independent_sites_baseline(data, convention=None, clip: float = 1e-4) -> float:
    """Mean log-likelihood of the best factorized model, marginals clipped to
    [clip, 1 - clip]."""
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("dataset must be a nonempty matrix")
    if convention is None:
        convention = Convention.PLUS_MINUS if x.min() < 0 else Convention.ZERO_ONE
    convention = Convention.parse(convention)
    up = x if convention is Convention.ZERO_ONE else (x + 1.0) / 2.0
    p = np.clip(up.mean(axis=0), clip, 1.0 - clip)
    return float(np.mean(up @ np.log(p) + (1.0 - up) @ np.log1p(-p)))
