"""Sample-quality and overfitting metrics.

Mode-jump counting across a separating line in a PCA plane, moment
comparisons against data, and the nearest-neighbor adversarial accuracy
(AATS) with its privacy-loss gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .lowrank import _as_plus_minus, fit_pca
from .core import Convention

__all__ = [
    "Separator",
    "default_separator",
    "JumpCount",
    "mode_jumps",
    "count_sign_changes",
    "AatsResult",
    "aats",
    "privacy_loss",
    "MomentReport",
    "moment_report",
]

_NN_CHUNK = 1024


@dataclass(frozen=True)
class Separator:
    """A line in a two-dimensional projection plane.

    Attributes
    ----------
    plane : (2, Nv) array
        Orthonormal projection directions (usually PC1 and PC2).
    normal : (2,) array
        Unit normal of the line inside the plane.
    offset : float
        Signed distance of the line from the origin along ``normal``.
    """

    plane: np.ndarray
    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        plane = np.atleast_2d(np.asarray(self.plane, dtype=np.float64))
        normal = np.asarray(self.normal, dtype=np.float64).ravel()
        if plane.shape[0] != 2 or normal.shape != (2,):
            raise ValueError("separator needs a (2, Nv) plane and a 2-vector normal")
        if not np.isclose(np.linalg.norm(normal), 1.0, atol=1e-9):
            raise ValueError(f"separator normal must be unit length, got |n| = {np.linalg.norm(normal)}")
        object.__setattr__(self, "plane", plane)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def num_visible(self) -> int:
        return self.plane.shape[1]

    def project(self, v, convention=None) -> np.ndarray:
        """Coordinates in the plane, scaled by 1/sqrt(Nv) like magnetizations.

        Accepts any leading shape ``(..., Nv)``.
        """
        v = np.asarray(v, dtype=np.float64)
        flat = _as_plus_minus(v.reshape(-1, v.shape[-1]), convention)
        out = flat @ self.plane.T / np.sqrt(self.num_visible)
        return out.reshape(v.shape[:-1] + (2,))

    def signed_distance(self, projected) -> np.ndarray:
        return np.asarray(projected, dtype=np.float64) @ self.normal - self.offset

    def side(self, v, convention=None) -> np.ndarray:
        return np.sign(self.signed_distance(self.project(v, convention)))

    def flipped(self) -> "Separator":
        return Separator(self.plane, -self.normal, -self.offset)


def default_separator(data, convention=None) -> Separator:
    """Line through the projected data mean, perpendicular to PC1, in the
    PC1-PC2 plane."""
    data = np.asarray(data, dtype=np.float64)
    try:
        pca = fit_pca(data, 2, convention)
        plane = pca.directions
    except ValueError:
        # rank-1 data: complete PC1 with any orthogonal direction
        pc1 = fit_pca(data, 1, convention).directions[0]
        other = np.eye(pc1.size)[np.argmin(np.abs(pc1))]
        other = other - pc1 * (pc1 @ other)
        plane = np.stack([pc1, other / np.linalg.norm(other)])
    sep = Separator(plane, np.array([1.0, 0.0]), 0.0)
    center = sep.project(data, convention).mean(axis=0)
    return Separator(plane, sep.normal, float(center @ sep.normal))


# --- mode jumps ----------------------------------------------------------------

@dataclass
class JumpCount:
    per_chain: np.ndarray
    steps: int

    @property
    def mean(self) -> float:
        return float(self.per_chain.mean())

    @property
    def stderr(self) -> float:
        n = self.per_chain.size
        return float(self.per_chain.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")


def count_sign_changes(signed: np.ndarray) -> np.ndarray:
    """Sign changes along axis 0 of a (T, n) array.

    Points exactly on the line keep the side of the last point off it.
    """
    s = np.sign(np.asarray(signed, dtype=np.float64))
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] == 0:
        raise ValueError("empty history")
    # forward-fill zeros with the last nonzero side
    t_idx = np.where(s != 0, np.arange(s.shape[0])[:, None], 0)
    np.maximum.accumulate(t_idx, axis=0, out=t_idx)
    filled = np.take_along_axis(s, t_idx, axis=0)
    a, b = filled[:-1], filled[1:]
    return np.sum((a != 0) & (b != 0) & (a != b), axis=0).astype(np.int64)


def mode_jumps(history, separator: Separator | None = None) -> JumpCount:
    """Count crossings of ``separator`` along each chain's history.

    Parameters
    ----------
    history : array
        Either (T, n) signed distances when ``separator`` is None, or
        (T, n, 2) plane coordinates sampled at a fixed stride.
    separator : Separator, optional
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0 or h.shape[0] == 0:
        raise ValueError("empty history")
    if separator is not None:
        if h.shape[-1] != 2:
            raise ValueError("projected history must have a trailing axis of size 2")
        h = separator.signed_distance(h)
    return JumpCount(count_sign_changes(h), int(h.shape[0]))


# --- AATS ------------------------------------------------------------------------

@dataclass(frozen=True)
class AatsResult:
    aa_truth: float
    aa_synth: float

    @property
    def aa_ts(self) -> float:
        return 0.5 * (self.aa_truth + self.aa_synth)

    def __iter__(self):
        return iter((self.aa_truth, self.aa_synth, self.aa_ts))


def _nearest(query, ref, metric, exclude_self: bool) -> np.ndarray:
    out = np.empty(len(query))
    for start in range(0, len(query), _NN_CHUNK):
        d = cdist(query[start:start + _NN_CHUNK], ref, metric=metric)
        if exclude_self:
            rows = np.arange(d.shape[0])
            d[rows, start + rows] = np.inf
        out[start:start + _NN_CHUNK] = d.min(axis=1)
    return out


def _indicator(d_cross, d_self) -> float:
    return float(np.mean((d_cross > d_self) + 0.5 * (d_cross == d_self)))


def aats(real, synth, metric: str = "hamming") -> AatsResult:
    """Nearest-neighbor adversarial accuracy.

    ``aa_truth`` is the mean of 1[d_TS(i) > d_TT(i)] over real points, where
    d_TT excludes the point itself; ``aa_synth`` is the mirror quantity.
    Ties count 1/2.
    """
    real = np.asarray(real, dtype=np.float64)
    synth = np.asarray(synth, dtype=np.float64)
    if real.shape != synth.shape:
        raise ValueError(f"aats needs equal-size sets, got {real.shape} and {synth.shape}")
    if len(real) < 2:
        raise ValueError("aats needs at least two points per set")
    d_tt = _nearest(real, real, metric, True)
    d_ts = _nearest(real, synth, metric, False)
    d_ss = _nearest(synth, synth, metric, True)
    d_st = _nearest(synth, real, metric, False)
    return AatsResult(_indicator(d_ts, d_tt), _indicator(d_st, d_ss))


def privacy_loss(real_train, real_test, synth, metric: str = "hamming") -> float:
    """AA_TS(test, synth) - AA_TS(train, synth)."""
    return aats(real_test, synth, metric).aa_ts - aats(real_train, synth, metric).aa_ts


# --- moments ---------------------------------------------------------------------

@dataclass
class MomentReport:
    site_mean_error: np.ndarray
    covariance_error: float
    projected_tv: float
    d: int

    @property
    def max_mean_error(self) -> float:
        return float(self.site_mean_error.max())

    @property
    def mean_mean_error(self) -> float:
        return float(self.site_mean_error.mean())

    def items(self) -> list[tuple[str, float]]:
        return [
            ("mean_site_error", self.mean_mean_error),
            ("max_site_error", self.max_mean_error),
            ("covariance_spectral_error", self.covariance_error),
            ("projected_tv", self.projected_tv),
        ]

    def to_text(self) -> str:
        width = max(len(k) for k, _ in self.items())
        return "".join(f"{k:<{width}}  {v:.6g}\n" for k, v in self.items())

    def to_keyvalue(self) -> str:
        return "".join(f"{k}={v!r}\n" for k, v in self.items())


def _projected_tv(a: np.ndarray, b: np.ndarray, bins: int) -> float:
    both = np.concatenate([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    edges = [np.linspace(l, h, bins + 1) for l, h in zip(lo, hi)]
    pa, _ = np.histogramdd(a, bins=edges)
    pb, _ = np.histogramdd(b, bins=edges)
    return 0.5 * float(np.abs(pa / pa.sum() - pb / pb.sum()).sum())


def moment_report(dataset, samples, pca=None, d: int = 2, bins: int = 20,
                  convention=None) -> MomentReport:
    """First/second moment discrepancies and projected-histogram TV distance.

    Means are compared in the data's own convention. The covariance error is
    the spectral norm of the difference of the top-``d`` projected covariance
    blocks; the TV distance uses a fixed ``bins``-per-axis grid over the PCA
    plane spanning both sets.
    """
    x = np.asarray(dataset, dtype=np.float64)
    y = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"dataset and samples must share dimensions, got {x.shape} and {y.shape}")
    if convention is None:
        convention = Convention.PLUS_MINUS if min(x.min(), y.min()) < 0 else Convention.ZERO_ONE
    site = np.abs(x.mean(axis=0) - y.mean(axis=0))
    if pca is None:
        d = min(d, x.shape[1])
        while True:
            try:
                pca = fit_pca(x, d, convention)
                break
            except ValueError:
                if d == 1:
                    return MomentReport(site, 0.0, 0.0, 0)
                d -= 1
    u = pca.directions
    px = _as_plus_minus(x, convention) @ u.T / np.sqrt(u.shape[1])
    py = _as_plus_minus(y, convention) @ u.T / np.sqrt(u.shape[1])
    cx = np.atleast_2d(np.cov(px, rowvar=False))
    cy = np.atleast_2d(np.cov(py, rowvar=False)) if len(py) > 1 else np.zeros_like(cx)
    cov_err = float(np.linalg.norm(cx - cy, ord=2))
    plane = px[:, :2], py[:, :2]
    return MomentReport(site, cov_err, _projected_tv(*plane, bins), u.shape[0])
