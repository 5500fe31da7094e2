"""Low-rank pretraining in the space of principal-component magnetizations.

The data are projected on the first ``d`` principal directions ``u_alpha``
(plus a bias direction ``u_0``) in the PlusMinus convention, with
magnetizations ``m_alpha = u_alpha . v / sqrt(Nv)``. The entropy of a
magnetization is obtained from the finite-size cumulant generating function

    phi(mu) = (1/Nv) sum_i log cosh(sqrt(Nv) sum_alpha mu_alpha u_alpha,i)

through its Legendre transform ``I(m) = m.mu* - phi(mu*)``. A Restricted
Coulomb Machine (RCM) assigns

    log p(m) = -Nv I(m) + sum_alpha theta_alpha m_alpha
               + sum_a q_a |n_a . m + z_a| + const

on a discretized mesh; the log-likelihood is concave in ``(q, theta)`` for a
fixed hyperplane family ``(n_a, z_a)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
import io

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import lsq_linear
from scipy.special import logsumexp

from .core import Convention, FormatError, RbmModel, convert_model, convert_states, _parse_meta

log = logging.getLogger(__name__)

DEFAULT_BINS = {1: 101, 2: 101, 3: 51, 4: 21}
BIAS_BINS = 101
PRUNE_RATIO = 1e-3
MESH_MEMORY_CAP = 2 << 30
_CHUNK = 2048
_SATURATION = 60.0


class ConvergenceError(RuntimeError):
    pass


@dataclass
class PcaBasis:
    directions: np.ndarray      # (d, Nv), orthonormal rows
    data_mean: np.ndarray       # (Nv,), PlusMinus convention
    bias_direction: np.ndarray  # (Nv,), unit norm, orthogonal to directions

    @property
    def d(self) -> int:
        return self.directions.shape[0]

    @property
    def num_visible(self) -> int:
        return self.directions.shape[1]

    def extended(self) -> np.ndarray:
        """(d + 1, Nv) matrix with the bias direction as row 0."""
        return np.vstack([self.bias_direction, self.directions])


def _as_plus_minus(data, convention=None) -> np.ndarray:
    from .data import BinaryDataset

    if isinstance(data, BinaryDataset):
        return data.as_convention(Convention.PLUS_MINUS).data
    x = np.asarray(data, dtype=np.float64)
    if convention is None:
        convention = Convention.ZERO_ONE if x.min() >= 0.0 else Convention.PLUS_MINUS
    return convert_states(x, convention, Convention.PLUS_MINUS)


def fit_pca(data, d: int, convention=None) -> PcaBasis:
    """Top-``d`` right singular vectors of the centered PlusMinus data.

    Each direction is signed so that its largest-magnitude coordinate is
    positive.
    """
    x = _as_plus_minus(data, convention)
    if x.shape[0] < d + 1:
        raise ValueError(f"need at least d + 1 = {d + 1} rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    rank = int(np.sum(s > max(s[0] if s.size else 0.0, 1.0) * 1e-10)) if s.size else 0
    if rank < d:
        raise ValueError(f"centered data have rank {rank} < d = {d}")
    u = vt[:d].copy()
    for row in u:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaBasis(u, mean, _bias_direction(mean, u))


def _bias_direction(mean: np.ndarray, u: np.ndarray) -> np.ndarray:
    resid = mean - u.T @ (u @ mean)
    norm = np.linalg.norm(resid)
    if norm < 1e-12:
        # no mean component outside the span: fall back to the uniform direction
        ones = np.ones_like(mean)
        resid = ones - u.T @ (u @ ones)
        norm = np.linalg.norm(resid)
        if norm < 1e-12:
            resid = np.eye(mean.size)[np.argmin(np.abs(u).sum(axis=0))]
            resid = resid - u.T @ (u @ resid)
            norm = np.linalg.norm(resid)
    return resid / norm


def magnetizations(pca: PcaBasis, v, convention=None) -> np.ndarray:
    """(n, d + 1) magnetizations; column 0 is the bias direction."""
    x = _as_plus_minus(v, convention)
    return x @ pca.extended().T / np.sqrt(pca.num_visible)


# --- entropy -----------------------------------------------------------------

def _log_cosh(x):
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)


def phi(u: np.ndarray, mu) -> np.ndarray:
    """Cumulant generating function for directions ``u`` (k, Nv)."""
    nv = u.shape[1]
    x = np.sqrt(nv) * np.atleast_2d(mu) @ u
    return _log_cosh(x).mean(axis=-1)


def phi_gradient(u: np.ndarray, mu) -> np.ndarray:
    nv = u.shape[1]
    return np.tanh(np.sqrt(nv) * np.atleast_2d(mu) @ u) @ u.T / np.sqrt(nv)


def phi_hessian(u: np.ndarray, mu) -> np.ndarray:
    nv = u.shape[1]
    sech2 = 1.0 - np.tanh(np.sqrt(nv) * np.atleast_2d(mu) @ u) ** 2
    return np.einsum("ni,ai,bi->nab", sech2, u, u)


def solve_mu_star(u: np.ndarray, m, tol: float = 1e-10, max_iter: int = 200,
                  mu0=None, raise_on_failure: bool = True):
    """Minimizer of ``phi(mu) - m.mu`` by damped Newton, batched over rows of m.

    Returns ``mu`` (n, k) and, when ``raise_on_failure`` is false, a boolean
    mask of converged rows. Targets outside (or on) the achievable set make
    the iteration diverge and are reported as failures.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    u = _directions_for(u, m.shape[1])
    n, k = m.shape
    mu = np.zeros((n, k)) if mu0 is None else np.array(mu0, dtype=np.float64).reshape(n, k)
    ok = np.zeros(n, dtype=bool)
    eye = np.eye(k)
    failed = np.zeros(n, dtype=bool)
    # on or beyond the per-direction bound: the minimizer is at infinity
    failed |= np.any(np.abs(m) >= achievable_bound(u) * (1.0 - 1e-12), axis=1)
    hess_basis = np.einsum("ai,bi->iab", u, u).reshape(u.shape[1], k * k)
    root = np.sqrt(u.shape[1])
    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        mu_c, m_c = mu[sl], m[sl]
        active = np.nonzero(~failed[sl])[0]
        for _ in range(max_iter):
            x = root * mu_c[active] @ u
            th = np.tanh(x)
            g = th @ u.T / root - m_c[active]
            done = np.max(np.abs(g), axis=1) <= tol
            # saturated fields: the target sits on or beyond the boundary
            lost = ~done & (np.max(np.abs(x), axis=1) > _SATURATION)
            ok[start + active[done]] = True
            failed[start + active[lost]] = True
            keep = ~(done | lost)
            active, g, x = active[keep], g[keep], x[keep]
            if active.size == 0:
                break
            hess = ((1.0 - th[keep] ** 2) @ hess_basis).reshape(-1, k, k) + 1e-14 * eye
            try:
                step = -np.linalg.solve(hess, g[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = -g
            cur = mu_c[active]
            obj = _log_cosh(x).mean(axis=1) - np.einsum("nk,nk->n", m_c[active], cur)
            slope = np.einsum("nk,nk->n", g, step)
            t = np.ones(active.size)
            todo = np.arange(active.size)
            for _ in range(40):
                trial = cur[todo] + t[todo, None] * step[todo]
                new = phi(u, trial) - np.einsum("nk,nk->n", m_c[active[todo]], trial)
                bad = new > obj[todo] + 1e-4 * t[todo] * slope[todo] + 1e-12 * (1.0 + np.abs(obj[todo]))
                if not bad.any():
                    break
                todo = todo[bad]
                t[todo] *= 0.5
            mu_c[active] = cur + t[:, None] * step
        mu[sl] = mu_c
    if raise_on_failure:
        if not ok.all():
            raise ConvergenceError(
                f"mu* did not converge for {np.sum(~ok)} targets (outside the achievable set?)"
            )
        return mu
    return mu, ok


def _directions_for(u, k: int) -> np.ndarray:
    """Accept a PcaBasis (d or d + 1 components) or an explicit direction matrix."""
    if isinstance(u, PcaBasis):
        if k == u.d + 1:
            return u.extended()
        if k == u.d:
            return u.directions
        raise ValueError(f"magnetization vector of length {k} for a d={u.d} basis")
    u = np.atleast_2d(u)
    if u.shape[0] != k:
        raise ValueError(f"{k} magnetization components for {u.shape[0]} directions")
    return u


def rate_function(u: np.ndarray, m, mu=None) -> np.ndarray:
    """I(m) = m.mu* - phi(mu*); NaN where mu* does not converge."""
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if mu is None:
        mu, ok = solve_mu_star(u, m, raise_on_failure=False)
    else:
        ok = np.ones(len(m), dtype=bool)
    out = np.einsum("nk,nk->n", m, mu) - phi(u, mu)
    return np.where(ok, out, np.nan)


def achievable_bound(u: np.ndarray) -> np.ndarray:
    """max |m_alpha| = sum_i |u_alpha,i| / sqrt(Nv) per direction."""
    return np.abs(u).sum(axis=1) / np.sqrt(u.shape[1])


# --- mesh ----------------------------------------------------------------------

@dataclass
class MagnetizationMesh:
    """Regular grid over m-space with normalized per-cell log-density.

    Excluded cells (unreachable magnetizations) carry log-density ``-inf``.
    """

    edges: list
    centers: np.ndarray        # (cells, k)
    log_entropy: np.ndarray    # -Nv I(m) per cell (-inf when excluded)
    mu_star: np.ndarray        # (cells, k)
    log_density: np.ndarray    # normalized
    directions: np.ndarray     # (k, Nv)

    @property
    def shape(self) -> tuple:
        return tuple(len(e) - 1 for e in self.edges)

    @property
    def k(self) -> int:
        return self.centers.shape[1]

    @property
    def cumulative(self) -> np.ndarray:
        cdf = np.cumsum(np.exp(self.log_density))
        return cdf / cdf[-1]

    @property
    def widths(self) -> np.ndarray:
        return np.array([e[1] - e[0] for e in self.edges])

    def with_energy(self, log_weight: np.ndarray) -> "MagnetizationMesh":
        """Same entropy grid with density proportional to exp(entropy + log_weight)."""
        logd = self.log_entropy + log_weight
        logd = logd - logsumexp(logd)
        return MagnetizationMesh(self.edges, self.centers, self.log_entropy,
                                 self.mu_star, logd, self.directions)

    def expectation(self, values: np.ndarray) -> np.ndarray:
        p = np.exp(self.log_density)
        return p @ values

    def marginal(self, axes) -> tuple[list, np.ndarray]:
        """Mass table over the requested axes (others summed)."""
        p = np.exp(self.log_density).reshape(self.shape)
        other = tuple(i for i in range(self.k) if i not in tuple(axes))
        return [self.edges[i] for i in axes], p.sum(axis=other)


def entropy_mesh(u: np.ndarray, lo, hi, bins, memory_cap: int = MESH_MEMORY_CAP,
                 inset: float = 1e-6) -> MagnetizationMesh:
    """Grid of cell centers with their entropies and cached mu*."""
    u = np.atleast_2d(u)
    k = u.shape[0]
    lo, hi = np.broadcast_to(np.asarray(lo, dtype=float), (k,)), np.broadcast_to(np.asarray(hi, dtype=float), (k,))
    bins = np.broadcast_to(np.asarray(bins, dtype=int), (k,))
    cells = int(np.prod(bins))
    need = cells * (3 * k + 3) * 8 + _CHUNK * u.shape[1] * 8 * 4
    if need > memory_cap:
        raise MemoryError(f"mesh needs about {need / 2**20:.0f} MiB, cap is {memory_cap / 2**20:.0f} MiB")
    edges = [np.linspace(lo[i], hi[i], bins[i] + 1) for i in range(k)]
    mids = [0.5 * (e[1:] + e[:-1]) for e in edges]
    centers = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1).reshape(-1, k)
    bound = achievable_bound(u) - inset
    inside = np.all(np.abs(centers) < bound, axis=1)
    mu = np.zeros_like(centers)
    ok = np.zeros(cells, dtype=bool)
    if inside.any():
        mu_in, ok_in = solve_mu_star(u, centers[inside], tol=1e-10, raise_on_failure=False)
        mu[inside] = mu_in
        ok[inside] = ok_in
    log_ent = np.full(cells, -np.inf)
    log_ent[ok] = -u.shape[1] * rate_function(u, centers[ok], mu[ok])
    logd = log_ent - logsumexp(log_ent)
    return MagnetizationMesh(edges, centers, log_ent, mu, logd, u)


def assign_cells(mesh: MagnetizationMesh, m: np.ndarray) -> np.ndarray:
    """Index (among supported cells) of the cell holding each point; points in
    excluded cells or outside the mesh go to the nearest supported center."""
    m = np.atleast_2d(m)
    support = np.isfinite(mesh.log_entropy)
    pos = np.full(len(mesh.centers), -1)
    pos[support] = np.arange(support.sum())
    idx = np.zeros(len(m), dtype=np.int64)
    for j, e in enumerate(mesh.edges):
        b = np.clip(np.searchsorted(e, m[:, j], side="right") - 1, 0, len(e) - 2)
        idx = idx * (len(e) - 1) + b
    out = pos[idx]
    bad = out < 0
    if bad.any():
        sc = mesh.centers[support]
        dist = ((m[bad, None, :] - sc[None]) ** 2).sum(axis=-1)
        out[bad] = np.argmin(dist, axis=1)
    return out


def default_bins(d: int) -> int:
    if d not in DEFAULT_BINS:
        raise ValueError("mesh supports 1 <= d <= 4")
    return DEFAULT_BINS[d]


def data_bounds(m: np.ndarray, u: np.ndarray, margin: float | None = None):
    """Bounding box of projected data plus a margin, clipped to the achievable set."""
    nv = u.shape[1]
    lo, hi = m.min(axis=0), m.max(axis=0)
    span = hi - lo
    pad = np.maximum(0.15 * span, 4.0 / np.sqrt(nv)) if margin is None else np.full_like(span, margin)
    bound = achievable_bound(u) * (1.0 - 1e-6)
    return np.maximum(lo - pad, -bound), np.minimum(hi + pad, bound)


# --- hyperplanes and the RCM -------------------------------------------------

def sphere_directions(d: int, count: int) -> np.ndarray:
    """Low-discrepancy unit normals on a half-sphere (n and -n are the same
    hyperplane family once offsets are mirrored)."""
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        ang = np.pi * np.arange(count) / count
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # unscrambled Halton points, skipping the origin, mapped through the normal quantile
    from scipy.stats import norm, qmc

    pts = qmc.Halton(d, scramble=False).random(count + 1)[1:]
    g = norm.ppf(pts)
    g[:, 0] = np.abs(g[:, 0])
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def hyperplane_family(m_data: np.ndarray, budget: int = 500, margin: float = 0.05):
    """Normals from a low-discrepancy set and offsets on a uniform grid that
    spans the projected data along each normal."""
    d = m_data.shape[1]
    n_dirs = 1 if d == 1 else max(2, int(round(budget ** ((d - 1) / d))))
    normals = sphere_directions(d, n_dirs)
    n_off = max(2, budget // len(normals))
    out_n, out_z = [], []
    for n in normals:
        proj = m_data @ n
        zs = np.linspace(-proj.max() - margin, -proj.min() + margin, n_off)
        out_n.append(np.repeat(n[None], n_off, axis=0))
        out_z.append(zs)
    return np.concatenate(out_n), np.concatenate(out_z)


@dataclass
class RcmModel:
    """Restricted Coulomb Machine on a PCA basis.

    ``theta`` has d + 1 entries; entry 0 couples to the bias direction.
    ``lo``/``hi`` bound the d-dimensional mesh, ``lo0``/``hi0`` the bias mesh.
    """

    normals: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray
    theta: np.ndarray
    pca: PcaBasis
    lo: np.ndarray
    hi: np.ndarray
    lo0: float
    hi0: float
    bins: int
    converged: bool = True
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def num_hyperplanes(self) -> int:
        return len(self.weights)

    def features(self, m: np.ndarray) -> np.ndarray:
        return np.abs(m @ self.normals.T + self.offsets)

    def log_weight(self, m: np.ndarray) -> np.ndarray:
        """Energy part of log p(m) for d-dim magnetizations."""
        return m @ self.theta[1:] + self.features(m) @ self.weights

    def mesh(self) -> MagnetizationMesh:
        base = entropy_mesh(self.pca.directions, self.lo, self.hi, self.bins)
        return base.with_energy(self.log_weight(base.centers))

    def bias_mesh(self) -> MagnetizationMesh:
        base = entropy_mesh(self.pca.bias_direction[None], self.lo0, self.hi0, BIAS_BINS)
        return base.with_energy(self.theta[0] * base.centers[:, 0])


def _fit_exponential_family(feat_data_mean, feat_mesh, log_base, nonneg, x0=None,
                            tol=1e-4, max_iter=500):
    """Maximize J(x) = x.E_data[T] - log sum_c exp(log_base_c + x.T_c).

    Each iteration solves the bound-constrained Newton subproblem
    ``max g.s - s.(C + lambda I).s / 2`` subject to ``x + s >= 0`` on the
    ``nonneg`` coordinates (C is the model covariance of T), followed by a
    backtracking line search along the feasible segment. Returns
    (x, converged, iterations, max projected gradient).
    """
    k = feat_mesh.shape[1]
    x = np.zeros(k) if x0 is None else np.array(x0, dtype=float)
    x[nonneg] = np.maximum(x[nonneg], 0.0)
    lower = np.full(k, -np.inf)

    def objective(xv):
        logits = log_base + feat_mesh @ xv
        lz = logsumexp(logits)
        return xv @ feat_data_mean - lz, np.exp(logits - lz)

    J, p = objective(x)
    damping = 1e-8
    pg_max = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        mean = p @ feat_mesh
        grad = feat_data_mean - mean
        pg = np.where(nonneg & (x <= 0.0) & (grad <= 0.0), 0.0, grad)
        pg_max = float(np.max(np.abs(pg)))
        if pg_max <= tol:
            return x, True, it - 1, pg_max
        centered = feat_mesh - mean
        cov = (centered * p[:, None]).T @ centered
        scale = max(np.trace(cov) / k, 1e-300)
        lower[nonneg] = -x[nonneg]
        accepted = False
        for _ in range(30):
            try:
                chol = np.linalg.cholesky(cov + damping * scale * np.eye(k))
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            rhs = solve_triangular(chol, grad, lower=True)
            step = lsq_linear(chol.T, rhs, bounds=(lower, np.inf), method="bvls").x
            t = 1.0
            for _ in range(20):
                trial = x + t * step
                trial[nonneg] = np.maximum(trial[nonneg], 0.0)
                Jt, pt = objective(trial)
                if Jt >= J + 1e-4 * t * (grad @ step):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                x, J, p = trial, Jt, pt
                damping = max(damping / 10.0, 1e-12) if t == 1.0 else damping
                break
            damping *= 10.0
        if not accepted:
            break
    return x, False, it, pg_max


def rcm_train(data, pca: PcaBasis, hyperplane_budget: int = 500, bins: int | None = None,
              max_hyperplanes: int | None = None, tol: float = 1e-4, max_iter: int = 500,
              convention=None) -> RcmModel:
    """Fit hyperplane weights ``q >= 0`` and projected biases ``theta``.

    Hyperplanes whose weight falls below ``PRUNE_RATIO * max(q)`` are
    dropped and the reduced family is refitted; at most ``max_hyperplanes``
    (the largest weights) are kept.
    """
    d = pca.d
    bins = bins or default_bins(d)
    mags = magnetizations(pca, data, convention)
    m0, m = mags[:, 0], mags[:, 1:]
    nv = pca.num_visible

    lo, hi = data_bounds(m, pca.directions)
    base = entropy_mesh(pca.directions, lo, hi, bins)
    support = np.isfinite(base.log_entropy)
    centers = base.centers[support]
    log_base = base.log_entropy[support]
    # the model lives on the mesh, so the data enter through their cells
    m_cell = centers[assign_cells(base, m)]

    normals, offsets = hyperplane_family(m, hyperplane_budget)
    q = None
    theta = np.zeros(d)
    converged, iters, pg = False, 0, np.inf
    for round_ in range(4):
        feats_mesh = np.hstack([np.abs(centers @ normals.T + offsets), centers])
        feats_data = np.hstack([np.abs(m_cell @ normals.T + offsets), m_cell]).mean(axis=0)
        nonneg = np.zeros(feats_mesh.shape[1], dtype=bool)
        nonneg[: len(offsets)] = True
        x0 = None if q is None else np.concatenate([q, theta])
        x, converged, it, pg = _fit_exponential_family(
            feats_data, feats_mesh, log_base, nonneg, x0=x0, tol=tol, max_iter=max_iter)
        iters += it
        q, theta = x[: len(offsets)], x[len(offsets):]
        log.info("rcm round %d: %d hyperplanes, %d iterations, max grad %.2e",
                 round_, len(q), it, pg)
        qmax = q.max() if q.size else 0.0
        keep = q > PRUNE_RATIO * qmax if qmax > 0 else np.zeros(len(q), dtype=bool)
        if max_hyperplanes is not None and keep.sum() > max_hyperplanes:
            order = np.argsort(-q)
            keep = np.zeros(len(q), dtype=bool)
            keep[order[:max_hyperplanes]] = True
        if keep.all():
            break
        normals, offsets, q = normals[keep], offsets[keep], q[keep]
    else:
        converged = False

    # bias direction: independent one-dimensional mesh
    lo0, hi0 = data_bounds(m0[:, None], pca.bias_direction[None])
    base0 = entropy_mesh(pca.bias_direction[None], lo0, hi0, BIAS_BINS)
    sup0 = np.isfinite(base0.log_entropy)
    x0_, conv0, _, _ = _fit_exponential_family(
        base0.centers[sup0][assign_cells(base0, m0[:, None])].mean(axis=0), base0.centers[sup0], base0.log_entropy[sup0],
        np.zeros(1, dtype=bool), tol=tol, max_iter=max_iter)
    return RcmModel(
        normals=normals, offsets=offsets, weights=q,
        theta=np.concatenate([x0_, theta]), pca=pca,
        lo=lo, hi=hi, lo0=float(lo0[0]), hi0=float(hi0[0]), bins=bins,
        converged=bool(converged and conv0), iterations=iters,
        info={"max_projected_gradient": pg, "num_visible": nv},
    )


def rcm_to_rbm(rcm: RcmModel, num_hidden: int | None = None, convention=Convention.PLUS_MINUS,
               noise: float = 0.0, rng=None) -> RbmModel:
    """Lift the RCM to a full RBM.

    Hidden unit ``a`` receives input ``q_a (n_a . m(v) + z_a)``; its
    log-cosh reproduces the RCM term ``q_a |n_a . m + z_a|`` up to a constant
    in the large-input regime. Surplus hidden units are zero (or small noise).
    """
    pca = rcm.pca
    nv = pca.num_visible
    k = rcm.num_hyperplanes
    nh = k if num_hidden is None else num_hidden
    if nh < k:
        raise ValueError(f"{k} surviving hyperplanes exceed num_hidden={nh}")
    w_proj = (rcm.weights[:, None] * rcm.normals) / np.sqrt(nv)   # (K, d)
    weights = np.zeros((nh, nv))
    hidden = np.zeros(nh)
    weights[:k] = w_proj @ pca.directions
    hidden[:k] = rcm.weights * rcm.offsets
    if noise > 0.0 and nh > k:
        weights[k:] = noise * np.random.default_rng(rng).standard_normal((nh - k, nv))
    visible = rcm.theta @ pca.extended() / np.sqrt(nv)
    model = RbmModel(weights, visible, hidden, Convention.PLUS_MINUS)
    return convert_model(model, convention)


def rbm_to_rcm(rbm: RbmModel, pca: PcaBasis, template: RcmModel | None = None) -> RcmModel:
    """Project a PlusMinus RBM onto the PCA basis (inverse of :func:`rcm_to_rbm`).

    Hidden units with zero projected weight are dropped.
    """
    rbm = convert_model(rbm, Convention.PLUS_MINUS)
    nv = pca.num_visible
    w_proj = rbm.weights @ pca.directions.T            # (Nh, d)
    norm = np.linalg.norm(w_proj, axis=1)
    live = norm > 0
    q = np.sqrt(nv) * norm[live]
    normals = w_proj[live] / norm[live, None]
    offsets = rbm.hidden_bias[live] / q
    theta = np.sqrt(nv) * pca.extended() @ rbm.visible_bias
    t = template
    return RcmModel(
        normals, offsets, q, theta, pca,
        lo=t.lo if t else -achievable_bound(pca.directions) * (1 - 1e-6),
        hi=t.hi if t else achievable_bound(pca.directions) * (1 - 1e-6),
        lo0=t.lo0 if t else -float(achievable_bound(pca.bias_direction[None])[0]) * (1 - 1e-6),
        hi0=t.hi0 if t else float(achievable_bound(pca.bias_direction[None])[0]) * (1 - 1e-6),
        bins=t.bins if t else default_bins(pca.d),
    )


def build_mesh(pca: PcaBasis, model, bins_per_dim: int | None = None, lo=None, hi=None,
               memory_cap: int = MESH_MEMORY_CAP) -> MagnetizationMesh:
    """Mesh density for an RCM, or for an RBM through its log-cosh energy
    evaluated on the projected magnetizations (transverse fluctuations ignored).

    ``model=None`` gives the entropy-only mesh.
    """
    u = pca.directions
    bins = bins_per_dim or default_bins(pca.d)
    if isinstance(model, RcmModel):
        lo = model.lo if lo is None else lo
        hi = model.hi if hi is None else hi
    if lo is None or hi is None:
        bound = achievable_bound(u) * (1 - 1e-6)
        lo, hi = -bound if lo is None else lo, bound if hi is None else hi
    base = entropy_mesh(u, lo, hi, bins, memory_cap=memory_cap)
    if model is None:
        return base
    if isinstance(model, RcmModel):
        return base.with_energy(model.log_weight(base.centers))
    return base.with_energy(rbm_log_weight(model, pca, base.centers))


def rbm_log_weight(rbm: RbmModel, pca: PcaBasis, m: np.ndarray) -> np.ndarray:
    """-H(m) of a PlusMinus RBM restricted to the span of the PCA directions."""
    rbm = convert_model(rbm, Convention.PLUS_MINUS)
    nv = pca.num_visible
    w_proj = rbm.weights @ pca.directions.T
    bias = np.sqrt(nv) * pca.directions @ rbm.visible_bias
    x = np.sqrt(nv) * m @ w_proj.T + rbm.hidden_bias
    return m @ bias + _log_cosh(x).sum(axis=1)


def mesh_log_partition(rcm: RcmModel, rbm: RbmModel) -> float:
    """Mean-field estimate of log Z for an RBM lifted from ``rcm``.

    Z = 2^Nv sum_cells p_prior(cell) exp(-H(m)) on the d-mesh times the
    independent bias-direction factor, with PlusMinus energies; the result
    is shifted to ``rbm``'s own convention.
    """
    pm = convert_model(rbm, Convention.PLUS_MINUS)
    nv = rcm.pca.num_visible
    base = entropy_mesh(rcm.pca.directions, rcm.lo, rcm.hi, rcm.bins)
    lp = base.log_entropy - logsumexp(base.log_entropy)
    w = rbm_log_weight(pm, rcm.pca, base.centers) + pm.num_hidden * np.log(2.0)
    bias0 = np.sqrt(nv) * rcm.pca.bias_direction @ pm.visible_bias
    base0 = entropy_mesh(rcm.pca.bias_direction[None], rcm.lo0, rcm.hi0, BIAS_BINS)
    lp0 = base0.log_entropy - logsumexp(base0.log_entropy)
    log_z = nv * np.log(2.0) + logsumexp(lp + w) + logsumexp(lp0 + bias0 * base0.centers[:, 0])
    if rbm.convention is Convention.ZERO_ONE:
        from .core import to_plus_minus

        log_z += to_plus_minus(rbm)[1]
    return float(log_z)


def static_sample(rcm: RcmModel, count: int, rng=None, mesh: MagnetizationMesh | None = None,
                  bias_mesh: MagnetizationMesh | None = None, convention=Convention.PLUS_MINUS,
                  return_targets: bool = False):
    """I.i.d. visible configurations from the RCM law.

    A cell is drawn by inverse transform on the cumulative mass table, the
    target magnetization is jittered uniformly inside it, ``mu*`` is solved
    (warm-started from the cell cache) and every spin is drawn independently
    with p(v_i = +1) = sigmoid(2 sqrt(Nv) sum_alpha u_alpha,i mu*_alpha).
    """
    rng = np.random.default_rng(rng)
    mesh = mesh or rcm.mesh()
    bias_mesh = bias_mesh or rcm.bias_mesh()
    u_ext = rcm.pca.extended()
    nv = rcm.pca.num_visible
    targets = np.empty((count, u_ext.shape[0]))
    mu = np.empty_like(targets)
    pending = np.arange(count)
    for _ in range(20):
        if pending.size == 0:
            break
        n = pending.size
        cell = np.searchsorted(mesh.cumulative, rng.random(n), side="right")
        cell = np.minimum(cell, len(mesh.centers) - 1)
        cell0 = np.minimum(np.searchsorted(bias_mesh.cumulative, rng.random(n), side="right"),
                           len(bias_mesh.centers) - 1)
        jit = (rng.random((n, mesh.k)) - 0.5) * mesh.widths
        jit0 = (rng.random(n) - 0.5) * bias_mesh.widths[0]
        t = np.hstack([(bias_mesh.centers[cell0, 0] + jit0)[:, None], mesh.centers[cell] + jit])
        warm = np.hstack([bias_mesh.mu_star[cell0], mesh.mu_star[cell]])
        sol, ok = solve_mu_star(u_ext, t, tol=1e-9, mu0=warm, raise_on_failure=False)
        targets[pending[ok]] = t[ok]
        mu[pending[ok]] = sol[ok]
        pending = pending[~ok]
    if pending.size:
        raise ConvergenceError(f"{pending.size} static samples fell outside the achievable set")
    v = np.empty((count, nv))
    for start in range(0, count, _CHUNK):
        sl = slice(start, min(start + _CHUNK, count))
        field_ = np.sqrt(nv) * mu[sl] @ u_ext
        p_up = 0.5 * (1.0 + np.tanh(field_))
        v[sl] = np.where(rng.random(p_up.shape) < p_up, 1.0, -1.0)
    v = convert_states(v, Convention.PLUS_MINUS, convention)
    return (v, targets) if return_targets else v


def rcm_sampler(rcm: RcmModel, rbm: RbmModel):
    """Callable ``(count, rng) -> ChainPopulation`` of static RCM samples,
    hidden units drawn from ``rbm``'s conditional."""
    from .core import ChainPopulation

    mesh, bias_mesh = rcm.mesh(), rcm.bias_mesh()

    def draw(count, rng):
        v = static_sample(rcm, count, rng, mesh=mesh, bias_mesh=bias_mesh,
                          convention=rbm.convention)
        return ChainPopulation.from_visible(rbm, v, rng)

    return draw


def tv_to_mesh(mesh: MagnetizationMesh, m_samples: np.ndarray, coarsen: int = 5) -> float:
    """Total-variation distance between a sample histogram and the mesh
    density, both binned on every ``coarsen``-th mesh edge."""
    edges = []
    for e in mesh.edges:
        c = e[::coarsen]
        if c[-1] != e[-1]:
            c = np.append(c, e[-1])
        edges.append(c)
    mass, _ = np.histogramdd(mesh.centers, bins=edges, weights=np.exp(mesh.log_density))
    hist, _ = np.histogramdd(m_samples, bins=edges)
    outside = len(m_samples) - hist.sum()
    hist = hist / len(m_samples)
    return float(0.5 * (np.abs(hist - mass).sum() + outside / len(m_samples)))


# --- RCM1 file format ----------------------------------------------------------

RCM_MAGIC = "RCM1"


def _fmt_list(a) -> str:
    return ",".join(repr(float(x)) for x in np.atleast_1d(a))


def dumps_rcm(rcm: RcmModel) -> bytes:
    pca = rcm.pca
    meta = (
        f"d={pca.d} Nv={pca.num_visible} K={rcm.num_hyperplanes} bins={rcm.bins} "
        f"bias_bins={BIAS_BINS} lo={_fmt_list(rcm.lo)} hi={_fmt_list(rcm.hi)} "
        f"lo0={rcm.lo0!r} hi0={rcm.hi0!r} converged={int(rcm.converged)}"
    )
    head = f"{RCM_MAGIC}\n{meta}\n".encode("ascii")
    blocks = (pca.directions, pca.bias_direction, pca.data_mean,
              rcm.normals, rcm.offsets, rcm.weights, rcm.theta)
    return head + b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)


def loads_rcm(payload: bytes) -> RcmModel:
    stream = io.BytesIO(payload)
    magic = stream.readline().rstrip(b"\n")
    if magic != RCM_MAGIC.encode():
        raise FormatError(f"bad magic {magic[:8]!r}, expected {RCM_MAGIC}")
    meta = _parse_meta(stream.readline().decode("ascii"))
    try:
        d, nv, k, bins = (int(meta[x]) for x in ("d", "Nv", "K", "bins"))
        lo = np.array([float(x) for x in meta["lo"].split(",")])
        hi = np.array([float(x) for x in meta["hi"].split(",")])
        lo0, hi0 = float(meta["lo0"]), float(meta["hi0"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad RCM1 metadata: {exc}") from None
    sizes = [d * nv, nv, nv, k * d, k, k, d + 1]
    raw = stream.read()
    need = 8 * sum(sizes)
    if len(raw) < need:
        raise FormatError(f"truncated RCM1 payload: {len(raw)} of {need} bytes")
    arr = np.frombuffer(raw[:need], dtype="<f8")
    parts = np.split(arr, np.cumsum(sizes)[:-1])
    pca = PcaBasis(parts[0].reshape(d, nv).copy(), parts[2].copy(), parts[1].copy())
    return RcmModel(parts[3].reshape(k, d).copy(), parts[4].copy(), parts[5].copy(),
                    parts[6].copy(), pca, lo, hi, lo0, hi0, bins,
                    converged=bool(int(meta.get("converged", 1))))


def save_rcm(path, rcm: RcmModel) -> None:
    Path(path).write_bytes(dumps_rcm(rcm))


def load_rcm(path) -> RcmModel:
    return loads_rcm(Path(path).read_bytes())
