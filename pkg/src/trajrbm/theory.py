"""Mean-field free energies of two solvable toy models.

* Curie-Weiss large-deviation function
  ``Omega(m) = beta m^2 / 2 - log(2 cosh(beta m)) + H m``.
* A Bernoulli-Gauss RBM with one Gaussian hidden unit (variance 1/N) fitted
  to Curie-Weiss data at inverse temperature ``beta_T``, annealed by ``beta``.
  Integrating the {0, 1} visible units out gives, per site,

      f(tau) = tau^2 / 2 - (1/N) sum_i log(1 + exp(beta (w_i tau + eta_i)))

  whose stationary points satisfy
  ``tau = (1/N) sum_i beta w_i sigmoid(beta (w_i tau + eta_i))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import expit

DEFAULT_GRID = np.linspace(-0.999, 0.999, 2001)
DEFAULT_TOY_GRID = np.linspace(-0.5, 3.0, 2001)


@dataclass
class FreeEnergyCurve:
    grid: np.ndarray
    values: np.ndarray
    minima: np.ndarray
    minima_values: np.ndarray
    params: dict = field(default_factory=dict)
    flagged: np.ndarray | None = None

    def table(self) -> str:
        lines = ["m value"]
        lines += [f"{m:.6f} {f:.10f}" for m, f in zip(self.grid, self.values)]
        return "\n".join(lines) + "\n"


def local_minima(grid: np.ndarray, values: np.ndarray, fun, derivative=None):
    """Strict interior minima of the tabulated curve, refined by golden section
    within each bracketing triple.

    Golden section is limited to ~sqrt(eps) in position; when ``derivative``
    is given the result is polished to the root of the derivative inside the
    same bracket.
    """
    inner = np.nonzero((values[1:-1] < values[:-2]) & (values[1:-1] < values[2:]))[0] + 1
    pos = []
    for i in inner:
        a, b = grid[i - 1], grid[i + 1]
        m = minimize_scalar(fun, bracket=(a, grid[i], b), method="golden", tol=1e-12).x
        if derivative is not None and derivative(a) < 0.0 < derivative(b):
            m = brentq(derivative, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        pos.append(m)
    pos = np.array(pos)
    return pos, np.array([fun(m) for m in pos])


def cw_omega(m, beta: float, H: float = 0.0):
    m = np.asarray(m, dtype=np.float64)
    bm = beta * m
    log2cosh = np.abs(bm) + np.log1p(np.exp(-2.0 * np.abs(bm)))
    return beta * m**2 / 2.0 - log2cosh + H * m


def cw_rate_function(beta: float, H: float = 0.0, m_grid=None) -> FreeEnergyCurve:
    grid = DEFAULT_GRID if m_grid is None else np.asarray(m_grid, dtype=np.float64)
    values = cw_omega(grid, beta, H)
    minima, mvals = local_minima(grid, values, lambda m: float(cw_omega(m, beta, H)),
                                 lambda m: float(cw_stationary_residual(m, beta, H)))
    return FreeEnergyCurve(grid, values, minima, mvals, {"beta": beta, "H": H})


def cw_stationary_residual(m, beta: float, H: float = 0.0):
    """Omega'(m) / beta = m - tanh(beta m) + H / beta."""
    return m - np.tanh(beta * m) + H / beta


def cw_fixed_point(beta: float) -> float:
    """Positive solution of m = tanh(beta m) (zero for beta <= 1)."""
    if beta <= 1.0:
        return 0.0
    return brentq(lambda m: m - np.tanh(beta * m), 1e-12, 1.0, xtol=1e-15)


def cw_spinodal_field(beta: float) -> float:
    """Largest |H| at which Omega still has two minima (beta > 1).

    At the spinodal Omega'' = 0, i.e. tanh(beta m) = sqrt((beta - 1)/beta),
    and Omega' = 0 fixes ``H = beta tanh(beta m) - beta m``.
    """
    if beta <= 1.0:
        return 0.0
    t = np.sqrt((beta - 1.0) / beta)
    return float(beta * t - np.arctanh(t))


def toy_rbm_parameters(beta_T: float) -> tuple[float, float]:
    """(w, eta) of the Bernoulli-Gauss RBM reproducing CW data at beta_T."""
    return 2.0 * np.sqrt(beta_T), -2.0 * beta_T


def toy_free_energy(tau, beta_T: float, beta: float):
    w, eta = toy_rbm_parameters(beta_T)
    tau = np.asarray(tau, dtype=np.float64)
    return tau**2 / 2.0 - np.logaddexp(0.0, beta * (w * tau + eta))


def toy_self_consistency_residual(tau, beta_T: float, beta: float):
    w, eta = toy_rbm_parameters(beta_T)
    return tau - beta * w * expit(beta * (w * tau + eta))


def toy_rbm_free_energy(beta_T: float, beta: float, m_grid=None,
                        tol: float = 1e-8) -> FreeEnergyCurve:
    """Tabulate f(tau) and locate its minima (the mode magnetizations).

    Each refined minimum is checked against the self-consistency equation;
    minima whose residual exceeds ``tol`` are reported in ``flagged``.
    """
    if beta_T <= 1.0:
        raise ValueError("beta_T must exceed 1 for bimodal training data")
    grid = DEFAULT_TOY_GRID if m_grid is None else np.asarray(m_grid, dtype=np.float64)
    values = toy_free_energy(grid, beta_T, beta)
    fun = lambda t: float(toy_free_energy(t, beta_T, beta))  # noqa: E731
    minima, mvals = local_minima(
        grid, values, fun, lambda t: float(toy_self_consistency_residual(t, beta_T, beta)))
    resid = np.abs(toy_self_consistency_residual(minima, beta_T, beta))
    return FreeEnergyCurve(grid, values, minima, mvals,
                           {"beta_T": beta_T, "beta": beta}, flagged=minima[resid > tol])


def toy_branch_gap(beta_T: float, beta: float) -> float:
    """f(high branch) - f(low branch).

    The branches are split at tau = sqrt(beta_T), the symmetry point of the
    beta = 1 curve. A missing branch counts as infinitely high, so the gap
    is +inf when only the low branch exists and -inf in the opposite case.
    """
    curve = toy_rbm_free_energy(beta_T, beta)
    split_at = np.sqrt(beta_T)
    low = curve.minima_values[curve.minima < split_at]
    high = curve.minima_values[curve.minima >= split_at]
    f_low = low.min() if low.size else np.inf
    f_high = high.min() if high.size else np.inf
    if np.isinf(f_low) and np.isinf(f_high):
        return float("nan")
    return float(f_high - f_low)


def toy_coexistence_beta(beta_T: float, lo: float = 0.8, hi: float = 1.05,
                         tol: float = 1e-12) -> float:
    """Annealing inverse temperature at which both branches are degenerate,
    by bisection on the sign of the branch gap."""
    glo = toy_branch_gap(beta_T, lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g = toy_branch_gap(beta_T, mid)
        if np.sign(g) == np.sign(glo):
            lo, glo = mid, g
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)
