import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajrbm import eval as E
from trajrbm.core import Convention, RbmModel, exact_moments, exact_sample


# --- separator and jumps ----------------------------------------------------------

def test_separator_validation():
    with pytest.raises(ValueError, match="unit"):
        E.Separator(np.eye(2, 4), np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        E.Separator(np.eye(3, 4), np.array([1.0, 0.0]))


def test_alternating_sides():
    T = 11
    signed = np.array([(-1.0) ** t for t in range(T)])[:, None]
    assert E.mode_jumps(signed).per_chain.tolist() == [T - 1]


def test_constant_side():
    assert E.mode_jumps(np.full((20, 3), 0.4)).per_chain.tolist() == [0, 0, 0]


def test_points_on_line_keep_previous_side():
    signed = np.array([1.0, 0.0, 0.0, 1.0, 0.0, -2.0, 0.0, 3.0])
    assert E.count_sign_changes(signed).tolist() == [2]


def test_empty_history_raises():
    with pytest.raises(ValueError):
        E.mode_jumps(np.zeros((0, 4)))


def test_two_state_markov_chain_jumps():
    p, T, n = 0.1, 500, 400
    g = np.random.default_rng(0)
    flips = g.random((T - 1, n)) < p
    side = np.vstack([np.ones((1, n)), np.where(np.cumsum(flips, axis=0) % 2 == 0, 1.0, -1.0)])
    res = E.mode_jumps(side)
    sigma = math.sqrt(p * (1 - p) * (T - 1) / n)
    assert abs(res.mean - p * (T - 1)) < 4 * sigma
    assert res.stderr > 0 and res.steps == T


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_jumps_invariant_under_flip(seed):
    g = np.random.default_rng(seed)
    plane = np.linalg.qr(g.standard_normal((12, 2)))[0].T
    ang = g.uniform(0, 2 * np.pi)
    sep = E.Separator(plane, np.array([math.cos(ang), math.sin(ang)]), g.normal() * 0.1)
    hist = g.standard_normal((30, 5, 2)) * 0.3
    a = E.mode_jumps(hist, sep).per_chain
    b = E.mode_jumps(hist, sep.flipped()).per_chain
    np.testing.assert_array_equal(a, b)


def test_separator_projection_shapes(rng):
    plane = np.linalg.qr(rng.standard_normal((9, 2)))[0].T
    sep = E.Separator(plane, np.array([0.0, 1.0]))
    v = rng.choice([-1.0, 1.0], (4, 6, 9))
    out = sep.project(v, Convention.PLUS_MINUS)
    assert out.shape == (4, 6, 2)
    np.testing.assert_allclose(out[2, 3], plane @ v[2, 3] / 3.0)


def test_default_separator_splits_two_modes(rng):
    nv = 30
    u = np.where(np.arange(nv) < 15, 1.0, -1.0)
    a = np.where(rng.random((200, nv)) < 0.9, u, -u)
    b = np.where(rng.random((200, nv)) < 0.9, -u, u)
    sep = E.default_separator(np.vstack([a, b]))
    side_a, side_b = sep.side(a), sep.side(b)
    assert abs(side_a.mean()) > 0.95 and abs(side_b.mean()) > 0.95
    assert np.sign(side_a.mean()) != np.sign(side_b.mean())


def test_default_separator_rank_one():
    x = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]] * 10)
    sep = E.default_separator(x)
    np.testing.assert_allclose(sep.plane @ sep.plane.T, np.eye(2), atol=1e-12)


# --- AATS ------------------------------------------------------------------------------

def _distinct_rows(n, nv, g):
    rows = set()
    while len(rows) < n:
        rows.add(tuple(g.integers(0, 2, nv)))
    return np.array(sorted(rows), dtype=float)


def test_aats_exact_copy_is_zero():
    real = _distinct_rows(10, 12, np.random.default_rng(0))
    res = E.aats(real, real.copy())
    assert (res.aa_truth, res.aa_synth, res.aa_ts) == (0.0, 0.0, 0.0)


def test_aats_far_sets_is_one():
    g = np.random.default_rng(1)
    real = (g.random((50, 40)) < 0.05).astype(float)
    synth = (g.random((50, 40)) > 0.05).astype(float)
    assert E.aats(real, synth).aa_ts == 1.0


def test_aats_same_law_near_half():
    vals = []
    for seed in range(10):
        g = np.random.default_rng(seed)
        p = np.linspace(0.2, 0.8, 30)
        vals.append(E.aats((g.random((1000, 30)) < p).astype(float),
                           (g.random((1000, 30)) < p).astype(float)).aa_ts)
    assert 0.45 <= np.mean(vals) <= 0.55


def test_aats_symmetry_and_range(rng):
    a = (rng.random((80, 20)) < 0.3).astype(float)
    b = (rng.random((80, 20)) < 0.5).astype(float)
    ab, ba = E.aats(a, b), E.aats(b, a)
    assert ab.aa_truth == ba.aa_synth and ab.aa_synth == ba.aa_truth
    for x in ab:
        assert 0.0 <= x <= 1.0


def test_aats_tie_rule():
    # every nearest-neighbor distance is 2/3, within and across sets
    real = np.array([[0, 0, 0], [0, 1, 1.0]])
    synth = np.array([[1, 1, 0], [1, 0, 1.0]])
    res = E.aats(real, synth)
    assert (res.aa_truth, res.aa_synth) == (0.5, 0.5)
    # a synthetic point right next to each real one: strict, no ties
    near = np.array([[0, 0, 0, 1], [1, 1, 1, 0.0]])
    assert E.aats(np.array([[0, 0, 0, 0], [1, 1, 1, 1.0]]), near).aa_truth == 0.0


def test_aats_size_mismatch():
    with pytest.raises(ValueError):
        E.aats(np.zeros((5, 3)), np.zeros((6, 3)))


def test_aats_chunked_nearest_matches_dense(rng):
    a = (rng.random((2500, 10)) < 0.5).astype(float)
    b = (rng.random((2500, 10)) < 0.5).astype(float)
    from scipy.spatial.distance import cdist
    d = cdist(a, a, "hamming")
    np.fill_diagonal(d, np.inf)
    np.testing.assert_array_equal(E._nearest(a, a, "hamming", True), d.min(axis=1))
    np.testing.assert_array_equal(E._nearest(a, b, "hamming", False), cdist(a, b, "hamming").min(axis=1))


def test_privacy_loss_copy_of_train_positive():
    g = np.random.default_rng(3)
    p = np.linspace(0.2, 0.8, 25)
    train = (g.random((300, 25)) < p).astype(float)
    test = (g.random((300, 25)) < p).astype(float)
    assert E.aats(train, train.copy()).aa_ts == 0.0
    assert E.privacy_loss(train, test, train.copy()) > 0.3
    assert E.privacy_loss(train, test, test.copy()) < -0.3


def test_privacy_loss_independent_synth_near_zero():
    g = np.random.default_rng(4)
    p = np.linspace(0.2, 0.8, 25)
    draw = lambda: (g.random((600, 25)) < p).astype(float)  # noqa: E731
    assert abs(E.privacy_loss(draw(), draw(), draw())) <= 0.05


# --- moments ---------------------------------------------------------------------------------

def test_moments_identical_sets_zero(rng):
    x = (rng.random((300, 12)) < 0.4).astype(float)
    rep = E.moment_report(x, x.copy())
    assert rep.max_mean_error == 0.0 and rep.covariance_error == 0.0 and rep.projected_tv == 0.0


def test_moments_flipped_column(rng):
    x = (rng.random((300, 12)) < 0.3).astype(float)
    y = x.copy()
    y[:, 4] = 1 - y[:, 4]
    rep = E.moment_report(x, y)
    freq = x[:, 4].mean()
    assert rep.site_mean_error[4] == pytest.approx(abs(1 - 2 * freq))
    assert np.all(np.delete(rep.site_mean_error, 4) == 0)


def test_moments_factorized_model_within_noise():
    g = np.random.default_rng(5)
    model = RbmModel(np.zeros((3, 15)), g.standard_normal(15), np.zeros(3))
    mean = exact_moments(model)["v"]
    y = exact_sample(model, 4000, g).v
    # data: an i.i.d. draw of the same law
    x = exact_sample(model, 4000, g).v
    # coarse grid: the two-sample TV floor is about sqrt(cells / n)
    rep = E.moment_report(x, y, bins=8)
    sigma = np.sqrt(2 * mean * (1 - mean) / 4000)
    assert np.all(rep.site_mean_error < 4 * sigma + 1e-12)
    assert rep.projected_tv < 0.08


def test_moments_report_formats(rng):
    x = (rng.random((50, 6)) < 0.5).astype(float)
    rep = E.moment_report(x, (rng.random((50, 6)) < 0.5).astype(float))
    assert rep.to_text().count("\n") == 4
    kv = dict(line.split("=") for line in rep.to_keyvalue().splitlines())
    assert set(kv) == {"mean_site_error", "max_site_error", "covariance_spectral_error", "projected_tv"}


def test_moments_dimension_mismatch():
    with pytest.raises(ValueError):
        E.moment_report(np.zeros((4, 3)), np.zeros((4, 5)))
