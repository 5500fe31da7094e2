"""Exit criteria, each reporting one pass/fail line at its tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are also
collected in the terminal summary.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import brute_visible_law, loop_energy, record_criterion, states
from trajrbm import cli, core, data as D, eval as E, likelihood as LK, lowrank as R, sample as S, theory, train as T
from trajrbm.core import ChainPopulation, RbmModel

pytestmark = [pytest.mark.acceptance]


def _report(ok, number, detail):
    record_criterion(number, ok, detail)
    assert ok, detail


# --- shared trained machines -----------------------------------------------------------

def _pretrained(spec, nv, gain, seed=0):
    ds = D.split(D.gen_clustered(spec, 2000, nv, seed=seed, gain=gain, convention="PlusMinus"), 0.6, seed=0)
    pca = R.fit_pca(ds.train, 1)
    rcm = R.rcm_train(ds.train, pca, hyperplane_budget=100, max_hyperplanes=10)
    return ds, R.rcm_to_rbm(rcm, 10)


def _config(updates):
    return T.TrainConfig.desk_scale(total_updates=updates, chain_count=500, gibbs_steps=20,
                                    trais_chains=500, eval_interval=50)


@pytest.fixture(scope="module")
def small_machine():
    """Nv = 16, Nh = 10 RBM pretrained and trained for 1e4 updates on two clusters.

    Returns the dataset, the checkpoint ladder, the online log Z errors after
    update 500 and the wall time of pretraining plus training.
    """
    t0 = time.perf_counter()
    spec = [D.Cluster((-0.5,), 0.5, 0.15), D.Cluster((0.6,), 0.5, 0.1)]
    ds, init = _pretrained(spec, 16, 1.2)
    errors = []

    def check(t, model, pop, log_z):
        if t >= 500:
            errors.append(abs(log_z - core.exact_log_partition(model)))

    lad = T.pcd_train(init, ds, _config(10_000), callback=check)
    return ds, lad, errors, time.perf_counter() - t0


@pytest.fixture(scope="module")
def bimodal_machine():
    """Nv = 64, Nh = 10 RBM on two clusters of unequal width."""
    spec = [D.Cluster((0.8,), 0.5, 0.05), D.Cluster((-0.8,), 0.5, 0.3)]
    ds, init = _pretrained(spec, 64, 2.0)
    return ds, T.pcd_train(init, ds, _config(3000))


# --- 1 ----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c01_online_trais_tracks_exact_ll(small_machine):
    _, _, errors, elapsed = small_machine
    worst = max(errors)
    ok = worst <= 0.5 and elapsed <= 300.0
    _report(ok, 1, f"max |online LL error| = {worst:.3f} nat over {len(errors)} points "
                   f"(<= 0.5), runtime {elapsed:.0f} s (<= 300)")


# --- 2 ----------------------------------------------------------------------------------------

def _estimator_errors(lad, seeds=10):
    """Mean |log Z error| of flat AIS (N_beta = 100, one AGS step each) and of
    trajectory AIS over the saved checkpoints at the same steps per walker."""
    path = lad.models
    target = path[-1]
    exact = core.exact_log_partition(target)
    flat = LK.AisSchedule.flat(100, 1, 1000)
    traj = LK.AisSchedule.trajectory(path, max(1, flat.budget // (len(path) - 1)), 1000)
    assert traj.budget <= flat.budget
    f = np.mean([abs(LK.ais_estimate(target, flat, s).log_z - exact) for s in range(seeds)])
    t = np.mean([abs(LK.ais_estimate(None, traj, s).log_z - exact) for s in range(seeds)])
    return float(f), float(t), len(path)


@pytest.mark.slow
def test_c02_trajectory_ais_beats_flat_ais(small_machine, bimodal_machine):
    f, t, n = _estimator_errors(small_machine[1])
    f64, t64, n64 = _estimator_errors(bimodal_machine[1])
    _report(t < f, 2, f"mean |LL error| on the criterion-1 machine: Tr-AIS {t:.3f} vs flat AIS {f:.3f} nat "
                      f"({n} checkpoints), need Tr-AIS < flat; Nv=64 bimodal machine: "
                      f"Tr-AIS {t64:.3f} vs flat {f64:.3f} ({n64} checkpoints)")


# --- 3 ----------------------------------------------------------------------------------------

def test_c03_gradient_matches_finite_differences():
    g = np.random.default_rng(2024)
    model = RbmModel.random(8, 4, g, scale=0.5)
    data = (g.random((40, 8)) < 0.5).astype(float)
    grad = T.exact_gradient(model, data)
    eps = 1e-5
    worst = 0.0
    for name, analytic in zip(("weights", "visible_bias", "hidden_bias"), grad):
        base = getattr(model, name)
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += eps
            dn[idx] -= eps
            fd[idx] = (core.exact_log_likelihood(model.with_params(**{name: up}), data)
                       - core.exact_log_likelihood(model.with_params(**{name: dn}), data)) / (2 * eps)
        worst = max(worst, np.linalg.norm(analytic - fd) / np.linalg.norm(fd))
    _report(worst <= 1e-6, 3, f"relative gradient error {worst:.2e} (<= 1e-6)")


# --- 4 ----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c04_ptt_mode_jumps(bimodal_machine):
    ds, lad = bimodal_machine
    target = lad.final
    sep = E.default_separator(ds.train)
    obs = lambda v: sep.signed_distance(sep.project(v))  # noqa: E731
    chains, budget = 1000, 10_000

    g = np.random.default_rng(0)
    pop, hist = core.exact_sample(target, chains, g), []
    for _ in range(budget):
        pop = core.ags_step(target, pop, 1, g)
        hist.append(obs(pop.v))
    ags = E.mode_jumps(np.array(hist)).mean

    ladder = lad.models
    run = S.ptt_run(ladder, chains, budget // len(ladder), 1, rng=1,
                    head_sampler=T.initial_sampler(ladder[0]), observer=obs)
    ptt = E.mode_jumps(np.array(run.observations)).mean

    pt = {}
    for nt in (5, 10, 20):
        out = S.pt_run(target, S.default_betas(nt), chains, budget // nt, 1, rng=2, observer=obs)
        pt[nt] = E.mode_jumps(np.array(out.observations)).mean
    best = max(pt.values())
    ok = ptt >= 10 * ags and ptt >= best
    pts = ", ".join(f"PT{n} {x:.1f}" for n, x in pt.items())
    _report(ok, 4, f"jumps per {budget} AGS steps: PTT {ptt:.1f} (ladder {len(ladder)}), "
                      f"AGS {ags:.1f}, {pts}; need >= 10x AGS and >= best PT")


# --- 5 ----------------------------------------------------------------------------------------

def _joint_states(model):
    return [(v, h) for v in states(model.num_visible, model.convention)
            for h in states(model.num_hidden, model.convention)]


def _law_vector(model):
    law = brute_visible_law(model)
    return np.array([law[tuple(s)] for s in states(model.num_visible, model.convention)])


def test_c05_swap_kernel_exact():
    g = np.random.default_rng(3)
    lower, upper = RbmModel.random(1, 1, g, scale=1.5), RbmModel.random(1, 1, g, scale=1.5)
    js = _joint_states(lower)
    pa = np.array([math.exp(-loop_energy(lower, v, h)) for v, h in js])
    pb = np.array([math.exp(-loop_energy(upper, v, h)) for v, h in js])
    p = np.kron(pa / pa.sum(), pb / pb.sum())
    n = len(js)
    K = np.zeros((n * n, n * n))
    for i, (xi, xj) in enumerate(itertools.product(range(n), repeat=2)):
        lo = ChainPopulation(js[xi][0][None], js[xi][1][None])
        up = ChainPopulation(js[xj][0][None], js[xj][1][None])
        acc = float(S.swap_probability(upper, lower, up, lo)[0])
        K[i, xj * n + xi] += acc
        K[i, i] += 1.0 - acc
    residual = np.abs(p @ K - p).max()

    g = np.random.default_rng(21)
    a, b = RbmModel.random(3, 2, g, scale=0.7), RbmModel.random(3, 2, g, scale=0.7)
    law = np.kron(_law_vector(a), _law_vector(b))
    run = S.ptt_run([a, b], 20_000, 40, rng=g,
                    init=[ChainPopulation.random(a, 20_000, g), ChainPopulation.random(b, 20_000, g)])
    code = 2 ** np.arange(3)[::-1]
    cells = (run.populations[0].v @ code).astype(int) * 8 + (run.populations[1].v @ code).astype(int)
    counts = np.bincount(cells, minlength=64)
    pvalue = chisquare(counts, law * counts.sum()).pvalue
    ok = residual <= 1e-10 and pvalue > 0.01
    _report(ok, 5, f"swap stationarity residual {residual:.1e} (<= 1e-10), PTT joint-law chi-square p = {pvalue:.3f} (> 0.01)")


# --- 6 ----------------------------------------------------------------------------------------

@pytest.mark.slow
def test_c06_rcm_fidelity():
    ds = D.gen_clustered(D.mickey_spec(), 5000, 1000, seed=1)
    pca = R.fit_pca(ds, 2)
    rcm = R.rcm_train(ds, pca, hyperplane_budget=200)
    mesh = rcm.mesh()
    m_data = R.magnetizations(pca, ds.data)[:, 1:]
    moment = np.abs(mesh.expectation(mesh.centers) - m_data.mean(axis=0)).max()
    v = R.static_sample(rcm, 100_000, 0, mesh=mesh)
    tv = R.tv_to_mesh(mesh, R.magnetizations(pca, v)[:, 1:], coarsen=10)
    ok = rcm.converged and moment <= 1e-3 and tv <= 0.05
    _report(ok, 6, f"moment residual {moment:.1e} (<= 1e-3), static-sample TV {tv:.3f} (<= 0.05) at 1e5 samples")


# --- 7 ----------------------------------------------------------------------------------------

def test_c07_first_order_transition():
    c = theory.toy_rbm_free_energy(1.4, 1.0)
    gap = abs(c.minima_values[0] - c.minima_values[1]) if c.minima.size == 2 else math.inf
    betas = np.linspace(0.8, 1.05, 251)
    gaps = np.array([theory.toy_branch_gap(1.4, b) for b in betas])
    changes = int(np.sum(np.diff(np.sign(gaps)) != 0))
    ok = gap <= 1e-3 and changes == 1
    _report(ok, 7, f"|df| at beta = 1 is {gap:.1e} (<= 1e-3), {changes} sign change(s) of the branch gap on [0.8, 1.05]")


# --- 8 ----------------------------------------------------------------------------------------

def _tanh_fixed_point(beta):
    m = 1.0
    for _ in range(10_000):
        m = math.tanh(beta * m)
    return m


def test_c08_curie_weiss_continuity():
    counts_ok = all(theory.cw_rate_function(b).minima.size == 1 for b in (0.5, 0.9, 0.99, 1.0))
    counts_ok &= all(theory.cw_rate_function(b).minima.size == 2 for b in (1.01, 1.1, 1.4, 2.0))
    near = [theory.cw_rate_function(b).minima.max() for b in (1.001, 1.01, 1.05)]
    continuous = near[0] < near[1] < near[2] < 0.4
    m_star = theory.cw_rate_function(1.4).minima.max()
    fp = _tanh_fixed_point(1.4)
    ok = counts_ok and continuous and abs(m_star - fp) <= 1e-4
    _report(ok, 8, f"m* at beta = 1.4 is {m_star:.5f}, fixed point {fp:.5f} (<= 1e-4); "
                      f"one minimum for beta <= 1, two above; |m*| -> 0 as beta -> 1+")


# --- 9 ----------------------------------------------------------------------------------------

def test_c09_autocorrelation():
    ar = S.index_autocorrelation(S.ar1_index_walk(10, 20_000, 64, 0.8, rng=0), ladder_size=10)
    iid = S.index_autocorrelation(np.random.default_rng(1).integers(0, 10, (5000, 64)), ladder_size=10)
    ok = abs(ar.tau_int - 4.5) <= 0.45 and abs(iid.tau_int - 0.5) < 0.02
    _report(ok, 9, f"AR(1) rho = 0.8 tau_int {ar.tau_int:.3f} (4.5 +- 10%), i.i.d. tau_int {iid.tau_int:.3f} (0.5)")


# --- 10 ---------------------------------------------------------------------------------------

def test_c10_ess_and_resampling():
    R_ = 400
    equal = T.ess(np.full(R_, -3.2))
    lw = np.full(R_, -50.0)
    lw[0] = 0.0
    dominant = T.ess(lw)
    g = np.random.default_rng(0)
    pop = ChainPopulation(g.integers(0, 2, (R_, 6)).astype(float), np.zeros((R_, 2)), g.standard_normal(R_))
    out, _ = T.resample(pop, g)
    ok = abs(equal - 1) < 1e-12 and abs(dominant - 1 / R_) <= 1e-6 and out.size == R_ and np.all(out.log_weight == 0)
    _report(ok, 10, f"ESS equal weights {equal:.6f}, dominant weight {dominant:.6f} (1/R = {1 / R_}), "
                       f"resampled size {out.size} with zero weights")


# --- 11 ---------------------------------------------------------------------------------------

def test_c11_aats():
    g = np.random.default_rng(0)
    rows = set()
    while len(rows) < 200:
        rows.add(tuple(g.integers(0, 2, 30)))
    real = np.array(sorted(rows), dtype=float)
    copy = E.aats(real, real.copy()).aa_ts
    far = E.aats((g.random((200, 40)) < 0.05).astype(float), (g.random((200, 40)) > 0.05).astype(float)).aa_ts
    p = np.linspace(0.2, 0.8, 30)
    same = np.mean([E.aats((np.random.default_rng(s).random((1000, 30)) < p).astype(float),
                            (np.random.default_rng(100 + s).random((1000, 30)) < p).astype(float)).aa_ts
                    for s in range(10)])
    train_, test_ = (g.random((1000, 30)) < p).astype(float), (g.random((1000, 30)) < p).astype(float)
    loss = E.privacy_loss(train_, test_, train_.copy())
    ok = copy == 0.0 and far == 1.0 and 0.45 <= same <= 0.55 and loss > 0
    _report(ok, 11, f"AA_TS copy {copy}, far {far}, same law {same:.3f} in [0.45, 0.55], "
                       f"copy-train privacy loss {loss:.3f} > 0")


# --- 12 ---------------------------------------------------------------------------------------

def _pipeline(root, monkeypatch):
    root.mkdir()
    monkeypatch.chdir(root)
    steps = [
        ("gen", "clusters", "--nv", 12, "--count", 400, "--convention", "PlusMinus", "--out", "x.txt"),
        ("pretrain", "--data", "x.txt", "--hidden", 10, "--budget", 30, "--out", "pre"),
        ("train", "--data", "x.txt", "--pretrained", "pre", "--desk-scale", "--updates", 150,
         "--chains", 80, "--eval-interval", 50, "--out", "run"),
        ("ll", "--traj", "run", "--method", "trais", "--data", "x.txt", "--out", "ll"),
        ("ll", "--traj", "run", "--method", "ais", "--n-beta", 20, "--walkers", 200, "--out", "ais"),
        ("sample", "--traj", "run", "--chains", 40, "--sweeps", 20, "--diagnostics", "--out", "smp"),
        ("eval", "jumps", "--traj", "run", "--data", "x.txt", "--budget", 100, "--chains", 40, "--out", "jm"),
        ("eval", "moments", "--data", "x.txt", "--samples", "smp/samples.txt", "--out", "mo"),
        ("theory", "toyrbm", "--out", "th"),
    ]
    for argv in steps:
        argv = [str(a) for a in argv] + ["--seed", "11", "--deterministic"]
        assert cli.run(argv) == 0, argv
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c12_determinism(tmp_path, monkeypatch):
    trees = []
    for name in ("first", "second"):
        trees.append(_pipeline(tmp_path / name, monkeypatch))
    differing = [k for k in trees[0] if trees[1].get(k) != trees[0][k]]
    ok = trees[0].keys() == trees[1].keys() and not differing
    _report(ok, 12, f"{len(trees[0])} output files across 9 commands, {len(differing)} differ between reruns")
