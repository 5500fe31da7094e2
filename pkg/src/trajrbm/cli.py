"""Command-line entry point.

Every subcommand writes its outputs through a staging area that is moved
into place only on success, together with a ``key=value`` manifest of the
full flag set and the package version.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import core, data as dmod, eval as emod, lowrank, report, sample, theory, train
from . import likelihood as lk

EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_CONVENTION = 5
EXIT_INTRACTABLE = 6
EXIT_VALUE = 7
EXIT_NUMERIC = 8


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_VALUE):
        super().__init__(message)
        self.code = code


# --- staging and manifest --------------------------------------------------------

class Staging:
    """Temporary output area committed atomically on success.

    ``kind`` is ``"dir"`` (files merged into the target directory) or
    ``"file"`` (one file plus its ``.manifest`` sidecar).
    """

    def __init__(self, target, kind: str):
        self.target = Path(target)
        self.kind = kind
        parent = self.target.parent if kind == "file" else self.target.parent
        parent = parent if str(parent) else Path(".")
        if not parent.exists():
            raise CliError(f"output parent directory does not exist: {parent}", EXIT_MISSING)
        self.root = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=parent))

    def path(self, name: str | None = None) -> Path:
        if self.kind == "file":
            return self.root / (self.target.name if name is None else name)
        return self.root / name

    def commit(self) -> None:
        if self.kind == "file":
            for p in sorted(self.root.iterdir()):
                dest = self.target if p.name == self.target.name else self.target.parent / p.name
                os.replace(p, dest)
        else:
            self.target.mkdir(exist_ok=True)
            for p in sorted(self.root.iterdir()):
                dest = self.target / p.name
                if dest.is_dir() and not dest.is_symlink():
                    shutil.rmtree(dest)
                os.replace(p, dest)
        shutil.rmtree(self.root, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)


def manifest_text(args) -> str:
    items = {"command": args.command, "version": __version__}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        items[key] = value
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _emit(args, text: str, stage: Staging | None, name: str) -> None:
    sys.stdout.write(text)
    if stage is not None:
        stage.path(name).write_text(text)


def _table(header: list[str], rows: list[list]) -> str:
    def fmt(x):
        if isinstance(x, (float, np.floating)):
            return f"{x:.10g}"
        return str(x)

    cells = [header] + [[fmt(x) for x in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    return "".join("  ".join(c[i].ljust(widths[i]) for i in range(len(header))).rstrip() + "\n"
                   for c in cells)


def _keyvalue(header: list[str], rows: list[list]) -> str:
    out = []
    for r in rows:
        out.append(" ".join(f"{h}={v!r}" if isinstance(v, float) else f"{h}={v}"
                            for h, v in zip(header, r)))
    return "\n".join(out) + "\n"


def _render(args, header, rows) -> str:
    return _keyvalue(header, rows) if args.format == "kv" else _table(header, rows)


# --- input helpers ----------------------------------------------------------------

def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing input {what}: {p}", EXIT_MISSING)
    return p


def _load_data(path, convention=None) -> dmod.BinaryDataset:
    return dmod.load_dataset(_existing(path, "dataset"), convention=convention)


def _check_conventions(model: core.RbmModel, ds: dmod.BinaryDataset, where: str) -> None:
    if model.convention is not ds.convention:
        raise CliError(
            f"incompatible conventions in {where}: model is {model.convention.value}, "
            f"data file declares {ds.convention.value}", EXIT_CONVENTION)


def _load_traj(path):
    d = _existing(path, "trajectory directory")
    if not (d / "ladder.idx").exists():
        raise CliError(f"missing input ladder index: {d / 'ladder.idx'}", EXIT_MISSING)
    lad = train.load_ladder(d)
    rcm = lowrank.load_rcm(d / "rcm.rcm") if (d / "rcm.rcm").exists() else None
    return lad, rcm


def _load_split(traj, ds: dmod.BinaryDataset) -> dmod.BinaryDataset:
    p = Path(traj) / "split" if traj is not None else None
    if p is not None and p.exists():
        assign = np.array([int(x) for x in p.read_text().split()], dtype=np.int8)
        if assign.size == len(ds):
            return dmod.BinaryDataset(ds.data, ds.labels, ds.convention, assign, ds.meta)
    return ds


def _models_for(args):
    """(ladder models, target model, rcm) from --traj or --model."""
    if getattr(args, "traj", None):
        lad, rcm = _load_traj(args.traj)
        return lad.models, lad.final, rcm
    if getattr(args, "model", None):
        m, _ = core.load_model(_existing(args.model, "model"))
        return [m], m, None
    raise CliError("one of --traj or --model is required", EXIT_USAGE)


def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"invalid value for {name}: {text!r}") from exc


# --- gen --------------------------------------------------------------------------

def cmd_gen(args, stage):
    if args.kind == "ising":
        ds = dmod.gen_ising2d(args.L, args.beta, args.count, args.thermalization, seed=args.seed,
                              stride=args.stride)
    elif args.kind == "cw":
        ds = dmod.gen_curie_weiss(args.n, args.beta, args.count, seed=args.seed)
    else:
        if args.preset == "mickey":
            spec = dmod.mickey_spec()
        else:
            centers = [c for c in args.centers.split(";") if c.strip()]
            pts = [tuple(_floats(c, "--centers")) for c in centers]
            radii = _floats(args.radii, "--radii")
            weights = _floats(args.weights, "--weights") if args.weights else [1.0 / len(pts)] * len(pts)
            if not (len(pts) == len(radii) == len(weights)):
                raise CliError("--centers, --radii and --weights need the same number of clusters")
            spec = [dmod.Cluster(p, w, r) for p, w, r in zip(pts, weights, radii)]
        ds = dmod.gen_clustered(spec, args.count, args.nv, seed=args.seed, gain=args.gain,
                                convention=args.convention)
    if args.kind != "clusters" and args.convention:
        ds = ds.as_convention(args.convention)
    dmod.save_dataset(stage.path(), ds, args.file_format)
    sys.stdout.write(f"wrote {len(ds)} samples of {ds.num_visible} units to {args.out}\n")


# --- pretrain -----------------------------------------------------------------------

def cmd_pretrain(args, stage):
    ds = _load_data(args.data)
    x = ds.train
    pca = lowrank.fit_pca(x, args.d, ds.convention)
    budget = args.budget if args.budget is not None else (100 if args.desk_scale else 500)
    rcm = lowrank.rcm_train(x, pca, hyperplane_budget=budget, bins=args.bins,
                            max_hyperplanes=args.max_hyperplanes, convention=ds.convention)
    conv = core.Convention.parse(args.convention or ds.convention)
    rng = np.random.default_rng(args.seed)
    model = lowrank.rcm_to_rbm(rcm, args.hidden, conv, noise=args.noise, rng=rng)
    lowrank.save_rcm(stage.path("rcm.rcm"), rcm)
    core.save_model(stage.path("init.rbm"), model, 0)
    rows = [["d", pca.d], ["hyperplanes", rcm.num_hyperplanes], ["converged", int(rcm.converged)],
            ["iterations", rcm.iterations], ["hidden", model.num_hidden],
            ["convention", model.convention.value]]
    _emit(args, _render(args, ["key", "value"], rows), stage, "pretrain.txt")
    if args.figures:
        sep = emod.default_separator(x, ds.convention)
        synth = lowrank.static_sample(rcm, min(2000, 4 * len(x)), rng, convention=ds.convention)
        report.projection(sep.project(x, ds.convention), sep.project(synth, ds.convention),
                          stage.path("pretrain_projection.png"))


# --- train ----------------------------------------------------------------------------

def _train_config(args) -> train.TrainConfig:
    overrides = {}
    for flag, key in (("lr", "learning_rate"), ("batch_size", "batch_size"), ("chains", "chain_count"),
                      ("k", "gibbs_steps"), ("updates", "total_updates"),
                      ("acceptance", "ladder_acceptance_target"), ("reweighting", "reweighting"),
                      ("ess_threshold", "ess_threshold"), ("eval_interval", "eval_interval"),
                      ("weight_noise", "weight_noise"), ("trais_chains", "trais_chains")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    overrides["seed"] = args.seed
    return train.TrainConfig.desk_scale(**overrides) if args.desk_scale else train.TrainConfig(**overrides)


def cmd_train(args, stage):
    if not 0.0 < args.train_fraction <= 1.0:
        raise CliError(f"--train-fraction must lie in (0, 1], got {args.train_fraction}")
    ds = _load_data(args.data)
    if ds.split is None and 0.0 < args.train_fraction < 1.0:
        ds = dmod.split(ds, args.train_fraction, seed=args.seed)
    rcm = None
    if args.pretrained:
        pre = _existing(args.pretrained, "pretraining directory")
        init, _ = core.load_model(_existing(pre / "init.rbm", "initial model"))
        rcm = lowrank.load_rcm(_existing(pre / "rcm.rcm", "RCM file"))
    elif args.init:
        init, _ = core.load_model(_existing(args.init, "initial model"))
    else:
        conv = core.Convention.parse(args.convention or ds.convention)
        ds = ds.as_convention(conv)
        init = train.zero_init_model(ds.train, args.hidden, conv)
    _check_conventions(init, ds, "train")
    if init.num_visible != ds.num_visible:
        raise CliError(f"model has {init.num_visible} visible units, data have {ds.num_visible}")
    config = _train_config(args)
    lad = train.pcd_train(init, ds, config, rcm=rcm)
    train.save_ladder(stage.root, lad)
    if rcm is not None:
        lowrank.save_rcm(stage.path("rcm.rcm"), rcm)
    if ds.split is not None:
        stage.path("split").write_text(" ".join(str(int(s)) for s in ds.split) + "\n")
    rows = [[c.update, c.log_z, c.ll_train, c.ll_test] for c in lad.checkpoints]
    _emit(args, _render(args, ["t", "logZ", "LL_train", "LL_test"], rows), stage, "checkpoints.txt")
    if args.figures:
        report.training_curves(lad.metrics, stage.path("training.png"))


# --- ll -----------------------------------------------------------------------------------

def cmd_ll(args, stage):
    models, target, rcm = _models_for(args)
    ds = _load_split(args.traj, _load_data(args.data)) if args.data else None
    if ds is not None:
        _check_conventions(target, ds, "ll")
    method = args.method
    points, walkers, err = 0, 0, float("nan")
    if method == "exact":
        log_z = core.exact_log_partition(target)
    elif method == "online":
        if not args.traj:
            raise CliError("--method online needs --traj")
        lad, _ = _load_traj(args.traj)
        log_z, points = lad.checkpoints[-1].log_z, len(lad)
    elif method in ("ais", "ais-ref"):
        walkers, points = args.walkers, args.n_beta
        if method == "ais":
            sched = lk.AisSchedule.flat(args.n_beta, args.steps, args.walkers)
        else:
            if ds is None:
                raise CliError("--method ais-ref needs --data for the reference marginals")
            ref = lk.reference_model(ds.train, target.num_hidden, target.convention)
            sched = lk.AisSchedule.with_reference(args.n_beta, ref, args.steps, args.walkers)
        res = lk.ais_estimate(target, sched, seed=args.seed)
        log_z, err = res.log_z, res.stderr
    elif method == "trais":
        if len(models) < 2:
            raise CliError("--method trais needs a trajectory with at least two checkpoints")
        sel = sample.select_ladder(models, args.acceptance, rng=args.seed)
        chosen = [models[i] for i in sel.indices]
        steps = args.steps if args.steps_total is None else max(1, args.steps_total // (len(chosen) - 1))
        res = lk.ais_estimate(None, lk.AisSchedule.trajectory(chosen, steps, args.walkers),
                              seed=args.seed, rcm=rcm)
        log_z, err, points, walkers = res.log_z, res.stderr, len(chosen), args.walkers
    else:  # ptt
        if len(models) < 2:
            raise CliError("--method ptt needs a trajectory with at least two checkpoints")
        sel = sample.select_ladder(models, args.acceptance, rng=args.seed)
        chosen = [models[i] for i in sel.indices]
        head = train.initial_sampler(chosen[0], rcm)
        out = sample.ptt_run(chosen, args.walkers, args.sweeps, args.k, rng=args.seed,
                             head_sampler=head, accumulate_ratios=True)
        res = lk.ptt_log_likelihood(chosen, out, train.initial_log_partition(chosen[0], rcm))
        log_z, points, walkers = float(res.log_z[-1]), len(chosen), args.walkers
    ll_tr = ll_te = float("nan")
    if ds is not None:
        ll_tr = core.exact_log_likelihood(target, ds.train, log_z)
        if len(ds.test):
            ll_te = core.exact_log_likelihood(target, ds.test, log_z)
    header = ["method", "points", "walkers", "logZ", "stderr", "LL_train", "LL_test"]
    _emit(args, _render(args, header, [[method, points, walkers, log_z, err, ll_tr, ll_te]]),
          stage, "ll.txt")


# --- sample ---------------------------------------------------------------------------------

def _run_sampler(args, models, target, rcm, observer=None, store=False, history=False):
    method = args.method
    if method == "ags":
        rng = np.random.default_rng(args.seed)
        pop = train.initial_sampler(target, rcm)(args.chains, rng) if args.equilibrium_start else \
            core.ChainPopulation.random(target, args.chains, rng)
        out = sample.LadderSampler([target], [pop], np.zeros(0), np.zeros(0), None)
        for s in range(args.sweeps):
            pop = core.ags_step(target, pop, args.k, rng)
            if (s + 1) % args.stride == 0:
                if observer is not None:
                    out.observations.append(observer(pop.v))
                if store:
                    out.samples.append(pop.v.copy())
        out.populations = [pop]
        out.sweeps, out.ags_steps = args.sweeps, args.sweeps * args.k
        return out
    if method == "pt":
        return sample.pt_run(target, sample.default_betas(args.n_temps), args.chains, args.sweeps,
                             args.k, rng=args.seed, stride=args.stride, observer=observer,
                             store_samples=store, record_history=history)
    if len(models) < 2:
        raise CliError("--method ptt needs --traj with at least two checkpoints")
    sel = sample.select_ladder(models, args.acceptance, rng=args.seed)
    chosen = [models[i] for i in sel.indices]
    head = train.initial_sampler(chosen[0], rcm)
    return sample.ptt_run(chosen, args.chains, args.sweeps, args.k, rng=args.seed, head_sampler=head,
                          stride=args.stride, observer=observer, store_samples=store,
                          record_history=history)


def cmd_sample(args, stage):
    models, target, rcm = _models_for(args)
    out = _run_sampler(args, models, target, rcm, store=True,
                       history=args.method != "ags" and args.diagnostics)
    states = np.concatenate(out.samples) if out.samples else out.populations[-1].v
    ds = dmod.BinaryDataset(states, convention=target.convention)
    dmod.save_dataset(stage.path("samples.txt"), ds)
    meta = [f"model={args.traj or args.model}", f"method={args.method}", f"sweeps={args.sweeps}",
            f"stride={args.stride}", f"seed={args.seed}", f"chains={args.chains}",
            f"rows={len(ds)}"]
    acc = out.acceptance
    meta += [f"acceptance_{j}_{j + 1}={a!r}" for j, a in enumerate(acc)]
    stage.path("samples.meta").write_text("\n".join(meta) + "\n")
    text = _render(args, ["pair", "acceptance"], [[f"{j}-{j + 1}", float(a)] for j, a in enumerate(acc)]) \
        if acc.size else "single model: no exchanges\n"
    if args.diagnostics and out.history is not None and len(out.models) > 1:
        res = sample.index_autocorrelation(out.history, len(out.models))
        text += _render(args, ["t", "C"], [[t, float(c)] for t, c in enumerate(res.curve)])
        text += _render(args, ["quantity", "value", "err"],
                        [["tau_exp", res.tau_exp, res.tau_exp_err],
                         ["tau_int", res.tau_int, res.tau_int_err]])
        if args.figures:
            report.autocorrelation(res, stage.path("autocorrelation.png"))
    _emit(args, text, stage, "diagnostics.txt")
    if args.figures and acc.size:
        report.acceptance_profile(acc, stage.path("acceptance.png"), args.acceptance)


# --- eval ---------------------------------------------------------------------------------------

def cmd_eval(args, stage):
    if args.kind == "jumps":
        models, target, rcm = _models_for(args)
        ds = _load_data(args.data)
        sep = emod.default_separator(ds.data, ds.convention)
        obs = lambda v: sep.signed_distance(sep.project(v, target.convention))  # noqa: E731
        cost = {"ags": 1, "pt": args.n_temps}.get(args.method)
        if cost is None:
            sel = sample.select_ladder(models, args.acceptance, rng=args.seed)
            cost = len(sel.indices)
        args.sweeps = max(1, args.budget // (cost * args.k))
        out = _run_sampler(args, models, target, rcm, observer=obs)
        jc = emod.mode_jumps(np.array(out.observations))
        rows = [[args.method, args.budget, jc.steps, jc.mean, jc.stderr]]
        _emit(args, _render(args, ["method", "ags_budget", "records", "mean_jumps", "stderr"], rows),
              stage, "jumps.txt")
    elif args.kind == "aats":
        real = _load_data(args.real)
        synth = _load_data(args.synth, real.convention.value)
        res = emod.aats(real.data, synth.data)
        rows = [["AA_truth", res.aa_truth], ["AA_synth", res.aa_synth], ["AA_TS", res.aa_ts]]
        if args.test:
            test = _load_data(args.test, real.convention.value)
            rows.append(["privacy_loss", emod.privacy_loss(real.data, test.data, synth.data)])
        _emit(args, _render(args, ["quantity", "value"], rows), stage, "aats.txt")
    else:
        ds = _load_data(args.data)
        synth = _load_data(args.samples, ds.convention.value)
        rep = emod.moment_report(ds.data, synth.data, d=args.d, bins=args.bins,
                                 convention=ds.convention)
        text = rep.to_keyvalue() if args.format == "kv" else rep.to_text()
        _emit(args, text, stage, "moments.txt")
        if args.figures:
            sep = emod.default_separator(ds.data, ds.convention)
            report.projection(sep.project(ds.data, ds.convention), sep.project(synth.data, ds.convention),
                              stage.path("moments_projection.png"), sep)


# --- theory --------------------------------------------------------------------------------------

def cmd_theory(args, stage):
    grid = np.linspace(args.grid_min, args.grid_max, args.grid_n) if args.grid_n else None
    if args.kind == "cw":
        curve = theory.cw_rate_function(args.beta, args.H, grid)
        label = "Omega(m)"
    else:
        curve = theory.toy_rbm_free_energy(args.beta_t, args.beta, grid)
        label = "f(m)"
    text = _render(args, ["m", "value"], [[float(m), float(f)] for m, f in zip(curve.grid, curve.values)])
    text += _render(args, ["minimum", "value"],
                    [[float(m), float(f)] for m, f in zip(curve.minima, curve.minima_values)])
    if args.kind == "toyrbm":
        text += _render(args, ["quantity", "value"],
                        [["branch_gap", theory.toy_branch_gap(args.beta_t, args.beta)]])
    _emit(args, text, stage, f"theory_{args.kind}.txt")
    if args.figures:
        report.free_energy_curve(curve, stage.path(f"theory_{args.kind}.png"), label)


# --- parser ----------------------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    g = shared.add_argument_group("shared")
    g.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    g.add_argument("--threads", type=_positive_int, default=None, help="BLAS thread budget")
    g.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for byte-identical reruns")
    g.add_argument("--out", default=None, help="output file (gen) or directory (other commands)")
    g.add_argument("--desk-scale", action="store_true", help="scaled-down defaults for small machines")
    g.add_argument("--figures", action="store_true", help="render PNG figures into --out")
    g.add_argument("--format", choices=("text", "kv"), default="text",
                   help="aligned text table or key=value lines")

    p = argparse.ArgumentParser(prog="trajrbm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"trajrbm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gsub = gen.add_subparsers(dest="kind", required=True)
    ising = gsub.add_parser("ising", parents=[shared], help="2-D Ising model by Metropolis")
    ising.add_argument("--L", type=_positive_int, required=True)
    ising.add_argument("--beta", type=float, required=True)
    ising.add_argument("--count", type=_positive_int, required=True)
    ising.add_argument("--thermalization", type=int, default=1000)
    ising.add_argument("--stride", type=_positive_int, default=None)
    cw = gsub.add_parser("cw", parents=[shared], help="Curie-Weiss model, exact sampling")
    cw.add_argument("--n", type=_positive_int, required=True)
    cw.add_argument("--beta", type=float, required=True)
    cw.add_argument("--count", type=_positive_int, required=True)
    cl = gsub.add_parser("clusters", parents=[shared], help="planted clusters in a latent space")
    cl.add_argument("--nv", type=_positive_int, required=True)
    cl.add_argument("--count", type=_positive_int, required=True)
    cl.add_argument("--preset", choices=("mickey",), default=None)
    cl.add_argument("--centers", default="-0.5;0.6", help="';'-separated clusters, ','-separated coordinates")
    cl.add_argument("--radii", default="0.15,0.1")
    cl.add_argument("--weights", default=None)
    cl.add_argument("--gain", type=float, default=1.0)
    for q in (ising, cw, cl):
        q.add_argument("--convention", default=None, help="ZeroOne or PlusMinus")
        q.add_argument("--file-format", choices=("text-01", "packed-bits"), default="text-01")
        q.set_defaults(func=cmd_gen, output="file")
    cl.set_defaults(convention="ZeroOne")

    pre = sub.add_parser("pretrain", parents=[shared], help="fit an RCM and lift it to an RBM")
    pre.add_argument("--data", required=True)
    pre.add_argument("--d", type=_positive_int, default=1, help="number of principal directions (1-4)")
    pre.add_argument("--hidden", type=_positive_int, required=True)
    pre.add_argument("--budget", type=_positive_int, default=None, help="hyperplane candidates")
    pre.add_argument("--max-hyperplanes", type=_positive_int, default=None)
    pre.add_argument("--bins", type=_positive_int, default=None)
    pre.add_argument("--noise", type=float, default=0.0)
    pre.add_argument("--convention", default=None)
    pre.set_defaults(func=cmd_pretrain, output="dir")

    tr = sub.add_parser("train", parents=[shared], help="PCD training with a checkpoint ladder")
    tr.add_argument("--data", required=True)
    src = tr.add_mutually_exclusive_group()
    src.add_argument("--pretrained", default=None, help="directory written by pretrain")
    src.add_argument("--init", default=None, help="initial RBM1 model")
    tr.add_argument("--hidden", type=_positive_int, default=100)
    tr.add_argument("--convention", default=None)
    tr.add_argument("--train-fraction", type=float, default=0.6)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--batch-size", type=_positive_int, default=None)
    tr.add_argument("--chains", type=_positive_int, default=None)
    tr.add_argument("--k", type=_positive_int, default=None)
    tr.add_argument("--updates", type=int, default=None)
    tr.add_argument("--acceptance", type=float, default=None)
    tr.add_argument("--reweighting", choices=train.REWEIGHTING, default=None)
    tr.add_argument("--ess-threshold", type=float, default=None)
    tr.add_argument("--eval-interval", type=_positive_int, default=None)
    tr.add_argument("--weight-noise", type=float, default=None)
    tr.add_argument("--trais-chains", type=int, default=None)
    tr.set_defaults(func=cmd_train, output="dir")

    ll = sub.add_parser("ll", parents=[shared], help="partition function and log-likelihood")
    src = ll.add_mutually_exclusive_group(required=True)
    src.add_argument("--traj", default=None)
    src.add_argument("--model", default=None)
    ll.add_argument("--method", choices=("exact", "online", "trais", "ais", "ais-ref", "ptt"),
                    default="trais")
    ll.add_argument("--data", default=None)
    ll.add_argument("--n-beta", type=int, default=100)
    ll.add_argument("--walkers", type=_positive_int, default=1000)
    ll.add_argument("--steps", type=_positive_int, default=1, help="AGS steps per annealing point")
    ll.add_argument("--steps-total", type=_positive_int, default=None,
                    help="trais: spread this many AGS steps evenly over the hops")
    ll.add_argument("--acceptance", type=float, default=0.25)
    ll.add_argument("--sweeps", type=_positive_int, default=1000)
    ll.add_argument("--k", type=_positive_int, default=1)
    ll.set_defaults(func=cmd_ll, output="dir")

    def sampler_flags(q):
        src = q.add_mutually_exclusive_group(required=True)
        src.add_argument("--traj", default=None)
        src.add_argument("--model", default=None)
        q.add_argument("--method", choices=("ptt", "pt", "ags"), default="ptt")
        q.add_argument("--chains", type=_positive_int, default=1000)
        q.add_argument("--k", type=_positive_int, default=1)
        q.add_argument("--stride", type=_positive_int, default=1)
        q.add_argument("--n-temps", type=_positive_int, default=10)
        q.add_argument("--acceptance", type=float, default=0.25)
        q.add_argument("--equilibrium-start", action="store_true",
                       help="ags: start from exact samples when the model is enumerable")

    sm = sub.add_parser("sample", parents=[shared], help="draw samples with PTT, PT or AGS")
    sampler_flags(sm)
    sm.add_argument("--sweeps", type=_positive_int, default=1000)
    sm.add_argument("--diagnostics", action="store_true", help="index autocorrelation (PT/PTT)")
    sm.set_defaults(func=cmd_sample, output="dir")

    ev = sub.add_parser("eval", help="sample-quality metrics")
    esub = ev.add_subparsers(dest="kind", required=True)
    jm = esub.add_parser("jumps", parents=[shared], help="mode jumps per chain at equal AGS budget")
    sampler_flags(jm)
    jm.add_argument("--data", required=True, help="dataset defining the separator")
    jm.add_argument("--budget", type=_positive_int, default=10000, help="AGS-equivalent steps")
    jm.set_defaults(stride=1)
    aa = esub.add_parser("aats", parents=[shared], help="nearest-neighbor adversarial accuracy")
    aa.add_argument("--real", required=True)
    aa.add_argument("--synth", required=True)
    aa.add_argument("--test", default=None, help="held-out set; adds the privacy loss")
    mo = esub.add_parser("moments", parents=[shared], help="moment and projection discrepancies")
    mo.add_argument("--data", required=True)
    mo.add_argument("--samples", required=True)
    mo.add_argument("--d", type=_positive_int, default=2)
    mo.add_argument("--bins", type=_positive_int, default=20)
    for q in (jm, aa, mo):
        q.set_defaults(func=cmd_eval, output="dir")

    th = sub.add_parser("theory", help="mean-field free-energy curves")
    tsub = th.add_subparsers(dest="kind", required=True)
    tcw = tsub.add_parser("cw", parents=[shared], help="Curie-Weiss Omega(m)")
    tcw.add_argument("--beta", type=float, required=True)
    tcw.add_argument("--H", type=float, default=0.0)
    tty = tsub.add_parser("toyrbm", parents=[shared], help="Bernoulli-Gauss toy RBM f(m)")
    tty.add_argument("--beta-t", type=float, default=1.4)
    tty.add_argument("--beta", type=float, default=1.0)
    for q, (lo, hi) in ((tcw, (-1.0, 1.0)), (tty, (-0.5, 3.0))):
        q.add_argument("--grid-min", type=float, default=lo)
        q.add_argument("--grid-max", type=float, default=hi)
        q.add_argument("--grid-n", type=int, default=0, help="0 keeps the built-in grid")
        q.set_defaults(func=cmd_theory, output="dir")
    return p


_ERRORS = (
    (FileNotFoundError, EXIT_MISSING, "missing input"),
    (core.FormatError, EXIT_FORMAT, "malformed input"),
    (core.EnumerationError, EXIT_INTRACTABLE, "intractable request"),
    (lowrank.ConvergenceError, EXIT_NUMERIC, "did not converge"),
    (FloatingPointError, EXIT_NUMERIC, "numerical failure"),
    (MemoryError, EXIT_NUMERIC, "out of memory"),
    (sample.NonErgodicError, EXIT_NUMERIC, "non-ergodic ladder"),
    (ValueError, EXIT_VALUE, "invalid value"),
)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.output == "file" and not args.out:
        sys.stderr.write("error: missing required --out for gen\n")
        return EXIT_USAGE
    if args.figures and not args.out:
        sys.stderr.write("error: --figures needs --out\n")
        return EXIT_USAGE
    threads = 1 if args.deterministic else args.threads
    stage = None
    try:
        if args.out:
            stage = Staging(args.out, args.output)
        with threadpool_limits(limits=threads):
            args.func(args, stage)
        if stage is not None:
            name = (Path(args.out).name + ".manifest") if args.output == "file" else "manifest"
            stage.path(name).write_text(manifest_text(args))
            stage.commit()
        return 0
    except CliError as exc:
        sys.stderr.write(f"error: {exc}\n")
        code = exc.code
    except Exception as exc:  # mapped to a diagnostic line and exit status
        for cls, c, label in _ERRORS:
            if isinstance(exc, cls):
                sys.stderr.write(f"error: {label}: {exc}\n")
                code = c
                break
        else:
            raise
    if stage is not None:
        stage.abort()
    return code


def main() -> None:
    sys.exit(run())
