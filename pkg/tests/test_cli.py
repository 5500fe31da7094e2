from pathlib import Path

import pytest

from trajrbm import cli


def _run(*argv):
    return cli.run([str(a) for a in argv])


def _kv_rows(path):
    return [dict(tok.split("=", 1) for tok in line.split()) for line in Path(path).read_text().splitlines()]


def _tree(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def cw(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert _run("gen", "cw", "--n", 10, "--beta", 1.4, "--count", 500, "--seed", 7, "--out", "cw.txt") == 0
    return tmp_path


TRAIN = ("train", "--data", "cw.txt", "--hidden", 6, "--desk-scale", "--updates", 200,
         "--chains", 100, "--eval-interval", 50, "--seed", 7, "--deterministic", "--out", "run")


def test_gen_writes_manifest(cw):
    kv = dict(line.split("=", 1) for line in (cw / "cw.txt.manifest").read_text().splitlines())
    assert kv["command"] == "gen" and kv["seed"] == "7" and "version" in kv
    assert sum(1 for line in (cw / "cw.txt").read_text().splitlines() if not line.startswith("#")) == 500


def test_pipeline_smoke(cw, capsys):
    assert _run(*TRAIN) == 0
    run = cw / "run"
    assert (run / "ladder.idx").exists() and (run / "manifest").exists()
    assert len(list(run.glob("model_*.rbm"))) >= 2

    assert _run("ll", "--traj", "run", "--method", "exact", "--data", "cw.txt", "--format", "kv", "--out", "llx") == 0
    assert _run("ll", "--traj", "run", "--method", "trais", "--data", "cw.txt", "--format", "kv",
                "--seed", 1, "--out", "llt") == 0
    exact = _kv_rows(cw / "llx" / "ll.txt")[0]
    trais = _kv_rows(cw / "llt" / "ll.txt")[0]
    assert abs(float(exact["logZ"]) - float(trais["logZ"])) < 4 * float(trais["stderr"])

    assert _run("sample", "--traj", "run", "--chains", 50, "--sweeps", 20, "--seed", 3, "--out", "smp") == 0
    assert (cw / "smp" / "samples.txt").exists()
    assert _run("eval", "jumps", "--traj", "run", "--data", "cw.txt", "--budget", 200, "--chains", 50,
                "--out", "jm") == 0
    assert _run("eval", "moments", "--data", "cw.txt", "--samples", "smp/samples.txt", "--out", "mo") == 0
    assert _run("theory", "cw", "--beta", 1.4, "--out", "th") == 0
    assert _run("theory", "toyrbm", "--out", "ty") == 0
    for d in ("llx", "llt", "smp", "jm", "mo", "th", "ty"):
        assert (cw / d / "manifest").exists(), d


def test_pretrain_then_train(cw):
    assert _run("pretrain", "--data", "cw.txt", "--hidden", 16, "--budget", 20, "--seed", 1, "--out", "pre") == 0
    assert _run("train", "--data", "cw.txt", "--pretrained", "pre", "--desk-scale", "--updates", 40,
                "--chains", 50, "--eval-interval", 20, "--out", "run2") == 0
    assert (cw / "run2" / "ladder.idx").exists()


def test_invalid_flag_leaves_nothing(cw):
    before = set(p.name for p in cw.iterdir())
    assert _run("train", "--data", "cw.txt", "--bogus", 1, "--out", "bad") == cli.EXIT_USAGE
    assert set(p.name for p in cw.iterdir()) == before


def test_missing_input(cw):
    before = set(p.name for p in cw.iterdir())
    assert _run("train", "--data", "nope.txt", "--out", "bad") == cli.EXIT_MISSING
    assert _run("ll", "--traj", "nowhere", "--method", "exact", "--out", "bad") == cli.EXIT_MISSING
    assert set(p.name for p in cw.iterdir()) == before


def test_malformed_input(cw):
    (cw / "junk.txt").write_text("0 1 2\n1 1\n")
    assert _run("train", "--data", "junk.txt", "--out", "bad") == cli.EXIT_FORMAT
    assert not (cw / "bad").exists()


def test_convention_conflict(cw):
    assert _run("gen", "clusters", "--nv", 10, "--count", 50, "--convention", "ZeroOne", "--out", "zo.txt") == 0
    assert _run(*TRAIN) == 0
    assert _run("ll", "--traj", "run", "--method", "exact", "--data", "zo.txt", "--out", "bad") == cli.EXIT_CONVENTION
    assert not (cw / "bad").exists()


def test_failed_numeric_value(cw):
    assert _run("train", "--data", "cw.txt", "--train-fraction", 1.5, "--out", "bad") == cli.EXIT_VALUE
    assert not (cw / "bad").exists()


def test_gen_requires_out(cw):
    assert _run("gen", "cw", "--n", 4, "--beta", 1.0, "--count", 5) == cli.EXIT_USAGE


def test_help_exits_zero(capsys):
    assert cli.run(["--help"]) == 0
    assert "pretrain" in capsys.readouterr().out


def test_deterministic_reruns_byte_identical(tmp_path, monkeypatch):
    trees = []
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        monkeypatch.chdir(d)
        assert _run("gen", "cw", "--n", 10, "--beta", 1.4, "--count", 500, "--seed", 7, "--out", "cw.txt") == 0
        assert _run(*TRAIN) == 0
        assert _run("sample", "--traj", "run", "--chains", 40, "--sweeps", 10, "--seed", 3,
                    "--deterministic", "--out", "smp") == 0
        assert _run("ll", "--traj", "run", "--method", "trais", "--data", "cw.txt", "--seed", 2,
                    "--deterministic", "--out", "llt") == 0
        trees.append(_tree(d))
    assert trees[0].keys() == trees[1].keys()
    for key in trees[0]:
        assert trees[0][key] == trees[1][key], key


def test_different_seeds_differ(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for s in (1, 2):
        assert _run("gen", "cw", "--n", 10, "--beta", 1.4, "--count", 50, "--seed", s, "--out", f"cw{s}.txt") == 0
    assert (tmp_path / "cw1.txt").read_bytes() != (tmp_path / "cw2.txt").read_bytes()
