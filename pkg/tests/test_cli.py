import os

import pytest

from rtfvit import gradcheck
from rtfvit import tensor as T
from rtfvit.checkpoint import load_checkpoint
from rtfvit.cli import main
from rtfvit.data import load_dataset, read_task_meta

SMALL = [
    "--set", "task.image_size=16", "--set", "model.image_size=16", "--set", "model.dim=16",
    "--set", "model.heads=2", "--set", "model.depth=2", "--set", "model.local_fraction=0.5",
    "--set", "task.n_train=16", "--set", "task.n_val=8", "--set", "task.n_test=8",
    "--set", "train.batch_size=8",
]


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--kind", "xor", "--n", 512, "--seed", 7, "--out", tmp_path / name) == 0
    a, b = (tmp_path / n / "manifest.txt" for n in "ab")
    assert a.read_bytes() == b.read_bytes()
    ds = load_dataset(tmp_path / "a")
    assert (len(ds.train), len(ds.val), len(ds.test)) == (294, 72, 146)


def test_gen_data_records_alpha(tmp_path):
    assert run("gen-data", "--kind", "dominant", "--alpha", 0.75, "--n-train", 8, "--n-val", 4,
               "--n-test", 4, "--out", tmp_path) == 0
    meta = read_task_meta(tmp_path)
    assert meta["task.kind"] == "dominant" and meta["task.alpha"] == "0.75"


def test_gen_data_usage_errors(tmp_path, capsys):
    assert run("gen-data", "--kind", "texture", "--out", tmp_path) == 2
    assert run("gen-data", "--n-val", 3, "--out", tmp_path) == 2
    assert run("train", "--set", "model.depth") == 2
    assert run("train", "--set", "model.nonsense=1") == 2


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_gen_data_unwritable_out(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir(mode=0o500)
    assert run("gen-data", "--out", locked / "d") == 2


def test_gen_data_out_is_a_file(tmp_path):
    f = tmp_path / "f"
    f.write_text("x")
    assert run("gen-data", "--n", 64, "--out", f) == 2


def test_train_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert run("train", *SMALL, "--epochs", 1, "--out", out) == 0
    for name in ("config.txt", "history.csv", "results.csv", "manifest.txt",
                 "checkpoint/params.manifest.tsv"):
        assert (out / name).is_file(), name
    assert "test_auc=" in capsys.readouterr().out
    assert load_checkpoint(out / "checkpoint").rtf_enabled


def test_train_rtf_off_and_split(tmp_path):
    out = tmp_path / "run"
    assert run("train", *SMALL, "--set", "model.depth=8", "--rtf", "off", "--split", 0.5,
               "--epochs", 0, "--out", out) == 0
    model = load_checkpoint(out / "checkpoint")
    assert not model.rtf_enabled
    assert (model.local.depth, model.global_.depth) == (4, 4)
    assert "fusion.rtf=false" in (out / "config.txt").read_text()


def test_train_rerun_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("train", *SMALL, "--epochs", 1, "--seed", 3, "--out", tmp_path / name) == 0
    for f in ("results.csv", "history.csv", "manifest.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_single_cell_ablate_equals_train(tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text("grid.strategies=concat\ngrid.rtf=true\ngrid.split_fractions=0.5\n"
                    "grid.seeds=5\n")
    assert run("ablate", *SMALL, "--grid", grid, "--epochs", 1, "--out", tmp_path / "ab") == 0
    assert run("train", *SMALL, "--epochs", 1, "--seed", 5, "--out", tmp_path / "tr") == 0
    ab = (tmp_path / "ab/results.csv").read_text().splitlines()
    tr = (tmp_path / "tr/results.csv").read_text().splitlines()
    assert ab == tr
    assert run("ablate", *SMALL, "--grid", grid, "--epochs", 1, "--out", tmp_path / "ab2") == 0
    for f in ("results.csv", "summary.csv", "table.txt"):
        assert (tmp_path / "ab" / f).read_bytes() == (tmp_path / "ab2" / f).read_bytes()


def test_ablate_default_seeds_are_four(tmp_path):
    grid = tmp_path / "grid.txt"
    grid.write_text("grid.strategies=average\ngrid.rtf=false\ngrid.split_fractions=0.5\n")
    assert run("ablate", *SMALL, "--grid", grid, "--epochs", 0, "--seed", 10,
               "--out", tmp_path / "ab") == 0
    rows = (tmp_path / "ab/results.csv").read_text().splitlines()[1:]
    assert [r.split(",")[4] for r in rows] == ["10", "11", "12", "13"]
    assert "grid.seeds=10,11,12,13" in (tmp_path / "ab/config.txt").read_text()


def test_gradcheck_command(capsys):
    assert run("gradcheck") == 0
    text = capsys.readouterr().out
    for name in gradcheck.OP_NAMES:
        assert name in text


def test_gradcheck_detects_corrupt_rule(monkeypatch, capsys):
    real = T.gelu

    def bad_gelu(x):
        out = real(x)
        tape = T.active_tape()
        node = tape.nodes[-1] if tape is not None and tape.nodes else None
        if node is not None:
            inner = node.backward
            node.backward = lambda g: tuple(1.01 * v if v is not None else None for v in inner(g))
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    assert run("gradcheck") == 4
    assert "FAIL" in capsys.readouterr().out


@pytest.fixture(scope="module")
def concat_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("att")
    assert run("gen-data", *SMALL, "--kind", "dominant", "--out", root / "data") == 0
    assert run("train", *SMALL, "--data", root / "data", "--epochs", 1, "--out", root / "concat") == 0
    assert run("train", *SMALL, "--data", root / "data", "--epochs", 0, "--strategy", "average",
               "--out", root / "avg") == 0
    return root


def test_attention_exports(concat_run, tmp_path):
    root = concat_run
    assert run("attention", *SMALL, "--checkpoint", root / "concat/checkpoint", "--data", root / "data",
               "--n", 4, "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("*.png"))) == 8
    rows = (tmp_path / "balance.csv").read_text().splitlines()[1:]
    assert len(rows) == 4
    for r in rows:
        m1, m2 = map(float, r.split(",")[1:3])
        assert m1 + m2 == pytest.approx(1.0, abs=1e-5)


def test_attention_rejects_non_concat(concat_run, tmp_path, capsys):
    root = concat_run
    assert run("attention", *SMALL, "--checkpoint", root / "avg/checkpoint", "--data", root / "data",
               "--out", tmp_path) == 2
    assert "concat" in capsys.readouterr().err.lower()


def test_attention_missing_checkpoint(tmp_path):
    assert run("attention", "--checkpoint", tmp_path / "nope", "--out", tmp_path / "o") == 2


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    text = capsys.readouterr().out
    assert all(c in text for c in ("gen-data", "ablate", "gradcheck"))
