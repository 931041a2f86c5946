import logging
import shutil
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from rtfvit.data import (
    MultiViewSample,
    TaskSpec,
    augment,
    dataset_from_pairs,
    export_dataset,
    generate,
    load_dataset,
    load_pairs,
    read_task_meta,
    split_sizes,
)
from rtfvit.errors import GenerationError


def small_spec(**kw):
    base = dict(n_train=64, n_val=16, n_test=32)
    base.update(kw)
    return TaskSpec(**base)


def test_generate_is_pure():
    a, b = generate(small_spec(seed=3)), generate(small_spec(seed=3))
    for s, t in zip(a.train + a.test, b.train + b.test):
        assert s.id == t.id and s.label == t.label
        assert s.view1.tobytes() == t.view1.tobytes() and s.view2.tobytes() == t.view2.tobytes()


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", ["xor", "dominant"])
def test_disjoint_and_balanced(seed, kind):
    ds = generate(small_spec(kind=kind, seed=seed, n_train=50, n_val=26, n_test=30))
    ids = [s.id for name in ("train", "val", "test") for s in ds.split(name)]
    assert len(ids) == len(set(ids))
    for name in ("train", "val", "test"):
        labels = np.array([s.label for s in ds.split(name)])
        assert abs(labels.mean() - 0.5) <= 0.02


def test_geometry_and_range():
    ds = generate(small_spec())
    s = ds.train[0]
    assert s.view1.shape == s.view2.shape == (32, 32, 1)
    assert s.view1.dtype == np.float32
    assert s.view1.min() >= 0.0 and s.view1.max() <= 1.0


def test_xor_cues_and_label():
    ds = generate(small_spec(noise=0.0))
    for s in ds.train:
        c1, c2 = s.cues
        assert s.label == c1 ^ c2
        for view, side in ((s.view1, c1), (s.view2, c2)):
            left, right = view[:, :16].mean(), view[:, 16:].mean()
            assert (right > left) == bool(side)


def test_xor_view1_carries_no_information():
    ds = generate(TaskSpec(kind="xor", n_train=512, seed=1))
    counts = Counter((s.cues[0], s.label) for s in ds.train)
    joint = np.array([[counts[(c, y)] for y in (0, 1)] for c in (0, 1)], dtype=float) / 512
    px, py = joint.sum(1), joint.sum(0)
    mi = sum(joint[i, j] * np.log(joint[i, j] / (px[i] * py[j]))
             for i in range(2) for j in range(2) if joint[i, j] > 0)
    assert mi == 0.0
    # Bayes accuracy of a view-1 stump is exactly one half
    assert max((joint[0, 0] + joint[1, 1]), (joint[0, 1] + joint[1, 0])) == 0.5


def test_dominant_stump_oracles():
    ds = generate(TaskSpec(kind="dominant", alpha=0.9, noise=0.0, n_train=500, n_val=100, n_test=200))
    samples = ds.train + ds.val + ds.test
    acc1 = np.mean([s.cues[0] == s.label for s in samples])
    acc2 = np.mean([s.cues[1] == s.label for s in samples])
    assert acc1 == pytest.approx(0.9, abs=1e-12)
    assert acc2 == 1.0


def test_unsatisfiable_balance():
    with pytest.raises(GenerationError):
        generate(small_spec(n_val=1))
    with pytest.raises(GenerationError):
        generate(small_spec(n_val=11))
    with pytest.raises(GenerationError):
        generate(small_spec(kind="texture"))


def test_augment_properties():
    ds = generate(small_spec())
    s = ds.train[0]
    for seed in range(20):
        out = augment(s, np.random.default_rng(seed))
        assert out.label == s.label and out.view1.shape == s.view1.shape
        twice = augment(out, np.random.default_rng(seed))
        assert np.array_equal(twice.view1, s.view1) and np.array_equal(twice.view2, s.view2)
    a = [augment(s, np.random.default_rng(7)).view1.tobytes() for _ in range(2)]
    assert a[0] == a[1]


def test_split_sizes():
    tr, va, te = split_sizes(512)
    assert tr + va + te == 512 and va % 2 == 0 and te % 2 == 0


def test_export_and_load_roundtrip(tmp_path):
    ds = generate(small_spec(kind="dominant", alpha=0.75))
    export_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert [s.id for s in back.train] == sorted(s.id for s in ds.train)
    for s, t in zip(sorted(ds.test, key=lambda s: s.id), back.test):
        assert s.label == t.label
        np.testing.assert_allclose(t.view1, s.view1, atol=0.5 / 255 + 1e-6)
    assert read_task_meta(tmp_path)["task.alpha"] == "0.75"


def _write_pairs(root, n=3):
    (root / "img").mkdir(parents=True)
    rows = ["id\tview1_path\tview2_path\tlabel"]
    for i in range(n):
        for v in (1, 2):
            Image.fromarray(np.full((8, 8), 40 * i, np.uint8), mode="L").save(root / f"img/{i}_{v}.png")
        rows.append(f"s{i}\timg/{i}_1.png\timg/{i}_2.png\t{i % 2}")
    (root / "manifest.tsv").write_text("\n".join(rows) + "\n")


def test_load_pairs_complete(tmp_path):
    _write_pairs(tmp_path)
    out = load_pairs(tmp_path)
    assert len(out.samples) == 3 and out.skipped == 0
    assert [s.id for s in out.samples] == ["s0", "s1", "s2"]
    assert out.samples[1].view1.shape == (8, 8, 1)


def test_load_pairs_missing_view(tmp_path):
    _write_pairs(tmp_path)
    (tmp_path / "img/1_2.png").unlink()
    out = load_pairs(tmp_path)
    assert len(out.samples) == 2 and out.skipped == 1


def test_load_pairs_unreadable_warns(tmp_path, caplog):
    _write_pairs(tmp_path)
    (tmp_path / "img/2_1.png").write_bytes(b"not a png")
    with caplog.at_level(logging.WARNING):
        out = load_pairs(tmp_path)
    assert out.skipped == 1 and "s2" in caplog.text


def test_load_pairs_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pairs(tmp_path)
    _write_pairs(tmp_path / "d")
    shutil.rmtree(tmp_path / "d" / "img")
    with pytest.raises(ValueError):
        load_pairs(tmp_path / "d")


def test_pairs_without_split_column_are_rejected_by_dataset(tmp_path):
    _write_pairs(tmp_path)
    with pytest.raises(ValueError):
        dataset_from_pairs(load_pairs(tmp_path))


def test_sample_type():
    s = MultiViewSample(np.zeros((2, 2, 1)), np.zeros((2, 2, 1)), 1, "a")
    assert s.split == "" and s.cues is None
