"""Synthetic two-view tasks and on-disk image-pair datasets.

Each view shows one bright square in either the left or the right half of
the image. The side of the square is the view's *cue*:

* ``xor``: label = cue1 XOR cue2, so neither view alone carries any
  information about the label.
* ``dominant``: view 2's cue always equals the label; view 1's cue equals
  the label for a fraction ``alpha`` of samples and is flipped otherwise.

Cue assignments are balanced by exact counts rather than by sampling, so
oracle accuracies computed from the cue metadata are exact.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import GenerationError

log = logging.getLogger(__name__)

KINDS = ("xor", "dominant")
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.tsv"
MANIFEST_COLUMNS = ("id", "view1_path", "view2_path", "label", "split")


@dataclass
class MultiViewSample:
    view1: np.ndarray
    view2: np.ndarray
    label: int
    id: str
    split: str = ""
    cues: Optional[tuple] = None


@dataclass
class TaskSpec:
    kind: str = "xor"
    n_train: int = 512
    n_val: int = 128
    n_test: int = 256
    image_size: int = 32
    channels: int = 1
    alpha: float = 0.9
    noise: float = 0.15
    seed: int = 0
    square: int = 8
    background: float = 0.2
    contrast: float = 0.6
    aligned: bool = True

    def validate(self) -> "TaskSpec":
        if self.kind not in KINDS:
            raise GenerationError(f"unknown task kind {self.kind!r}; choose from {KINDS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise GenerationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.noise < 0:
            raise GenerationError(f"noise must be non-negative, got {self.noise}")
        if not 1 <= self.square <= self.image_size // 2:
            raise GenerationError(f"square size {self.square} does not fit half of {self.image_size}")
        for name in ("n_train", "n_val", "n_test"):
            _check_balance(getattr(self, name), name)
        return self


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return getattr(self, name)

    def arrays(self, name: str) -> tuple:
        """Stacked ``(view1, view2, labels)`` arrays for one split."""
        samples = self.split(name)
        x1 = np.stack([s.view1 for s in samples]).astype(np.float32)
        x2 = np.stack([s.view2 for s in samples]).astype(np.float32)
        y = np.array([s.label for s in samples], dtype=np.float32)
        return x1, x2, y


def _check_balance(n: int, name: str = "split") -> None:
    # an odd split is off by 1/(2n) from perfect balance; the tolerance is 2%
    if n < 2 or (n % 2 and 1.0 / (2 * n) > 0.02):
        raise GenerationError(f"{name}={n} cannot be class-balanced within 2%")


def _balanced_bits(n: int, rng: np.random.Generator) -> np.ndarray:
    bits = np.zeros(n, dtype=np.int64)
    bits[: n // 2] = 1
    if n % 2:
        bits[-1] = rng.integers(2)
    rng.shuffle(bits)
    return bits


def _balanced_within(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Cue bits that are split half/half inside each label class."""
    out = np.zeros_like(labels)
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        out[idx] = _balanced_bits(idx.size, rng)
    return out


def _render(side: int, spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    h, s = spec.image_size, spec.square
    half = h // 2
    img = np.full((h, h, spec.channels), spec.background, dtype=np.float64)
    if spec.aligned:
        # discrete positions on a grid with step equal to the square size
        r = s * int(rng.integers(0, h // s))
        c = s * int(rng.integers(0, half // s)) + side * half
    else:
        r = int(rng.integers(0, h - s + 1))
        c = int(rng.integers(0, half - s + 1)) + side * half
    img[r:r + s, c:c + s, :] += spec.contrast
    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _cues(spec: TaskSpec, n: int, rng: np.random.Generator) -> tuple:
    labels = _balanced_bits(n, rng)
    if spec.kind == "xor":
        side1 = _balanced_within(labels, rng)
        side2 = side1 ^ labels
    else:
        agree = np.zeros(n, dtype=np.int64)
        agree[: int(round(spec.alpha * n))] = 1
        rng.shuffle(agree)
        side1 = np.where(agree == 1, labels, 1 - labels)
        side2 = labels.copy()
    return labels, side1, side2


def generate(spec: TaskSpec) -> Dataset:
    """Deterministic train/val/test splits for ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    splits = {}
    for name in SPLITS:
        n = getattr(spec, f"n_{name}")
        labels, side1, side2 = _cues(spec, n, rng)
        samples = []
        for i in range(n):
            v1 = _render(int(side1[i]), spec, rng)
            v2 = _render(int(side2[i]), spec, rng)
            samples.append(MultiViewSample(v1, v2, int(labels[i]), f"{name}-{i:05d}", name,
                                           (int(side1[i]), int(side2[i]))))
        splits[name] = samples
    return Dataset(splits["train"], splits["val"], splits["test"], meta=asdict(spec))


def augment(sample: MultiViewSample, rng: np.random.Generator, p: float = 0.5) -> MultiViewSample:
    """Independent left-right flips of each view; the label is carried over unchanged."""
    flips = rng.random(2) < p
    v1 = sample.view1[:, ::-1].copy() if flips[0] else sample.view1
    v2 = sample.view2[:, ::-1].copy() if flips[1] else sample.view2
    return MultiViewSample(v1, v2, sample.label, sample.id, sample.split, None)


# disk format ------------------------------------------------------------------


def _to_png(arr: np.ndarray, path: Path) -> None:
    img = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if img.shape[-1] == 1 else "RGB"
    Image.fromarray(img[..., 0] if mode == "L" else img, mode=mode).save(path)


def _from_png(path: Path, channels: Optional[int] = None) -> np.ndarray:
    with Image.open(path) as im:
        if channels == 1 or (channels is None and im.mode in ("L", "I", "I;16")):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def export_dataset(dataset: Dataset, root) -> Path:
    """Write PNG views and ``manifest.tsv`` (plus ``task.txt`` metadata) under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for name in SPLITS:
        for s in dataset.split(name):
            p1, p2 = f"images/{s.id}_v1.png", f"images/{s.id}_v2.png"
            _to_png(s.view1, root / p1)
            _to_png(s.view2, root / p2)
            rows.append((s.id, p1, p2, str(s.label), name))
    with open(root / MANIFEST, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    if dataset.meta:
        with open(root / "task.txt", "w") as f:
            for k, v in dataset.meta.items():
                f.write(f"task.{k}={v}\n")
    return root


@dataclass
class LoadedPairs:
    samples: list
    skipped: int


def load_pairs(root, channels: Optional[int] = None) -> LoadedPairs:
    """Read ``root/manifest.tsv``; rows with a missing or unreadable view are skipped and counted."""
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} under {root}")
    samples, skipped = [], 0
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        missing = {"id", "view1_path", "view2_path", "label"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{manifest} lacks columns {sorted(missing)}")
        for row in reader:
            paths = [row.get("view1_path") or "", row.get("view2_path") or ""]
            if not all(p and (root / p).is_file() for p in paths):
                skipped += 1
                continue
            try:
                v1 = _from_png(root / paths[0], channels)
                v2 = _from_png(root / paths[1], channels)
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: %s", row["id"], exc)
                skipped += 1
                continue
            label = int(row["label"])
            if label not in (0, 1):
                log.warning("skipping %s: label %r is not 0/1", row["id"], row["label"])
                skipped += 1
                continue
            samples.append(MultiViewSample(v1, v2, label, row["id"], row.get("split") or ""))
    if not samples:
        raise ValueError(f"no complete image pairs under {root}")
    samples.sort(key=lambda s: s.id)
    return LoadedPairs(samples, skipped)


def read_task_meta(root) -> dict:
    path = Path(root) / "task.txt"
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def dataset_from_pairs(pairs: LoadedPairs) -> Dataset:
    """Group loaded samples by their ``split`` column."""
    groups = {name: [] for name in SPLITS}
    for s in pairs.samples:
        if s.split not in groups:
            raise ValueError(f"sample {s.id} has split {s.split!r}; expected one of {SPLITS}")
        groups[s.split].append(s)
    return Dataset(groups["train"], groups["val"], groups["test"], meta={"skipped": pairs.skipped})


def load_dataset(root) -> Dataset:
    return dataset_from_pairs(load_pairs(root))


def is_writable_dir(path) -> bool:
    path = Path(path)
    probe = path
    while not probe.exists():
        if probe.parent == probe:
            return False
        probe = probe.parent
    return probe.is_dir() and os.access(probe, os.W_OK)


def split_sizes(n: int) -> tuple:
    """Split a total count 4:1:2 into even train/val/test sizes."""
    unit = n / 7.0
    val = 2 * max(1, int(math.floor(unit / 2)))
    test = 2 * max(1, int(math.floor(2 * unit / 2)))
    return n - val - test, val, test
