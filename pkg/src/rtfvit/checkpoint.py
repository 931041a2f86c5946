"""Checkpoint directories: packed tensors, an offset manifest and the model config.

Layout::

    params.bin           tensors back to back in the tensor binary format
    params.manifest.tsv  name, byte offset and shape of each tensor, in order
    config.txt           model/fusion keys in the flat key-value format
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import MultiViewModel
from .tensor import read_tensor, write_tensor
from .vit import ModelConfig

PARAMS = "params.bin"
MANIFEST = "params.manifest.tsv"
CONFIG = "config.txt"


def save_tensors(path, named: dict) -> list:
    """Write ``named`` tensors in order; return ``(name, offset, shape)`` entries."""
    entries, offset = [], 0
    with open(path, "wb") as f:
        for name, arr in named.items():
            entries.append((name, offset, tuple(np.shape(arr))))
            offset += write_tensor(f, arr)
    return entries


def load_tensors(path, entries) -> dict:
    out = {}
    with open(path, "rb") as f:
        for name, offset, _ in entries:
            f.seek(offset)
            out[name] = read_tensor(f)
    return out


def _model_text(model: MultiViewModel) -> str:
    from .config import ExperimentConfig, to_text

    cfg = ExperimentConfig(model=model.cfg)
    cfg.fusion.strategy = model.strategy.value
    cfg.fusion.rtf = model.rtf_enabled
    cfg.run.input_view = model.input_view
    return to_text(cfg, sections=("model", "fusion", "run"))


def save_checkpoint(model: MultiViewModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = save_tensors(directory / PARAMS, model.state_dict())
    with open(directory / MANIFEST, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(("name", "offset", "shape"))
        for name, offset, shape in entries:
            w.writerow((name, offset, "x".join(map(str, shape)) or "scalar"))
    (directory / CONFIG).write_text(_model_text(model))
    return directory


def load_checkpoint(directory) -> MultiViewModel:
    from .config import from_text

    directory = Path(directory)
    for name in (PARAMS, MANIFEST, CONFIG):
        if not (directory / name).is_file():
            raise ConfigError(f"checkpoint {directory} is missing {name}")
    cfg = from_text((directory / CONFIG).read_text())
    model = MultiViewModel(ModelConfig(**vars(cfg.model)), cfg.fusion.strategy, cfg.fusion.rtf,
                           input_view=cfg.run.input_view)
    with open(directory / MANIFEST, newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    entries = [(r["name"], int(r["offset"]), None) for r in rows]
    model.load_state_dict(load_tensors(directory / PARAMS, entries))
    return model
