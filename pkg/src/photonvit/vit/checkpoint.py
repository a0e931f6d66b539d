"""Checkpoints: one binary matrix file per tensor plus a JSON manifest."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..core_math import SeedContext, load_matrix, save_matrix
from ..errors import ParameterError
from .model import TinyViT, ViTConfig
from .train import AdamW, EpochMetrics, TrainState

FORMAT_VERSION = 1


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim < 2 else a.reshape(a.shape[0], -1)


def save_checkpoint(directory, state: TrainState, extra=None):
    """Write ``state`` under ``directory`` (created if needed)."""
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    model, opt = state.model, state.optimizer
    shapes = {}
    for group, table in (("param", model.params), ("m", opt.m), ("v", opt.v)):
        for name in sorted(table):
            save_matrix(d / "tensors" / f"{group}.{name}.pvm", _as_2d(table[name]))
            shapes[f"{group}.{name}"] = list(np.shape(table[name]))
    manifest = {
        "format": FORMAT_VERSION,
        "vit": asdict(model.cfg),
        "naln_eps": model.naln_eps,
        "sigma_n": model.sigma_n,
        "sigma_n_cls": model.sigma_n_cls,
        "epoch": state.epoch,
        "seed": {"master_seed": state.ctx.master_seed, "path": [list(p) for p in state.ctx.stream_path]},
        "optimizer": {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "weight_decay": opt.wd},
        "tensors": shapes,
        "history": [m.row() for m in state.history],
        "extra": extra or {},
    }
    (d / "checkpoint.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory):
    """Returns ``(state, extra)``; the optimizer moments are restored exactly."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "checkpoint.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParameterError(f"{d}: unreadable checkpoint manifest ({exc})") from None
    if manifest.get("format") != FORMAT_VERSION:
        raise ParameterError(f"{d}: unsupported checkpoint format {manifest.get('format')}")
    tensors = {}
    for key, shape in manifest["tensors"].items():
        tensors[key] = load_matrix(d / "tensors" / f"{key}.pvm").reshape(shape)

    def group(prefix):
        return {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

    model = TinyViT(ViTConfig(**manifest["vit"]), group("param"), naln_eps=manifest["naln_eps"])
    model.sigma_n.update(manifest["sigma_n"])
    model.sigma_n_cls.update(manifest["sigma_n_cls"])
    o = manifest["optimizer"]
    opt = AdamW(model.params, o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
    opt.t = o["t"]
    opt.m.update(group("m"))
    opt.v.update(group("v"))
    seed = manifest["seed"]
    ctx = SeedContext(seed["master_seed"], tuple((lab, idx) for lab, idx in seed["path"]))
    history = [EpochMetrics(*row) for row in manifest["history"]]
    return TrainState(model, opt, manifest["epoch"], ctx, history), manifest.get("extra", {})
