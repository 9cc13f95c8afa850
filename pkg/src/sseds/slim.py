"""Slim model construction, dimension alignment and retraining.

Each retained field gets a ``(d_max, d_i)`` transform that lifts its pruned
row to the common width, after which the usual FM dot products and MLP
input apply unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import Dataset
from .errors import ConfigError, DataError
from .model import AdamState, CTRModel, ModelConfig, _select, init_mlp, train
from .pruning import MixedDimTable

INIT_MODES = ("winning_ticket", "random")


@dataclass
class SlimOptions:
    init_mode: str = "winning_ticket"
    transform_init: str = "random"     # random | identity
    linear_init: str = "restore"       # restore | random
    mlp_init: str = "restore"          # restore | random

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")
        if self.transform_init not in ("random", "identity"):
            raise ConfigError(f"unknown transform_init {self.transform_init!r}")
        for name in ("linear_init", "mlp_init"):
            if getattr(self, name) not in ("restore", "random"):
                raise ConfigError(f"unknown {name} {getattr(self, name)!r}")


def build_slim(mixed: MixedDimTable, base: CTRModel, options: SlimOptions | None = None,
               seed: int = 0) -> tuple[CTRModel, dict]:
    """Slim model from a pruned table plus the pretrained interaction parameters.

    Returns the model and a provenance map naming how each parameter group
    was initialised.
    """
    opt = options or SlimOptions()
    if mixed.q < 2:
        raise DataError(f"insufficient fields: {mixed.q} retained, need at least 2")
    rng = np.random.default_rng(seed)
    dt = base.config.dtype
    d_max = mixed.d_max
    pos = {fid: k for k, fid in enumerate(base.field_ids)}
    src = [pos[fid] for fid in mixed.field_ids]

    if opt.init_mode == "winning_ticket":
        tables = [np.array(t, dtype=dt, copy=True) for t in mixed.tables]
    else:
        tables = [rng.uniform(-1 / math.sqrt(t.shape[1]), 1 / math.sqrt(t.shape[1]), size=t.shape).astype(dt)
                  for t in mixed.tables]

    if opt.transform_init == "identity":
        transforms = [np.eye(d_max, t.shape[1], dtype=dt) for t in tables]
    else:
        transforms = [rng.uniform(-1 / math.sqrt(t.shape[1]), 1 / math.sqrt(t.shape[1]),
                                  size=(d_max, t.shape[1])).astype(dt) for t in tables]

    if opt.linear_init == "restore":
        linear = [base.linear[k].copy() for k in src]
        bias = base.bias.copy()
    else:
        linear = [rng.uniform(-0.01, 0.01, size=base.linear[k].shape).astype(dt) for k in src]
        bias = np.zeros(1, dtype=dt)

    cfg = base.config
    mlp_w, mlp_b = [], []
    prov = {
        "embeddings": opt.init_mode,
        "transforms": opt.transform_init,
        "linear": "restored" if opt.linear_init == "restore" else "random",
    }
    if cfg.uses_mlp:
        fresh_w, fresh_b = init_mlp(rng, mixed.q * d_max, cfg.hidden, dt)
        same_layout = mixed.field_ids == base.field_ids and d_max == mixed.d
        restore = opt.mlp_init == "restore"
        for k in range(len(fresh_w)):
            ok = restore and base.mlp_w[k].shape == fresh_w[k].shape and (k > 0 or same_layout)
            mlp_w.append(base.mlp_w[k].copy() if ok else fresh_w[k])
            mlp_b.append(base.mlp_b[k].copy() if ok else fresh_b[k])
            if k == 0:
                prov["mlp_input"] = "restored" if ok else "random"
        if len(fresh_w) > 1:
            prov["mlp_hidden"] = "restored" if restore else "random"
    fusion_w = base.fusion_w.copy() if base.fusion_w is not None else None
    slim = CTRModel(ModelConfig(**cfg.__dict__), mixed.field_ids, [base.field_sizes[k] for k in src],
                    tables, linear, bias, mlp_w, mlp_b, transforms, fusion_w)
    return slim, prov


def align(model: CTRModel, batch) -> list[np.ndarray]:
    """Aligned embeddings ``M_i @ V_i[token]`` per retained field, each (N, d_max)."""
    if model.transforms is None:
        raise ConfigError("model has no transform matrices")
    X = _select(model, batch)
    return [model.tables[i][X[:, i]] @ model.transforms[i].T for i in range(model.num_fields)]


def interact_aligned(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def retrain(model: CTRModel, train_set: Dataset, valid: Dataset | None, epochs: int = 3,
            batch_size: int = 2048, lr: float = 0.001, seed: int = 0) -> tuple[CTRModel, list[dict]]:
    """Jointly train tables, transforms and interaction weights in place.

    ``epochs=0`` leaves the initialisation untouched (the no-retraining
    ablation).
    """
    history, _ = train(model, train_set, valid, epochs, batch_size, lr, seed, AdamState(lr=lr))
    return model, history
