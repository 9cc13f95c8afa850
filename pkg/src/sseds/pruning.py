"""Single-shot slot saliency, budgeted mask selection and table extraction.

A slot is one (field, dimension) pair. Its gradient is the derivative of the
batch loss with respect to a multiplicative mask on that column of the
field's table, evaluated at mask = 1; one forward and one backward pass give
all of them at once.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .dataio import Batch, Dataset
from .errors import ConfigError, DataError, NumericalError
from .model import CTRModel, backward, forward, loss

log = logging.getLogger(__name__)


@dataclass
class PassCounter:
    forward_backward: int = 0


@dataclass
class PruneMask:
    mask: np.ndarray             # (m, d) bool
    threshold: float | None      # saliency of the last kept slot
    kappa: float
    total_params: int
    budget: int
    kept_params: int
    mode: str = "weighted"
    order: list = field(default_factory=list)  # slot ranking, flat indices


@dataclass
class MixedDimTable:
    field_ids: list[int]          # retained fields (original ids)
    tables: list[np.ndarray]      # (n_i, d_i) per retained field
    kept_dims: list[np.ndarray]   # per original field, possibly empty
    field_sizes: list[int]        # n_i per original field
    d: int

    @property
    def q(self) -> int:
        return len(self.field_ids)

    @property
    def dims(self) -> list[int]:
        return [t.shape[1] for t in self.tables]

    @property
    def d_max(self) -> int:
        return max(self.dims, default=0)

    @property
    def removed_fields(self) -> list[int]:
        return [i for i, k in enumerate(self.kept_dims) if len(k) == 0]

    @property
    def n_params(self) -> int:
        return int(sum(t.size for t in self.tables))


def _check_uniform(model: CTRModel) -> int:
    if model.transforms is not None or len(set(model.dims)) != 1:
        raise ConfigError("slot saliency needs a uniform-width pretrained model")
    return model.dims[0]


def compute_slot_gradients(model: CTRModel, batches: Batch | Sequence[Batch],
                           counter: PassCounter | None = None,
                           require_trained: bool = True) -> np.ndarray:
    """(m, d) matrix of dL/d(alpha_ij) at alpha = 1.

    With several batches the per-batch gradients are averaged; each batch
    costs one forward-backward pass.
    """
    if model.num_fields == 0:
        raise NumericalError("empty model")
    if require_trained and model.step == 0:
        raise NumericalError("model has not been trained")
    d = _check_uniform(model)
    if isinstance(batches, Batch):
        batches = [batches]
    if not batches or any(len(b) == 0 for b in batches):
        raise DataError("saliency batch is empty")
    ones = [np.ones(d, dtype=model.dtype) for _ in range(model.num_fields)]
    total = np.zeros((model.num_fields, d), dtype=np.float64)
    for b in batches:
        _, trace = forward(model, b, alpha=ones)
        grads = backward(model, b, trace)
        total += np.stack(grads.alpha)
        if counter is not None:
            counter.forward_backward += 1
    return total / len(batches)


def table_chain_rule_gradients(model: CTRModel, batch: Batch) -> np.ndarray:
    """Same quantity via sum_t V[t, j] * dL/dV[t, j] over the sparse table gradient."""
    d = _check_uniform(model)
    _, trace = forward(model, batch)
    grads = backward(model, batch, trace)
    out = np.zeros((model.num_fields, d), dtype=np.float64)
    for i, (rows, vals) in enumerate(grads.tables):
        out[i] = (model.tables[i][rows] * vals).sum(axis=0)
    return out


def _masked_loss(model: CTRModel, batch: Batch, i: int, j: int, scale: float) -> float:
    d = _check_uniform(model)
    alpha = [np.ones(d, dtype=model.dtype) for _ in range(model.num_fields)]
    alpha[i][j] = scale
    p, _ = forward(model, batch, alpha=alpha)
    return loss(p, batch.labels)


def finite_diff_oracle(model: CTRModel, batch: Batch, i: int, j: int, delta: float) -> float:
    """(L(alpha=1) - L(alpha_ij = 1 - delta)) / delta from two forward passes."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    base = _masked_loss(model, batch, i, j, 1.0)
    return (base - _masked_loss(model, batch, i, j, 1.0 - delta)) / delta


def exact_loss_change(model: CTRModel, batch: Batch, i: int, j: int) -> float:
    """Loss change from zeroing slot (i, j) outright."""
    return _masked_loss(model, batch, i, j, 1.0) - _masked_loss(model, batch, i, j, 0.0)


def saliency(g: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(g, dtype=np.float64))
    total = a.sum()
    if not np.isfinite(total):
        raise NumericalError("non-finite slot gradients")
    if total == 0:
        raise NumericalError("degenerate saliency: all slot gradients are zero")
    return a / total


def _budget(kappa: float, total: int) -> int:
    # exact decimal arithmetic so e.g. 0.29 * 100 is 29, not 28.999...
    return int(Fraction(str(kappa)) * total)


def select_mask(s: np.ndarray, field_sizes: Sequence[int], kappa: float,
                mode: str = "weighted") -> PruneMask:
    """Keep the highest-saliency slots until the budget would be exceeded.

    Slots are ranked by saliency descending, ties by ascending (field, dim).
    ``weighted`` charges each slot its field's vocabulary size and stops at
    the first slot that no longer fits, so the kept set is a prefix of the
    ranking. ``quantile`` keeps the top ``floor(kappa * m * d)`` slots
    regardless of their cost.
    """
    if not 0 < kappa <= 1:
        raise ConfigError("kappa must lie in (0, 1]")
    s = np.asarray(s, dtype=np.float64)
    m, d = s.shape
    sizes = [int(n) for n in field_sizes]
    if len(sizes) != m:
        raise ConfigError("field_sizes does not match saliency rows")
    flat = s.ravel()
    order = sorted(range(m * d), key=lambda k: (-flat[k], k))
    total = d * sum(sizes)
    mask = np.zeros(m * d, dtype=bool)
    kept = 0
    if mode == "weighted":
        budget = _budget(kappa, total)
        for k in order:
            cost = sizes[k // d]
            if kept + cost > budget:
                break
            mask[k] = True
            kept += cost
    elif mode == "quantile":
        budget = _budget(kappa, m * d)
        for k in order[:budget]:
            mask[k] = True
            kept += sizes[k // d]
    else:
        raise ConfigError(f"unknown selection mode {mode!r}")
    n_kept = int(mask.sum())
    if n_kept == 0:
        warnings.warn("parameter budget admits no slot; every field is pruned", RuntimeWarning)
    threshold = float(flat[order[n_kept - 1]]) if n_kept else None
    return PruneMask(mask.reshape(m, d), threshold, kappa, total, budget, kept, mode, order)


def apply_mask(model: CTRModel, pm: PruneMask) -> MixedDimTable:
    """Copy the kept columns of each field; fields with none left are dropped."""
    d = _check_uniform(model)
    if pm.mask.shape != (model.num_fields, d):
        raise ConfigError("mask shape does not match the embedding tables")
    kept_dims, ids, tables = [], [], []
    for i in range(model.num_fields):
        cols = np.flatnonzero(pm.mask[i])
        kept_dims.append(cols)
        if len(cols):
            ids.append(model.field_ids[i])
            tables.append(np.ascontiguousarray(model.tables[i][:, cols]))
    return MixedDimTable(ids, tables, kept_dims, list(model.field_sizes), d)


def draw_saliency_batches(train: Dataset, batch_size: int, k: int = 1, seed: int = 0) -> list[Batch]:
    """``k`` disjoint batches sampled without replacement from the training split."""
    if k < 1:
        raise ConfigError("need at least one saliency batch")
    n = len(train)
    if n == 0:
        raise DataError("training split is empty")
    perm = np.random.default_rng(seed).permutation(n)
    out = []
    for b in range(k):
        idx = perm[b * batch_size: (b + 1) * batch_size]
        if len(idx) == 0:
            break
        out.append(Batch(train.tokens[idx], train.labels[idx], b))
    return out


def prune_report(model: CTRModel, s: np.ndarray, pm: PruneMask, mixed: MixedDimTable,
                 passes: int, field_names: Sequence[str] | None = None) -> dict:
    fields = []
    for i, fid in enumerate(model.field_ids):
        entry = {
            "field_id": fid,
            "n_i": model.field_sizes[i],
            "d_i": int(len(mixed.kept_dims[i])),
            "kept_dims": [int(j) for j in mixed.kept_dims[i]],
        }
        if field_names is not None:
            entry["name"] = field_names[i]
        fields.append(entry)
    # the slim model adds one (d_max, d_i) transform per retained field
    transform_params = int(sum(mixed.d_max * di for di in mixed.dims))
    pruned_params = pm.total_params - mixed.n_params
    return {
        "version": 1,
        "kappa": pm.kappa,
        "mode": pm.mode,
        "total_params": pm.total_params,
        "budget": pm.budget,
        "kept_params": pm.kept_params,
        "pruned_slots": int((~pm.mask).sum()),
        "pruned_params": pruned_params,
        "transform_params": transform_params,
        "transform_below_pruned": transform_params < pruned_params,
        "threshold": pm.threshold,
        "d": mixed.d,
        "d_max": mixed.d_max,
        "q": mixed.q,
        "fields": fields,
        "removed_fields": [model.field_ids[i] for i in mixed.removed_fields],
        "saliency": np.asarray(s, dtype=np.float64).tolist(),
        "forward_backward_passes": passes,
    }
