"""Embedding tables with FM, Wide&Deep and DeepFM heads.

Forward and backward passes are written out by hand. The same
:class:`CTRModel` serves both the uniform-width pretrained model and the
slim model: when ``transforms`` is set, each field's row is projected to
the shared width by its own matrix before the interaction layer.

Gradients use the summed cross-entropy; embedding and linear-weight
gradients are sparse (only rows touched by the batch are returned).
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import kernels
from .dataio import Batch, Dataset, batch_iter
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

ARCHITECTURES = ("FM", "WideDeep", "DeepFM")
P_CLAMP = 1e-7


@dataclass
class ModelConfig:
    architecture: str = "DeepFM"
    d: int = 128
    hidden: tuple[int, ...] = (1024, 1024)
    fusion: str = "sum"
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.d < 1:
            raise ConfigError("embedding dimension d must be >= 1")
        if self.fusion not in ("sum", "concat"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def uses_fm(self) -> bool:
        return self.architecture in ("FM", "DeepFM")

    @property
    def uses_mlp(self) -> bool:
        return self.architecture in ("WideDeep", "DeepFM")

    @property
    def uses_fusion_weights(self) -> bool:
        return self.architecture == "DeepFM" and self.fusion == "concat"


class CTRModel:
    """Parameters of one CTR model.

    ``field_ids`` selects the dataset columns this model reads; a slim model
    that dropped fields simply lists fewer of them.
    """

    def __init__(self, config: ModelConfig, field_ids, field_sizes, tables, linear, bias,
                 mlp_w=(), mlp_b=(), transforms=None, fusion_w=None):
        self.config = config
        self.field_ids = [int(f) for f in field_ids]
        self.field_sizes = [int(n) for n in field_sizes]
        self.tables = list(tables)
        self.linear = list(linear)
        self.bias = bias
        self.mlp_w = list(mlp_w)
        self.mlp_b = list(mlp_b)
        self.transforms = None if transforms is None else list(transforms)
        self.fusion_w = fusion_w
        self.version = 0
        self.step = 0
        self.n_forward = 0
        self.n_backward = 0

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def dims(self) -> list[int]:
        return [t.shape[1] for t in self.tables]

    @property
    def width(self) -> int:
        """Width of the vectors entering the interaction layer."""
        if self.transforms is not None:
            return self.transforms[0].shape[0] if self.transforms else 0
        return self.tables[0].shape[1] if self.tables else 0

    @property
    def num_fields(self) -> int:
        return len(self.tables)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"V/{i}", t) for i, t in enumerate(self.tables)]
        out += [(f"w/{i}", w) for i, w in enumerate(self.linear)]
        out.append(("bias", self.bias))
        if self.transforms is not None:
            out += [(f"M/{i}", m) for i, m in enumerate(self.transforms)]
        for k, (w, b) in enumerate(zip(self.mlp_w, self.mlp_b)):
            out += [(f"mlp/W{k}", w), (f"mlp/b{k}", b)]
        if self.fusion_w is not None:
            out.append(("fusion", self.fusion_w))
        return out

    def parameter(self, name: str) -> np.ndarray:
        return dict(self.named_parameters())[name]

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding traces."""
        self.version += 1

    def copy(self) -> "CTRModel":
        return copy.deepcopy(self)

    def astype(self, dtype: str) -> "CTRModel":
        """Copy with every parameter cast, e.g. to float64 for gradient checks."""
        out = self.copy()
        out.config = ModelConfig(**{**self.config.__dict__, "dtype": dtype})
        cast = lambda a: np.ascontiguousarray(a, dtype=dtype)  # noqa: E731
        out.tables = [cast(t) for t in out.tables]
        out.linear = [cast(w) for w in out.linear]
        out.bias = cast(out.bias)
        out.mlp_w = [cast(w) for w in out.mlp_w]
        out.mlp_b = [cast(b) for b in out.mlp_b]
        if out.transforms is not None:
            out.transforms = [cast(m) for m in out.transforms]
        if out.fusion_w is not None:
            out.fusion_w = cast(out.fusion_w)
        out.touch()
        return out


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_mlp(rng: np.random.Generator, in_width: int, hidden: Iterable[int], dtype):
    widths = [in_width, *hidden, 1]
    ws, bs = [], []
    for k in range(len(widths) - 1):
        fan_in, fan_out = widths[k], widths[k + 1]
        bound = math.sqrt(6.0 / fan_in) if k < len(widths) - 2 else math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(_uniform(rng, (fan_in, fan_out), bound, dtype))
        bs.append(np.zeros(fan_out, dtype=dtype))
    return ws, bs


def init_model(config: ModelConfig, field_sizes: list[int], seed: int = 0,
               field_ids: list[int] | None = None) -> CTRModel:
    """Uniform-width model; tables ~ U(-1/sqrt(d), 1/sqrt(d))."""
    if not field_sizes:
        raise ConfigError("model needs at least one field")
    rng = np.random.default_rng(seed)
    dt = config.dtype
    bound = 1.0 / math.sqrt(config.d)
    tables = [_uniform(rng, (n, config.d), bound, dt) for n in field_sizes]
    linear = [_uniform(rng, (n,), 0.01, dt) for n in field_sizes]
    bias = np.zeros(1, dtype=dt)
    mlp_w, mlp_b = ([], [])
    if config.uses_mlp:
        mlp_w, mlp_b = init_mlp(rng, len(field_sizes) * config.d, config.hidden, dt)
    fusion_w = np.ones(2, dtype=dt) if config.uses_fusion_weights else None
    ids = list(range(len(field_sizes))) if field_ids is None else field_ids
    return CTRModel(config, ids, field_sizes, tables, linear, bias, mlp_w, mlp_b, None, fusion_w)


# ---------------------------------------------------------------- forward


@dataclass
class ForwardTrace:
    version: int
    tokens: np.ndarray          # (N, q) columns selected by the model
    rows: list                  # raw table rows per field, (N, d_i)
    scaled: list                # rows after the slot mask, (N, d_i)
    E: np.ndarray               # aligned embeddings, (N, q, D)
    S: np.ndarray | None        # sum over fields of E, FM only
    fm: np.ndarray | None
    acts: list = field(default_factory=list)   # MLP inputs to each layer
    mlp_out: np.ndarray | None = None
    z: np.ndarray | None = None
    p: np.ndarray | None = None
    alpha: list | None = None


def _tokens_of(batch) -> np.ndarray:
    return batch.tokens if hasattr(batch, "tokens") else np.asarray(batch)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _select(model: CTRModel, batch) -> np.ndarray:
    X = np.ascontiguousarray(_tokens_of(batch)[:, model.field_ids], dtype=np.int64)
    for i, n in enumerate(model.field_sizes):
        col = X[:, i]
        if len(col) and (col.min() < 0 or col.max() >= n):
            raise DataError(f"token out of range for field {model.field_ids[i]}")
    return X


def embed_lookup(model: CTRModel, batch) -> list[np.ndarray]:
    """Per-field embedding rows for the batch, one (N, d_i) array per field."""
    X = _select(model, batch)
    return [model.tables[i][X[:, i]] for i in range(model.num_fields)]


def forward(model: CTRModel, batch, alpha: list | None = None) -> tuple[np.ndarray, ForwardTrace]:
    """Predicted click probabilities and the cache needed by :func:`backward`.

    ``alpha`` optionally scales each field's dimensions (one vector of length
    d_i per field), which is how slot gradients and masking oracles are
    evaluated.
    """
    cfg = model.config
    dt = model.dtype
    X = _select(model, batch)
    n = len(X)
    rows = [model.tables[i][X[:, i]] for i in range(model.num_fields)]
    if alpha is not None:
        scaled = [r * np.asarray(a, dtype=dt) for r, a in zip(rows, alpha)]
    else:
        scaled = rows
    if model.transforms is not None:
        aligned = [s @ m.T for s, m in zip(scaled, model.transforms)]
    else:
        if len(set(model.dims)) > 1:
            raise NumericalError("mixed field widths need transform matrices")
        aligned = scaled
    width = model.width
    E = np.empty((n, model.num_fields, width), dtype=dt)
    for i, a in enumerate(aligned):
        E[:, i, :] = a

    z = np.full(n, model.bias[0], dtype=dt)
    for i, w in enumerate(model.linear):
        z += w[X[:, i]]

    S = fm = None
    if cfg.uses_fm:
        fm, S = kernels.fm_forward(E)
    acts: list = []
    mlp_out = None
    if cfg.uses_mlp:
        h = E.reshape(n, -1)
        last = len(model.mlp_w) - 1
        for k, (w, b) in enumerate(zip(model.mlp_w, model.mlp_b)):
            acts.append(h)
            a = h @ w + b
            h = np.maximum(a, 0) if k < last else a
        mlp_out = h[:, 0]

    if cfg.uses_fusion_weights:
        z += model.fusion_w[0] * fm + model.fusion_w[1] * mlp_out
    else:
        if fm is not None:
            z += fm
        if mlp_out is not None:
            z += mlp_out
    if not np.all(np.isfinite(z)):
        raise NumericalError("numerical blowup")
    p = np.clip(sigmoid(z), P_CLAMP, 1 - P_CLAMP)
    model.n_forward += 1
    trace = ForwardTrace(model.version, X, rows, scaled, E, S, fm, acts, mlp_out, z, p,
                         None if alpha is None else [np.asarray(a, dtype=dt) for a in alpha])
    return p, trace


def loss(p: np.ndarray, y: np.ndarray, reduction: str = "sum") -> float:
    """Binary cross-entropy; ``sum`` matches the training objective."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    terms = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    total = float(terms.sum())
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / max(len(p), 1)
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------- backward


@dataclass
class Gradients:
    tables: list                 # per field: (rows, (U, d_i) values)
    linear: list                 # per field: (rows, (U,) values)
    dense: dict                  # name -> dense gradient
    alpha: list | None = None    # per field: (d_i,) gradient wrt the slot mask

    def sparse_items(self):
        for i, (rows, vals) in enumerate(self.tables):
            yield f"V/{i}", rows, vals
        for i, (rows, vals) in enumerate(self.linear):
            yield f"w/{i}", rows, vals

    def to_dense(self, model: CTRModel) -> dict[str, np.ndarray]:
        out = {}
        for name, rows, vals in self.sparse_items():
            g = np.zeros_like(model.parameter(name))
            g[rows] = vals
            out[name] = g
        out.update(self.dense)
        return out


def _sparse_rows(col: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    rows, inv = np.unique(col, return_inverse=True)
    out = np.zeros((len(rows), vals.shape[1]), dtype=vals.dtype)
    kernels.scatter_add_rows(out, np.ascontiguousarray(inv, dtype=np.int64), np.ascontiguousarray(vals))
    return rows, out


def backward(model: CTRModel, batch, trace: ForwardTrace) -> Gradients:
    """Exact gradients of the summed loss for the batch used in ``trace``."""
    if trace.version != model.version:
        raise NumericalError("stale trace: parameters changed since forward")
    X = np.ascontiguousarray(_tokens_of(batch)[:, model.field_ids], dtype=np.int64)
    if X.shape != trace.tokens.shape or not np.array_equal(X, trace.tokens):
        raise NumericalError("stale trace: batch differs from the forward batch")
    cfg = model.config
    dt = model.dtype
    n, q, width = trace.E.shape
    y = np.asarray(batch.labels, dtype=dt)
    dz = sigmoid(trace.z) - y

    dense: dict[str, np.ndarray] = {"bias": np.array([dz.sum()], dtype=dt)}
    linear = [_sparse_rows(X[:, i], dz[:, None]) for i in range(q)]
    linear = [(r, v[:, 0]) for r, v in linear]

    dE = np.zeros((n, q, width), dtype=dt)
    if cfg.uses_fusion_weights:
        dense["fusion"] = np.array([(dz * trace.fm).sum(), (dz * trace.mlp_out).sum()], dtype=dt)
        d_fm = dz * model.fusion_w[0]
        d_mlp = dz * model.fusion_w[1]
    else:
        d_fm = d_mlp = dz
    if cfg.uses_fm:
        dE += kernels.fm_backward(trace.E, trace.S, np.ascontiguousarray(d_fm))
    if cfg.uses_mlp:
        g = d_mlp[:, None]
        for k in range(len(model.mlp_w) - 1, -1, -1):
            h = trace.acts[k]
            dense[f"mlp/W{k}"] = h.T @ g
            dense[f"mlp/b{k}"] = g.sum(axis=0)
            g = g @ model.mlp_w[k].T
            if k > 0:
                g = g * (h > 0)
        dE += g.reshape(n, q, width)

    d_scaled = []
    for i in range(q):
        dA = dE[:, i, :]
        if model.transforms is not None:
            dense[f"M/{i}"] = dA.T @ trace.scaled[i]
            d_scaled.append(dA @ model.transforms[i])
        else:
            d_scaled.append(dA)

    alpha_grad = None
    if trace.alpha is not None:
        if model.transforms is None:
            # uniform widths: one fused reduction over (N, q, d)
            rows = np.stack(trace.rows, axis=1)
            alpha_grad = list(kernels.slot_grad_reduce(np.ascontiguousarray(dE), rows))
        else:
            alpha_grad = [(ds * r).sum(axis=0) for ds, r in zip(d_scaled, trace.rows)]
        d_scaled = [ds * a for ds, a in zip(d_scaled, trace.alpha)]
    tables = [_sparse_rows(X[:, i], d_scaled[i]) for i in range(q)]

    for name, g in list(dense.items()):
        if name.startswith("mlp/"):
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {name}")
    model.n_backward += 1
    return Gradients(tables, linear, dense, alpha_grad)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _as_2d(a: np.ndarray) -> np.ndarray:
    if a.ndim == 1:
        return a.reshape(-1, 1)
    if a.ndim == 2:
        return a
    return a.reshape(1, -1)


def adam_step(model: CTRModel, grads: Gradients, state: AdamState) -> None:
    """Bias-corrected Adam. Embedding and linear rows absent from the batch
    keep both their values and their moments (lazy update)."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
    hp = (state.lr, state.beta1, state.beta2, state.eps, bc1, bc2)
    for name, rows, vals in grads.sparse_items():
        p = params[name]
        kernels.sparse_adam(_as_2d(p), np.ascontiguousarray(rows, dtype=np.int64),
                            np.ascontiguousarray(_as_2d(vals), dtype=p.dtype),
                            _as_2d(state.m[name]), _as_2d(state.v[name]), *hp)
    one = np.zeros(1, dtype=np.int64)
    for name, g in grads.dense.items():
        p = params[name]
        p2 = p.reshape(1, -1)
        kernels.sparse_adam(p2, one, np.ascontiguousarray(g, dtype=p.dtype).reshape(1, -1),
                            state.m[name].reshape(1, -1), state.v[name].reshape(1, -1), *hp)
    model.step += 1
    model.touch()


# ---------------------------------------------------------------- training


def predict(model: CTRModel, data: Dataset, batch_size: int = 4096) -> np.ndarray:
    out = np.empty(len(data), dtype=model.dtype)
    for start in range(0, len(data), batch_size):
        p, _ = forward(model, data.tokens[start: start + batch_size])
        out[start: start + batch_size] = p
    return out


def evaluate(model: CTRModel, data: Dataset, batch_size: int = 4096) -> dict:
    from .evaluation import auc

    p = predict(model, data, batch_size)
    return {"auc": auc(p, data.labels), "logloss": loss(p, data.labels, "mean")}


def train(model: CTRModel, train_set: Dataset, valid: Dataset | None, epochs: int,
          batch_size: int = 2048, lr: float = 0.001, seed: int = 0,
          state: AdamState | None = None) -> tuple[list[dict], AdamState]:
    """Minibatch Adam over ``epochs`` passes; returns per-epoch metrics.

    ``epochs=0`` is allowed here (it returns the model untouched).
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    state = state or AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for batch in batch_iter(train_set, batch_size, seed=seed + epoch, shuffle=True):
            p, trace = forward(model, batch)
            batch_loss = loss(p, batch.labels)
            if not math.isfinite(batch_loss):
                raise NumericalError(f"divergence at epoch {epoch}")
            grads = backward(model, batch, trace)
            adam_step(model, grads, state)
            total += batch_loss
        entry = {"epoch": epoch + 1, "train_loss": total / max(len(train_set), 1)}
        if valid is not None and len(valid):
            ev = evaluate(model, valid)
            entry.update(valid_auc=ev["auc"], valid_logloss=ev["logloss"])
        log.info("epoch %d: %s", epoch + 1, entry)
        history.append(entry)
    return history, state


def pretrain(model: CTRModel, train_set: Dataset, valid: Dataset | None, epochs: int = 3,
             batch_size: int = 2048, lr: float = 0.001, seed: int = 0) -> tuple[list[dict], AdamState]:
    if epochs < 1:
        raise ConfigError("pretraining needs epochs >= 1")
    return train(model, train_set, valid, epochs, batch_size, lr, seed)
