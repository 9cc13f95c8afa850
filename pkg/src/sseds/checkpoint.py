"""Binary checkpoint container.

Layout (little-endian)::

    b"SSED" | u32 version | u8 kind | u8 dtype | u16+arch tag | u32+JSON meta
    u32 field count, then (u32 field_id, u32 n_i, u32 d_i) per field
    embedding tables, row-major
    u32 count of named arrays (linear weights, bias, MLP, fusion)
    u32 count of transform matrices, each (u32 rows, u32 cols, data)
    u8 count of provenance flags, each (u8+name, u8 flag)
    u8 optimizer flag [+ u64 step, 4 x f64 hyperparameters, moments]
    u32 CRC32 of everything above

A mixed checkpoint (output of pruning) stores every original field; removed
fields carry a zero-width table. Their kept-column indices live in the JSON
meta block.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import AdamState, CTRModel, ModelConfig
from .pruning import MixedDimTable

MAGIC = b"SSED"
VERSION = 1
KINDS = ("pretrained", "mixed", "slim")
DTYPES = ("float32", "float64")
FLAG_CODES = {"winning_ticket": 0, "restored": 0, "random": 1, "identity": 2}


@dataclass
class Checkpoint:
    kind: str
    model: CTRModel
    meta: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    adam: AdamState | None = None
    mixed: MixedDimTable | None = None


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *vals) -> None:
        self.parts.append(struct.pack("<" + fmt, *vals))

    def text(self, s: str, width: str = "H") -> None:
        b = s.encode("utf-8")
        self.pack(width, len(b))
        self.parts.append(b)

    def array(self, a: np.ndarray, dtype: str) -> None:
        self.parts.append(np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())

    def named(self, name: str, a: np.ndarray, dtype: str) -> None:
        self.text(name)
        self.pack("B", a.ndim)
        for s in a.shape:
            self.pack("I", s)
        self.array(a, dtype)

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def unpack(self, fmt: str):
        vals = struct.unpack_from("<" + fmt, self.buf, self.off)
        self.off += struct.calcsize("<" + fmt)
        return vals if len(vals) > 1 else vals[0]

    def text(self, width: str = "H") -> str:
        n = self.unpack(width)
        s = self.buf[self.off: self.off + n].decode("utf-8")
        self.off += n
        return s

    def array(self, shape, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64))
        a = np.frombuffer(self.buf, dtype=dt, count=count, offset=self.off).reshape(shape)
        self.off += count * dt.itemsize
        return a.astype(dtype)

    def named(self, dtype: str) -> tuple[str, np.ndarray]:
        name = self.text()
        ndim = self.unpack("B")
        shape = tuple(self.unpack("I") for _ in range(ndim))
        return name, self.array(shape, dtype)


def _theta(model: CTRModel) -> list[tuple[str, np.ndarray]]:
    return [(n, p) for n, p in model.named_parameters() if not n.startswith(("V/", "M/"))]


def _write(path, kind: str, model: CTRModel, meta: dict, provenance: dict | None,
           adam: AdamState | None) -> None:
    dt = model.config.dtype
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("IBB", VERSION, KINDS.index(kind), DTYPES.index(dt))
    w.text(model.config.architecture)
    cfg = {"d": model.config.d, "hidden": list(model.config.hidden), "fusion": model.config.fusion,
           "step": model.step}
    w.text(json.dumps({"config": cfg, **meta}, sort_keys=True), "I")
    w.pack("I", model.num_fields)
    for fid, n, t in zip(model.field_ids, model.field_sizes, model.tables):
        w.pack("III", fid, n, t.shape[1])
    for t in model.tables:
        w.array(t, dt)
    theta = _theta(model)
    w.pack("I", len(theta))
    for name, p in theta:
        w.named(name, p, dt)
    transforms = model.transforms or []
    w.pack("I", len(transforms))
    for m in transforms:
        w.pack("II", *m.shape)
        w.array(m, dt)
    prov = provenance or {}
    w.pack("B", len(prov))
    for name in sorted(prov):
        w.text(name, "B")
        w.pack("B", FLAG_CODES[prov[name]])
    if adam is None:
        w.pack("B", 0)
    else:
        w.pack("B", 1)
        w.pack("Qdddd", adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps)
        names = [n for n, _ in model.named_parameters() if n in adam.m]
        w.pack("I", len(names))
        for n in names:
            w.named(n + "#m", adam.m[n], dt)
            w.named(n + "#v", adam.v[n], dt)
    Path(path).write_bytes(w.finish())


def save_model(path, model: CTRModel, kind: str = "pretrained", provenance: dict | None = None,
               adam: AdamState | None = None, meta: dict | None = None) -> None:
    if kind not in ("pretrained", "slim"):
        raise ValueError(f"use save_mixed for kind {kind!r}")
    _write(path, kind, model, meta or {}, provenance, adam)


def save_mixed(path, mixed: MixedDimTable, base: CTRModel, meta: dict | None = None) -> None:
    """Pruned tables plus the pretrained non-embedding parameters."""
    tables = []
    it = iter(mixed.tables)
    for cols, n in zip(mixed.kept_dims, base.field_sizes):
        tables.append(next(it) if len(cols) else np.zeros((n, 0), dtype=base.dtype))
    holder = CTRModel(base.config, base.field_ids, base.field_sizes, tables, base.linear, base.bias,
                      base.mlp_w, base.mlp_b, None, base.fusion_w)
    holder.step = base.step
    info = {"d": mixed.d, "kept_dims": [[int(j) for j in k] for k in mixed.kept_dims], **(meta or {})}
    _write(path, "mixed", holder, info, None, None)


def _decode_flag(group: str, code: int) -> str:
    if code == 0:
        return "winning_ticket" if group == "embeddings" else "restored"
    return {1: "random", 2: "identity"}[code]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise DataError(f"{path}: CRC mismatch, file is corrupt")
    r = _Reader(buf[:-4])
    r.off = 4
    version, kind_code, dt_code = r.unpack("IBB")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    kind, dt = KINDS[kind_code], DTYPES[dt_code]
    arch = r.text()
    meta = json.loads(r.text("I"))
    cfgd = meta.pop("config")
    config = ModelConfig(arch, cfgd["d"], tuple(cfgd["hidden"]), cfgd["fusion"], dt)
    q = r.unpack("I")
    heads = [r.unpack("III") for _ in range(q)]
    tables = [r.array((n, d), dt) for _, n, d in heads]
    theta = dict(r.named(dt) for _ in range(r.unpack("I")))
    transforms = []
    for _ in range(r.unpack("I")):
        rows, cols = r.unpack("II")
        transforms.append(r.array((rows, cols), dt))
    provenance = {}
    for _ in range(r.unpack("B")):
        name = r.text("B")
        provenance[name] = _decode_flag(name, r.unpack("B"))
    adam = None
    if r.unpack("B"):
        t, lr, b1, b2, eps = r.unpack("Qdddd")
        adam = AdamState(lr, b1, b2, eps, t)
        for _ in range(r.unpack("I")):
            n_m, m = r.named(dt)
            n_v, v = r.named(dt)
            adam.m[n_m[:-2]] = m
            adam.v[n_v[:-2]] = v
    if r.off != len(r.buf):
        raise DataError(f"{path}: trailing bytes in checkpoint")

    n_hidden = sum(1 for k in theta if k.startswith("mlp/W"))
    model = CTRModel(
        config,
        [h[0] for h in heads],
        [h[1] for h in heads],
        tables,
        [theta[f"w/{i}"] for i in range(q)],
        theta["bias"],
        [theta[f"mlp/W{k}"] for k in range(n_hidden)],
        [theta[f"mlp/b{k}"] for k in range(n_hidden)],
        transforms if kind == "slim" else None,
        theta.get("fusion"),
    )
    model.step = cfgd.get("step", 0)
    ck = Checkpoint(kind, model, meta, provenance, adam)
    if kind == "mixed":
        kept = [np.asarray(k, dtype=np.int64) for k in meta["kept_dims"]]
        ck.mixed = MixedDimTable(
            [fid for fid, k in zip(model.field_ids, kept) if len(k)],
            [t for t, k in zip(tables, kept) if len(k)],
            kept,
            list(model.field_sizes),
            int(meta["d"]),
        )
    return ck
