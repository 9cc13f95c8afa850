"""Raw log ingestion, vocabularies, splitting, batching and the encoded cache.

Every categorical field is encoded into contiguous ids ``[0, n_i)``. Id 0 of
each field is reserved for the merged bucket of low-frequency, missing and
unseen tokens ("others"). Numeric fields are bucketed by
:func:`transform_numeric` and then treated as categorical.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DataError

OTHERS = "<others>"
OTHERS_ID = 0
NEGATIVE_BUCKET = -1

CACHE_MAGIC = b"SSDS"
CACHE_VERSION = 1
TAGS = ("train", "valid", "test", "all")

CRITEO_NUMERIC = 13
CRITEO_CATEGORICAL = 26
AVAZU_CATEGORICAL = 22


@dataclass(frozen=True)
class FieldSchema:
    field_id: int
    kind: str  # "categorical" | "numeric"
    name: str


def make_schema(names: Sequence[str], kinds: Sequence[str] | None = None) -> list[FieldSchema]:
    if not names:
        raise DataError("schema needs at least one field")
    kinds = kinds or ["categorical"] * len(names)
    return [FieldSchema(i, k, n) for i, (n, k) in enumerate(zip(names, kinds))]


def criteo_schema() -> list[FieldSchema]:
    names = [f"I{i}" for i in range(1, CRITEO_NUMERIC + 1)]
    names += [f"C{i}" for i in range(1, CRITEO_CATEGORICAL + 1)]
    kinds = ["numeric"] * CRITEO_NUMERIC + ["categorical"] * CRITEO_CATEGORICAL
    return make_schema(names, kinds)


@dataclass
class Vocabulary:
    """Per-field token -> id maps; id 0 of every field is ``OTHERS``."""

    maps: list[dict[str, int]]
    min_freq: int = 10

    @property
    def sizes(self) -> list[int]:
        return [len(m) for m in self.maps]

    def encode(self, field_id: int, token: str | None) -> int:
        if token is None or token == "":
            return OTHERS_ID
        return self.maps[field_id].get(token, OTHERS_ID)

    def to_json(self) -> dict:
        return {"min_freq": self.min_freq, "fields": self.maps}

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        return cls([dict(m) for m in doc["fields"]], int(doc["min_freq"]))


def build_vocab(columns: Sequence[Iterable[str | None]], min_freq: int = 10) -> Vocabulary:
    """Build one vocabulary per field from raw token streams.

    Tokens seen fewer than ``min_freq`` times (and missing values) share id 0.
    Surviving tokens are numbered by descending count, ties by token string,
    so the result does not depend on stream order.
    """
    if min_freq < 1:
        raise DataError("min_freq must be >= 1")
    maps = []
    for i, stream in enumerate(columns):
        counts = Counter()
        seen = 0
        for tok in stream:
            seen += 1
            if tok is not None and tok != "":
                counts[tok] += 1
        if seen == 0:
            raise DataError(f"empty field {i}")
        kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        mapping = {OTHERS: OTHERS_ID}
        for tok in kept:
            mapping[tok] = len(mapping)
        maps.append(mapping)
    return Vocabulary(maps, min_freq)


def transform_numeric(x: float, log_base: str = "e") -> int:
    """Bucket a raw numeric value.

    ``x <= 2`` keeps ``floor(x)``; larger values map to ``floor(log(x)**2)``
    with the configured base ("e", "2" or "10"). Negative inputs go to a
    sentinel bucket.
    """
    if not math.isfinite(x):
        raise DataError(f"invalid numeric {x!r}")
    if x < 0:
        return NEGATIVE_BUCKET
    if x <= 2:
        return int(math.floor(x))
    if log_base == "e":
        lg = math.log(x)
    elif log_base == "2":
        lg = math.log2(x)
    elif log_base == "10":
        lg = math.log10(x)
    else:
        raise DataError(f"unknown log base {log_base!r}")
    return int(math.floor(lg * lg))


class Record(NamedTuple):
    tokens: tuple[int, ...]
    label: int


@dataclass
class Dataset:
    """Encoded records stored column-packed: ``tokens`` is (N, m)."""

    tokens: np.ndarray
    labels: np.ndarray
    schema: list[FieldSchema]
    field_sizes: list[int]
    tag: str = "all"

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(self.tokens, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.tokens.ndim != 2 or self.tokens.shape[1] != len(self.schema):
            raise DataError("token matrix does not match schema width")
        if len(self.labels) != len(self.tokens):
            raise DataError("labels and tokens differ in length")
        if len(self.field_sizes) != len(self.schema):
            raise DataError("field_sizes does not match schema")
        if len(self.tokens):
            if self.tokens.min() < 0 or np.any(self.tokens.max(axis=0) >= np.asarray(self.field_sizes)):
                raise DataError("token id out of range for its field")
            if self.labels.max() > 1:
                raise DataError("labels must be 0/1")

    @property
    def num_fields(self) -> int:
        return len(self.schema)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, idx: int) -> Record:
        return Record(tuple(int(t) for t in self.tokens[idx]), int(self.labels[idx]))

    def subset(self, index: np.ndarray, tag: str | None = None) -> "Dataset":
        return Dataset(self.tokens[index], self.labels[index], self.schema, self.field_sizes, tag or self.tag)


@dataclass
class Batch:
    tokens: np.ndarray
    labels: np.ndarray
    batch_index: int = 0

    def __len__(self) -> int:
        return len(self.labels)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` records to ``ratios``."""
    if any(r <= 0 for r in ratios):
        raise DataError("split ratios must be positive")
    if n < len(ratios):
        raise DataError(f"cannot split {n} records into {len(ratios)} partitions")
    total = float(sum(ratios))
    exact = [n * r / total for r in ratios]
    sizes = [int(math.floor(e)) for e in exact]
    order = sorted(range(len(ratios)), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    return sizes


def split_indices(n: int, ratios: Sequence[float] = (8, 1, 1), seed: int = 0) -> list[np.ndarray]:
    sizes = split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + sizes)
    return [perm[bounds[k]: bounds[k + 1]] for k in range(len(sizes))]


def split(dataset: Dataset, ratios: Sequence[float] = (8, 1, 1), seed: int = 0) -> tuple[Dataset, ...]:
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    parts = split_indices(len(dataset), ratios, seed)
    tags = TAGS[: len(parts)] if len(parts) <= 3 else [f"part{k}" for k in range(len(parts))]
    return tuple(dataset.subset(idx, tag) for idx, tag in zip(parts, tags))


def batch_iter(data: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start: start + batch_size]
        yield Batch(data.tokens[idx], data.labels[idx], b)


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    """Planted-signal generator settings.

    ``profile`` is an (m, latent_dim) array of per-slot signal scales; the
    label logit is ``bias + sum_{i<k} <U_i[t_i], U_k[t_k]>`` with
    ``U_i[:, j] ~ N(0, 1) * profile[i, j]``.
    """

    field_sizes: list[int]
    n_records: int
    profile: np.ndarray
    bias: float = 0.0
    linear_scale: float = 0.0
    token_skew: float = 0.0
    names: list[str] = field(default_factory=list)

    def validate(self) -> None:
        m = len(self.field_sizes)
        if m < 2:
            raise DataError("synthetic spec needs at least 2 fields")
        if any(n < 1 for n in self.field_sizes):
            raise DataError("field sizes must be >= 1")
        if self.n_records < 1:
            raise DataError("n_records must be >= 1")
        prof = np.asarray(self.profile, dtype=np.float64)
        if prof.ndim != 2 or prof.shape[0] != m:
            raise DataError("profile must have one row per field")
        if not np.all(np.isfinite(prof)) or np.any(prof < 0):
            raise DataError("profile entries must be finite and non-negative")


def planted_profile(kind: str, m: int, d: int, strength: float = 1.0, frac: float = 0.25,
                    exponent: float = 1.5, seed: int = 0) -> np.ndarray:
    """Named signal profiles for the generator.

    ``zero``: no signal. ``uniform``: every slot. ``field0``: field 0 strong,
    others weak. ``sparse``: a random ``frac`` of slots. ``skewed``: outer
    product of power-law field and dimension weights (random rank order), so
    strong slots sit in interacting pairs.
    """
    rng = np.random.default_rng(seed)
    if kind == "zero":
        return np.zeros((m, d))
    if kind == "uniform":
        return np.full((m, d), strength)
    if kind == "field0":
        prof = np.full((m, d), 0.15 * strength)
        prof[0] = strength
        return prof
    if kind == "sparse":
        # planted slots come in same-dimension pairs so they interact; the
        # count never exceeds floor(frac * m * d)
        k = max(2, int(math.floor(frac * m * d + 1e-9)))
        prof = np.zeros((m, d))
        dims = rng.permutation(d)
        for t in range(4 * m * d):
            active = int(np.count_nonzero(prof))
            j = dims[t % d]
            free = np.flatnonzero(prof[:, j] == 0)
            need = 1 if np.count_nonzero(prof[:, j]) >= 2 else 2
            if active + need > k or len(free) < need:
                if active + 2 > k:
                    break
                continue
            prof[rng.choice(free, size=need, replace=False), j] = strength
        return prof
    if kind == "skewed":
        field_w = (rng.permutation(m) + 1.0) ** -exponent
        dim_w = (rng.permutation(d) + 1.0) ** -exponent
        return strength * np.outer(field_w, dim_w)
    raise DataError(f"unknown profile {kind!r}")


def _draw_tokens(rng: np.random.Generator, n_i: int, count: int, skew: float) -> np.ndarray:
    if skew <= 0:
        return rng.integers(0, n_i, size=count)
    w = np.arange(1, n_i + 1, dtype=np.float64) ** -skew
    return rng.choice(n_i, size=count, p=w / w.sum())


def synth_generate(spec: SynthSpec, seed: int = 0) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    m = len(spec.field_sizes)
    prof = np.asarray(spec.profile, dtype=np.float64)
    latent = [rng.standard_normal((n, prof.shape[1])) * prof[i] for i, n in enumerate(spec.field_sizes)]
    lin = [rng.standard_normal(n) * spec.linear_scale for n in spec.field_sizes]
    tokens = np.stack([_draw_tokens(rng, n, spec.n_records, spec.token_skew) for n in spec.field_sizes], axis=1)
    rows = np.stack([latent[i][tokens[:, i]] for i in range(m)], axis=1)
    s = rows.sum(axis=1)
    logit = 0.5 * ((s * s).sum(axis=1) - (rows * rows).sum(axis=(1, 2))) + spec.bias
    logit += sum(lin[i][tokens[:, i]] for i in range(m))
    p = 1.0 / (1.0 + np.exp(-logit))
    labels = (rng.random(spec.n_records) < p).astype(np.uint8)
    names = spec.names or [f"f{i}" for i in range(m)]
    return Dataset(tokens, labels, make_schema(names), list(spec.field_sizes), "all")


# ---------------------------------------------------------------- raw formats


class RawRow(NamedTuple):
    line: int
    label: int
    tokens: list[str | None]


def _parse_label(text: str, line: int) -> int:
    if text not in ("0", "1"):
        raise DataError(f"line {line}: bad label {text!r}")
    return int(text)


def read_criteo(path: str | Path, strict: bool = True, log_base: str = "e",
                stats: dict | None = None) -> Iterator[RawRow]:
    """Criteo TSV: label, 13 numeric, 26 categorical hex columns.

    Numeric columns are bucketed here so downstream code only sees strings.
    In lenient mode malformed lines are skipped and counted in ``stats``.
    """
    width = 1 + CRITEO_NUMERIC + CRITEO_CATEGORICAL
    skipped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, raw in enumerate(fh, start=1):
            cols = raw.rstrip("\r\n").split("\t")
            try:
                if len(cols) != width:
                    raise DataError(f"line {line_no}: expected {width} columns, got {len(cols)}")
                label = _parse_label(cols[0], line_no)
                toks: list[str | None] = []
                for c in cols[1: 1 + CRITEO_NUMERIC]:
                    if c == "":
                        toks.append(None)
                        continue
                    try:
                        val = float(c)
                    except ValueError:
                        raise DataError(f"line {line_no}: bad numeric {c!r}") from None
                    try:
                        toks.append(str(transform_numeric(val, log_base)))
                    except DataError as exc:
                        raise DataError(f"line {line_no}: {exc}") from None
                toks.extend(c if c != "" else None for c in cols[1 + CRITEO_NUMERIC:])
            except DataError:
                if strict:
                    raise
                skipped += 1
                continue
            yield RawRow(line_no, label, toks)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped


def read_avazu(path: str | Path, strict: bool = True, stats: dict | None = None,
               header_out: list | None = None) -> Iterator[RawRow]:
    """Avazu CSV with header: id, click, then 22 categorical columns."""
    width = 2 + AVAZU_CATEGORICAL
    skipped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) != width:
            raise DataError(f"line 1: expected a {width}-column header")
        if header_out is not None:
            header_out.extend(header[2:])
        for line_no, cols in enumerate(reader, start=2):
            try:
                if len(cols) != width:
                    raise DataError(f"line {line_no}: expected {width} columns, got {len(cols)}")
                label = _parse_label(cols[1], line_no)
            except DataError:
                if strict:
                    raise
                skipped += 1
                continue
            yield RawRow(line_no, label, [c if c != "" else None for c in cols[2:]])
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped


def encode_rows(rows: Sequence[RawRow], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    m = len(vocab.maps)
    tokens = np.empty((len(rows), m), dtype=np.int64)
    for r, row in enumerate(rows):
        for i, tok in enumerate(row.tokens):
            tokens[r, i] = vocab.encode(i, tok)
    labels = np.fromiter((row.label for row in rows), dtype=np.uint8, count=len(rows))
    return tokens, labels


def ingest_rows(rows: list[RawRow], schema: list[FieldSchema], min_freq: int = 10,
                ratios: Sequence[float] = (8, 1, 1), seed: int = 0) -> tuple[Vocabulary, tuple[Dataset, ...]]:
    """Split raw rows, count frequencies on the training part only, encode all parts."""
    if not rows:
        raise DataError("no records to ingest")
    parts = split_indices(len(rows), ratios, seed)
    train_rows = [rows[k] for k in parts[0]]
    columns = [[r.tokens[i] for r in train_rows] for i in range(len(schema))]
    vocab = build_vocab(columns, min_freq)
    out = []
    for idx, tag in zip(parts, TAGS):
        toks, labels = encode_rows([rows[k] for k in idx], vocab)
        out.append(Dataset(toks, labels, schema, vocab.sizes, tag))
    return vocab, tuple(out)


def save_vocab(path: str | Path, vocab: Vocabulary) -> None:
    Path(path).write_text(json.dumps(vocab.to_json(), sort_keys=True))


def load_vocab(path: str | Path) -> Vocabulary:
    return Vocabulary.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- encoded cache

_KINDS = {"categorical": 0, "numeric": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


def write_cache(path: str | Path, data: Dataset) -> None:
    """Little-endian binary: magic, version, tag, schema block, u32 tokens, u8 labels."""
    if len(data) and data.tokens.max() > 0xFFFFFFFF:
        raise DataError("token id exceeds u32 range")
    parts = [CACHE_MAGIC, struct.pack("<IBI", CACHE_VERSION, TAGS.index(data.tag), data.num_fields)]
    for f, n in zip(data.schema, data.field_sizes):
        name = f.name.encode("utf-8")
        parts.append(struct.pack("<IBIH", f.field_id, _KINDS[f.kind], n, len(name)))
        parts.append(name)
    parts.append(struct.pack("<Q", len(data)))
    parts.append(data.tokens.astype("<u4").tobytes())
    parts.append(data.labels.astype("u1").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_cache(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing encoded cache {path}")
    buf = path.read_bytes()
    if buf[:4] != CACHE_MAGIC:
        raise DataError(f"{path}: not an encoded dataset (bad magic)")
    version, tag, m = struct.unpack_from("<IBI", buf, 4)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = 4 + struct.calcsize("<IBI")
    schema, sizes = [], []
    for _ in range(m):
        fid, kind, n, ln = struct.unpack_from("<IBIH", buf, off)
        off += struct.calcsize("<IBIH")
        name = buf[off: off + ln].decode("utf-8")
        off += ln
        schema.append(FieldSchema(fid, _KIND_NAMES[kind], name))
        sizes.append(n)
    (n_rec,) = struct.unpack_from("<Q", buf, off)
    off += 8
    tok_bytes = n_rec * m * 4
    if len(buf) != off + tok_bytes + n_rec:
        raise DataError(f"{path}: truncated or oversized cache")
    tokens = np.frombuffer(buf, dtype="<u4", count=n_rec * m, offset=off).reshape(n_rec, m)
    labels = np.frombuffer(buf, dtype="u1", count=n_rec, offset=off + tok_bytes)
    return Dataset(tokens.astype(np.int64), labels.copy(), schema, sizes, TAGS[tag])
