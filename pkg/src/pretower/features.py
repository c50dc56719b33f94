"""Feature schema, vocabulary encoding, CSV ingestion, synthetic data, embeddings.

All raw features are categorical strings. Encoding maps each value to a
contiguous integer id per field, with id 0 reserved for unseen values; the
id-0 embedding row is trained like any other so out-of-vocabulary inputs do
not hit a dead gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, SchemaError


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered user/item field names, label column, and embedding width.

    Schema order (not file column order) defines the layout of every encoded
    matrix and concatenated embedding.
    """

    user_fields: tuple[str, ...]
    item_fields: tuple[str, ...]
    label_field: str = "label"
    embedding_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "user_fields", tuple(self.user_fields))
        object.__setattr__(self, "item_fields", tuple(self.item_fields))
        if not self.user_fields or not self.item_fields:
            raise ConfigError("schema needs at least one user field and one item field")
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding_dim must be >= 1, got {self.embedding_dim}")
        names = list(self.user_fields) + list(self.item_fields) + [self.label_field]
        if len(set(names)) != len(names):
            raise ConfigError(f"field names must be unique, got {names}")

    @property
    def all_fields(self) -> tuple[str, ...]:
        return self.user_fields + self.item_fields

    @property
    def num_user_fields(self) -> int:
        return len(self.user_fields)

    @property
    def num_item_fields(self) -> int:
        return len(self.item_fields)


OOV_ID = 0


class Vocabulary:
    """Per-field value-to-id maps; ids are assigned in order of first appearance."""

    def __init__(self, fields: Sequence[str]):
        self._maps: dict[str, dict[str, int]] = {f: {} for f in fields}

    @property
    def fields(self) -> tuple[str, ...]:
        return tuple(self._maps)

    def add(self, field: str, value: str) -> int:
        m = self._maps[field]
        idx = m.get(value)
        if idx is None:
            idx = len(m) + 1  # 0 is reserved for out-of-vocabulary
            m[value] = idx
        return idx

    def encode(self, field: str, value: str) -> int:
        return self._maps[field].get(value, OOV_ID)

    def decode(self, field: str, idx: int) -> str | None:
        """Inverse of encode for in-vocabulary ids; None for the OOV id."""
        if idx == OOV_ID:
            return None
        m = self._maps[field]
        values = list(m)
        if not 1 <= idx <= len(values):
            raise DataError(f"id {idx} out of range for field {field!r}")
        return values[idx - 1]

    def size(self, field: str) -> int:
        return len(self._maps[field]) + 1

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for field, m in self._maps.items():
                for value, idx in m.items():
                    fh.write(f"{field}\t{value}\t{idx}\n")

    @classmethod
    def load(cls, path: str | Path, fields: Sequence[str]) -> "Vocabulary":
        vocab = cls(fields)
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    field, value, idx = line.split("\t")
                except ValueError as e:
                    raise DataError(f"malformed vocabulary line {line_no}: {line!r}") from e
                if field not in vocab._maps:
                    raise SchemaError(f"vocabulary field {field!r} not in schema")
                vocab._maps[field][value] = int(idx)
        return vocab


@dataclass
class Batch:
    """Encoded instances: per-field integer ids plus binary labels."""

    user_ids: np.ndarray  # (B, m) int64
    item_ids: np.ndarray  # (B, n) int64
    labels: np.ndarray  # (B,) float64, each 0.0 or 1.0

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, indices: np.ndarray) -> "Batch":
        return Batch(self.user_ids[indices], self.item_ids[indices], self.labels[indices])

    def slice(self, start: int, stop: int) -> "Batch":
        return Batch(self.user_ids[start:stop], self.item_ids[start:stop], self.labels[start:stop])


Dataset = Batch  # a dataset is just a batch of everything


def load_csv(
    path: str | Path, schema: FeatureSchema, vocab: Vocabulary | None = None
) -> tuple[Vocabulary, Dataset]:
    """Read a UTF-8 header CSV into an encoded dataset.

    With vocab=None (training) a fresh vocabulary is fitted in order of first
    appearance; otherwise unseen values encode to the reserved id 0.
    """
    fit = vocab is None
    if fit:
        vocab = Vocabulary(schema.all_fields)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = list(schema.all_fields) + [schema.label_field]
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"column {missing[0]!r} missing from {path} (header: {header})")
        user_rows: list[list[int]] = []
        item_rows: list[list[int]] = []
        labels: list[float] = []
        for row_no, row in enumerate(reader, start=1):
            raw_label = (row[schema.label_field] or "").strip()
            if raw_label not in ("0", "1"):
                raise DataError(f"label must be '0' or '1', got {raw_label!r} at data row {row_no}")
            labels.append(float(raw_label))
            if fit:
                user_rows.append([vocab.add(f, row[f]) for f in schema.user_fields])
                item_rows.append([vocab.add(f, row[f]) for f in schema.item_fields])
            else:
                user_rows.append([vocab.encode(f, row[f]) for f in schema.user_fields])
                item_rows.append([vocab.encode(f, row[f]) for f in schema.item_fields])
    m, n = schema.num_user_fields, schema.num_item_fields
    ds = Dataset(
        np.array(user_rows, dtype=np.int64).reshape(len(labels), m),
        np.array(item_rows, dtype=np.int64).reshape(len(labels), n),
        np.array(labels, dtype=np.float64),
    )
    return vocab, ds


def split(dataset: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random partition into (first, second) with |first| ~ ratio * N."""
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(np.floor(ratio * n + 0.5))
    return dataset.take(perm[:k]), dataset.take(perm[k:])


class EmbeddingTables:
    """One learnable (vocab_size x dim) matrix per field."""

    def __init__(self, fields: Sequence[str], tables: dict[str, T.Tensor], dim: int):
        self.fields = tuple(fields)
        self.tables = tables
        self.dim = dim

    @classmethod
    def create(
        cls, fields: Sequence[str], vocab: Vocabulary, dim: int, rng: np.random.Generator
    ) -> "EmbeddingTables":
        """Initialize uniformly in [-1/sqrt(dim), 1/sqrt(dim)] so that initial
        inner products stay O(1)."""
        bound = 1.0 / np.sqrt(dim)
        tables = {
            f: T.Tensor(rng.uniform(-bound, bound, size=(vocab.size(f), dim)), requires_grad=True)
            for f in fields
        }
        return cls(fields, tables, dim)


def embed(ids: np.ndarray, tables: EmbeddingTables) -> T.Tensor:
    """Concatenate per-field embedding rows in schema field order: (B, fields*dim)."""
    if ids.ndim != 2 or ids.shape[1] != len(tables.fields):
        raise SchemaError(f"id matrix shape {ids.shape} does not match {len(tables.fields)} fields")
    parts = [T.gather_rows(tables.tables[f], ids[:, j]) for j, f in enumerate(tables.fields)]
    if len(parts) == 1:
        return parts[0]
    return T.concat(parts, axis=1)


# ---------------------------------------------------------------------------
# synthetic data

JUNK_POOL = 20


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the planted preference model behind generate_synthetic."""

    num_users: int
    num_items: int
    num_rows: int
    seed: int
    noise: float = 1.0
    latent_rank: int = 4
    num_groups: int = 8
    affinity_scale: float = 1.0


def generate_synthetic(schema: FeatureSchema, spec: SyntheticSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write interactions.csv, items.csv and users.csv under out_dir.

    Labels follow a planted model: each user and item carries a low-rank
    latent vector and a group id, and
    label = 1[ <z_u, w_i>/sqrt(r) + affinity[g_u, g_i] + noise * eps > 0 ].
    Field 0 on each side is the entity id, field 1 (when present) exposes the
    group, and any further fields carry pure junk tokens that hold no signal,
    giving the field-attention module something to suppress. Output bytes are
    a deterministic function of the spec.
    """
    if spec.num_users < 1 or spec.num_items < 1 or spec.num_rows < 0:
        raise ConfigError(f"synthetic sizes must be positive, got {spec}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    r = spec.latent_rank
    z = rng.normal(size=(spec.num_users, r))
    w = rng.normal(size=(spec.num_items, r))
    user_group = rng.integers(0, spec.num_groups, size=spec.num_users)
    item_group = rng.integers(0, spec.num_groups, size=spec.num_items)
    affinity = rng.normal(size=(spec.num_groups, spec.num_groups)) * spec.affinity_scale
    item_junk = rng.integers(0, JUNK_POOL, size=(spec.num_items, max(0, schema.num_item_fields - 2)))
    user_static_junk = rng.integers(0, JUNK_POOL, size=(spec.num_users, max(0, schema.num_user_fields - 2)))

    u = rng.integers(0, spec.num_users, size=spec.num_rows)
    v = rng.integers(0, spec.num_items, size=spec.num_rows)
    eps = rng.normal(size=spec.num_rows)
    user_row_junk = rng.integers(0, JUNK_POOL, size=(spec.num_rows, max(0, schema.num_user_fields - 2)))

    raw = (z[u] * w[v]).sum(axis=1) / np.sqrt(r) + affinity[user_group[u], item_group[v]]
    labels = (raw + spec.noise * eps > 0).astype(int)

    def user_values(uid: int, junk_row) -> list[str]:
        vals = [f"u{uid}"]
        if schema.num_user_fields >= 2:
            vals.append(f"g{user_group[uid]}")
        vals.extend(f"x{j}" for j in junk_row)
        return vals

    def item_values(iid: int) -> list[str]:
        vals = [f"i{iid}"]
        if schema.num_item_fields >= 2:
            vals.append(f"h{item_group[iid]}")
        vals.extend(f"y{j}" for j in item_junk[iid])
        return vals

    paths = {
        "interactions": out_dir / "interactions.csv",
        "items": out_dir / "items.csv",
        "users": out_dir / "users.csv",
    }
    with open(paths["interactions"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(schema.user_fields) + list(schema.item_fields) + [schema.label_field])
        for k in range(spec.num_rows):
            writer.writerow(user_values(u[k], user_row_junk[k]) + item_values(v[k]) + [labels[k]])
    with open(paths["items"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["item_id"] + list(schema.item_fields))
        for iid in range(spec.num_items):
            writer.writerow([iid] + item_values(iid))
    with open(paths["users"], "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["user_id"] + list(schema.user_fields))
        for uid in range(spec.num_users):
            writer.writerow([uid] + user_values(uid, user_static_junk[uid]))
    return paths


def load_catalog(path: str | Path, schema: FeatureSchema) -> list[tuple[int, dict[str, str]]]:
    """Read an item catalog CSV: an item_id column plus every item field."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = ["item_id"] + list(schema.item_fields)
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"column {missing[0]!r} missing from {path} (header: {header})")
        out = []
        for row_no, row in enumerate(reader, start=1):
            try:
                item_id = int(row["item_id"])
            except ValueError as e:
                raise DataError(f"item_id must be an integer, got {row['item_id']!r} at data row {row_no}") from e
            out.append((item_id, {f: row[f] for f in schema.item_fields}))
    return out


def encode_values(values: Mapping[str, str], fields: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    """Encode one instance's field values into a (1, F) id matrix; unseen -> 0."""
    try:
        ids = [vocab.encode(f, values[f]) for f in fields]
    except KeyError as e:
        raise SchemaError(f"missing value for field {e.args[0]!r}") from e
    return np.array([ids], dtype=np.int64)
