"""Offline item-vector index, decoupled candidate scoring, and the latency bench.

The index file is a flat little-endian binary with O(1) record addressing:

    magic "ITIX" | format version u32 | item_count u64 | head_count u32 |
    head_dim u32 | then per item: item id u64 followed by head_count *
    head_dim float32 values (the L2-normalized heads, head-major)

Vectors are stored in float32; the model computes in float64, and the
documented 1e-5 serving tolerance absorbs the precision split. An id ->
position map is rebuilt in memory on load.

The two scorers realize the serving cost contrast: the decoupled path runs
one user-tower inference per request and scores every candidate against
stored vectors, while the single-tower path must run its whole network once
per candidate.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .features import Batch, Vocabulary, encode_values, load_catalog
from .model import InteractionTower, Model, SingleTower, TwoTower

logger = logging.getLogger("pretower.index")

INDEX_MAGIC = b"ITIX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIQII")  # magic, version, item_count, head_count, head_dim


def index_file_size(item_count: int, head_count: int, head_dim: int) -> int:
    """Exact byte length of an index file with the given geometry."""
    return _HEADER.size + item_count * (8 + 4 * head_count * head_dim)


@dataclass
class ItemIndex:
    ids: np.ndarray  # (N,) uint64
    vectors: np.ndarray  # (N, H, p) float32
    positions: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.positions:
            self.positions = {int(i): pos for pos, i in enumerate(self.ids)}

    @property
    def head_count(self) -> int:
        return self.vectors.shape[1]

    @property
    def head_dim(self) -> int:
        return self.vectors.shape[2]

    def __len__(self) -> int:
        return len(self.ids)


def write_index(path: str | Path, ids: Sequence[int], vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 3 or vectors.shape[0] != len(ids):
        raise FormatError(f"expected (N, H, p) vectors for {len(ids)} ids, got {vectors.shape}")
    n, heads, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, n, heads, dim))
        for i in range(n):
            fh.write(struct.pack("<Q", int(ids[i])))
            fh.write(vectors[i].tobytes())


def read_index(path: str | Path) -> ItemIndex:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:4] != INDEX_MAGIC:
        raise FormatError(f"{path} is not an item index (bad magic {raw[:4]!r})")
    magic, version, count, heads, dim = _HEADER.unpack_from(raw, 0)
    if version != INDEX_VERSION:
        raise FormatError(f"unsupported index version {version}")
    expected = index_file_size(count, heads, dim)
    if len(raw) != expected:
        raise FormatError(f"{path} is {len(raw)} bytes, layout implies {expected}")
    record = 8 + 4 * heads * dim
    ids = np.empty(count, dtype=np.uint64)
    vectors = np.empty((count, heads, dim), dtype=np.float32)
    off = _HEADER.size
    for i in range(count):
        (ids[i],) = struct.unpack_from("<Q", raw, off)
        vectors[i] = np.frombuffer(raw, dtype="<f4", count=heads * dim, offset=off + 8).reshape(heads, dim)
        off += record
    return ItemIndex(ids=ids, vectors=vectors)


def export_items(
    model: Model,
    vocab: Vocabulary,
    catalog: Sequence[tuple[int, dict[str, str]]],
    path: str | Path,
    batch_size: int = 1024,
) -> ItemIndex:
    """Run the item tower once per catalog entry and write the index file.

    Unknown field values encode to the out-of-vocabulary id 0 with a warning;
    they are not an error.
    """
    if isinstance(model, SingleTower):
        raise ConfigError("a single-tower model has no separable item representation to index")
    schema = model.schema
    ids = []
    id_rows = []
    for item_id, values in catalog:
        row = encode_values(values, schema.item_fields, vocab)[0]
        for j, f in enumerate(schema.item_fields):
            if row[j] == 0:
                logger.warning("item %s: unseen value %r for field %r encoded as id 0", item_id, values[f], f)
        ids.append(item_id)
        id_rows.append(row)
    if ids:
        id_matrix = np.stack(id_rows).astype(np.int64)
        chunks = [
            model.serving_item_heads(id_matrix[start : start + batch_size])
            for start in range(0, len(ids), batch_size)
        ]
        vectors = np.concatenate(chunks, axis=0).astype(np.float32)
    else:
        heads, dim = model_head_shape(model)
        vectors = np.zeros((0, heads, dim), dtype=np.float32)
    write_index(path, ids, vectors)
    return ItemIndex(ids=np.asarray(ids, dtype=np.uint64), vectors=vectors)


def model_head_shape(model: Model) -> tuple[int, int]:
    """(head_count, head_dim) of the vectors this model serves from an index."""
    if isinstance(model, SingleTower):
        raise ConfigError("single-tower models are not index-servable")
    cfg = model.config
    if isinstance(model, InteractionTower) and cfg.use_early_interaction and not cfg.fc_interaction:
        return cfg.item_heads, cfg.head_dim
    return 1, cfg.layer_widths[-1]


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class ScoreRequest:
    user_values: Mapping[str, str]
    candidate_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "candidate_ids", tuple(int(c) for c in self.candidate_ids))
        if len(self.candidate_ids) < 1:
            raise DataError("a score request needs at least one candidate")


@dataclass(frozen=True)
class ScoredItem:
    item_id: int
    score: float | None
    error: str | None = None


@dataclass(frozen=True)
class ScoreResponse:
    items: tuple[ScoredItem, ...]  # in request order
    ranking: tuple[int, ...]  # scoreable ids, by non-increasing score, ties by id

    def scores(self) -> list[float | None]:
        return [it.score for it in self.items]


def _rank(ids: np.ndarray, scores: np.ndarray) -> tuple[int, ...]:
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return tuple(int(ids[i]) for i in order)


class DecoupledScorer:
    """Serves candidates from precomputed item vectors: one network inference
    per request, then vector math per candidate."""

    def __init__(self, model: Model, vocab: Vocabulary, index: ItemIndex):
        expected = model_head_shape(model)
        if (index.head_count, index.head_dim) != expected:
            raise FormatError(
                f"index geometry {(index.head_count, index.head_dim)} does not match the model's {expected}"
            )
        self.model = model
        self.vocab = vocab
        self.index = index
        self.inference_count = 0

    def score(self, request: ScoreRequest) -> ScoreResponse:
        user_ids = encode_values(request.user_values, self.model.schema.user_fields, self.vocab)
        user_layers = self.model.serving_user_heads(user_ids)
        self.inference_count += 1

        cand = np.asarray(request.candidate_ids)
        positions = np.array([self.index.positions.get(int(c), -1) for c in cand])
        found = positions >= 0
        scores = np.full(len(cand), np.nan)
        if found.any():
            vectors = self.index.vectors[positions[found]].astype(np.float64)  # (k, H, p)
            total = np.zeros(int(found.sum()))
            for heads in user_layers:  # (Hu, p)
                sims = np.einsum("up,kvp->kuv", heads, vectors)
                total += sims.max(axis=2).sum(axis=1)
            scores[found] = total
        items = tuple(
            ScoredItem(int(c), float(s), None) if ok else ScoredItem(int(c), None, "item not in index")
            for c, s, ok in zip(cand, scores, found)
        )
        ranking = _rank(cand[found], scores[found])
        return ScoreResponse(items=items, ranking=ranking)


class SingleTowerScorer:
    """Runs the whole network once per candidate: the O(k * network) baseline."""

    def __init__(self, model: SingleTower, vocab: Vocabulary, catalog: Sequence[tuple[int, dict[str, str]]]):
        if not isinstance(model, SingleTower):
            raise ConfigError(f"expected a single-tower model, got {model.kind}")
        self.model = model
        self.vocab = vocab
        self.item_rows = {
            item_id: encode_values(values, model.schema.item_fields, vocab)
            for item_id, values in catalog
        }
        self.inference_count = 0

    def score(self, request: ScoreRequest) -> ScoreResponse:
        user_ids = encode_values(request.user_values, self.model.schema.user_fields, self.vocab)
        cand = np.asarray(request.candidate_ids)
        scored: list[ScoredItem] = []
        ok_ids: list[int] = []
        ok_scores: list[float] = []
        for c in cand:
            row = self.item_rows.get(int(c))
            if row is None:
                scored.append(ScoredItem(int(c), None, "item not in catalog"))
                continue
            batch = Batch(user_ids, row, np.zeros(1))
            logit = float(self.model.forward(batch).logits.data[0])
            self.inference_count += 1
            scored.append(ScoredItem(int(c), logit, None))
            ok_ids.append(int(c))
            ok_scores.append(logit)
        ranking = _rank(np.asarray(ok_ids), np.asarray(ok_scores)) if ok_ids else ()
        return ScoreResponse(items=tuple(scored), ranking=ranking)


# ---------------------------------------------------------------------------
# latency bench


@dataclass(frozen=True)
class BenchRow:
    model: str
    k: int
    median_us: float
    p95_us: float


def bench(
    scorers: Mapping[str, DecoupledScorer | SingleTowerScorer],
    users: Sequence[Mapping[str, str]],
    candidate_ids: Sequence[int],
    k_values: Sequence[int],
    repetitions: int,
    seed: int = 0,
) -> list[BenchRow]:
    """Median/p95 request latency per (scorer, candidate count), single-threaded.

    Each combination gets one fixed request (candidates sampled with
    replacement) and a warm-up call before the timed repetitions.
    """
    if repetitions < 1 or any(k < 1 for k in k_values):
        raise ConfigError("bench needs repetitions >= 1 and positive k values")
    rng = np.random.default_rng(seed)
    pool = np.asarray(candidate_ids)
    rows = []
    for name, scorer in scorers.items():
        for k in k_values:
            user = users[int(rng.integers(0, len(users)))]
            request = ScoreRequest(user, tuple(rng.choice(pool, size=k, replace=True)))
            scorer.score(request)  # warm-up
            times_us = np.empty(repetitions)
            for rep in range(repetitions):
                t0 = time.perf_counter_ns()
                scorer.score(request)
                times_us[rep] = (time.perf_counter_ns() - t0) / 1000.0
            rows.append(
                BenchRow(
                    model=name,
                    k=int(k),
                    median_us=float(np.percentile(times_us, 50)),
                    p95_us=float(np.percentile(times_us, 95)),
                )
            )
    return rows


def write_bench_csv(path: str | Path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("model,k,median_us,p95_us\n")
        for row in rows:
            fh.write(f"{row.model},{row.k},{row.median_us:.3f},{row.p95_us:.3f}\n")


def load_users_csv(path: str | Path, schema) -> list[dict[str, str]]:
    """Read a users CSV (user_id column plus every user field) into value dicts."""
    import csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in schema.user_fields if c not in header]
        if missing:
            raise DataError(f"column {missing[0]!r} missing from {path}")
        return [{f: row[f] for f in schema.user_fields} for row in reader]
