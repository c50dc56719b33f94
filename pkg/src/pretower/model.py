"""Scoring architectures built on the tensor core.

Three model kinds share one parameter/config container:

* ``two_tower``: independent user/item MLP towers, score = inner product of
  the L2-normalized final activations.
* ``interaction_tower``: the two-tower skeleton plus (a) a softmax
  field-attention gate that reweights feature embeddings per instance,
  (b) multi-head projections of every tapped user layer and of the final
  item layer, scored by summed max-similarity, and (c) final-layer
  representations exposed for a contrastive regularizer. The item side still
  collapses to fixed vectors, so candidates can be served from a
  precomputed index.
* ``single_tower``: one MLP over the concatenated user+item embeddings;
  the cost baseline that must run once per candidate.

Forward passes are pure functions of (batch, params) apart from the
training-only dropout mask; eval-mode scoring is deterministic.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .features import Batch, EmbeddingTables, FeatureSchema, Vocabulary, embed

MODEL_KINDS = ("two_tower", "interaction_tower", "single_tower")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "interaction_tower"
    layer_widths: tuple[int, ...] = (300, 300, 128)
    head_dim: int = 64
    user_heads: int = 0  # 0 resolves to the number of user fields
    item_heads: int = 0  # 0 resolves to the number of user fields as well
    dropout: float = 0.1
    use_field_attention: bool = True
    use_early_interaction: bool = True
    use_contrastive: bool = True
    fc_interaction: bool = False  # ablation: concat+FC replaces head interaction
    tapped_layers: tuple[int, ...] = ()  # 1-based user layers; () taps all

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "tapped_layers", tuple(sorted(int(i) for i in self.tapped_layers)))
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}, expected one of {MODEL_KINDS}")
        if not self.layer_widths or any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"layer_widths must be positive, got {self.layer_widths}")
        if self.head_dim < 1:
            raise ConfigError(f"head_dim must be >= 1, got {self.head_dim}")
        if self.user_heads < 0 or self.item_heads < 0:
            raise ConfigError("head counts must be >= 1 (or 0 for the default)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        bad = [i for i in self.tapped_layers if not 1 <= i <= len(self.layer_widths)]
        if bad or len(set(self.tapped_layers)) != len(self.tapped_layers):
            raise ConfigError(
                f"tapped_layers must be distinct indices in 1..{len(self.layer_widths)}, got {self.tapped_layers}"
            )

    def resolved(self, schema: FeatureSchema) -> "ModelConfig":
        """Pin defaults that depend on the schema: head counts and tapped layers."""
        heads_default = schema.num_user_fields
        changes: dict = {}
        if self.user_heads == 0:
            changes["user_heads"] = heads_default
        if self.item_heads == 0:
            changes["item_heads"] = heads_default
        if not self.tapped_layers:
            changes["tapped_layers"] = tuple(range(1, len(self.layer_widths) + 1))
        if self.kind != "interaction_tower":
            changes.update(
                use_field_attention=False,
                use_early_interaction=False,
                use_contrastive=False,
                fc_interaction=False,
            )
        return dataclasses.replace(self, **changes) if changes else self


class ModelParams:
    """Ordered, named parameter tensors plus a kind tag per tensor.

    Kinds: "embedding" (sparse-updated lookup tables), "weight" (matrices,
    the only tensors the L2 penalty touches), "bias".
    """

    def __init__(self):
        self._tensors: dict[str, T.Tensor] = {}
        self._kinds: dict[str, str] = {}

    def add(self, name: str, data: np.ndarray, kind: str) -> T.Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = T.Tensor(data, requires_grad=True)
        self._tensors[name] = t
        self._kinds[name] = kind
        return t

    def __getitem__(self, name: str) -> T.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def kind(self, name: str) -> str:
        return self._kinds[name]

    def tensors(self) -> dict[str, T.Tensor]:
        return dict(self._tensors)

    def weights(self) -> list[T.Tensor]:
        return [t for n, t in self._tensors.items() if self._kinds[n] == "weight"]

    def state_copy(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self._tensors.items():
            t.data = state[n].copy()

    def total_size(self) -> int:
        return sum(t.size for t in self._tensors.values())


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ForwardResult:
    logits: T.Tensor  # (B,)
    user_repr: T.Tensor | None = None  # (B, D) final user representation
    item_repr: T.Tensor | None = None  # (B, D) final item representation


# ---------------------------------------------------------------------------
# reusable blocks


def field_attention(e: T.Tensor, w: T.Tensor, b: T.Tensor, num_fields: int, dim: int) -> T.Tensor:
    """Reweight per-field embeddings by softmax attention over field means.

    Squeeze each field's d-dim embedding to its mean, map the (B, m) stats
    through one affine layer, softmax across fields, and scale every field's
    embedding by its weight. Weights are positive and sum to 1 per instance.
    """
    if e.ndim != 2 or e.shape[1] != num_fields * dim:
        raise ShapeError(f"expected width {num_fields}*{dim}, got {e.shape}")
    batch = e.shape[0]
    stats = T.reduce_mean(T.reshape(e, (batch, num_fields, dim)), axis=2)
    gates = T.softmax(T.add(T.matmul(stats, w), b), axis=1)
    return T.mul(e, T.repeat_cols(gates, dim))


def tower_forward(
    x: T.Tensor,
    layers: Sequence[tuple[T.Tensor, T.Tensor]],
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> list[T.Tensor]:
    """Stack of relu(x @ W + b) layers; returns every activation, first to last.

    Dropout (training only) follows each activation.
    """
    activations = []
    h = x
    for w, b in layers:
        h = T.relu(T.add(T.matmul(h, w), b))
        if training and dropout_rate > 0.0:
            if rng is None:
                raise ConfigError("training-mode forward with dropout needs an rng")
            h = T.dropout(h, dropout_rate, rng)
        activations.append(h)
    return activations


def project_heads(h: T.Tensor, w: T.Tensor, b: T.Tensor, heads: int, head_dim: int) -> T.Tensor:
    """Affine-map (B, d) activations into `heads` L2-normalized subspaces: (B, H, p)."""
    if h.ndim != 2 or w.shape != (h.shape[1], heads * head_dim):
        raise ShapeError(f"projection expects ({h.shape[1] if h.ndim == 2 else '?'}, {heads * head_dim}) weights, got {w.shape}")
    z = T.add(T.matmul(h, w), b)
    return T.l2_normalize(T.reshape(z, (h.shape[0], heads, head_dim)), axis=2)


def maxsim_score(user_heads: T.Tensor, item_heads: T.Tensor) -> T.Tensor:
    """Sum over user heads of the best item-head similarity: (B,).

    Gradients flow only through each user head's best item head; ties break
    toward the lowest item-head index. With one head per side this is a plain
    inner product.
    """
    if user_heads.ndim != 3 or item_heads.ndim != 3:
        raise ShapeError(f"head tensors must be (B, H, p), got {user_heads.shape} and {item_heads.shape}")
    if user_heads.shape[2] != item_heads.shape[2]:
        raise ShapeError(f"head dims differ: {user_heads.shape} vs {item_heads.shape}")
    if user_heads.shape[0] != item_heads.shape[0]:
        raise ShapeError(f"batch sizes differ: {user_heads.shape} vs {item_heads.shape}")
    sims = T.matmul(user_heads, T.transpose(item_heads))  # (B, Hu, Hv)
    best = T.reduce_max(sims, axis=2)
    return T.reduce_sum(best, axis=1)


# ---------------------------------------------------------------------------
# model kinds


class _TowerModel:
    """Shared machinery for the two tower-shaped kinds."""

    def __init__(self, schema: FeatureSchema, config: ModelConfig, params: ModelParams):
        self.schema = schema
        self.config = config
        self.params = params
        self.inference_count = 0
        d = schema.embedding_dim
        self._tables = {
            "user": EmbeddingTables(
                schema.user_fields, {f: params[f"user_embed.{f}"] for f in schema.user_fields}, d
            ),
            "item": EmbeddingTables(
                schema.item_fields, {f: params[f"item_embed.{f}"] for f in schema.item_fields}, d
            ),
        }

    def _fields(self, side: str) -> tuple[str, ...]:
        return self.schema.user_fields if side == "user" else self.schema.item_fields

    def _layers(self, side: str) -> list[tuple[T.Tensor, T.Tensor]]:
        p = self.params
        return [
            (p[f"{side}_fc.{i}.W"], p[f"{side}_fc.{i}.b"])
            for i in range(len(self.config.layer_widths))
        ]

    def _tower(self, side: str, ids: np.ndarray, training: bool, rng) -> list[T.Tensor]:
        e = embed(ids, self._tables[side])
        if self.config.use_field_attention:
            e = field_attention(
                e,
                self.params[f"{side}_attn.W"],
                self.params[f"{side}_attn.b"],
                len(self._fields(side)),
                self.schema.embedding_dim,
            )
        return tower_forward(e, self._layers(side), self.config.dropout, training, rng)


class TwoTower(_TowerModel):
    kind = "two_tower"

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardResult:
        self.inference_count += 1
        hu = self._tower("user", batch.user_ids, training, rng)[-1]
        hv = self._tower("item", batch.item_ids, training, rng)[-1]
        u = T.l2_normalize(hu, axis=1)
        v = T.l2_normalize(hv, axis=1)
        logits = T.reduce_sum(T.mul(u, v), axis=1)
        return ForwardResult(logits, user_repr=u, item_repr=v)

    def serving_user_heads(self, user_ids: np.ndarray) -> list[np.ndarray]:
        """One pseudo-head per request: the normalized final activation, (1, d_L)."""
        if user_ids.shape[0] != 1:
            raise ShapeError(f"serving expects one user per request, got {user_ids.shape[0]}")
        self.inference_count += 1
        hu = self._tower("user", user_ids, False, None)[-1]
        return [T.l2_normalize(hu, axis=1).data]

    def serving_item_heads(self, item_ids: np.ndarray) -> np.ndarray:
        self.inference_count += 1
        hv = self._tower("item", item_ids, False, None)[-1]
        return T.l2_normalize(hv, axis=1).data[:, None, :]


class InteractionTower(_TowerModel):
    kind = "interaction_tower"

    def _user_projection(self, layer: int) -> tuple[T.Tensor, T.Tensor]:
        return self.params[f"user_proj.{layer}.W"], self.params[f"user_proj.{layer}.b"]

    def _project_user_layer(self, activations: list[T.Tensor], layer: int) -> T.Tensor:
        w, b = self._user_projection(layer)
        return project_heads(activations[layer - 1], w, b, self.config.user_heads, self.config.head_dim)

    def _project_item(self, final: T.Tensor) -> T.Tensor:
        return project_heads(
            final,
            self.params["item_proj.W"],
            self.params["item_proj.b"],
            self.config.item_heads,
            self.config.head_dim,
        )

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardResult:
        self.inference_count += 1
        cfg = self.config
        hu = self._tower("user", batch.user_ids, training, rng)
        hv = self._tower("item", batch.item_ids, training, rng)
        batch_size = len(batch)

        if cfg.fc_interaction:
            logits = None
            for layer in cfg.tapped_layers:
                joint = T.concat([hu[layer - 1], hv[-1]], axis=1)
                w = self.params[f"cross_fc.{layer}.W"]
                b = self.params[f"cross_fc.{layer}.b"]
                part = T.reshape(T.add(T.matmul(joint, w), b), (batch_size,))
                logits = part if logits is None else T.add(logits, part)
            u = T.l2_normalize(hu[-1], axis=1)
            v = T.l2_normalize(hv[-1], axis=1)
            return ForwardResult(logits, user_repr=u, item_repr=v)

        if cfg.use_early_interaction:
            item_heads = self._project_item(hv[-1])
            logits = None
            deepest_user_heads = None
            for layer in cfg.tapped_layers:
                user_heads = self._project_user_layer(hu, layer)
                deepest_user_heads = user_heads
                part = maxsim_score(user_heads, item_heads)
                logits = part if logits is None else T.add(logits, part)
            u = T.reshape(deepest_user_heads, (batch_size, cfg.user_heads * cfg.head_dim))
            v = T.reshape(item_heads, (batch_size, cfg.item_heads * cfg.head_dim))
            return ForwardResult(logits, user_repr=u, item_repr=v)

        u = T.l2_normalize(hu[-1], axis=1)
        v = T.l2_normalize(hv[-1], axis=1)
        logits = T.reduce_sum(T.mul(u, v), axis=1)
        return ForwardResult(logits, user_repr=u, item_repr=v)

    def serving_user_heads(self, user_ids: np.ndarray) -> list[np.ndarray]:
        """Per tapped layer, the user's normalized head matrix (H_u, p); one
        network inference total."""
        if self.config.fc_interaction:
            raise ConfigError("the FC-interaction ablation cannot be served from an item index")
        if user_ids.shape[0] != 1:
            raise ShapeError(f"serving expects one user per request, got {user_ids.shape[0]}")
        self.inference_count += 1
        hu = self._tower("user", user_ids, False, None)
        if not self.config.use_early_interaction:
            return [T.l2_normalize(hu[-1], axis=1).data]
        return [self._project_user_layer(hu, layer).data[0] for layer in self.config.tapped_layers]

    def serving_item_heads(self, item_ids: np.ndarray) -> np.ndarray:
        if self.config.fc_interaction:
            raise ConfigError("the FC-interaction ablation cannot be served from an item index")
        self.inference_count += 1
        hv = self._tower("item", item_ids, False, None)
        if not self.config.use_early_interaction:
            return T.l2_normalize(hv[-1], axis=1).data[:, None, :]
        return self._project_item(hv[-1]).data


class SingleTower:
    kind = "single_tower"

    def __init__(self, schema: FeatureSchema, config: ModelConfig, params: ModelParams):
        self.schema = schema
        self.config = config
        self.params = params
        self.inference_count = 0
        self._tables = EmbeddingTables(
            schema.all_fields,
            {f: params[f"embed.{f}"] for f in schema.all_fields},
            schema.embedding_dim,
        )

    def forward(self, batch: Batch, training: bool = False, rng=None) -> ForwardResult:
        self.inference_count += 1
        ids = np.concatenate([batch.user_ids, batch.item_ids], axis=1)
        e = embed(ids, self._tables)
        layers = [
            (self.params[f"fc.{i}.W"], self.params[f"fc.{i}.b"])
            for i in range(len(self.config.layer_widths))
        ]
        h = tower_forward(e, layers, self.config.dropout, training, rng)[-1]
        out = T.add(T.matmul(h, self.params["out.W"]), self.params["out.b"])
        return ForwardResult(T.reshape(out, (len(batch),)))


Model = TwoTower | InteractionTower | SingleTower


# ---------------------------------------------------------------------------
# construction


def _add_embeddings(params: ModelParams, prefix: str, fields, vocab: Vocabulary, dim: int, rng) -> None:
    bound = 1.0 / np.sqrt(dim)
    for f in fields:
        params.add(f"{prefix}.{f}", rng.uniform(-bound, bound, size=(vocab.size(f), dim)), "embedding")


def _add_fc_stack(params: ModelParams, prefix: str, in_width: int, widths, rng) -> None:
    prev = in_width
    for i, width in enumerate(widths):
        params.add(f"{prefix}.{i}.W", glorot(rng, prev, width), "weight")
        params.add(f"{prefix}.{i}.b", np.zeros(width), "bias")
        prev = width


def build_model(
    schema: FeatureSchema, vocab: Vocabulary, config: ModelConfig, seed_or_rng
) -> Model:
    """Create a model of config.kind with freshly initialized parameters.

    Initialization draws happen in a fixed parameter order, so the result is
    a deterministic function of (schema, vocab sizes, config, seed).
    """
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else np.random.default_rng(seed_or_rng)
    cfg = config.resolved(schema)
    d = schema.embedding_dim
    widths = cfg.layer_widths
    params = ModelParams()

    if cfg.kind == "single_tower":
        _add_embeddings(params, "embed", schema.all_fields, vocab, d, rng)
        in_width = (schema.num_user_fields + schema.num_item_fields) * d
        _add_fc_stack(params, "fc", in_width, widths, rng)
        params.add("out.W", glorot(rng, widths[-1], 1), "weight")
        params.add("out.b", np.zeros(1), "bias")
        return SingleTower(schema, cfg, params)

    _add_embeddings(params, "user_embed", schema.user_fields, vocab, d, rng)
    _add_embeddings(params, "item_embed", schema.item_fields, vocab, d, rng)
    if cfg.use_field_attention:
        m, n = schema.num_user_fields, schema.num_item_fields
        params.add("user_attn.W", glorot(rng, m, m), "weight")
        params.add("user_attn.b", np.zeros(m), "bias")
        params.add("item_attn.W", glorot(rng, n, n), "weight")
        params.add("item_attn.b", np.zeros(n), "bias")
    _add_fc_stack(params, "user_fc", schema.num_user_fields * d, widths, rng)
    _add_fc_stack(params, "item_fc", schema.num_item_fields * d, widths, rng)

    if cfg.kind == "two_tower":
        return TwoTower(schema, cfg, params)

    if cfg.fc_interaction:
        for layer in cfg.tapped_layers:
            joint = widths[layer - 1] + widths[-1]
            params.add(f"cross_fc.{layer}.W", glorot(rng, joint, 1), "weight")
            params.add(f"cross_fc.{layer}.b", np.zeros(1), "bias")
    elif cfg.use_early_interaction:
        out_width = cfg.user_heads * cfg.head_dim
        for layer in cfg.tapped_layers:
            params.add(f"user_proj.{layer}.W", glorot(rng, widths[layer - 1], out_width), "weight")
            params.add(f"user_proj.{layer}.b", np.zeros(out_width), "bias")
        item_out = cfg.item_heads * cfg.head_dim
        params.add("item_proj.W", glorot(rng, widths[-1], item_out), "weight")
        params.add("item_proj.b", np.zeros(item_out), "bias")
        if cfg.use_contrastive and cfg.user_heads * cfg.head_dim != cfg.item_heads * cfg.head_dim:
            raise ConfigError(
                "contrastive regularization needs equal user/item representation widths; "
                f"got {cfg.user_heads}x{cfg.head_dim} vs {cfg.item_heads}x{cfg.head_dim}"
            )
    return InteractionTower(schema, cfg, params)


# ---------------------------------------------------------------------------
# checkpoint file
#
# Layout (little-endian throughout), documented in the README:
#   magic "PTWR" | version u32 | schema_hash 32 bytes (sha256) |
#   header_len u32 | header JSON (schema + model config) |
#   param_count u32 | for each parameter:
#     name_len u16 | name utf8 | kind_len u8 | kind utf8 |
#     ndim u8 | dims u64 x ndim | float64 data, row-major

CHECKPOINT_MAGIC = b"PTWR"
CHECKPOINT_VERSION = 1


def schema_hash(schema: FeatureSchema) -> bytes:
    payload = json.dumps(
        {
            "user_fields": list(schema.user_fields),
            "item_fields": list(schema.item_fields),
            "label_field": schema.label_field,
            "embedding_dim": schema.embedding_dim,
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).digest()


def save_checkpoint(path: str | Path, model: Model) -> None:
    header = json.dumps(
        {
            "schema": {
                "user_fields": list(model.schema.user_fields),
                "item_fields": list(model.schema.item_fields),
                "label_field": model.schema.label_field,
                "embedding_dim": model.schema.embedding_dim,
            },
            "model": dataclasses.asdict(model.config),
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(schema_hash(model.schema))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            name_b = name.encode()
            kind_b = model.params.kind(name).encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", len(kind_b)))
            fh.write(kind_b)
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    stored_hash = bytes(view[8:40])
    (header_len,) = struct.unpack_from("<I", raw, 40)
    off = 44
    header = json.loads(bytes(view[off : off + header_len]).decode())
    off += header_len
    schema = FeatureSchema(
        tuple(header["schema"]["user_fields"]),
        tuple(header["schema"]["item_fields"]),
        header["schema"]["label_field"],
        header["schema"]["embedding_dim"],
    )
    if schema_hash(schema) != stored_hash:
        raise FormatError(f"{path} schema hash does not match its header")
    mc = dict(header["model"])
    mc["layer_widths"] = tuple(mc["layer_widths"])
    mc["tapped_layers"] = tuple(mc["tapped_layers"])
    config = ModelConfig(**mc)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = ModelParams()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = bytes(view[off : off + name_len]).decode()
        off += name_len
        (kind_len,) = struct.unpack_from("<B", raw, off)
        off += 1
        kind = bytes(view[off : off + kind_len]).decode()
        off += kind_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}Q", raw, off)
        off += 8 * ndim
        n_bytes = 8 * int(np.prod(dims, dtype=np.int64)) if ndim else 8
        data = np.frombuffer(view[off : off + n_bytes], dtype="<f8").reshape(dims)
        off += n_bytes
        params.add(name, data.copy(), kind)
    if off != len(raw):
        raise FormatError(f"{path} has {len(raw) - off} trailing bytes")
    cls = {"two_tower": TwoTower, "interaction_tower": InteractionTower, "single_tower": SingleTower}[
        config.kind
    ]
    return cls(schema, config, params)
