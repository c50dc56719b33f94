"""Shared helpers for building tiny models and batches in tests."""

import numpy as np

from pretower.features import Batch, FeatureSchema, Vocabulary


def tiny_schema(m=2, n=2, dim=2):
    user = tuple(f"u{i}" for i in range(m))
    item = tuple(f"v{i}" for i in range(n))
    return FeatureSchema(user, item, "label", embedding_dim=dim)


def tiny_vocab(schema, per_field=4):
    vocab = Vocabulary(schema.all_fields)
    for f in schema.all_fields:
        for i in range(per_field):
            vocab.add(f, f"{f}_{i}")
    return vocab


def random_batch(schema, vocab, batch_size, rng, ensure_both_classes=True):
    user_ids = np.stack(
        [rng.integers(0, vocab.size(f), size=batch_size) for f in schema.user_fields], axis=1
    )
    item_ids = np.stack(
        [rng.integers(0, vocab.size(f), size=batch_size) for f in schema.item_fields], axis=1
    )
    labels = rng.integers(0, 2, size=batch_size).astype(np.float64)
    if ensure_both_classes and batch_size >= 2:
        labels[0] = 1.0
        labels[1] = 0.0
    return Batch(user_ids.astype(np.int64), item_ids.astype(np.int64), labels)
