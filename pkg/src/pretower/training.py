"""Mini-batch training: Adam, the epoch loop with early stopping, gradcheck.

One training run is a deterministic function of (schema, data, configs,
seed): a single seeded generator drives the validation split, parameter
initialization, per-epoch shuffles, and dropout masks, in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .features import Batch, Dataset, FeatureSchema, Vocabulary
from .model import Model, ModelConfig, ModelParams, build_model
from .objectives import LossConfig, auc, evaluate, sigmoid_np, total_loss


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2048
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 10
    patience: int = 2
    seed: int = 7
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


class Adam:
    """Bias-corrected Adam with sparse handling for embedding tables.

    Embedding rows not referenced by the current batch keep both their values
    and their moment estimates untouched; the step counter is global.
    """

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, touched: dict[str, np.ndarray] | None = None) -> None:
        cfg = self.config
        self.step_count += 1
        bc1 = 1.0 - cfg.adam_beta1**self.step_count
        bc2 = 1.0 - cfg.adam_beta2**self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match {name} shape {p.data.shape}")
            if touched is not None and name in touched:
                rows = touched[name]
                gr = g[rows]
                self.m[name][rows] = cfg.adam_beta1 * self.m[name][rows] + (1 - cfg.adam_beta1) * gr
                self.v[name][rows] = cfg.adam_beta2 * self.v[name][rows] + (1 - cfg.adam_beta2) * gr * gr
                m_hat = self.m[name][rows] / bc1
                v_hat = self.v[name][rows] / bc2
                p.data[rows] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            else:
                self.m[name] = cfg.adam_beta1 * self.m[name] + (1 - cfg.adam_beta1) * g
                self.v[name] = cfg.adam_beta2 * self.v[name] + (1 - cfg.adam_beta2) * g * g
                m_hat = self.m[name] / bc1
                v_hat = self.v[name] / bc2
                p.data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def embedding_touch_map(model: Model, batch: Batch) -> dict[str, np.ndarray]:
    """Unique embedding rows each table sees in this batch, keyed by parameter name."""
    schema = model.schema
    touched: dict[str, np.ndarray] = {}
    for j, f in enumerate(schema.user_fields):
        for prefix in ("user_embed", "embed"):
            name = f"{prefix}.{f}"
            if name in model.params:
                touched[name] = np.unique(batch.user_ids[:, j])
    for j, f in enumerate(schema.item_fields):
        for prefix in ("item_embed", "embed"):
            name = f"{prefix}.{f}"
            if name in model.params:
                touched[name] = np.unique(batch.item_ids[:, j])
    return touched


def score_dataset(model: Model, dataset: Dataset, batch_size: int = 4096) -> np.ndarray:
    """Eval-mode logits over a whole dataset, in chunks."""
    chunks = []
    for start in range(0, len(dataset), batch_size):
        chunks.append(model.forward(dataset.slice(start, start + batch_size)).logits.data)
    return np.concatenate(chunks) if chunks else np.zeros(0)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_val_auc: float


def validation_split(dataset: Dataset, train_config: TrainConfig) -> tuple[Dataset, Dataset, np.random.Generator]:
    """Carve the early-stopping slice off the training data.

    Returns (train, validation, generator); the generator has consumed exactly
    one permutation, so callers that keep training draw the same stream the
    original run did.
    """
    n = len(dataset)
    if n < 2:
        raise DataError(f"need at least 2 rows to carve out a validation split, got {n}")
    rng = np.random.default_rng(train_config.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(np.floor(train_config.val_fraction * n + 0.5)))
    if n_val >= n:
        n_val = n - 1
    return dataset.take(perm[n_val:]), dataset.take(perm[:n_val]), rng


def run_training(
    schema: FeatureSchema,
    vocab: Vocabulary,
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_config: LossConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a fresh model on `dataset`, early-stopping on validation AUC.

    A val_fraction slice of the data is held out for early stopping; the
    parameters from the best validation epoch are restored before returning.
    """
    train_ds, val_ds, rng = validation_split(dataset, train_config)

    model = build_model(schema, vocab, model_config, rng)
    optimizer = Adam(model.params, train_config)
    use_cir = loss_config.lambda1 > 0 and model.config.use_contrastive

    history: list[dict] = []
    best_auc = -np.inf
    best_state: dict[str, np.ndarray] | None = None
    best_epoch = 0
    bad_epochs = 0
    global_step = 0

    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_ds))
        ctr_sum = 0.0
        cir_sum = 0.0
        n_batches = 0
        for start in range(0, len(train_ds), train_config.batch_size):
            batch = train_ds.take(order[start : start + train_config.batch_size])
            result = model.forward(batch, training=True, rng=rng)
            total, ctr, cir = total_loss(
                result.logits,
                result.user_repr if use_cir else None,
                result.item_repr if use_cir else None,
                batch.labels,
                model.params.weights(),
                loss_config,
            )
            global_step += 1
            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at step {global_step} (epoch {epoch})")
            for p in model.params.tensors().values():
                p.zero_grad()
            total.backward()
            optimizer.step(embedding_touch_map(model, batch))
            ctr_sum += ctr.item()
            cir_sum += cir.item() if cir is not None else 0.0
            n_batches += 1

        val_logits = score_dataset(model, val_ds)
        val_metrics = evaluate(val_logits, val_ds.labels)
        row = {
            "epoch": epoch,
            "loss_ctr": ctr_sum / n_batches,
            "loss_cir": cir_sum / n_batches,
            "val_auc": val_metrics.auc,
            "val_logloss": val_metrics.logloss,
        }
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)

        if val_metrics.auc > best_auc:
            best_auc = val_metrics.auc
            best_state = model.params.state_copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > train_config.patience:
                break

    if best_state is not None:
        model.params.load_state(best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_auc=float(best_auc))


# ---------------------------------------------------------------------------
# gradient check harness


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    kind: str
    threshold: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(not e.ok for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        out = [f"gradcheck {self.kind}: threshold {self.threshold:g}"]
        for e in self.entries:
            out.append(f"  {'ok  ' if e.ok else 'FAIL'} {e.name:<24} max rel err {e.max_rel_err:.3e}")
        out.append(f"gradcheck {self.kind}: {'FAIL' if self.failed else 'PASS'} (worst {self.worst:.3e})")
        return out


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def gradcheck(kind: str, seed: int = 0, threshold: float = 1e-3, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of the full training loss against central
    finite differences, per parameter tensor, on a tiny model."""
    schema = FeatureSchema(("uf0", "uf1"), ("if0", "if1"), "label", embedding_dim=2)
    vocab = Vocabulary(schema.all_fields)
    for f in schema.all_fields:
        for i in range(3):
            vocab.add(f, f"{f}_{i}")
    model_config = ModelConfig(
        kind=kind,
        layer_widths=(6, 4),
        head_dim=3,
        dropout=0.0,
        use_field_attention=True,
        use_early_interaction=True,
        use_contrastive=True,
    )
    loss_config = LossConfig(lambda1=0.1, lambda2=1e-3, tau=1.0)
    rng = np.random.default_rng(seed)
    model = build_model(schema, vocab, model_config, rng)
    batch = Batch(
        rng.integers(0, 4, size=(4, 2)).astype(np.int64),
        rng.integers(0, 4, size=(4, 2)).astype(np.int64),
        np.array([1.0, 0.0, 1.0, 0.0]),
    )
    use_cir = model.config.use_contrastive

    def loss_tensor() -> T.Tensor:
        result = model.forward(batch)
        total, _, _ = total_loss(
            result.logits,
            result.user_repr if use_cir else None,
            result.item_repr if use_cir else None,
            batch.labels,
            model.params.weights(),
            loss_config,
        )
        return total

    for p in model.params.tensors().values():
        p.zero_grad()
    loss_tensor().backward()
    analytic = {n: t.grad.copy() for n, t in model.params.items()}

    report = GradCheckReport(kind=kind, threshold=threshold)
    for name, p in model.params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.ravel()
        nflat = numeric.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_tensor().item()
            flat[i] = orig - step
            fm = loss_tensor().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
        err = _rel_err(analytic[name], numeric)
        report.entries.append(GradCheckEntry(name=name, max_rel_err=err, ok=err <= threshold))
    return report
