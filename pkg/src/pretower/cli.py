"""Command-line entry point.

Every command is a single process driven by one flat TOML config (plus
``--set key=value`` overrides, which win) and writes its outputs under a run
directory that contains a copy of the fully resolved config, so any run can
be reproduced from its own artifacts.

Exit codes: 0 success, 2 config error, 3 data/path error, 4 numeric
divergence, 5 binary format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig, load_config, write_config
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    FormatError,
    MetricError,
    ShapeError,
)
from .features import Vocabulary, generate_synthetic, load_catalog, load_csv, split
from .index import (
    DecoupledScorer,
    ScoreRequest,
    SingleTowerScorer,
    bench,
    export_items,
    load_users_csv,
    read_index,
    write_bench_csv,
)
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .objectives import evaluate
from .training import gradcheck, run_training, score_dataset, validation_split

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_FORMAT = 5

ABLATION_VARIANTS = {
    "full": {},
    "no_field_attention": {"use_field_attention": False},
    "no_early_interaction": {"use_early_interaction": False},
    "no_contrastive": {"use_contrastive": False},
    "fc_interaction": {"fc_interaction": True},
}

CHECKPOINT_FILE = "checkpoint.bin"
VOCAB_FILE = "vocab.tsv"
CONFIG_FILE = "config.toml"
METRICS_FILE = "metrics.jsonl"


def _load_run(run_dir: str | Path):
    run_dir = Path(run_dir)
    config = load_config(run_dir / CONFIG_FILE)
    model = load_checkpoint(run_dir / CHECKPOINT_FILE)
    vocab = Vocabulary.load(run_dir / VOCAB_FILE, model.schema.all_fields)
    return config, model, vocab


def _train_into(config: RunConfig, data_path: str, out_dir: Path):
    schema = config.schema()
    vocab, dataset = load_csv(data_path, schema)
    train_all, test = split(dataset, config["split_ratio"], config["seed"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / CONFIG_FILE, config)
    vocab.save(out_dir / VOCAB_FILE)
    with open(out_dir / METRICS_FILE, "w", encoding="utf-8", newline="\n") as log:
        result = run_training(
            schema,
            vocab,
            train_all,
            config.model_config(),
            config.train_config(),
            config.loss_config(),
            on_epoch=lambda row: log.write(json.dumps(row) + "\n"),
        )
    save_checkpoint(out_dir / CHECKPOINT_FILE, result.model)
    return result, test, vocab, schema


def cmd_gen_data(args) -> int:
    config = load_config(args.config, args.set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / CONFIG_FILE, config)
    paths = generate_synthetic(config.schema(), config.synthetic_spec(), out)
    print(json.dumps({name: str(path) for name, path in paths.items()}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    result, _, _, _ = _train_into(config, args.data, Path(args.out))
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc}))
    return EXIT_OK


def cmd_eval(args) -> int:
    config, model, vocab = _load_run(args.run)
    schema = config.schema()
    _, dataset = load_csv(args.data, schema, vocab)
    if args.split == "all":
        subset = dataset
    else:
        train_all, test = split(dataset, config["split_ratio"], config["seed"])
        if args.split == "test":
            subset = test
        elif args.split == "train":
            subset = train_all
        else:
            subset = validation_split(train_all, config.train_config())[1]
    metrics = evaluate(score_dataset(model, subset), subset.labels, args.base_auc)
    payload = json.dumps(metrics.as_dict())
    print(payload)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_export_items(args) -> int:
    _, model, vocab = _load_run(args.run)
    catalog = load_catalog(args.items, model.schema)
    index = export_items(model, vocab, catalog, args.out)
    print(json.dumps({"items": len(index), "head_count": index.head_count, "head_dim": index.head_dim, "path": str(args.out)}))
    return EXIT_OK


def _parse_user(text: str) -> dict[str, str]:
    values = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"--user expects field=value pairs separated by commas, got {part!r}")
        values[key.strip()] = value.strip()
    return values


def cmd_score(args) -> int:
    _, model, vocab = _load_run(args.run)
    index = read_index(args.index)
    scorer = DecoupledScorer(model, vocab, index)
    candidates = tuple(int(c) for c in args.candidates.split(","))
    response = scorer.score(ScoreRequest(_parse_user(args.user), candidates))
    payload = json.dumps(
        {
            "ranking": list(response.ranking),
            "items": [
                {"item_id": it.item_id, "score": it.score, "error": it.error} for it in response.items
            ],
        }
    )
    print(payload)
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.run_decoupled:
        config, decoupled_model, vocab = _load_run(args.run_decoupled)
        schema = decoupled_model.schema
    else:
        if not args.config:
            raise ConfigError("bench needs either --config (fresh models) or --run-decoupled")
        config = load_config(args.config, args.set)
        schema = config.schema()
        if config.model_config().kind == "single_tower":
            raise ConfigError("the decoupled side of the bench cannot be a single-tower model")
        vocab = None
        decoupled_model = None

    catalog = load_catalog(args.items, schema)
    users = load_users_csv(args.users, schema)
    if vocab is None:
        vocab = Vocabulary(schema.all_fields)
        for user in users:
            for field, value in user.items():
                vocab.add(field, value)
        for _, values in catalog:
            for field, value in values.items():
                vocab.add(field, value)
    if decoupled_model is None:
        decoupled_model = build_model(schema, vocab, config.model_config(), config["seed"])

    if args.run_single:
        _, single_model, _ = _load_run(args.run_single)
        if single_model.kind != "single_tower":
            raise ConfigError(f"--run-single must hold a single-tower model, got {single_model.kind}")
    else:
        single_cfg = ModelConfig(
            kind="single_tower",
            layer_widths=config.model_config().layer_widths,
            dropout=config.model_config().dropout,
        )
        single_model = build_model(schema, vocab, single_cfg, config["seed"])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index_path = out.with_suffix(".index.bin")
    index = export_items(decoupled_model, vocab, catalog, index_path)
    scorers = {
        "decoupled": DecoupledScorer(decoupled_model, vocab, index),
        "single_tower": SingleTowerScorer(single_model, vocab, catalog),
    }
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(config["bench_ks"])
    reps = args.reps if args.reps else config["bench_repetitions"]
    rows = bench(scorers, users, [c for c, _ in catalog], ks, reps, seed=config["seed"])
    write_bench_csv(out, rows)
    for row in rows:
        print(f"{row.model} k={row.k}: median {row.median_us:.1f}us p95 {row.p95_us:.1f}us")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    kinds = args.kinds.split(",") if args.kinds else ["two_tower", "single_tower", "interaction_tower"]
    all_ok = True
    for kind in kinds:
        report = gradcheck(kind, seed=args.seed)
        print("\n".join(report.lines()))
        all_ok = all_ok and not report.failed
    return EXIT_OK if all_ok else 1


def cmd_ablate(args) -> int:
    config = load_config(args.config, args.set)
    if config["model"] != "interaction_tower":
        raise ConfigError("ablate requires model = 'interaction_tower'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for name, flag_overrides in ABLATION_VARIANTS.items():
        variant_config = RunConfig({**config.values, **flag_overrides}).validate()
        run_dir = out / name
        result, test, _, _ = _train_into(variant_config, args.data, run_dir)
        metrics = evaluate(score_dataset(result.model, test), test.labels, args.base_auc)
        (run_dir / "metrics.json").write_text(json.dumps(metrics.as_dict()) + "\n", encoding="utf-8")
        summary[name] = metrics.as_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pretower",
        description="Train, evaluate, index, and benchmark two-tower pre-ranking models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="flat TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("gen-data", help="write a synthetic planted-signal dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model into a run directory")
    common(p)
    p.add_argument("--data", required=True, help="interactions CSV")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained run on a data split")
    p.add_argument("--run", required=True, help="run directory from train")
    p.add_argument("--data", required=True, help="interactions CSV")
    p.add_argument("--split", choices=["train", "test", "val", "all"], default="test")
    p.add_argument("--base-auc", type=float, default=None, help="base AUC for the relative improvement")
    p.add_argument("--out", default=None, help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-items", help="precompute item vectors into a binary index")
    p.add_argument("--run", required=True)
    p.add_argument("--items", required=True, help="item catalog CSV")
    p.add_argument("--out", required=True, help="index file path")
    p.set_defaults(func=cmd_export_items)

    p = sub.add_parser("score", help="score candidates for one user from the index")
    p.add_argument("--run", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--user", required=True, help="comma-separated field=value pairs")
    p.add_argument("--candidates", required=True, help="comma-separated item ids")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("bench", help="latency of decoupled vs per-candidate serving")
    common(p, config_required=False)
    p.add_argument("--run-decoupled", default=None, help="run dir of a tower model (default: fresh from config)")
    p.add_argument("--run-single", default=None, help="run dir of a single-tower model (default: fresh)")
    p.add_argument("--items", required=True)
    p.add_argument("--users", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--ks", default=None, help="comma-separated candidate counts")
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients on a tiny model")
    p.add_argument("--kinds", default=None, help="comma-separated model kinds (default: all three)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the component-removal variants and report test metrics")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-auc", type=float, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as e:
        print(f"config error (shape): {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except FormatError as e:
        print(f"format error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"path error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
