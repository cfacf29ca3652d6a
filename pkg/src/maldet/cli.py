"""Command-line interface: ingest, train, evaluate, predict, explain.

Configuration comes from an optional JSON file with ``model`` / ``train`` /
``paths`` sections; command-line flags override file values. Every command
logs its seed, config echo, input digests, and wall-clock time to stderr.
Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import MaldetError, NonFiniteLoss, NumericError
from .explain import explain as explain_sequence
from .explain import render_html
from .network import ModelConfig, load_bundle, predict_proba, save_bundle
from .reports import (
    build_dataset,
    extract_sequence,
    parse_report,
    read_csv,
    read_labels_csv,
    write_csv,
)
from .textprep import (
    OOV_ID,
    PAD_ID,
    encode,
    encode_dataset,
    fit_vocabulary,
    train_test_split,
)
from .training import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LR,
    evaluate,
    grid_search,
    train,
    write_grid_table,
)

log = logging.getLogger("maldet")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

TRAIN_KEYS = {"epochs", "batch_size", "lr", "split_ratio", "seed", "max_vocab", "grid"}
PATH_KEYS = {"dataset", "model", "outdir"}


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def _require_file(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise MaldetError(f"{kind} file not found: {p}")
    return p


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {"model": {}, "train": {}, "paths": {}}
    doc = json.loads(_require_file(path, "config").read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise MaldetError("config file must hold a JSON object")
    unknown = set(doc) - {"model", "train", "paths"}
    if unknown:
        raise MaldetError(f"unknown config section: {sorted(unknown)[0]}")
    for section, keys in (("train", TRAIN_KEYS), ("paths", PATH_KEYS)):
        extra = set(doc.get(section, {})) - keys
        if extra:
            raise MaldetError(f"unknown {section} config key: {sorted(extra)[0]}")
    return {"model": doc.get("model", {}), "train": doc.get("train", {}),
            "paths": doc.get("paths", {})}


def _resolve_seed(flag_value, config: dict) -> int:
    if flag_value is not None:
        return flag_value
    if config.get("seed") is not None:
        return int(config["seed"])
    return int(os.environ.get("MALDET_SEED", "0"))


def _report_tokens(path: Path) -> tuple[str, list[str]]:
    report = parse_report(path.read_bytes())
    return report.sha256, extract_sequence(report)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    reports_dir = Path(args.reports)
    if not reports_dir.is_dir():
        raise MaldetError(f"reports directory not found: {reports_dir}")
    labels_path = _require_file(args.labels, "labels")
    log.info("seed=%d (unused: ingestion is deterministic)", _resolve_seed(None, {}))
    log.info("labels digest %s", _digest(labels_path))
    labels = read_labels_csv(labels_path)
    data = build_dataset(reports_dir, labels)
    if not data:
        raise MaldetError(f"no reports found in {reports_dir}")
    write_csv(data, args.out)
    benign = sum(1 for d in data if d.label == 0)
    malware = len(data) - benign
    print(f"ingested {len(data)} reports: {benign} benign, {malware} malware")
    print(f"dataset written to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run_config(args.config)
    paths = run["paths"]
    data_arg = args.data if args.data is not None else paths.get("dataset")
    out_arg = args.out if args.out is not None else paths.get("model")
    if data_arg is None or out_arg is None:
        raise MaldetError("dataset and model paths are required "
                          "(--data/--out or the config paths section)")
    data_path = _require_file(data_arg, "dataset")
    log.info("dataset digest %s", _digest(data_path))
    tcfg = run["train"]
    seed = _resolve_seed(args.seed, tcfg)
    epochs = args.epochs if args.epochs is not None else int(tcfg.get("epochs", DEFAULT_EPOCHS))
    batch_size = (args.batch_size if args.batch_size is not None
                  else int(tcfg.get("batch_size", DEFAULT_BATCH_SIZE)))
    lr = args.lr if args.lr is not None else float(tcfg.get("lr", DEFAULT_LR))
    ratio = float(tcfg.get("split_ratio", 0.7))
    max_vocab = tcfg.get("max_vocab")
    config = ModelConfig.from_dict(run["model"])
    log.info("seed=%d epochs=%d batch_size=%d lr=%g split_ratio=%g",
             seed, epochs, batch_size, lr, ratio)
    log.info("model config: %s", json.dumps(config.to_dict(), sort_keys=True))

    rows = read_csv(data_path)
    train_rows, test_rows = train_test_split(rows, ratio, seed)
    vocab = fit_vocabulary(train_rows, max_vocab=max_vocab)
    log.info("vocabulary fitted on %d training rows: %d tokens",
             len(train_rows), vocab.size - 2)
    train_data = encode_dataset(train_rows, vocab, config.n)
    test_data = encode_dataset(test_rows, vocab, config.n)

    outdir_arg = args.outdir if args.outdir is not None else paths.get("outdir")
    outdir = Path(outdir_arg) if outdir_arg else Path(out_arg).resolve().parent
    outdir.mkdir(parents=True, exist_ok=True)

    train_started = time.perf_counter()
    if args.grid:
        grid = tcfg.get("grid", {"filters": [32, 64, 128], "kernel": [3, 5, 7]})
        config, table = grid_search(config, grid, train_data, vocab, seed=seed,
                                    epochs=epochs, batch_size=batch_size, lr=lr)
        write_grid_table(table, outdir / "grid_scores.csv")
        log.info("grid search selected filters=%d kernel=%d",
                 config.conv_blocks[0].filters, config.conv_blocks[0].kernel)
    bundle, history = train(config, train_data, vocab, epochs=epochs,
                            batch_size=batch_size, seed=seed, lr=lr)
    train_seconds = time.perf_counter() - train_started
    save_bundle(bundle, out_arg)
    history.write_csv(outdir / "history.csv")

    test_started = time.perf_counter()
    metrics = evaluate(bundle, test_data)
    test_seconds = time.perf_counter() - test_started
    metrics.write_json(outdir / "metrics.json")

    from .plots import save_history_figure, save_metrics_figure
    if len(history):
        save_history_figure(history, outdir / "training_curves.png")
    save_metrics_figure(metrics, outdir / "metrics.png")

    log.info("training took %.2fs, evaluation took %.2fs", train_seconds, test_seconds)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    print(f"model bundle written to {out_arg}")
    return EXIT_OK


def _oov_rate(ids: np.ndarray) -> float:
    active = ids != PAD_ID
    return float((ids[active] == OOV_ID).mean()) if active.any() else 0.0


def cmd_evaluate(args) -> int:
    data_path = _require_file(args.data, "dataset")
    model_path = _require_file(args.model, "model")
    log.info("seed=%d (unused: evaluation is deterministic)", _resolve_seed(None, {}))
    log.info("dataset digest %s, model digest %s", _digest(data_path), _digest(model_path))
    bundle = load_bundle(model_path)
    rows = read_csv(data_path)
    if not rows:
        raise MaldetError(f"dataset {data_path} has no rows")
    data = encode_dataset(rows, bundle.vocabulary, bundle.config.n)
    rate = _oov_rate(data.ids)
    print(f"oov rate: {rate:.4f}")
    if rate > 0:
        log.warning("%.2f%% of active tokens are outside the bundle vocabulary "
                    "(was the model trained on a different corpus?)", 100 * rate)
    started = time.perf_counter()
    metrics = evaluate(bundle, data)
    log.info("evaluation took %.2fs", time.perf_counter() - started)
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    if args.outdir:
        outdir = Path(args.outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        metrics.write_json(outdir / "metrics.json")
        from .plots import save_metrics_figure
        save_metrics_figure(metrics, outdir / "metrics.png")
    return EXIT_OK


def cmd_predict(args) -> int:
    report_path = _require_file(args.report, "report")
    model_path = _require_file(args.model, "model")
    log.info("seed=%d (unused: prediction is deterministic)", _resolve_seed(None, {}))
    log.info("report digest %s", _digest(report_path))
    bundle = load_bundle(model_path)
    sha256, tokens = _report_tokens(report_path)
    ids = encode(tokens, bundle.vocabulary, bundle.config.n)[None, :]
    probability = float(predict_proba(bundle, ids)[0])
    label = "malware" if probability >= 0.5 else "benign"
    print(json.dumps({"sha256": sha256, "probability": probability, "class": label},
                     sort_keys=True))
    return EXIT_OK


def cmd_explain(args) -> int:
    if args.samples < 2:
        raise MaldetError("--samples must be at least 2")
    report_path = _require_file(args.report, "report")
    model_path = _require_file(args.model, "model")
    seed = _resolve_seed(args.seed, {})
    log.info("report digest %s seed=%d samples=%d",
             _digest(report_path), seed, args.samples)
    bundle = load_bundle(model_path)
    sha256, tokens = _report_tokens(report_path)
    started = time.perf_counter()
    expl = explain_sequence(bundle, tokens, num_samples=args.samples,
                            top_k=args.top_k, seed=seed, sha256=sha256)
    log.info("explanation took %.2fs", time.perf_counter() - started)
    out = Path(args.out)
    render_html(expl, out)
    expl.write_json(out.with_suffix(".json"))
    from .plots import save_weights_figure
    save_weights_figure(expl, out.with_suffix(".png"))
    print(f"explanation written to {out}, {out.with_suffix('.json')} "
          f"and {out.with_suffix('.png')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maldet",
        description="Classify Windows executables from sandbox API-call traces.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse sandbox reports into the dataset CSV")
    p.add_argument("--reports", required=True, help="directory of *.json reports")
    p.add_argument("--labels", required=True, help="sha256,label CSV")
    p.add_argument("--out", required=True, help="output dataset CSV")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="split, fit vocabulary, train, evaluate")
    p.add_argument("--data", help="dataset CSV (or config paths.dataset)")
    p.add_argument("--config", help="JSON run config (model/train/paths sections)")
    p.add_argument("--out", help="output model bundle path (or config paths.model)")
    p.add_argument("--outdir", help="report directory (default: alongside --out)")
    p.add_argument("--grid", action="store_true",
                   help="grid-search conv filters/kernel before the final fit")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained bundle on a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--outdir", help="also write metrics.json and metrics.png here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify one behavioural report")
    p.add_argument("--report", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="explain one prediction (HTML + JSON + PNG)")
    p.add_argument("--report", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output HTML path")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_explain)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    log.info("args: %s", {k: v for k, v in vars(args).items() if k != "func"})
    started = time.perf_counter()
    try:
        code = args.func(args)
    except (NonFiniteLoss, NumericError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (MaldetError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    log.info("command %s finished in %.2fs", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
