"""Command line front end: generate, split, fit-preprocessor, train, evaluate, compare.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
during fitting, 4 schema mismatch between a model and a dataset.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, dcm, mnl
from .data import DatasetError, DatasetSplit, FeatureSchema, SchemaError, load_dataset, save_dataset, split_dataset, table1_schema
from .datagen import GeneratorConfig, GroundTruthUtility, generate_dataset, linear_utility, nonlinear_utility
from .metrics import EvalReport, baseline_predictions, evaluate, summary_table, write_topn_csv
from .preprocess import Preprocessor, encode_dataset, fit_preprocessor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_SCHEMA = 4

SEED_ENV = "PTRCHOICE_SEED"
BASELINES = ("cheapest", "shortest")

log = logging.getLogger("ptrchoice")


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CLIError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


DEFAULTS = {
    "generate": {"sessions": 1000, "mode": "linear", "min_alternatives": 1, "max_alternatives": 50, "utility": None},
    "split": {"ratios": [0.7, 0.15, 0.15]},
    "fit-preprocessor": {"k": 5.0, "max_len": None},
    "train-mnl": {"k": 5.0, "lr": 0.5, "eps": 1e-8, "max_iters": 3000, "tol": 1e-7},
    "train-dcm": {
        "k": 5.0,
        "memory": 128,
        "layers": 1,
        "lr": 0.1,
        "batch": 128,
        "clip": 8.0,
        "head": "bilinear",
        "max_epochs": 200,
        "patience": 10,
        "eps": 1e-8,
    },
    "evaluate": {"n_max": 50, "page_size": 15},
    "compare": {"n_max": 50, "page_size": 15},
}


def _resolve(args: argparse.Namespace, key: str) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS.get(key, {}))
    cfg["seed"] = _default_seed()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CLIError(f"config file not found: {path}")
        try:
            cfg.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {path}: {exc}") from None
    for k, v in vars(args).items():
        if k in ("func", "config", "command", "model_kind", "verbose") or v is None:
            continue
        cfg[k] = v
    return cfg


def _existing(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"{what} not found: {p}")
    return p


def _schema_for(data_path: Path, schema_path) -> FeatureSchema:
    try:
        if schema_path:
            return FeatureSchema.load(_existing(schema_path, "schema file"))
        sibling = data_path.with_suffix(".schema.json")
        if sibling.is_file():
            return FeatureSchema.load(sibling)
        shared = data_path.parent / "schema.json"
        if shared.is_file():
            return FeatureSchema.load(shared)
    except SchemaError as exc:
        raise CLIError(str(exc)) from None
    return table1_schema()


def _load(cfg: dict, key: str = "data"):
    path = _existing(cfg.get(key), f"{key} file")
    schema = _schema_for(path, cfg.get("schema"))
    try:
        return load_dataset(path, schema)
    except DatasetError as exc:
        raise CLIError(str(exc)) from None


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _provenance(cfg: dict) -> dict:
    return {"ptrchoice_version": __version__, "resolved_config": cfg}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _resolve(args, "generate")
    if cfg.get("out") is None:
        raise CLIError("generate needs -o/--out")
    if int(cfg["sessions"]) < 1:
        raise CLIError("--sessions must be >= 1")
    if cfg["utility"] is not None:
        utility = GroundTruthUtility(**cfg["utility"])
    elif cfg["mode"] == "linear":
        utility = linear_utility()
    elif cfg["mode"] == "nonlinear":
        utility = nonlinear_utility()
    else:
        raise CLIError(f"unknown mode {cfg['mode']!r}")
    try:
        gen = GeneratorConfig(
            n_sessions=int(cfg["sessions"]),
            min_alternatives=int(cfg["min_alternatives"]),
            max_alternatives=int(cfg["max_alternatives"]),
            utility=utility,
            seed=int(cfg["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad generator config: {exc}") from None
    cfg["utility"] = gen.utility.__dict__ | {"interactions": [list(t) for t in gen.utility.interactions]}
    out = Path(cfg["out"])
    dataset = generate_dataset(gen)
    save_dataset(dataset, out)
    schema_out = Path(cfg.get("schema_out") or out.with_suffix(".schema.json"))
    dataset.schema.save(schema_out)
    _write_json(out.with_suffix(".meta.json"), {"generator": gen.to_dict(), **_provenance(cfg)})
    print(f"wrote {len(dataset)} sessions to {out} (schema {schema_out})")
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _resolve(args, "split")
    dataset = _load(cfg)
    try:
        parts = split_dataset(dataset, tuple(cfg["ratios"]), int(cfg["seed"]))
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    out_dir = Path(cfg.get("out_dir") or Path(cfg["data"]).parent)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        part = getattr(parts, name)
        save_dataset(part, out_dir / f"{name}.jsonl")
        part.schema.save(out_dir / f"{name}.schema.json")
        print(f"{name}: {len(part)} sessions")
    _write_json(out_dir / "split.meta.json", _provenance(cfg))
    return EXIT_OK


def _preprocessor(cfg: dict, train) -> Preprocessor:
    if cfg.get("preprocessor"):
        prep = Preprocessor.load(_existing(cfg["preprocessor"], "preprocessor file"))
        if prep.schema != train.schema:
            raise CLIError("preprocessor schema does not match the training data", EXIT_SCHEMA)
        return prep
    try:
        return fit_preprocessor(train, float(cfg["k"]), cfg.get("max_len"))
    except ValueError as exc:
        raise CLIError(str(exc)) from None


def cmd_fit_preprocessor(args) -> int:
    cfg = _resolve(args, "fit-preprocessor")
    if cfg.get("out") is None:
        raise CLIError("fit-preprocessor needs -o/--out")
    train = _load(cfg)
    prep = _preprocessor(cfg, train)
    _write_json(cfg["out"], {**prep.to_dict(), "provenance": _provenance(cfg)})
    print(f"wrote preprocessor to {cfg['out']}")
    return EXIT_OK


def cmd_train(args) -> int:
    kind = args.model_kind
    cfg = _resolve(args, f"train-{kind}")
    if cfg.get("out") is None:
        raise CLIError("train needs -o/--out")
    train = _load(cfg)
    prep = _preprocessor(cfg, train)
    out = Path(cfg["out"])
    history_path = Path(cfg.get("history") or out.with_suffix(".history.json"))

    if kind == "mnl":
        fit_cfg = mnl.MNLFitConfig(lr=cfg["lr"], eps=cfg["eps"], max_iters=int(cfg["max_iters"]), tol=cfg["tol"])
        try:
            params, report = mnl.fit_mnl(encode_dataset(prep, train), mnl.MNLDesign.from_preprocessor(prep), fit_cfg)
        except mnl.MNLFitError as exc:
            raise CLIError(str(exc), EXIT_NUMERIC) from None
        mnl.save_mnl(out, params, prep, report, _provenance(cfg))
        _write_json(history_path, {"ll_trace": report.ll_trace, "converged": report.converged, **_provenance(cfg)})
        print(f"MNL log-likelihood {report.final_log_likelihood:.4f} after {report.iterations} iterations")
        return EXIT_OK

    try:
        config = dcm.DCMConfig(
            memory_size=int(cfg["memory"]),
            num_layers=int(cfg["layers"]),
            lr=float(cfg["lr"]),
            batch_size=int(cfg["batch"]),
            clip_threshold=float(cfg["clip"]),
            k=float(cfg["k"]),
            head=cfg["head"],
            max_epochs=int(cfg["max_epochs"]),
            patience=int(cfg["patience"]),
            seed=int(cfg["seed"]),
            eps=float(cfg["eps"]),
        )
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad training config: {exc}") from None
    valid = _load(cfg, "valid") if cfg.get("valid") else train
    if valid.schema != train.schema:
        raise CLIError("validation data schema differs from training data", EXIT_SCHEMA)
    try:
        params, history = dcm.train(DatasetSplit(train, valid, valid), prep, config)
    except dcm.DCMTrainingError as exc:
        raise CLIError(str(exc), EXIT_NUMERIC) from None
    dcm.save_dcm(out, params, prep, config, extra=_provenance(cfg))
    _write_json(
        history_path,
        {
            "train_loss": history.train_loss,
            "valid_top1": history.valid_top1,
            "best_epoch": history.best_epoch,
            **_provenance(cfg),
        },
    )
    print(f"DCM best epoch {history.best_epoch}/{history.epochs_run}, valid top-1 {max(history.valid_top1):.4f}")
    return EXIT_OK


def _predict(spec: str, dataset):
    """Predictions and a display name for a baseline name or a model file."""
    if spec in BASELINES:
        return baseline_predictions(dataset, spec), spec
    path = _existing(spec, "model file")
    if dcm.is_dcm_file(path):
        params, prep, _, _ = dcm.load_dcm(path)
        kind = "dcm"
    else:
        try:
            params, prep, _ = mnl.load_mnl(path)
        except (ValueError, json.JSONDecodeError, UnicodeDecodeError, KeyError):
            raise CLIError(f"{path}: not a recognised model file") from None
        kind = "mnl"
    if prep.schema != dataset.schema:
        raise CLIError(f"{path}: model schema does not match the evaluation data", EXIT_SCHEMA)
    module = dcm if kind == "dcm" else mnl
    try:
        preds = module.predict_dataset(params, prep, dataset)
    except ValueError as exc:
        raise CLIError(f"{path}: {exc}", EXIT_SCHEMA) from None
    return preds, f"{kind}:{path.stem}"


def _reports(specs, cfg) -> list[EvalReport]:
    dataset = _load(cfg)
    out = []
    for spec in specs:
        preds, name = _predict(spec, dataset)
        out.append(evaluate(name, preds, dataset, int(cfg["n_max"]), int(cfg["page_size"]), _provenance(cfg)))
    return out


def cmd_evaluate(args) -> int:
    cfg = _resolve(args, "evaluate")
    if not cfg.get("model"):
        raise CLIError("evaluate needs --model")
    (report,) = _reports([cfg["model"]], cfg)
    if cfg.get("out"):
        report.save_json(cfg["out"])
    if cfg.get("csv"):
        write_topn_csv([report], cfg["csv"])
    print(summary_table([report]))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args, "compare")
    specs = cfg.get("models") or []
    if len(specs) < 2:
        raise CLIError("compare needs at least two models or baselines")
    reports = _reports(specs, cfg)
    if cfg.get("out"):
        _write_json(cfg["out"], {"methods": [r.to_dict() for r in reports], **_provenance(cfg)})
    if cfg.get("csv"):
        write_topn_csv(reports, cfg["csv"])
    print(summary_table(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptrchoice", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON file with option values (flags override it)")
        p.add_argument("--seed", type=int, help=f"random seed (default ${SEED_ENV} or 0)")
        if data:
            p.add_argument("--data", help="JSON-lines session file")
            p.add_argument("--schema", help="schema JSON (default: <data>.schema.json, schema.json, or the airline schema)")

    g = sub.add_parser("generate", help="write a synthetic session file")
    common(g, data=False)
    g.add_argument("--sessions", type=int)
    g.add_argument("--mode", choices=("linear", "nonlinear"))
    g.add_argument("--min-alternatives", dest="min_alternatives", type=int)
    g.add_argument("--max-alternatives", dest="max_alternatives", type=int)
    g.add_argument("--schema-out", dest="schema_out")
    g.add_argument("-o", "--out")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="split a session file into train/valid/test")
    common(s)
    s.add_argument("--ratios", type=float, nargs=3)
    s.add_argument("--out-dir", dest="out_dir")
    s.set_defaults(func=cmd_split)

    f = sub.add_parser("fit-preprocessor", help="fit vocabularies and scaling on training data")
    common(f)
    f.add_argument("--k", type=float)
    f.add_argument("--max-len", dest="max_len", type=int)
    f.add_argument("-o", "--out")
    f.set_defaults(func=cmd_fit_preprocessor)

    t = sub.add_parser("train", help="fit an MNL or deep choice model")
    t.add_argument("model_kind", choices=("mnl", "dcm"))
    common(t)
    t.add_argument("--preprocessor")
    t.add_argument("--k", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--eps", type=float)
    t.add_argument("--max-iters", dest="max_iters", type=int, help="mnl only")
    t.add_argument("--tol", type=float, help="mnl only")
    t.add_argument("--valid", help="dcm: validation session file (default: training data)")
    t.add_argument("--memory", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--clip", type=float)
    t.add_argument("--head", choices=dcm.HEADS)
    t.add_argument("--max-epochs", dest="max_epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--history")
    t.add_argument("-o", "--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score one model or baseline on a dataset")
    common(e)
    e.add_argument("--model", help="model file, or 'cheapest' / 'shortest'")
    e.add_argument("--n-max", dest="n_max", type=int)
    e.add_argument("--page-size", dest="page_size", type=int)
    e.add_argument("--csv")
    e.add_argument("-o", "--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="score several models side by side")
    common(c)
    c.add_argument("--models", nargs="+")
    c.add_argument("--n-max", dest="n_max", type=int)
    c.add_argument("--page-size", dest="page_size", type=int)
    c.add_argument("--csv")
    c.add_argument("-o", "--out")
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
