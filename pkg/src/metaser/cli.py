"""Command line entry point: generate-data, train, evaluate, ablate, gradcheck.

Configuration is layered: dataclass defaults, then a JSON config file
(``--config``), then individual flags. Every scalar field of
ExperimentConfig has a flag of the same name with dashes; nested fields of
the generation and encoder sections are reached with ``--set
section.field=value`` where value is parsed as JSON when possible.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import gradcheck
from .data import CorpusError, GenerationConfig, generate_corpus, write_corpus
from .train import (ExperimentConfig, evaluate_checkpoints, fold_rows_csv, load_corpus,
                    run_ablation, run_kfold, write_run)

log = logging.getLogger("metaser")

_NESTED = ("generation", "encoder")
_LIST_FIELDS = ("aux_tasks", "folds")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file; flags override it")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any field, including nested ones such as encoder.n_layers=6")
    g = p.add_argument_group("experiment fields")
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in _NESTED:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "loss_weights":
            g.add_argument(flag, type=json.loads, default=None, help="JSON object task -> weight")
        elif f.name == "lr_aux_heads":
            g.add_argument(flag, type=json.loads, default=None, help="JSON object task -> learning rate")
        elif f.name == "aux_tasks":
            g.add_argument(flag, type=_csv_list, default=None, help="comma separated; empty string for none")
        elif f.name == "folds":
            g.add_argument(flag, type=lambda s: [int(x) for x in _csv_list(s)], default=None)
        elif f.name in ("lr_encoder_stage2", "lr_downstream_stage2"):
            g.add_argument(flag, type=float, default=None)
        elif f.type in ("bool",) or isinstance(f.default, bool):
            g.add_argument(flag, type=_bool, default=None)
        elif isinstance(f.default, int):
            g.add_argument(flag, type=int, default=None)
        elif isinstance(f.default, float):
            g.add_argument(flag, type=float, default=None)
        else:
            g.add_argument(flag, type=str, default=None)


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    data = ExperimentConfig().to_dict()
    if getattr(args, "config", None):
        _merge(data, json.loads(Path(args.config).read_text()))
    for f in dataclasses.fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if f.name not in _NESTED and v is not None:
            data[f.name] = v
    for item in getattr(args, "set", []) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        _assign(data, key.split("."), _parse_value(raw))
    cfg = ExperimentConfig.from_dict(data)
    cfg.validate()
    return cfg


def _merge(base: dict, override: dict) -> None:
    for k, v in override.items():
        if k in _NESTED and isinstance(v, dict) and isinstance(base.get(k), dict):
            base[k] = {**base[k], **v}
        else:
            base[k] = v


def _assign(data: dict, path: list[str], value) -> None:
    node = data
    for part in path[:-1]:
        if not isinstance(node.get(part), dict):
            raise ValueError(f"unknown config section {'.'.join(path)!r}")
        node = node[part]
    node[path[-1]] = value


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    gen = GenerationConfig()
    if args.config:
        gen = GenerationConfig.from_dict({**gen.to_dict(), **json.loads(Path(args.config).read_text())})
    overrides = {k: getattr(args, k) for k in ("n_utterances", "n_speakers", "sample_rate")
                 if getattr(args, k) is not None}
    if overrides:
        gen = dataclasses.replace(gen, **overrides)
    corpus = generate_corpus(gen, args.seed)
    out = write_corpus(corpus, args.out)
    print(f"wrote {len(corpus.utterances)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    result = run_kfold(cfg, checkpoint_dir=out / "checkpoints")
    write_run(result, out)
    sys.stdout.write(fold_rows_csv(result))
    for fold, msg in sorted(result.failed.items()):
        print(f"fold {fold} failed: {msg}", file=sys.stderr)
    return 0 if result.ok else 1


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    data = json.loads((run / "config.json").read_text())
    if args.folds is not None:
        data["folds"] = args.folds
    if args.corpus is not None:
        data["corpus"] = args.corpus
    cfg = ExperimentConfig.from_dict(data)
    result = evaluate_checkpoints(cfg, run / "checkpoints")
    text = fold_rows_csv(result)
    Path(args.out or run / "eval.csv").write_text(text)
    sys.stdout.write(text)
    for fold, msg in sorted(result.failed.items()):
        print(f"fold {fold} failed: {msg}", file=sys.stderr)
    return 0 if result.ok else 1


def trend_report(report: dict) -> dict:
    """Qualitative comparisons read off the ablation matrix. Informational only."""
    def cell(fusion, tasks, coattn):
        return report.get(f"{fusion}|{tasks}|{coattn}", {})

    full = "gender+speaker+style+asr"
    ari, ws = cell("ari", full, "on"), cell("weighted_sum", full, "on")
    out = {"ari_vs_weighted_sum": {"ari": {k: ari.get(k) for k in ("CER", "WER")},
                                   "weighted_sum": {k: ws.get(k) for k in ("CER", "WER")}},
           "all_tasks_vs_ser_only": {"all_tasks": cell("ari", full, "on").get("UA"),
                                     "ser_only": cell("ari", "none", "off").get("UA")}}
    if None not in (ari.get("WER"), ws.get("WER"), ari.get("CER"), ws.get("CER")):
        out["ari_vs_weighted_sum"]["ari_not_worse"] = (ari["CER"] <= ws["CER"] and ari["WER"] <= ws["WER"])
    return out


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)
    text, report = run_ablation(cfg, corpus)
    (out / "ablation.csv").write_text(text)
    (out / "config.json").write_text(cfg.to_json())
    summary = {"cells": report, "trends": trend_report(report)}
    (out / "ablation_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(text)
    failed = [k for k, v in report.items() if not v["ok"]]
    for k in failed:
        print(f"cell {k} failed", file=sys.stderr)
    return 0 if not failed else 1


def cmd_gradcheck(args) -> int:
    suites = args.suites or list(gradcheck.SUITES)
    seeds = range(args.base_seed, args.base_seed + args.seeds)
    ok = True
    for name in suites:
        results = gradcheck.run_suite(name, seeds)
        worst = max(r.max_rel_error for r in results)
        passed = all(r.ok for r in results)
        ok &= passed
        print(f"{name:14s} seeds={len(results):3d} max_rel_error={worst:.3e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic corpus to disk")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", type=Path, help="JSON generation config")
    p.add_argument("--n-utterances", type=int)
    p.add_argument("--n-speakers", type=int)
    p.add_argument("--sample-rate", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="two-stage training over k speaker-independent folds")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-score the checkpoints of a finished run")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--folds", type=lambda s: [int(x) for x in _csv_list(s)])
    p.add_argument("--corpus", type=str, help="corpus directory, overriding the run's config")
    p.add_argument("--out", type=Path, help="CSV path (default RUN/eval.csv)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="fusion mode x task subset x co-attention matrix")
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every composite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--suites", type=_csv_list, help=f"subset of {','.join(gradcheck.SUITES)}")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
