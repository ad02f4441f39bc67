"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from need import baseline, dri, graph
from need.config import ExperimentConfig
from need.corpus import Corpus, generate_synthetic, load_corpus, write_corpus
from need.errors import ConfigError, ContractError, DataError, NumericError
from need.evaluation import render_table, report_dumps, run_cv, run_early, run_temporal
from need.gradcheck import run_suite
from need.pipeline import detect_events, write_predictions

log = logging.getLogger("need")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAD_TOLERANCE = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="need", description="Event-graph fake news video detection with debunking rectification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()
    corpus_opt = argparse.ArgumentParser(add_help=False)
    corpus_opt.add_argument("--corpus", type=Path, default=None,
                            help="corpus file (default: generate the synthetic corpus from the config)")

    sub.add_parser("generate", parents=[common], help="write the synthetic corpus")
    sub.add_parser("train-ga", parents=[common, corpus_opt], help="train the graph model")
    sub.add_parser("train-baseline", parents=[common, corpus_opt], help="train the per-node baseline")
    sub.add_parser("train-dri", parents=[common, corpus_opt], help="train the refutation model")
    p = sub.add_parser("detect", parents=[common, corpus_opt], help="run the pipeline on a corpus")
    p.add_argument("--ga", type=Path, required=True, help="graph-model checkpoint")
    p.add_argument("--dri", type=Path, default=None, help="refutation-model checkpoint")
    for name, text in (("cv", "k-fold cross-validation"), ("ablate", "ablation table from cross-validation"),
                       ("temporal", "chronological split"), ("early", "early detection")):
        sub.add_parser(name, parents=[common, corpus_opt], help=text)
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--configs", type=int, default=20)
    sub.add_parser("config", parents=[common], help="print the default config with all hyperparameters")
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _corpus(args, cfg: ExperimentConfig) -> Corpus:
    if getattr(args, "corpus", None) is None:
        return generate_synthetic(cfg.synth)
    try:
        return load_corpus(args.corpus)
    except FileNotFoundError:
        raise DataError(f"corpus file not found: {args.corpus}") from None


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    log.info("wrote %s", path)
    return path


def _emit_report(args, cfg, mode: str, report: dict, table: str):
    _write(args.out, f"{mode}_{cfg.seed}.report", report_dumps(report))
    _write(args.out, f"{mode}_{cfg.seed}.txt", table)
    print(table, end="")


def cmd_generate(args, cfg):
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    corpus = generate_synthetic(synth)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "corpus.jsonl"
    write_corpus(path, corpus)
    print(f"{path}: {len(corpus)} events, {len(corpus.videos())} videos")


def cmd_train_ga(args, cfg):
    model, trace = graph.ga_train(_corpus(args, cfg), replace(cfg.ga, seed=cfg.seed),
                                  include_debunking=cfg.include_debunking_nodes)
    args.out.mkdir(parents=True, exist_ok=True)
    graph.save_ga(args.out / "ga.ckpt", model)
    _write(args.out, "ga_trace.json", json.dumps(trace) + "\n")
    print(f"ga: loss {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_train_baseline(args, cfg):
    model, trace = baseline.mlp_train(_corpus(args, cfg), replace(cfg.baseline, seed=cfg.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    baseline.save_mlp(args.out / "baseline.ckpt", model)
    print(f"baseline: loss {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_train_dri(args, cfg):
    pairs = dri.build_dri_pairs(_corpus(args, cfg))
    model, trace = dri.dri_train(pairs, replace(cfg.dri, seed=cfg.seed))
    args.out.mkdir(parents=True, exist_ok=True)
    dri.save_dri(args.out / "dri.ckpt", model)
    _write(args.out, "dri_trace.json", json.dumps(trace) + "\n")
    print(f"dri: {len(pairs)} pairs, loss {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_detect(args, cfg):
    corpus = _corpus(args, cfg)
    ga_model = graph.load_ga(args.ga)
    dri_model = dri.load_dri(args.dri) if args.dri else None
    preds = detect_events(corpus, ga_model, dri_model, cfg.threshold, cfg.include_debunking_nodes)
    args.out.mkdir(parents=True, exist_ok=True)
    write_predictions(args.out / "predictions.jsonl", preds)
    print(f"{len(preds)} predictions, {sum(p.verdict == 'fake' for p in preds)} fake, "
          f"{sum(p.provenance == 'rectified' for p in preds)} rectified")


def cmd_cv(args, cfg, mode="cv"):
    run = run_cv(_corpus(args, cfg), cfg)
    report = dict(run.report, mode=mode)
    table = render_table(report["systems"], f"{mode} seed={cfg.seed}, all test events")
    table += render_table(report["debunking_subset"], "events with debunking videos")
    table += render_table(report["ga_node_set"], "graph model only, by node set")
    _emit_report(args, cfg, mode, report, table)


def cmd_temporal(args, cfg):
    report = run_temporal(_corpus(args, cfg), cfg)
    _emit_report(args, cfg, "temporal", report,
                 render_table(report["systems"], f"temporal seed={cfg.seed}, boundaries {report['boundaries']}"))


def cmd_early(args, cfg):
    report = run_early(_corpus(args, cfg), cfg)
    table = "".join(render_table(rows, f"early seed={cfg.seed}, first {float(frac):.0%} of each test event")
                    for frac, rows in report["fractions"].items())
    _emit_report(args, cfg, "early", report, table)


def cmd_grad_check(args, cfg):
    result = run_suite(n_configs=args.configs, seed=cfg.seed)
    for name, err in sorted(result.worst.items()):
        print(f"{name:<20} {err:.3e}")
    print(f"max relative error {result.max_error:.3e} in {result.seconds:.1f}s")
    if result.max_error > GRAD_TOLERANCE:
        raise NumericError(f"gradient error {result.max_error:.3e} exceeds {GRAD_TOLERANCE}")


def cmd_config(args, cfg):
    print(cfg.dumps())


COMMANDS = {
    "generate": cmd_generate, "train-ga": cmd_train_ga, "train-baseline": cmd_train_baseline,
    "train-dri": cmd_train_dri, "detect": cmd_detect, "cv": cmd_cv,
    "ablate": lambda a, c: cmd_cv(a, c, "ablate"), "temporal": cmd_temporal, "early": cmd_early,
    "grad-check": cmd_grad_check, "config": cmd_config,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
        return EXIT_OK
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
