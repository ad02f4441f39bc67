"""Metrics and experiment runners (cross-validation, ablation, early, temporal).

Four systems are compared everywhere:

=======  ==========================================
base     per-node perceptron, no rectification
+DR      per-node perceptron with rectification
+GA      graph aggregation, no rectification
full     graph aggregation with rectification
=======  ==========================================

Every report is a plain dict that serialises deterministically with
``report_dumps``; two runs with equal inputs produce byte-identical text.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from need.baseline import mlp_train
from need.config import ExperimentConfig
from need.corpus import Event, early_truncate, event_kfold_split, restrict, select_events, temporal_split
from need.dri import build_dri_pairs, dri_train
from need.errors import ConfigError, ContractError
from need.graph import TrainHyper, ga_train
from need.pipeline import detect_events

SYSTEMS = ("base", "+DR", "+GA", "full")
METRICS = ("accuracy", "macro_precision", "macro_recall", "macro_f1")


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: dict                       # tp, fp, tn, fn with class 1 = fake
    n: int
    per_fold: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(predictions: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    """Accuracy and macro precision/recall/F1; undefined ratios count as 0."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size != true.size:
        raise ContractError(f"{pred.size} predictions for {true.size} labels")
    if pred.size == 0:
        raise ContractError("metrics need at least one prediction")
    if not (np.isin(true, (0, 1)).all() and np.isin(pred, (0, 1)).all()):
        raise ContractError("labels and predictions must be 0 or 1")
    tp = int(np.sum((pred == 1) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))

    def ratio(a, b):
        return a / b if b else 0.0

    precision, recall, f1 = [], [], []
    for hit, false_pos, miss in ((tn, fn, fp), (tp, fp, fn)):
        p, r = ratio(hit, hit + false_pos), ratio(hit, hit + miss)
        precision.append(p)
        recall.append(r)
        f1.append(ratio(2 * p * r, p + r))
    return MetricsReport(accuracy=(tp + tn) / pred.size, macro_precision=float(np.mean(precision)),
                         macro_recall=float(np.mean(recall)), macro_f1=float(np.mean(f1)),
                         confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn}, n=int(pred.size))


def aggregate_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pool confusion counts; attach per-fold values, mean and population std."""
    conf = {k: sum(r.confusion[k] for r in reports) for k in ("tp", "fp", "tn", "fn")}
    pred = [1] * (conf["tp"] + conf["fp"]) + [0] * (conf["tn"] + conf["fn"])
    true = [1] * conf["tp"] + [0] * conf["fp"] + [0] * conf["tn"] + [1] * conf["fn"]
    pooled = compute_metrics(pred, true)
    pooled.per_fold = [{m: getattr(r, m) for m in METRICS} for r in reports]
    pooled.mean = {m: float(np.mean([getattr(r, m) for r in reports])) for m in METRICS}
    pooled.std = {m: float(np.std([getattr(r, m) for r in reports])) for m in METRICS}
    return pooled


def score_predictions(predictions) -> MetricsReport:
    return compute_metrics([int(p.verdict == "fake") for p in predictions], [p.label for p in predictions])


def monotone_violations(predictions) -> int:
    """Count predictions where rectification lowered a probability or flipped fake to real."""
    bad = 0
    for p in predictions:
        ga_fake = p.p_ga >= 0.5
        if p.p_final < p.p_ga or (ga_fake and p.verdict != "fake"):
            bad += 1
    return bad


def report_dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _fmt(v: float) -> str:
    return f"{100 * v:6.2f}"


def render_table(rows: dict, title: str) -> str:
    """Human-readable table: one row per system, mean and std in percent."""
    lines = [title, f"{'system':<10}" + "".join(f"{m:>22}" for m in METRICS)]
    for name, rep in rows.items():
        cells = []
        for m in METRICS:
            mean = rep["mean"].get(m, rep[m]) if rep.get("mean") else rep[m]
            std = rep["std"].get(m) if rep.get("std") else None
            cells.append(f"{_fmt(mean)} +- {_fmt(std)}" if std is not None else f"{_fmt(mean):>15}")
        lines.append(f"{name:<10}" + "".join(f"{c:>22}" for c in cells))
    return "\n".join(lines) + "\n"


# -- training one split ------------------------------------------------------------
@dataclass
class TrainedSystems:
    mlp: object
    ga: object
    dri: object | None
    traces: dict

    def models(self, system: str) -> tuple:
        node = self.mlp if system in ("base", "+DR") else self.ga
        dri = self.dri if system in ("+DR", "full") else None
        return node, dri


def _derive(hyper, seed: int):
    return replace(hyper, seed=seed)


def train_systems(train_events: Sequence[Event], config: ExperimentConfig, seed: int,
                  ga_callback=None, dri_callback=None) -> TrainedSystems:
    """Train the perceptron, the graph model and (when pairs exist) the DRI model."""
    mlp, mlp_trace = mlp_train(train_events, _derive(config.baseline, seed))
    ga, ga_trace = ga_train(train_events, _derive(config.ga, seed),
                            include_debunking=config.include_debunking_nodes, epoch_callback=ga_callback)
    pairs = build_dri_pairs(train_events)
    dri, dri_trace = None, []
    if len({p.label for p in pairs}) == 2:
        dri, dri_trace = dri_train(pairs, _derive(config.dri, seed), epoch_callback=dri_callback)
    return TrainedSystems(mlp, ga, dri, {"base": mlp_trace, "ga": ga_trace, "dri": dri_trace})


def predict_systems(trained: TrainedSystems, events: Sequence[Event], config: ExperimentConfig) -> dict:
    """Predictions of all four systems on ``events``."""
    out = {}
    for system in SYSTEMS:
        node, dri = trained.models(system)
        out[system] = detect_events(events, node, dri, config.threshold, config.include_debunking_nodes)
    return out


def _fold_seed(config: ExperimentConfig, fold: int) -> int:
    return config.seed * 1000 + fold


def _summarise(per_fold_preds: list) -> dict:
    """``{system: aggregated MetricsReport dict}`` from a list of per-fold predictions."""
    out = {}
    for system in SYSTEMS:
        out[system] = aggregate_folds([score_predictions(fp[system]) for fp in per_fold_preds]).to_dict()
    return out


def _subset(preds: Sequence, event_ids: set) -> list:
    return [p for p in preds if p.event_id in event_ids]


# -- runners -----------------------------------------------------------------------
@dataclass
class CvRun:
    report: dict
    plan: object
    trained: list                   # TrainedSystems per fold
    predictions: list              # per fold: {system: [Prediction]}


def run_cv(corpus: Sequence[Event], config: ExperimentConfig) -> CvRun:
    """Event-level k-fold evaluation of all four systems."""
    config.validate()
    if len(corpus) < config.k_folds:
        raise ConfigError(f"{config.k_folds} folds need at least {config.k_folds} events")
    plan = event_kfold_split(corpus, config.k_folds, config.seed)
    trained, preds, fold_info, alt_reports = [], [], [], []
    flipped = not config.include_debunking_nodes
    for fold, (train_ids, test_ids) in enumerate(plan.folds):
        train_ev, test_ev = select_events(corpus, train_ids), select_events(corpus, test_ids)
        systems = train_systems(train_ev, config, _fold_seed(config, fold))
        fold_preds = predict_systems(systems, test_ev, config)
        # graph model with the other node set, for the debunking-node comparison
        alt, _ = ga_train(train_ev, _derive(config.ga, _fold_seed(config, fold)), include_debunking=flipped)
        alt_reports.append(score_predictions(detect_events(test_ev, alt, None, config.threshold, flipped)))
        trained.append(systems)
        preds.append(fold_preds)
        fold_info.append({"fold": fold, "train_events": len(train_ev), "test_events": len(test_ev),
                          "has_dri": systems.dri is not None})
    debunk_ids = {e.event_id for e in corpus if e.has_debunking}
    sub_preds = [{s: _subset(fp[s], debunk_ids) for s in SYSTEMS} for fp in preds]
    summary = _summarise(preds)
    report = {
        "mode": "cv",
        "seed": config.seed,
        "k_folds": config.k_folds,
        "folds": fold_info,
        "systems": summary,
        "debunking_subset": _summarise([fp for fp in sub_preds if all(fp[s] for s in SYSTEMS)]),
        "monotone_violations": sum(monotone_violations(fp[s]) for fp in preds for s in SYSTEMS),
        "ga_node_set": {
            "with_debunking_nodes" if config.include_debunking_nodes else "without_debunking_nodes":
                summary["+GA"],
            "without_debunking_nodes" if config.include_debunking_nodes else "with_debunking_nodes":
                aggregate_folds(alt_reports).to_dict(),
        },
        "config": config.to_dict(),
    }
    return CvRun(report, plan, trained, preds)


def run_early(corpus: Sequence[Event], config: ExperimentConfig, fractions=None, cv: CvRun | None = None) -> dict:
    """Per-fraction reports; models are trained on full training events.

    Only test events are truncated. Passing an existing ``run_cv`` result
    reuses its fold models, which are identical to the ones trained here.
    """
    config.validate()
    fractions = tuple(fractions or config.fractions)
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise ConfigError("fractions must lie in (0, 1]")
    plan = event_kfold_split(corpus, config.k_folds, config.seed)
    trained = cv.trained if cv is not None else [
        train_systems(select_events(corpus, tr), config, _fold_seed(config, i)) for i, (tr, _) in enumerate(plan.folds)]
    per_fraction, violations = {}, 0
    for frac in fractions:
        fold_preds = []
        for (_, test_ids), systems in zip(plan.folds, trained):
            test_ev = [early_truncate(e, frac) for e in select_events(corpus, test_ids)]
            test_ev = [e for e in test_ev if e.targets]
            fold_preds.append(predict_systems(systems, test_ev, config))
        violations += sum(monotone_violations(fp[s]) for fp in fold_preds for s in SYSTEMS)
        per_fraction[f"{frac:.2f}"] = _summarise(fold_preds)
    return {
        "mode": "early",
        "seed": config.seed,
        "note": "only test events are truncated; training uses full event histories",
        "fractions": per_fraction,
        "monotone_violations": violations,
        "config": config.to_dict(),
    }


def run_temporal(corpus: Sequence[Event], config: ExperimentConfig) -> dict:
    """Chronological 70/15/15 split; epochs chosen by validation macro F1."""
    config.validate()
    videos = [v for e in corpus for v in e.videos]
    if not videos:
        raise ConfigError("temporal evaluation of an empty corpus")
    plan = temporal_split(corpus, config.temporal_ratios)
    train_ev, val_ev, test_ev = (restrict(corpus, ids) for ids in (plan.train, plan.validation, plan.test))
    val_ev = [e for e in val_ev if e.targets]
    test_ev = [e for e in test_ev if e.targets]
    seed = config.seed * 1000 + 999

    def selector(detect_with):
        best = {"f1": -1.0, "epoch": 0, "state": None}

        def callback(epoch, model):
            preds = detect_with(model)
            f1 = score_predictions(preds).macro_f1 if preds else 0.0
            if f1 > best["f1"]:
                best.update(f1=f1, epoch=epoch, state=model.state_dict())
        return best, callback

    ga_best, ga_cb = selector(lambda m: detect_events(val_ev, m, None, config.threshold,
                                                      config.include_debunking_nodes))
    mlp, _ = mlp_train(train_ev, _derive(config.baseline, seed))
    ga, _ = ga_train(train_ev, _derive(config.ga, seed), include_debunking=config.include_debunking_nodes,
                     epoch_callback=ga_cb)
    ga.load_state_dict(ga_best["state"])
    pairs = build_dri_pairs(train_ev)
    dri, dri_epoch = None, 0
    if len({p.label for p in pairs}) == 2:
        dri_best, dri_cb = selector(lambda m: detect_events(val_ev, ga, m, config.threshold,
                                                            config.include_debunking_nodes))
        dri, _ = dri_train(pairs, _derive(config.dri, seed), epoch_callback=dri_cb)
        dri.load_state_dict(dri_best["state"])
        dri_epoch = dri_best["epoch"]
    trained = TrainedSystems(mlp, ga, dri, {})
    preds = predict_systems(trained, test_ev, config)
    return {
        "mode": "temporal",
        "seed": config.seed,
        "boundaries": plan.boundaries,
        "sizes": {"train": len(plan.train), "validation": len(plan.validation), "test": len(plan.test)},
        "selected_epoch": {"ga": ga_best["epoch"], "dri": dri_epoch},
        "systems": {s: score_predictions(preds[s]).to_dict() for s in SYSTEMS},
        "monotone_violations": sum(monotone_violations(preds[s]) for s in SYSTEMS),
        "config": config.to_dict(),
    }


def ablation_rows(report: dict, key: str = "systems") -> dict:
    return {s: report[key][s] for s in SYSTEMS}


def isclose(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=0.0, abs_tol=1e-12)


__all__ = ["MetricsReport", "SYSTEMS", "compute_metrics", "aggregate_folds", "score_predictions",
           "monotone_violations", "report_dumps", "render_table", "train_systems", "predict_systems",
           "run_cv", "run_early", "run_temporal", "ablation_rows", "CvRun", "TrainHyper"]
