"""Detection pipeline: graph aggregation, candidate selection, rectification.

Targets the node classifier calls real (``p_GA < threshold``) become
candidates. When the event has debunking videos, each candidate's
refutation score is the maximum over those videos, and the final
probability is ``max(p_GA, p_DR)``. Rectification can therefore only raise a
probability, never lower it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from need.corpus import Event, VideoRecord
from need.dri import score_pairs
from need.errors import ContractError
from need.graph import build_event_graph, ga_forward

# Called as scorer(debunkers, candidates) with aligned lists; returns refutation probabilities.
PairScorer = Callable[[Sequence[VideoRecord], Sequence[VideoRecord]], np.ndarray]


@dataclass(frozen=True)
class Prediction:
    video_id: str
    event_id: str
    label: int | None
    p_ga: float
    p_dr: float | None
    p_final: float
    verdict: str
    provenance: str

    def to_dict(self) -> dict:
        return {"video_id": self.video_id, "event_id": self.event_id, "label": self.label,
                "p_ga": self.p_ga, "p_dr": self.p_dr, "p_final": self.p_final,
                "verdict": self.verdict, "provenance": self.provenance}


def make_prediction(video: VideoRecord, p_ga: float, p_dr: float | None, threshold: float = 0.5) -> Prediction:
    p_final = p_ga if p_dr is None else max(p_ga, p_dr)
    rectified = p_dr is not None and p_dr > p_ga
    return Prediction(video.video_id, video.event_id, video.label, float(p_ga),
                      None if p_dr is None else float(p_dr), float(p_final),
                      "fake" if p_final >= threshold else "real",
                      "rectified" if rectified else "ga_only")


def as_scorer(dri_model) -> PairScorer | None:
    """Accept a DriModel, a scorer callable, or None (no rectification)."""
    if dri_model is None or callable(dri_model):
        return dri_model
    return lambda debunkers, candidates: score_pairs(debunkers, candidates, dri_model)


def zero_scorer(debunkers, candidates) -> np.ndarray:
    """A DRI stand-in that never claims refutation."""
    return np.zeros(len(candidates))


def select_candidates(p_ga: Mapping[str, float], roles: Mapping[str, str] | None = None,
                      threshold: float = 0.5) -> list:
    """Ids of target videos with ``p_GA < threshold``, in input order."""
    roles = roles or {}
    return [vid for vid, p in p_ga.items() if p < threshold and roles.get(vid) != "debunking"]


def rectify(candidate: VideoRecord, debunkers: Sequence[VideoRecord], dri_model) -> float:
    """Maximum refutation score of ``candidate`` over ``debunkers``."""
    if not debunkers:
        raise ContractError("rectify needs at least one debunking video; skip rectification instead")
    scores = as_scorer(dri_model)(list(debunkers), [candidate] * len(debunkers))
    return float(np.max(scores))


def rectify_many(candidates: Sequence[VideoRecord], debunkers: Sequence[VideoRecord], dri_model) -> list:
    """``rectify`` for several candidates with one batched scorer call."""
    if not candidates:
        return []
    if not debunkers:
        raise ContractError("rectify needs at least one debunking video; skip rectification instead")
    scorer = as_scorer(dri_model)
    ds = [d for _ in candidates for d in debunkers]
    cs = [c for c in candidates for _ in debunkers]
    scores = np.asarray(scorer(ds, cs)).reshape(len(candidates), len(debunkers))
    return [float(v) for v in scores.max(axis=1)]


def detect_event(event: Event, ga_model, dri_model=None, threshold: float = 0.5,
                 include_debunking: bool = True) -> list:
    """Predictions for every target video of ``event``, in canonical order.

    ``ga_model`` is any node classifier with a ``logits`` method (the graph
    model, or the per-node baseline). ``dri_model`` may be None, in which case
    every prediction is graph-only.
    """
    graph = build_event_graph(event, include_debunking=include_debunking)
    p_ga = dict(zip(graph.node_ids, ga_forward(graph, ga_model).tolist()))
    targets = event.targets
    debunkers = event.by_role("debunking")
    p_dr: dict = {}
    if dri_model is not None and debunkers:
        by_id = {v.video_id: v for v in targets}
        cand_ids = select_candidates({v.video_id: p_ga[v.video_id] for v in targets}, threshold=threshold)
        cands = [by_id[i] for i in cand_ids]
        p_dr = dict(zip(cand_ids, rectify_many(cands, debunkers, dri_model)))
    return [make_prediction(v, p_ga[v.video_id], p_dr.get(v.video_id), threshold) for v in targets]


def detect_events(events: Sequence[Event], ga_model, dri_model=None, threshold: float = 0.5,
                  include_debunking: bool = True) -> list:
    return [p for e in events for p in detect_event(e, ga_model, dri_model, threshold, include_debunking)]


def write_predictions(path, predictions: Sequence[Prediction]):
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_dict()) + "\n")


def read_predictions(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Prediction(**json.loads(line)))
    return out
