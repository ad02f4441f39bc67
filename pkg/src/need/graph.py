"""Event graphs and the two-layer graph-attention classifier.

Each event becomes a complete directed graph with self-loops over its
videos. A layer projects node features with ``W``, scores every edge with
``LeakyReLU(a . [W v_i, W v_j])``, normalises scores over each node's
neighbours and returns the attention-weighted sum of projected neighbours.
Two layers (ReLU after the first, dropout in between, width-2 output) feed a
row softmax whose class-1 entry is the fake probability ``p_GA``.

Several events are batched by merging their graphs block-diagonally, which
keeps attention strictly within events.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from need import checkpoint
from need import tensor as T
from need.corpus import Event, VideoRecord
from need.errors import ConfigError, SchemaError
from need.nn import Module
from need.optim import Adam
from need.tensor import Tensor


@dataclass(frozen=True, eq=False)
class EventGraph:
    node_ids: tuple
    node_features: np.ndarray      # [n, d]
    adjacency: np.ndarray          # [n, n] bool, row i lists the neighbours of node i
    target_mask: np.ndarray        # [n] bool
    labels: np.ndarray             # [n] int, -1 where target_mask is False

    def __len__(self):
        return len(self.node_ids)

    @property
    def n_targets(self) -> int:
        return int(self.target_mask.sum())


def _base_features(video: VideoRecord) -> np.ndarray:
    return video.base_features


def build_event_graph(event: Event, feature_source: Callable[[VideoRecord], np.ndarray] | None = None,
                      d_base: int | None = None, include_debunking: bool = True) -> EventGraph:
    """Complete digraph with self-loops over the event's videos.

    Debunking videos are nodes but never targets; with
    ``include_debunking=False`` they are left out of the graph entirely.
    """
    source = feature_source or _base_features
    videos = [v for v in event.videos if include_debunking or v.is_target]
    if not videos:
        raise SchemaError(f"event {event.event_id!r} has no nodes")
    feats = [np.asarray(source(v), dtype=np.float64) for v in videos]
    d = d_base if d_base is not None else feats[0].shape[0]
    for v, f in zip(videos, feats):
        if f.shape != (d,):
            raise SchemaError(f"video {v.video_id!r}: feature shape {f.shape}, expected ({d},)")
    n = len(videos)
    return EventGraph(
        node_ids=tuple(v.video_id for v in videos),
        node_features=np.stack(feats),
        adjacency=np.ones((n, n), dtype=bool),
        target_mask=np.array([v.is_target for v in videos], dtype=bool),
        labels=np.array([v.label if v.is_target else -1 for v in videos], dtype=np.int64),
    )


def merge_graphs(graphs: Sequence[EventGraph]) -> EventGraph:
    """Block-diagonal union: no edges between different events."""
    sizes = [len(g) for g in graphs]
    n = sum(sizes)
    adj = np.zeros((n, n), dtype=bool)
    start = 0
    for g, k in zip(graphs, sizes):
        adj[start:start + k, start:start + k] = g.adjacency
        start += k
    return EventGraph(
        node_ids=tuple(i for g in graphs for i in g.node_ids),
        node_features=np.concatenate([g.node_features for g in graphs]),
        adjacency=adj,
        target_mask=np.concatenate([g.target_mask for g in graphs]),
        labels=np.concatenate([g.labels for g in graphs]),
    )


def gat_layer(features, W, a, adjacency, slope: float = 0.2, activation=None) -> Tensor:
    """One graph-attention layer; ``activation`` is a tensor function or None."""
    h = T.matmul(features, W)                          # [n, d_out]
    d_out = h.shape[-1]
    src = T.matmul(h, a[:d_out]).reshape(-1, 1)        # a_left . W v_i
    dst = T.matmul(h, a[d_out:]).reshape(1, -1)        # a_right . W v_j
    scores = T.leaky_relu(src + dst, slope)
    alpha = T.softmax_rows(scores, np.asarray(adjacency, dtype=bool))
    out = T.matmul(alpha, h)
    return activation(out) if activation is not None else out


class GaModel(Module):
    """Two single-head attention layers: d_in -> hidden (ReLU) -> 2."""

    def __init__(self, d_in: int, rng: np.random.Generator, hidden: int = 128,
                 leaky_slope: float = 0.2, dropout_rate: float = 0.3):
        if not 0.0 < leaky_slope < 1.0:
            raise ConfigError("leaky_slope must lie in (0, 1)")
        self.d_in, self.hidden = d_in, hidden
        self.leaky_slope, self.dropout_rate = leaky_slope, dropout_rate
        self.W1 = Tensor(rng.normal(0, np.sqrt(2.0 / (d_in + hidden)), (d_in, hidden)), requires_grad=True)
        self.a1 = Tensor(rng.normal(0, np.sqrt(2.0 / (2 * hidden + 1)), 2 * hidden), requires_grad=True)
        self.W2 = Tensor(rng.normal(0, np.sqrt(2.0 / (hidden + 2)), (hidden, 2)), requires_grad=True)
        self.a2 = Tensor(rng.normal(0, np.sqrt(2.0 / 5), 4), requires_grad=True)

    def hyper(self) -> dict:
        return {"d_in": self.d_in, "hidden": self.hidden, "leaky_slope": self.leaky_slope,
                "dropout_rate": self.dropout_rate}

    def logits(self, features, adjacency, train: bool = False, rng=None) -> Tensor:
        h = gat_layer(features, self.W1, self.a1, adjacency, self.leaky_slope, T.relu)
        h = T.dropout(h, self.dropout_rate, train, rng)
        return gat_layer(h, self.W2, self.a2, adjacency, self.leaky_slope)


def node_probabilities(logits: Tensor) -> np.ndarray:
    return T.softmax_rows(logits).data[:, 1]


def ga_forward(graph: EventGraph, model, mode: str = "eval", rng=None) -> np.ndarray:
    """Fake probability for every node of ``graph`` (a single or merged graph)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits = model.logits(Tensor(graph.node_features), graph.adjacency, mode == "train", rng)
    return node_probabilities(logits)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def validate(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"invalid training hyperparameters {self}")


def as_graphs(items, include_debunking: bool = True) -> list:
    return [it if isinstance(it, EventGraph) else build_event_graph(it, include_debunking=include_debunking)
            for it in items]


def train_node_classifier(model, graphs: Sequence[EventGraph], hyper: TrainHyper,
                          epoch_callback: Callable[[int, object], None] | None = None) -> list:
    """Adam on mean BCE over target nodes, batches of ``batch_size`` events.

    Returns the per-epoch mean batch loss. ``epoch_callback(epoch, model)``
    runs after every epoch (epochs count from 1).
    """
    hyper.validate()
    graphs = [g for g in graphs if len(g)]
    if sum(g.n_targets for g in graphs) == 0:
        raise ConfigError("training set has no target nodes")
    rng = np.random.default_rng([hyper.seed, 1])
    opt = Adam(model.parameters(), lr=hyper.lr)
    trace = []
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(graphs))
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            batch = merge_graphs([graphs[i] for i in order[start:start + hyper.batch_size]])
            if batch.n_targets == 0:
                continue
            logits = model.logits(Tensor(batch.node_features), batch.adjacency, True, rng)
            idx = np.flatnonzero(batch.target_mask)
            loss = T.binary_cross_entropy_from_logits(T.take(logits, idx), batch.labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        trace.append(float(np.mean(losses)))
        if epoch_callback is not None:
            epoch_callback(epoch, model)
    return trace


def ga_train(train_events, hyper: TrainHyper | None = None, include_debunking: bool = True,
             hidden: int = 128, dropout_rate: float = 0.3, epoch_callback=None) -> tuple:
    """Train a GaModel; returns ``(model, per-epoch loss trace)``."""
    hyper = hyper or TrainHyper()
    graphs = as_graphs(train_events, include_debunking)
    if not graphs:
        raise ConfigError("no training events")
    model = GaModel(graphs[0].node_features.shape[1], np.random.default_rng([hyper.seed, 0]),
                    hidden=hidden, dropout_rate=dropout_rate)
    trace = train_node_classifier(model, graphs, hyper, epoch_callback)
    return model, trace


def predict_events(model, events, include_debunking: bool = True) -> dict:
    """``video_id -> p_GA`` for every node of every event, in eval mode."""
    out = {}
    for g in as_graphs(events, include_debunking):
        out.update(zip(g.node_ids, ga_forward(g, model).tolist()))
    return out


def save_ga(path, model: GaModel):
    checkpoint.save(path, "ga", model.hyper(), model.state_dict())


def load_ga(path) -> GaModel:
    hyper, state = checkpoint.load(path, "ga")
    model = GaModel(hyper["d_in"], np.random.default_rng(0), hidden=hyper["hidden"],
                    leaky_slope=hyper["leaky_slope"], dropout_rate=hyper["dropout_rate"])
    model.load_state_dict(state)
    return model


__all__ = ["EventGraph", "GaModel", "TrainHyper", "build_event_graph", "merge_graphs", "gat_layer",
           "ga_forward", "ga_train", "train_node_classifier", "predict_events", "save_ga", "load_ga",
           "as_graphs"]
