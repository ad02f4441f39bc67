"""Finite-difference gradient suite over every primitive and both model losses."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from need import tensor as T
from need.corpus import VideoRecord
from need.dri import DriConfig, DriModel, DriPair, pair_logits
from need.graph import EventGraph, GaModel
from need.tensor import Tensor

EPSILON = 1e-5


def _param(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_kinks(rng, shape, gap=0.05):
    # keep finite differences off the non-differentiable point at 0
    x = rng.uniform(-2.0, 2.0, size=shape)
    return Tensor(np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x), requires_grad=True)


def _primitive_cases(rng):
    """(name, loss closure, params) for every differentiable primitive."""
    a, b = _param(rng, (3, 4)), _param(rng, (4, 2))
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    c, d = _param(rng, (3, 4)), _param(rng, (4,))
    w = Tensor(rng.normal(size=(3, 4)))          # fixed weights make each loss non-trivial
    k = _away_from_kinks(rng, (3, 4))
    mask = np.ones((3, 4), dtype=bool)
    mask[0, 1] = mask[2, 3] = False
    gamma, beta = _param(rng, (4,)), _param(rng, (4,))
    idx = np.array([[0, 2], [1, 1]])
    labels = rng.integers(0, 2, size=3)
    l2 = _param(rng, (3, 2))
    return [
        ("matmul", lambda: T.sum_(T.matmul(a, b) * w[:, :2]), [a, b]),
        ("add", lambda: T.sum_((c + d) * w), [c, d]),
        ("sub", lambda: T.sum_((c - d) * w), [c, d]),
        ("mul", lambda: T.sum_(c * d * w), [c, d]),
        ("div", lambda: T.sum_(c / pos * w), [c, pos]),
        ("exp", lambda: T.sum_(T.exp(c) * w), [c]),
        ("log", lambda: T.sum_(T.log(pos) * w), [pos]),
        ("sqrt", lambda: T.sum_(T.sqrt(pos) * w), [pos]),
        ("sum_mean", lambda: T.sum_(T.sum_(c * w, axis=0)) + T.mean(c * c), [c]),
        ("reshape_transpose", lambda: T.sum_(T.transpose(T.reshape(c, (4, 3))) * w), [c]),
        ("index_take", lambda: T.sum_(T.take(c, (np.array([0, 2, 2]), np.array([1, 1, 3]))) * 1.5), [c]),
        ("embedding", lambda: T.sum_(T.embedding(c, idx) * w[:2, None, :]), [c]),
        ("concat_stack", lambda: T.sum_(T.concat([c, c * 2.0], axis=0) * T.concat([w, w], axis=0))
         + T.sum_(T.stack([c, w]) * 0.5), [c]),
        ("relu", lambda: T.sum_(T.relu(k) * w), [k]),
        ("leaky_relu", lambda: T.sum_(T.leaky_relu(k, 0.2) * w), [k]),
        ("sigmoid", lambda: T.sum_(T.sigmoid(c) * w), [c]),
        ("softmax_rows", lambda: T.sum_(T.softmax_rows(c, mask) * w), [c]),
        ("log_softmax", lambda: T.sum_(T.log_softmax(c) * w), [c]),
        ("layer_norm", lambda: T.sum_(T.layer_norm(c, gamma, beta) * w), [c, gamma, beta]),
        ("dropout", lambda: T.sum_(T.dropout(c, 0.3, True, np.random.default_rng(3)) * w), [c]),
        ("bce", lambda: T.binary_cross_entropy_from_logits(l2, labels), [l2]),
    ]


def random_graph(rng, n: int, d: int) -> EventGraph:
    return EventGraph(
        node_ids=tuple(f"v{i}" for i in range(n)),
        node_features=rng.uniform(-2.0, 2.0, size=(n, d)),
        adjacency=np.ones((n, n), dtype=bool),
        target_mask=np.ones(n, dtype=bool),
        labels=rng.integers(0, 2, size=n),
    )


def ga_loss_case(rng, n: int = 3, d: int = 5, hidden: int = 4):
    """Full GA loss (dropout active with a fixed mask) on a random small graph."""
    g = random_graph(rng, n, d)
    model = GaModel(d, rng, hidden=hidden)
    seed = int(rng.integers(1 << 31))

    def loss():
        logits = model.logits(Tensor(g.node_features), g.adjacency, True, np.random.default_rng(seed))
        return T.binary_cross_entropy_from_logits(logits, g.labels)
    return loss, model.parameters()


def tiny_dri_config() -> DriConfig:
    return DriConfig(vocab_size=20, max_text_len=16, d_frame=3, d_text=8, text_layers=1, text_heads=2,
                     d_visual=8, visual_layers=1, visual_heads=2, d_fusion=8, fusion_heads=4)


def random_pair(rng, config: DriConfig, label: int, tag: str) -> DriPair:
    def video(role, vid):
        n_tok, n_fr = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        return VideoRecord(vid, "e", role, 0, np.zeros(1),
                           tuple(int(t) for t in rng.integers(4, config.vocab_size, size=n_tok)),
                           rng.uniform(-2.0, 2.0, size=(n_fr, config.d_frame)))
    return DriPair(video("debunking", f"{tag}d"), video("fake" if label else "real", f"{tag}c"), label)


def dri_loss_case(rng, config: DriConfig | None = None):
    """End-to-end DRI loss on a two-pair batch."""
    config = config or tiny_dri_config()
    model = DriModel(config, rng)
    pairs = [random_pair(rng, config, 1, "a"), random_pair(rng, config, 0, "b")]

    def loss():
        logits = pair_logits([p.debunking for p in pairs], [p.candidate for p in pairs], model)
        return T.binary_cross_entropy_from_logits(logits, [p.label for p in pairs])
    return loss, model.parameters()


@dataclass
class SuiteResult:
    worst: dict          # name -> max relative error over configurations
    seconds: float

    @property
    def max_error(self) -> float:
        return max(self.worst.values())


def run_suite(n_configs: int = 20, seed: int = 0, dri_entries: int = 2) -> SuiteResult:
    """Max relative gradient error per primitive and per model loss."""
    start = time.perf_counter()
    worst: dict = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(n_configs):
        rng = np.random.default_rng([seed, i])
        for name, loss, params in _primitive_cases(rng):
            note(name, T.grad_check(loss, params, EPSILON))
        loss, params = ga_loss_case(rng, n=int(rng.integers(1, 6)))
        note("ga_loss", T.grad_check(loss, params, EPSILON, max_entries=6, rng=rng))
        loss, params = dri_loss_case(rng)
        note("dri_loss", T.grad_check(loss, params, EPSILON, max_entries=dri_entries, rng=rng))
    return SuiteResult(worst, time.perf_counter() - start)
