"""Per-node perceptron baseline: the same budget as GA but no neighbours."""

from __future__ import annotations

import numpy as np

from need import checkpoint
from need import tensor as T
from need.errors import ConfigError
from need.graph import TrainHyper, as_graphs, train_node_classifier
from need.nn import Linear, Module


class MlpModel(Module):
    """d_in -> hidden (ReLU) -> dropout -> 2, applied to each node on its own."""

    def __init__(self, d_in: int, rng: np.random.Generator, hidden: int = 128, dropout_rate: float = 0.3):
        self.d_in, self.hidden, self.dropout_rate = d_in, hidden, dropout_rate
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, 2, rng)

    def hyper(self) -> dict:
        return {"d_in": self.d_in, "hidden": self.hidden, "dropout_rate": self.dropout_rate}

    def logits(self, features, adjacency=None, train: bool = False, rng=None):
        h = T.dropout(T.relu(self.fc1(features)), self.dropout_rate, train, rng)
        return self.fc2(h)


def mlp_train(train_events, hyper: TrainHyper | None = None, hidden: int = 128,
              dropout_rate: float = 0.3, epoch_callback=None) -> tuple:
    hyper = hyper or TrainHyper()
    graphs = as_graphs(train_events, include_debunking=False)
    if not graphs:
        raise ConfigError("no training events")
    model = MlpModel(graphs[0].node_features.shape[1], np.random.default_rng([hyper.seed, 0]),
                     hidden=hidden, dropout_rate=dropout_rate)
    return model, train_node_classifier(model, graphs, hyper, epoch_callback)


def save_mlp(path, model: MlpModel):
    checkpoint.save(path, "mlp", model.hyper(), model.state_dict())


def load_mlp(path) -> MlpModel:
    hyper, state = checkpoint.load(path, "mlp")
    model = MlpModel(hyper["d_in"], np.random.default_rng(0), hidden=hyper["hidden"],
                     dropout_rate=hyper["dropout_rate"])
    model.load_state_dict(state)
    return model
