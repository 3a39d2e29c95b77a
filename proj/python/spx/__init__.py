"""Superpixel graphs and coupled CNN+GNN image classification."""

import json

from ._core import (
    Error,
    Graph,
    Model,
    load_graphs,
    load_idx,
    radius_graph,
    read_pnm,
    save_graphs,
    slic,
    write_pnm,
)
from ._core import train as _train

__all__ = [
    "Error",
    "Graph",
    "Model",
    "load_graphs",
    "load_idx",
    "radius_graph",
    "read_pnm",
    "save_graphs",
    "slic",
    "train",
    "write_pnm",
]


def train(images=None, labels=None, graphs=None, **options):
    """Train a cnn, gnn or coupled model.

    Returns the best-validation Model and the run report as a list of
    records (config, one per epoch, summary).
    """
    model, report = _train(images, labels, graphs, **options)
    return model, [json.loads(line) for line in report.splitlines()]
