"""Mixture of prefix experts for dialogue state tracking."""

import json

from mope._core import (
    Backbone,
    CapacityError,
    ContractError,
    Error,
    ExpertPool,
    FormatError,
    OutOfRangeError,
    ShapeError,
    ValidationError,
    fit_kmeans,
    spearman,
)
from mope import _core

__all__ = [
    "Backbone",
    "CapacityError",
    "ContractError",
    "Error",
    "ExpertPool",
    "FormatError",
    "OutOfRangeError",
    "ShapeError",
    "ValidationError",
    "backbone_config",
    "evaluate",
    "fit_kmeans",
    "generate_corpus",
    "init_backbone",
    "spearman",
    "training_words",
    "validate_corpus",
]


def generate_corpus(seed, dialogues, held_out="flight"):
    """Synthetic (train, test) corpora as dicts; the held-out domain appears only in test."""
    train, test = _core.generate_corpus(seed, dialogues, held_out)
    return json.loads(train), json.loads(test)


def validate_corpus(corpus):
    """Round-trips a corpus dict through the C++ validator and returns the normalized dict."""
    return json.loads(_core.validate_corpus(json.dumps(corpus)))


def training_words(corpus):
    """Vocabulary (reserved tokens first) covering a training corpus and the prompt words."""
    return _core.training_words(json.dumps(corpus))


def evaluate(predictions, gold):
    """Scores {(dialogue_id, turn, domain, slot): value} grids; returns the report dict."""
    flat = lambda grid: [(d, t, dom, s, v) for (d, t, dom, s), v in grid.items()]
    return json.loads(_core.evaluate(flat(predictions), flat(gold)))


def init_backbone(words, config=None, seed=1):
    """Randomly initialized backbone over the given vocabulary (reserved tokens first)."""
    return Backbone.init(words, json.dumps(config or {}), seed)


def backbone_config(backbone):
    return json.loads(backbone.config)
