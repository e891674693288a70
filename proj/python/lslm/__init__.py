"""Python bindings for the listen-while-speaking language model toolkit."""

import json

from ._lslm import (
    Codebook,
    ConfigError,
    ContractError,
    InputError,
    Model,
    __version__,
    aggregate,
    classify,
    edit_distance,
    token_error_rate,
)
from . import _lslm


def write_corpus(out, **config):
    """Generate a corpus into `out`; keyword arguments are world config fields."""
    return json.loads(_lslm.write_corpus(json.dumps(config), str(out)))


def model_from_config(**config):
    return Model.from_config(json.dumps(config))


def generate(model, context, listen=(), seed=0, top_p=0.9, greedy=False):
    """Run one offline generation and return its trace as a dict."""
    return json.loads(model.generate(context, list(listen), seed, top_p, greedy))


__all__ = [
    "Codebook",
    "ConfigError",
    "ContractError",
    "InputError",
    "Model",
    "__version__",
    "aggregate",
    "classify",
    "edit_distance",
    "generate",
    "model_from_config",
    "token_error_rate",
    "write_corpus",
]
