"""Translate ReLU/LeakyReLU policies into oblique trees and readable programs."""

import json

from ._otr import (
    Network,
    OtrError,
    Trace,
    Tree,
    collect_trace,
    parse_and_eval,
    pid_act,
    prune,
    prune_topk,
    translate,
)
from ._otr import rollout as _rollout
from ._otr import verify as _verify

__all__ = [
    "Network",
    "OtrError",
    "Trace",
    "Tree",
    "collect_trace",
    "parse_and_eval",
    "pid_act",
    "prune",
    "prune_topk",
    "rollout",
    "translate",
    "verify",
]


def verify(net, tree, **kwargs):
    """Equivalence report as a dict."""
    return json.loads(_verify(net, tree, **kwargs))


def rollout(policy, env, **kwargs):
    """Rollout report as a dict; `policy` is a path to a network, tree or PID file."""
    return json.loads(_rollout(str(policy), env, **kwargs))
