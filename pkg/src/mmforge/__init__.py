"""Extract Moore machines from recurrent policies and analyze them."""

from .automaton import (
    FallbackRule,
    MooreMachine,
    Trace,
    TransitionTuple,
    build_from_traces,
    deserialize,
    equivalent,
    minimize,
    run_policy,
    serialize,
)
from .errors import MMForgeError

__version__ = "0.1.0"

__all__ = [
    "FallbackRule",
    "MMForgeError",
    "MooreMachine",
    "Trace",
    "TransitionTuple",
    "build_from_traces",
    "deserialize",
    "equivalent",
    "minimize",
    "run_policy",
    "serialize",
]
