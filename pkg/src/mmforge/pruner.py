"""Greedy functional pruning of decision-point branches.

Branches are tried least-visited first. A removed branch's traffic falls
back to the state's most frequent surviving arc at run time; the removal is
kept only if the measured mean return stays within the allowed drop of the
unpruned baseline.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .automaton import FallbackRule, MachinePolicy, MooreMachine
from .envs import evaluate_seeds
from .errors import EvaluationFailure


@dataclass
class PruneConfig:
    """``tolerance`` is a fraction of |baseline| when ``relative`` else an absolute drop.

    The allowed drop never goes below ``min_abs``.
    """

    eval_episodes: int = 20
    tolerance: float = 0.01
    relative: bool = True
    min_abs: float = 0.5
    seed_list: Sequence[int] | None = None
    seed_base: int = 0
    max_passes: int = 3

    def __post_init__(self):
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")
        if self.tolerance < 0 or self.min_abs < 0:
            raise ValueError("tolerance must be >= 0")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")

    @property
    def seeds(self) -> tuple[int, ...]:
        if self.seed_list is not None:
            return tuple(int(s) for s in self.seed_list)
        return tuple(range(self.seed_base, self.seed_base + self.eval_episodes))

    def allowed_drop(self, baseline: float) -> float:
        tol = self.tolerance * abs(baseline) if self.relative else self.tolerance
        return max(tol, self.min_abs)


@dataclass
class PruneAttempt:
    pass_index: int
    decision_point: int
    obs: int
    target: int
    rank: int
    measured_return: float
    accepted: bool


@dataclass
class PruneLog:
    baseline_return: float
    allowed_drop: float
    seeds: tuple[int, ...]
    attempts: list[PruneAttempt] = field(default_factory=list)
    original_dp: int = 0
    final_dp: int = 0
    final_return: float | None = None

    def to_dict(self) -> dict:
        return {
            "baseline_return": self.baseline_return,
            "allowed_drop": self.allowed_drop,
            "seeds": list(self.seeds),
            "original_dp": self.original_dp,
            "final_dp": self.final_dp,
            "final_return": self.final_return,
            "attempts": [
                {"pass": a.pass_index, "decision_point": a.decision_point, "obs": a.obs,
                 "target": a.target, "rank": a.rank, "measured_return": a.measured_return,
                 "accepted": a.accepted}
                for a in self.attempts
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PruneLog":
        d = json.loads(text)
        attempts = [PruneAttempt(a["pass"], a["decision_point"], a["obs"], a["target"], a["rank"],
                                 a["measured_return"], a["accepted"]) for a in d["attempts"]]
        return cls(d["baseline_return"], d["allowed_drop"], tuple(d["seeds"]), attempts,
                   d["original_dp"], d["final_dp"], d["final_return"])


def branch_order(mm: MooreMachine, counts) -> dict[int, list[int]]:
    """Obs ids of each decision point's arcs, least visited first, ties by obs id."""
    return {
        dp: [o for o, _, _ in sorted(mm.outgoing(dp), key=lambda a: (counts.get((dp, a[0]), 0), a[0]))]
        for dp in mm.decision_points()
    }


def _measure(mm, env, seeds, obs_encoder, log, record=False):
    policy = MachinePolicy(mm, FallbackRule.MOST_FREQUENT, obs_encoder, record=record)
    try:
        report = evaluate_seeds(policy, env, seeds)
    except Exception as exc:  # noqa: BLE001 - reported with the partial log
        raise EvaluationFailure(f"evaluation failed: {exc}", log) from exc
    return report.mean, policy.visits


def prune(mm: MooreMachine, env, config: PruneConfig | None = None,
          obs_encoder: Callable | None = None) -> tuple[MooreMachine, PruneLog]:
    config = config or PruneConfig()
    seeds = config.seeds
    log = PruneLog(0.0, 0.0, seeds, original_dp=len(mm.decision_points()))
    baseline, _ = _measure(mm, env, seeds, obs_encoder, log)
    log.baseline_return = baseline
    log.allowed_drop = config.allowed_drop(baseline)
    floor = baseline - log.allowed_drop
    cur = mm
    for pass_index in range(config.max_passes):
        _, visits = _measure(cur, env, seeds, obs_encoder, log, record=True)
        dps = set(cur.decision_points())
        changed = False
        for dp in [s for s in cur.reachable() if s in dps]:
            if len(cur.successors(dp)) < 2:
                continue
            keep = cur.most_frequent_arc(dp)
            candidates = [o for o in branch_order(cur, visits)[dp]
                          if cur.transitions[(dp, o)].target != keep[1]]
            for rank, o in enumerate(candidates):
                target = cur.transitions[(dp, o)].target
                trial = cur.without([(dp, o)])
                ret, _ = _measure(trial, env, seeds, obs_encoder, log)
                accepted = ret >= floor
                log.attempts.append(PruneAttempt(pass_index, dp, o, target, rank, ret, accepted))
                if accepted:
                    cur = trial
                    changed = True
        if not changed:
            break
    cur = cur.restrict_to_reachable()
    log.final_dp = len(cur.decision_points())
    log.final_return, _ = _measure(cur, env, seeds, obs_encoder, log)
    return cur, log


class PolicyClass(str, enum.Enum):
    OPEN_LOOP = "OpenLoop"
    PRUNED_OPEN_LOOP = "PrunedOpenLoop"
    REACTIVE = "Reactive"


def classify(mm: MooreMachine, log: PruneLog | None = None) -> PolicyClass:
    """Classify an unpruned machine given the log of pruning it."""
    if not mm.decision_points():
        return PolicyClass.OPEN_LOOP
    final = log.final_dp if log is not None else len(mm.decision_points())
    return PolicyClass.PRUNED_OPEN_LOOP if final == 0 else PolicyClass.REACTIVE
