"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a PASS or FAIL line; conftest prints them in the terminal summary.
"""

import functools
import time

import numpy as np
from conftest import ACCEPTANCE, run_cartpole
from helpers import (
    chain_with_branches,
    check_view,
    dense_case,
    differing_pair,
    gru_case,
    lively_qbn,
    qbn_case,
    qbn_residuals,
    worst_grad_error,
)

from mmforge.attention import differential_map
from mmforge.automaton import equivalent, minimize, run_policy, serialize, stats
from mmforge.envs import (
    CartPoleExpert,
    ParityOracle,
    evaluate,
    evaluate_seeds,
    parity_memory_env,
    synthetic_mm_env,
)
from mmforge.fixtures import parity_machine, random_machine, random_walk_traces, redundant_branch_spec
from mmforge.neural import ternary_tanh_forward
from mmforge.policy import RpnPolicy
from mmforge.pruner import PolicyClass, PruneConfig, classify, prune
from mmforge.reducer import reduce_all


def criterion(number):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                ACCEPTANCE[number] = f"FAIL  {type(exc).__name__}: {str(exc).splitlines()[0][:100]}"
                raise
            ACCEPTANCE[number] = f"PASS  {detail or ''} ({time.perf_counter() - t0:.1f}s)"
        return run
    return wrap


@criterion(1)
def test_c1_minimization_matches_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(200):
        mm = random_machine(rng, max_states=12, max_obs=4)
        mini = minimize(mm)
        assert equivalent(mm, mini, 8)
        assert len(mini.states) <= len(mm.states)
        assert serialize(minimize(mini)) == serialize(mini)
    seconds = time.perf_counter() - t0
    assert seconds <= 60
    return "200/200 equivalent at depth 8, idempotent, never larger"


@criterion(2)
def test_c2_reductions_preserve_behavior():
    rng = np.random.default_rng(77)
    for i in range(50):
        mm = random_machine(rng) if i % 2 else chain_with_branches(rng, n=int(rng.integers(5, 40)))
        traces = random_walk_traces(mm, rng, episodes=5, length=60)
        before, text = stats(mm), serialize(mm)
        check_view(mm, traces, reduce_all(mm, traces))
        assert stats(mm) == before and serialize(mm) == text
    return "50/50 machines replay every trace"


@criterion(3)
def test_c3_pruning_pattern():
    t0 = time.perf_counter()
    spec = redundant_branch_spec()
    env = synthetic_mm_env(spec)
    mm = spec.machine
    pruned, log = prune(mm, env, PruneConfig(tolerance=0.01, min_abs=0.0))
    assert pruned.decision_points() == []
    assert log.final_return >= 0.99 * log.baseline_return
    assert classify(mm, log) is PolicyClass.PRUNED_OPEN_LOOP

    parity, pmm = parity_memory_env(), parity_machine()
    seeds = range(200)
    assert evaluate_seeds(ParityOracle(), parity, seeds).mean == 1.0
    cfg = PruneConfig(tolerance=0.3, relative=False, min_abs=0.0, seed_list=seeds)
    ppruned, plog = prune(pmm, parity, cfg)
    assert len(ppruned.decision_points()) >= 1
    assert plog.final_return >= plog.baseline_return - 0.3
    assert time.perf_counter() - t0 <= 120
    return (f"redundant {log.original_dp}->0 DP, parity keeps "
            f"{len(ppruned.decision_points())} DP at return {plog.final_return}")


@criterion(4)
def test_c4_integrated_gradients():
    rng = np.random.default_rng(5)
    wins, worst = 0, 0.0
    for seed in range(20):
        q = lively_qbn(4, 3, "observation", seed)
        o1, o2 = differing_pair(q, rng)
        fine = max(qbn_residuals(q, o1, o2, 256))
        coarse = max(qbn_residuals(q, o1, o2, 128))
        worst = max(worst, fine)
        assert fine <= 1e-3
        wins += coarse >= fine
        a, b = differential_map(q, o1, o2, 256), differential_map(q, o2, o1, 256)
        for f in a.differing:
            assert np.max(np.abs(a.per_feature[f] + b.per_feature[f])) <= 1e-12
    assert wins >= 18
    return f"worst residual {worst:.2e}, m=128 >= m=256 in {wins}/20"


@criterion(5)
def test_c5_gradient_checks():
    cases = {
        "dense": dense_case,
        "gru": gru_case,
        "encoder": lambda s: qbn_case(s, "encoder"),
        "decoder": lambda s: qbn_case(s, "decoder"),
    }
    errors = {name: worst_grad_error(make, 50) for name, make in cases.items()}
    assert max(errors.values()) <= 1e-4, errors
    return "worst rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errors.items())


@criterion(6)
def test_c6_quantization_range(cartpole_run):
    drpn = cartpole_run.drpn
    rng = np.random.default_rng(6)
    for q in (drpn.q_h, drpn.q_o):
        x = rng.normal(scale=3.0, size=(10_000, q.input_dim))
        codes, _ = q.encode(x)
        assert set(np.unique(codes)) <= {-1, 0, 1}
    z = rng.normal(scale=2.0, size=10_000)
    assert np.array_equal(ternary_tanh_forward(-z), -ternary_tanh_forward(z))
    return "2 trained QBNs x 10^4 inputs ternary; odd symmetry exact"


@criterion(7)
def test_c7_cartpole_end_to_end(cartpole_run, cartpole_env):
    expert = evaluate(CartPoleExpert(), cartpole_env, 100)
    assert expert.mean >= 495
    row, log = cartpole_run.row, cartpole_run.prune_log
    seeds = range(cartpole_run.cfg.eval_seed_base,
                  cartpole_run.cfg.eval_seed_base + cartpole_run.cfg.eval_episodes)
    clone = evaluate_seeds(RpnPolicy(cartpole_run.teacher), cartpole_env, seeds)
    assert clone.mean >= 475
    assert row["orig_perf"] >= 450
    assert row["pruned_dp"] <= row["orig_dp"]
    assert log.final_return >= log.baseline_return - log.allowed_drop
    if row["orig_dp"] > 2:
        assert row["pruned_dp"] < row["orig_dp"]
    assert cartpole_run.seconds <= 600
    return (f"expert {expert.mean:.1f}, clone {clone.mean:.1f}, MM {row['orig_perf']:.1f}, "
            f"DP {row['orig_dp']}->{row['pruned_dp']} at {row['pruned_perf']:.1f}, "
            f"pipeline {cartpole_run.seconds:.0f}s")


@criterion(8)
def test_c8_pipeline_is_deterministic(cartpole_run, tmp_path):
    again = run_cartpole(tmp_path / "cartpole-b", cartpole_run.cfg.seed)
    for name in ("machine.mm", "pruned.mm", "minimized.mm", "prune.json", "table.csv"):
        assert again.bytes(name) == cartpole_run.bytes(name), name
    return "machine, prune log and CSV byte-identical across two runs"


def test_mm_policy_matches_table(cartpole_run, cartpole_env):
    # the row's MM performance is what the extracted machine earns when rerun
    st = run_policy(cartpole_run.machine, cartpole_env, obs_encoder=cartpole_run.drpn.observation_code,
                    seeds=range(20))
    assert st.mean_return == cartpole_run.row["orig_perf"]
