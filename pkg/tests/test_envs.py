import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmforge.automaton import MachinePolicy
from mmforge.envs import (
    CartPole,
    CartPoleConfig,
    CartPoleExpert,
    ParityOracle,
    cartpole_derivatives,
    dump_synthetic_spec,
    evaluate,
    evaluate_seeds,
    load_synthetic_spec,
    make_env,
    parity_memory_env,
    rollout,
    scripted_expert,
    synthetic_mm_env,
    validate_synthetic,
)
from mmforge.errors import InvalidSpec, ParseError, StepAfterDone
from mmforge.fixtures import make_machine, multi_redundant_spec, redundant_branch_spec


class Always:
    def __init__(self, action):
        self.action = action

    def reset(self):
        pass

    def act(self, obs):
        return self.action


# -- CartPole ------------------------------------------------------------------------


def test_push_right_from_rest_moves_right():
    env = CartPole()
    env.reset(0)
    env.state = np.zeros(4)
    obs, reward, done = env.step(1)
    assert obs[1] > 0 and obs[3] < 0
    assert reward == 1.0 and not done


def test_episode_capped_at_500():
    assert rollout(CartPoleExpert(), CartPole(), seed=3) == 500.0


def test_expert_over_hundred_seeds():
    report = evaluate(CartPoleExpert(), CartPole(), 100)
    assert report.mean >= 495


def test_falls_without_control():
    assert rollout(Always(1), CartPole(), seed=0) < 50


def test_reset_in_range_and_deterministic():
    a, b = CartPole(), CartPole()
    s = a.reset(11)
    assert np.array_equal(s, b.reset(11))
    assert np.all(np.abs(s) <= 0.05)
    for act in (1, 0, 1, 1, 0):
        assert np.array_equal(a.step(act)[0], b.step(act)[0])


def test_step_after_done_raises():
    env = CartPole(CartPoleConfig(max_steps=2))
    env.reset(0)
    env.step(0)
    assert env.step(0)[2]
    with pytest.raises(StepAfterDone):
        env.step(0)
    with pytest.raises(StepAfterDone):
        CartPole().step(0)


def rk4_step(s, force, dt, cfg):
    def f(s):
        x_acc, th_acc = cartpole_derivatives(s, force, cfg)
        return np.array([s[1], x_acc, s[3], th_acc])

    k1 = f(s)
    k2 = f(s + dt / 2 * k1)
    k3 = f(s + dt / 2 * k2)
    k4 = f(s + dt * k3)
    return s + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def test_euler_tracks_rk4_at_small_step():
    # balanced by the expert for one simulated second; RK4 replays the same forces
    cfg = CartPoleConfig(tau=1e-4, max_steps=10**6)
    env, expert = CartPole(cfg), CartPoleExpert()
    obs = env.reset(5)
    ref = obs.copy()
    for _ in range(10_000):
        action = expert.act(obs)
        obs, _, done = env.step(action)
        ref = rk4_step(ref, cfg.force_mag if action else -cfg.force_mag, cfg.tau, cfg)
        assert not done
    assert np.max(np.abs(obs - ref)) <= 1e-3


# -- parity ---------------------------------------------------------------------------


def test_parity_oracle_is_perfect_and_guessing_is_half():
    env = parity_memory_env(4)
    assert evaluate(ParityOracle(), env, 50).mean == 1.0
    assert 0.3 <= evaluate(Always(1), env, 200).mean <= 0.7


def test_parity_reward_only_at_the_end():
    env = parity_memory_env(3)
    obs = env.reset(1)
    bit = int(obs[0] > 0)
    rewards = [env.step(bit)[1] for _ in range(3)]
    assert rewards == [0.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        parity_memory_env(1)


# -- synthetic machine envs --------------------------------------------------------------


def test_redundant_fixture_validates_and_scores():
    spec = redundant_branch_spec()
    env = synthetic_mm_env(spec)
    report = evaluate(scripted_expert(env), env, 20)
    assert report.std == 0.0 and report.mean == spec.horizon


def test_unequal_branches_rejected():
    spec = redundant_branch_spec()
    rewards = [dict(r) for r in spec.rewards]
    rewards[spec.horizon - 5] = {1: 1.0}
    with pytest.raises(InvalidSpec):
        validate_synthetic(dataclasses.replace(spec, rewards=rewards))


def test_non_decision_point_marked_redundant():
    spec = redundant_branch_spec()
    with pytest.raises(InvalidSpec):
        validate_synthetic(dataclasses.replace(spec, redundant=(0,)))


def test_zero_branch_chain():
    mm = make_machine([1, 0, 1, 0], [(0, 0, 1, 1), (1, 0, 2, 1), (2, 0, 3, 1), (3, 0, 0, 1)])
    spec = dataclasses.replace(redundant_branch_spec(), machine=mm, redundant=(),
                               horizon=6, rewards=[{1: 1.0}] * 6)
    env = synthetic_mm_env(spec)
    assert evaluate(MachinePolicy(mm), env, 3).returns == (3.0, 3.0, 3.0)


@pytest.mark.parametrize("spec", [redundant_branch_spec(), multi_redundant_spec(3)])
def test_spec_text_round_trip(spec):
    text = dump_synthetic_spec(spec)
    back = load_synthetic_spec(text)
    assert dump_synthetic_spec(back) == text
    assert back.redundant == spec.redundant and back.horizon == spec.horizon


def test_spec_parse_errors():
    text = dump_synthetic_spec(redundant_branch_spec())
    with pytest.raises(ParseError):
        load_synthetic_spec(text.replace("horizon", "horizon x"))
    with pytest.raises(ParseError):
        load_synthetic_spec("\n".join(ln for ln in text.splitlines()
                                      if not ln.startswith("horizon")))


def test_emission_vectors_used():
    spec = dataclasses.replace(redundant_branch_spec(),
                               emission={0: (0.0, 0.5), 1: (1.0, 0.0), 2: (-1.0, 0.0)})
    env = synthetic_mm_env(spec)
    assert env.obs_dim == 2
    assert env.reset(0).tolist() == [0.0, 0.5]


# -- evaluation harness -------------------------------------------------------------------


@settings(max_examples=10, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=5))
def test_evaluation_is_seed_deterministic(seeds):
    a = evaluate_seeds(CartPoleExpert(), CartPole(), seeds)
    b = evaluate_seeds(CartPoleExpert(), CartPole(), seeds)
    assert a == b and a.seeds == tuple(seeds)


def test_report_dict_and_bad_count():
    report = evaluate(Always(1), parity_memory_env(), 4, seed_base=7)
    d = report.to_dict()
    assert d["seeds"] == [7, 8, 9, 10] and d["mean"] == report.mean
    with pytest.raises(ValueError):
        evaluate(Always(1), parity_memory_env(), 0)


def test_make_env_names(tmp_path):
    assert isinstance(make_env("cartpole"), CartPole)
    assert make_env("parity:5").horizon == 5
    path = tmp_path / "s.txt"
    path.write_text(dump_synthetic_spec(redundant_branch_spec()))
    assert make_env(f"synthetic:{path}").spec.horizon == 10
    with pytest.raises(ValueError):
        make_env("mountaincar")
