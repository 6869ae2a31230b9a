import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from mmforge import automaton, pruner
from mmforge.cli import PipelineConfig, run_pipeline
from mmforge.envs import cartpole
from mmforge.policy import RPN, DiscretizedRPN
from mmforge.qbn import QBN

# criterion number -> "PASS ..." / "FAIL ..." line, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {ACCEPTANCE[number]}")


@dataclass
class PipelineRun:
    cfg: PipelineConfig
    out: Path
    row: dict
    seconds: float

    def bytes(self, name):
        return (self.out / name).read_bytes()

    @property
    def teacher(self):
        return RPN.from_bytes(self.bytes("rpn.ckpt"))

    @property
    def drpn(self):
        return DiscretizedRPN(RPN.from_bytes(self.bytes("drpn_policy.ckpt")),
                              QBN.from_bytes(self.bytes("qbn_h.ckpt")),
                              QBN.from_bytes(self.bytes("qbn_o.ckpt")))

    @property
    def machine(self):
        return automaton.deserialize((self.out / "machine.mm").read_text())

    @property
    def pruned(self):
        return automaton.deserialize((self.out / "pruned.mm").read_text())

    @property
    def prune_log(self):
        return pruner.PruneLog.from_json((self.out / "prune.json").read_text())

    @property
    def traces(self):
        return automaton.read_traces((self.out / "traces.jsonl").read_text())


def run_cartpole(out: Path, seed: int = 0) -> PipelineRun:
    cfg = PipelineConfig(env="cartpole", seed=seed, out_dir=str(out))
    t0 = time.perf_counter()
    row = run_pipeline(cfg, log=lambda msg: None)
    return PipelineRun(cfg, out, row, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def cartpole_run(tmp_path_factory):
    """One full CartPole (4, 4) pipeline run shared by every test that needs trained nets."""
    return run_cartpole(tmp_path_factory.mktemp("cartpole-a"))


@pytest.fixture(scope="session")
def cartpole_env():
    return cartpole()
