"""Command-line entry points: ``mmforge <command> ...``.

Exit codes: 0 on success, 2 on usage errors, 1 when a stage fails at run time.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import automaton, attention, envs, policy, pruner, qbn, reducer
from .errors import MMForgeError

CSV_COLUMNS = [
    "env", "Nh", "No",
    "orig_dp", "orig_states", "orig_obs", "orig_perf",
    "pruned_dp", "pruned_states", "pruned_obs", "pruned_perf",
    "min_dp", "min_states", "min_obs", "min_perf",
]


def stage_seed(seed: int, label: str) -> int:
    """Derive an independent 64-bit seed for one pipeline stage."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def default_seed() -> int:
    return int(os.environ.get("MMFORGE_SEED", "0"))


class StageError(MMForgeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage} failed: {exc}")
        self.stage = stage


# ---------------------------------------------------------------------------
# File helpers


def _read(path) -> str:
    return Path(path).read_text(encoding="utf-8")


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _write_bytes(path, data: bytes) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)


def load_machine(path) -> automaton.MooreMachine:
    return automaton.deserialize(_read(path))


def load_rpn(path) -> policy.RPN:
    return policy.RPN.from_bytes(Path(path).read_bytes())


def load_qbn(path) -> qbn.QBN:
    return qbn.QBN.from_bytes(Path(path).read_bytes())


def read_seeds(path) -> list[int]:
    return [int(tok) for tok in _read(path).replace(",", " ").split()]


def _obs_encoder(args):
    """E_o binding for raw-observation environments, if a policy is supplied."""
    if getattr(args, "policy", None) and getattr(args, "qbn_o", None):
        rpn, q_o = load_rpn(args.policy), load_qbn(args.qbn_o)
        return lambda obs: q_o.code(rpn.featurize(obs))
    return None


def _seed_list(args) -> list[int]:
    if getattr(args, "seeds", None):
        return read_seeds(args.seeds)
    return list(range(args.seed_base, args.seed_base + args.episodes))


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1))


# ---------------------------------------------------------------------------
# Stage commands


def cmd_clone(args) -> None:
    env = envs.make_env(args.env)
    cfg = policy.CloneConfig(episodes=args.episodes, epochs=args.epochs,
                             dagger_rounds=args.dagger_rounds, lr=args.lr,
                             hidden=args.hidden, seed=stage_seed(args.seed, "clone") % 2**32)
    rpn, history = policy.clone_train(env, envs.scripted_expert(env), cfg)
    _write_bytes(args.out, rpn.to_bytes())
    report = envs.evaluate(policy.RpnPolicy(rpn), env, 20, 0)
    _print_json({"final_loss": history[-1] if history else None, "mean_return": report.mean})


def cmd_train_qbn(args) -> None:
    env = envs.make_env(args.env)
    rpn = load_rpn(args.policy)
    hs, fs = policy.collect_activations(rpn, env, args.episodes, args.seed_base)
    data = hs if args.kind == "hidden" else fs
    q = qbn.build_qbn(data.shape[1], args.bits, args.kind,
                      stage_seed(args.seed, f"qbn-{args.kind}") % 2**32)
    q, history = qbn.train_qbn(q, data, qbn.QbnTrainConfig(lr=args.lr, epochs=args.epochs))
    _write_bytes(args.out, q.to_bytes())
    _print_json({"initial_loss": history[0], "best_loss": min(history),
                 "distinct_codes": qbn.distinct_codes(q, data)})


def _drpn(args) -> policy.DiscretizedRPN:
    return policy.insert_qbns(load_rpn(args.policy), load_qbn(args.qbn_h), load_qbn(args.qbn_o))


def cmd_finetune(args) -> None:
    env = envs.make_env(args.env)
    teacher = load_rpn(args.policy)
    d = _drpn(args)
    cfg = policy.FineTuneConfig(rounds=args.rounds, lr=args.lr,
                                eval_seeds=tuple(range(args.seed_base, args.seed_base + 20)),
                                seed=stage_seed(args.seed, "finetune") % 2**32)
    d, _ = policy.fine_tune(d, teacher, env, cfg)
    _write_bytes(args.out_policy, d.rpn.to_bytes())
    _write_bytes(args.out_qbn_h, d.q_h.to_bytes())
    _write_bytes(args.out_qbn_o, d.q_o.to_bytes())


def cmd_trace(args) -> None:
    env = envs.make_env(args.env)
    traces = policy.collect_transitions(_drpn(args), env, args.episodes, args.seed_base)
    _write(args.out, automaton.write_traces(traces))


def cmd_extract(args) -> None:
    mm = automaton.build_from_traces(automaton.read_traces(_read(args.traces)))
    _write(args.out, automaton.serialize(mm))
    _print_json(mm.stats().to_dict())


def cmd_reduce(args) -> None:
    mm = load_machine(args.machine)
    traces = automaton.read_traces(_read(args.traces)) if args.traces else None
    notes = reducer.Annotations(args.warmup_end, args.termination_start)
    view = reducer.reduce_all(mm, traces, notes)
    _write(args.out, view.to_json() + "\n")
    if args.dot:
        _write(args.dot, reducer.export_dot(view))
    print(f"nodes={len(view.nodes)} arcs={len(view.arcs)} decision_points={len(view.decision_points())}")


def cmd_minimize(args) -> None:
    _write(args.out, automaton.serialize(automaton.minimize(load_machine(args.machine))))


def cmd_prune(args) -> None:
    mm = load_machine(args.machine)
    env = envs.make_env(args.env)
    cfg = pruner.PruneConfig(eval_episodes=args.episodes, tolerance=args.tolerance,
                             relative=not args.absolute, min_abs=args.min_abs,
                             seed_list=_seed_list(args), max_passes=args.max_passes)
    try:
        pruned, log = pruner.prune(mm, env, cfg, _obs_encoder(args))
    except pruner.EvaluationFailure as exc:
        if args.log:
            _write(args.log, exc.log.to_json())
        raise
    _write(args.out, automaton.serialize(pruned))
    if args.log:
        _write(args.log, log.to_json())
    print(f"decision_points {log.original_dp} -> {log.final_dp}; "
          f"return {log.baseline_return} -> {log.final_return}; {pruner.classify(mm, log).value}")


def cmd_attend(args) -> None:
    q_o = load_qbn(args.qbn_o)
    front = load_rpn(args.policy).features if args.policy else None
    o1 = np.asarray(json.loads(_read(args.obs_a)), dtype=float)
    o2 = np.asarray(json.loads(_read(args.obs_b)), dtype=float)
    amap = attention.differential_map(attention.EncoderResponse(q_o, front), o1, o2, args.steps)
    _write(args.out, amap.to_json() + "\n")
    ranked = attention.rank_features(amap)
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "feature", "combined"])
        for r, i in enumerate(ranked):
            w.writerow([r, i, repr(float(amap.combined[i]))])
        _write(args.csv, buf.getvalue())
    print("ranked features:", " ".join(str(i) for i in ranked))


def cmd_eval(args) -> None:
    env = envs.make_env(args.env)
    seeds = _seed_list(args)
    if args.machine:
        pol = automaton.MachinePolicy(load_machine(args.machine), obs_encoder=_obs_encoder(args))
    elif args.policy and args.qbn_h and args.qbn_o:
        pol = policy.DiscretizedPolicy(_drpn(args))
    elif args.policy:
        pol = policy.RpnPolicy(load_rpn(args.policy))
    else:
        pol = envs.scripted_expert(env)
    _print_json(envs.evaluate_seeds(pol, env, seeds).to_dict())


def cmd_export_dot(args) -> None:
    if args.view:
        obj = reducer.ReducedView.from_json(_read(args.view))
    else:
        obj = load_machine(args.machine)
    text = reducer.export_dot(obj)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Pipeline


@dataclasses.dataclass
class PipelineConfig:
    env: str | None = None
    seed: int = 0
    nh: int = 4
    no: int = 4
    hidden: int = 8
    clone_episodes: int = 16
    clone_epochs: int = 100
    dagger_rounds: int = 3
    dagger_epochs: int = 40
    clone_lr: float = 3e-3
    clone_seed_base: int = 10_000
    qbn_episodes: int = 10
    qbn_seed_base: int = 30_000
    qbn_epochs: int = 100
    qbn_lr: float = 3e-3
    qbn_batch: int = 64
    qbn_patience: int = 20
    qbn_restarts: int = 3
    fine_tune: bool = False
    fine_tune_rounds: int = 3
    fine_tune_lr: float = 1e-3
    eval_seed_base: int = 0
    eval_episodes: int = 20
    trace_episodes: int = 20
    prune_tolerance: float = 0.01
    prune_relative: bool = True
    prune_min_abs: float = 0.5
    prune_max_passes: int = 3
    warmup_end: int = 0
    termination_start: int | None = None
    out_dir: str = "mmforge-out"

    def validate(self) -> None:
        if not self.env:
            raise ValueError("env is required")
        if self.nh < 1 or self.no < 1:
            raise ValueError("QBN sizes must be >= 1")
        if self.trace_episodes < 1 or self.eval_episodes < 1:
            raise ValueError("episode counts must be >= 1")


def _coerce(field: dataclasses.Field, text: str):
    kind = str(field.type)
    if "bool" in kind:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {text!r}")
    if text.lower() in ("none", "") and "None" in kind:
        return None
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _coerce(fields[key], value)
    return out


def run_pipeline(cfg: PipelineConfig, log=print) -> dict:
    """Run every stage and write its artifacts under ``cfg.out_dir``."""
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def stage(name, fn):
        try:
            result = fn()
        except Exception as exc:  # noqa: BLE001 - wrapped with the stage name
            raise StageError(name, exc) from exc
        log(f"[{name}] done")
        return result

    env = stage("env", lambda: envs.make_env(cfg.env))
    eval_seeds = list(range(cfg.eval_seed_base, cfg.eval_seed_base + cfg.eval_episodes))

    def clone():
        ccfg = policy.CloneConfig(
            episodes=cfg.clone_episodes, seed_base=cfg.clone_seed_base, hidden=cfg.hidden,
            epochs=cfg.clone_epochs, dagger_rounds=cfg.dagger_rounds,
            dagger_epochs=cfg.dagger_epochs, lr=cfg.clone_lr,
            seed=stage_seed(cfg.seed, "clone") % 2**32)
        rpn, _ = policy.clone_train(env, envs.scripted_expert(env), ccfg)
        _write_bytes(out / "rpn.ckpt", rpn.to_bytes())
        return rpn

    rpn = stage("clone", clone)

    def qbns():
        hs, fs = policy.collect_activations(rpn, env, cfg.qbn_episodes, cfg.qbn_seed_base)
        trained = []
        for kind, data, bits in (("hidden", hs, cfg.nh), ("observation", fs, cfg.no)):
            # best of several restarts: a poor init can collapse the bottleneck
            best = None
            for r in range(cfg.qbn_restarts):
                label = f"qbn-{kind}-{r}"
                q = qbn.build_qbn(data.shape[1], bits, kind, stage_seed(cfg.seed, label) % 2**32)
                tcfg = qbn.QbnTrainConfig(lr=cfg.qbn_lr, epochs=cfg.qbn_epochs, batch=cfg.qbn_batch,
                                          patience=cfg.qbn_patience,
                                          seed=stage_seed(cfg.seed, label + "-shuffle") % 2**32)
                q, history = qbn.train_qbn(q, data, tcfg)
                if best is None or min(history) < best[1]:
                    best = (q, min(history))
            trained.append(best[0])
        return trained

    q_h, q_o = stage("train_qbn", qbns)
    drpn = stage("insert_qbns", lambda: policy.insert_qbns(rpn, q_h, q_o))
    if cfg.fine_tune:
        fcfg = policy.FineTuneConfig(rounds=cfg.fine_tune_rounds, lr=cfg.fine_tune_lr,
                                     eval_seeds=tuple(eval_seeds),
                                     seed=stage_seed(cfg.seed, "finetune") % 2**32)
        drpn = stage("fine_tune", lambda: policy.fine_tune(drpn, rpn, env, fcfg)[0])
    _write_bytes(out / "qbn_h.ckpt", drpn.q_h.to_bytes())
    _write_bytes(out / "qbn_o.ckpt", drpn.q_o.to_bytes())
    _write_bytes(out / "drpn_policy.ckpt", drpn.rpn.to_bytes())

    def traces():
        trs = policy.collect_transitions(
            drpn, env, cfg.trace_episodes,
            seeds=range(cfg.eval_seed_base, cfg.eval_seed_base + cfg.trace_episodes))
        _write(out / "traces.jsonl", automaton.write_traces(trs))
        return trs

    trs = stage("collect_transitions", traces)

    def build():
        mm = automaton.build_from_traces(trs)
        _write(out / "machine.mm", automaton.serialize(mm))
        return mm

    mm = stage("build_from_traces", build)

    def reduce():
        view = reducer.reduce_all(mm, trs, reducer.Annotations(cfg.warmup_end, cfg.termination_start))
        _write(out / "view.json", view.to_json() + "\n")
        _write(out / "view.dot", reducer.export_dot(view))
        _write(out / "machine.dot", reducer.export_dot(mm))
        return view

    stage("reduce_all", reduce)
    encoder = drpn.observation_code

    def prune():
        pcfg = pruner.PruneConfig(eval_episodes=cfg.eval_episodes, tolerance=cfg.prune_tolerance,
                                  relative=cfg.prune_relative, min_abs=cfg.prune_min_abs,
                                  seed_list=eval_seeds, max_passes=cfg.prune_max_passes)
        pruned, plog = pruner.prune(mm, env, pcfg, encoder)
        _write(out / "pruned.mm", automaton.serialize(pruned))
        _write(out / "prune.json", plog.to_json())
        return pruned, plog

    pruned, plog = stage("prune", prune)

    def table():
        minimized = automaton.minimize(mm)
        _write(out / "minimized.mm", automaton.serialize(minimized))
        row = {"env": cfg.env, "Nh": cfg.nh, "No": cfg.no}
        for prefix, machine in (("orig", mm), ("pruned", pruned), ("min", minimized)):
            st = automaton.run_policy(machine, env, obs_encoder=encoder, seeds=eval_seeds)
            row.update({f"{prefix}_dp": st.decision_points, f"{prefix}_states": st.states,
                        f"{prefix}_obs": st.observations, f"{prefix}_perf": st.mean_return})
        buf = io.StringIO()
        w = csv.DictWriter(buf, CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow(row)
        _write(out / "table.csv", buf.getvalue())
        return row

    row = stage("stats", table)
    row["classification"] = pruner.classify(mm, plog).value
    return row


def cmd_pipeline(args) -> None:
    values = parse_config(_read(args.config)) if args.config else {}
    for f in dataclasses.fields(PipelineConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    if "seed" not in values:
        values["seed"] = default_seed()
    cfg = PipelineConfig(**values)
    if not cfg.env:
        raise _UsageError("pipeline: an environment is required (--env or env= in --config)")
    row = run_pipeline(cfg, log=lambda msg: print(msg, file=sys.stderr))
    _print_json(row)


# ---------------------------------------------------------------------------
# Parser


class _UsageError(Exception):
    pass


def _add_policy_flags(p, required=False):
    p.add_argument("--policy", required=required, help="recurrent policy checkpoint")
    p.add_argument("--qbn-h", required=required, help="hidden-state QBN checkpoint")
    p.add_argument("--qbn-o", required=required, help="observation QBN checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    seed_help = "master seed (default: $MMFORGE_SEED or 0)"

    p = sub.add_parser("clone", help="behavior-clone a recurrent policy from the scripted expert")
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=16)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--dagger-rounds", type=int, default=3)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.set_defaults(func=cmd_clone)

    p = sub.add_parser("train-qbn", help="train a quantized autoencoder on policy activations")
    p.add_argument("--env", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--kind", choices=["hidden", "observation"], required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed-base", type=int, default=30_000)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_qbn)

    p = sub.add_parser("finetune", help="imitation fine-tuning of the discretized policy")
    p.add_argument("--env", required=True)
    _add_policy_flags(p, required=True)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed-base", type=int, default=0, help="first evaluation seed")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("--out-policy", required=True)
    p.add_argument("--out-qbn-h", required=True)
    p.add_argument("--out-qbn-o", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("trace", help="collect discrete transition traces")
    _add_policy_flags(p, required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("extract", help="build a machine file from traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("reduce", help="apply the interpretable reductions")
    p.add_argument("--machine", required=True)
    p.add_argument("--traces", help="traces used for visit counts and loop unrolling")
    p.add_argument("--warmup-end", type=int, default=0)
    p.add_argument("--termination-start", type=int, default=None)
    p.add_argument("--out", required=True, help="reduced view JSON")
    p.add_argument("--dot", help="also write the view as DOT")
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("minimize", help="partition-refinement minimization")
    p.add_argument("--machine", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_minimize)

    p = sub.add_parser("prune", help="greedy functional pruning")
    p.add_argument("--machine", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--seeds", help="file of whitespace-separated evaluation seeds")
    p.add_argument("--tolerance", type=float, default=0.01)
    p.add_argument("--absolute", action="store_true", help="tolerance is an absolute drop")
    p.add_argument("--min-abs", type=float, default=0.5, help="floor on the allowed drop")
    p.add_argument("--max-passes", type=int, default=3)
    p.add_argument("--policy", help="policy checkpoint for observation binding")
    p.add_argument("--qbn-o", help="observation QBN for observation binding")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("attend", help="differential attention between two observations")
    p.add_argument("--qbn-o", required=True)
    p.add_argument("--policy", help="attribute to raw observations through the policy's features")
    p.add_argument("--obs-a", required=True)
    p.add_argument("--obs-b", required=True, help="baseline observation")
    p.add_argument("--steps", type=int, default=attention.DEFAULT_STEPS)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="ranked features as CSV")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("eval", help="evaluate a machine, a policy or the scripted expert")
    p.add_argument("--env", required=True)
    p.add_argument("--machine")
    _add_policy_flags(p)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-dot", help="render a machine or a reduced view as DOT")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--machine")
    g.add_argument("--view")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("pipeline", help="run every stage and write a table row")
    p.add_argument("--config", help="key=value config file (flags win)")
    p.add_argument("--env")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--nh", type=int)
    p.add_argument("--no", type=int)
    p.add_argument("--fine-tune", action="store_const", const=True, default=None)
    p.add_argument("--trace-episodes", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--prune-tolerance", type=float)
    p.add_argument("--warmup-end", type=int)
    p.add_argument("--termination-start", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and args.command != "pipeline":
        args.seed = default_seed()
    try:
        args.func(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmforge: error: {exc}", file=sys.stderr)
        return 2
    except (MMForgeError, OSError, ValueError, KeyError) as exc:
        print(f"mmforge: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
