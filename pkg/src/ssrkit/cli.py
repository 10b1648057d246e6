"""Command-line entry point: ``ssrkit {merge,train-ssr,grpo,diagnose,replay}``.

JSON results go to stdout and into the run directory; human-readable
summaries go to stderr. Every run directory receives a ``manifest.json``
recording the exact argument vector, so ``ssrkit replay`` can reproduce it.

Exit codes: 0 ok, 2 shape, 3 I/O, 4 numeric, 5 stage, 6 usage.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .checkpoint import ParameterMap, read_checkpoint, write_checkpoint
from .errors import SSRError, UsageError

EXIT_OK, EXIT_SHAPE, EXIT_IO, EXIT_NUMERIC, EXIT_STAGE, EXIT_USAGE = 0, 2, 3, 4, 5, 6
MANIFEST = "manifest.json"


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; we reserve 2 for shape errors."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    git_describe: str
    timestamp: str
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, MANIFEST)
        with open(path, "w") as fh:
            fh.write(json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path) as fh:
            return cls(**json.load(fh))


def git_describe() -> str:
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def run_timestamp() -> str:
    """UTC time from ``SOURCE_DATE_EPOCH`` (0 when unset) so reruns stay byte-identical."""
    try:
        epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    except ValueError:
        epoch = 0
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _manifest(args, config: dict, outputs: dict, argv) -> RunManifest:
    return RunManifest(args.command, list(argv), config, int(getattr(args, "seed", 0)),
                       git_describe(), run_timestamp(), outputs)


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise _IOFailure(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path} must hold a JSON object")
    return data


class _IOFailure(SSRError):
    exit_code = EXIT_IO


def _dump(obj, path=None) -> str:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _say(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_merge(args, argv) -> int:
    from .merge import MergeConfig, merge_models

    cfg = MergeConfig(method=args.method, iterations=args.iters, lr=args.lr, seed=args.seed)
    base = read_checkpoint(args.base)
    experts = [read_checkpoint(p) for p in args.expert]
    merged, report = merge_models(base, experts, cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_checkpoint(merged, args.out)
    rep = report.to_dict(include_wall_time=False) if report else {"method": cfg.method}
    rep_path = args.out + ".report.json"
    _dump(rep, rep_path)
    config = {"merge": asdict(cfg), "base": args.base, "experts": list(args.expert)}
    _manifest(args, config, {"checkpoint": args.out, "report": rep_path}, argv).write(out_dir)
    sys.stdout.write(_dump({"checkpoint": args.out, "report": rep_path, "digest": merged.digest(),
                            "final_objective": rep.get("final_objective")}))
    _say(f"merged {len(experts)} expert(s) with {cfg.method} -> {args.out}")
    return EXIT_OK


def _summary_table(result) -> str:
    from .toy.domains import DOMAINS

    lines = [f"{'stage':<10}" + "".join(f"{d:>10}" for d in DOMAINS) + f"{'steps':>8}"]
    for stage in result.models:
        accs = "".join(f"{100 * result.accuracy(stage, d):>10.1f}" for d in DOMAINS)
        steps = next(r["steps"] for r in result.metrics if r["stage"] == stage)
        lines.append(f"{stage:<10}{accs}{steps:>8}")
    return "\n".join(lines)


def cmd_train_ssr(args, argv) -> int:
    from .toy.pipeline import SsrConfig, run_paradigm

    raw = _load_json(args.config)
    raw["seed"] = args.seed
    try:
        cfg = SsrConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    result = run_paradigm(args.paradigm, cfg)
    os.makedirs(args.out, exist_ok=True)
    paths = result.write(args.out)
    if result.merge_report is not None:
        paths["merge_report"] = os.path.join(args.out, "merge_report.json")
        _dump(result.merge_report.to_dict(include_wall_time=False), paths["merge_report"])
    _manifest(args, cfg.to_dict(), paths, argv).write(args.out)
    final = list(result.models)[-1]
    from .toy.domains import DOMAINS
    sys.stdout.write(_dump({"paradigm": args.paradigm, "total_steps": result.total_steps,
                            "final_stage": final, "outputs": paths,
                            "final_accuracy": {d: result.accuracy(final, d) for d in DOMAINS}}))
    _say(_summary_table(result))
    return EXIT_OK


def cmd_grpo(args, argv) -> int:
    from .grpo import GrpoConfig, arm_probabilities, grpo_train, make_env

    env = make_env(args.env)
    raw = _load_json(args.config)
    raw["seed"] = args.seed
    try:
        cfg = GrpoConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    policy, curve = grpo_train(env.make_policy(cfg.seed), env, cfg)
    os.makedirs(args.out, exist_ok=True)
    probs = arm_probabilities(policy)
    out = {"env": env.name, "curve": curve, "first_token_probs": probs.tolist(), "info": env.info}
    paths = {"curve": os.path.join(args.out, "curve.json"),
             "policy": os.path.join(args.out, "policy.abmckpt")}
    _dump(out, paths["curve"])
    write_checkpoint(ParameterMap(policy.params, {"env": env.name}), paths["policy"])
    _manifest(args, asdict(cfg), paths, argv).write(args.out)
    sys.stdout.write(_dump({"env": env.name, "outputs": paths, "final_reward": curve[-1] if curve else None,
                            "first_token_probs": out["first_token_probs"]}))
    if curve:
        _say(f"{env.name}: mean reward {np.mean(curve[:10]):.3f} (first 10) -> {np.mean(curve[-10:]):.3f} (last 10)")
    return EXIT_OK


def _diagnose_conflict(spec: dict) -> dict:
    from .interference import gradient_conflict_matrix, opposing_regression_tasks, regression_loss

    task = spec.get("task", "toy")
    if task == "opposing_regression":
        a, b = opposing_regression_tasks(int(spec.get("seed", 0)))
        dim = a[0].shape[1]
        rep = gradient_conflict_matrix({"w": np.zeros((dim, 1))}, [a, b], loss_fn=regression_loss)
        return {"task": task, "tasks": ["positive", "negated"], **rep.to_dict()}
    if task != "toy":
        raise UsageError(f"unknown conflict task {task!r}; use 'toy' or 'opposing_regression'")
    from .toy.domains import DOMAINS
    from .toy.pipeline import SsrConfig, joint_baseline, prepare

    cfg = SsrConfig.from_dict(spec.get("config", {}))
    stage = spec.get("stage", "joint")
    if stage == "base":
        suite, model, _ = prepare(cfg)
    elif stage == "joint":
        # untrained heads are zero and pass no gradient to the trunk, so look
        # at a model whose heads have all been fitted
        res = joint_baseline(cfg)
        suite, model = res.suite, res.models[list(res.models)[-1]]
    else:
        raise UsageError(f"unknown conflict stage {stage!r}; use 'base' or 'joint'")
    n = int(spec.get("samples", 256))
    batches = [suite.train(m).subset(np.arange(min(n, len(suite.train(m))))) for m in DOMAINS]
    trunk = [k for k in model.params if k.startswith("trunk.")]
    rep = gradient_conflict_matrix(model, batches, names=trunk)
    return {"task": task, "stage": stage, "tasks": list(DOMAINS), **rep.to_dict()}


def cmd_diagnose(args, argv) -> int:
    from .interference import (BoundSpec, TransferExperimentSpec, scaffold_transfer_experiment,
                               verify_bound_quadratic)

    spec = _load_json(args.spec)
    seed = args.seed
    try:
        if args.mode == "bound":
            trials = int(spec.pop("trials", 1000))
            check = verify_bound_quadratic(BoundSpec.from_dict(spec), trials, seed)
            out, summary = check.to_dict(), check.summary()
        elif args.mode == "conflict":
            out = _diagnose_conflict(spec)
            summary = "\n".join(" ".join(f"{v:+.3f}" for v in row) for row in out["matrix"])
        else:
            rep = scaffold_transfer_experiment(TransferExperimentSpec.from_dict(spec), seed)
            out, summary = rep.to_dict(), rep.summary()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SSRError):
            raise
        raise UsageError(f"bad spec: {exc}") from exc
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.mode}.json")
    _dump(out, path)
    _manifest(args, spec, {"report": path}, argv).write(args.out)
    sys.stdout.write(_dump({"mode": args.mode, "report": path, "summary": summary}))
    _say(summary)
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    try:
        manifest = RunManifest.read(args.manifest)
    except OSError as exc:
        raise _IOFailure(f"cannot read {args.manifest}: {exc}") from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"{args.manifest} is not a run manifest: {exc}") from exc
    if manifest.argv and manifest.argv[0] == "replay":
        raise UsageError("refusing to replay a replay manifest")
    return main(manifest.argv)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="ssrkit", description="Scaffold-specialize-reconcile experiments on toy models.",
                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"ssrkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("merge", help="merge expert checkpoints into one", formatter_class=fmt)
    m.add_argument("--base", required=True, help="base checkpoint the task vectors are taken against")
    m.add_argument("--expert", required=True, action="append", help="expert checkpoint (repeatable)")
    m.add_argument("--method", choices=["avg", "tsvm", "wudi"], default="wudi", help="merge method")
    m.add_argument("--iters", type=int, default=1000, help="WUDI optimizer iterations")
    m.add_argument("--lr", type=float, default=1e-5, help="WUDI Adam learning rate")
    m.add_argument("--seed", type=int, default=0, help="recorded in the manifest")
    m.add_argument("--out", required=True, help="output checkpoint path")
    m.set_defaults(func=cmd_merge)

    t = sub.add_parser("train-ssr", help="run a training paradigm on the synthetic suite", formatter_class=fmt)
    t.add_argument("--config", default=None, help="JSON file with SsrConfig overrides")
    t.add_argument("--paradigm", choices=["ssr", "sequential", "joint"], default="ssr")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train_ssr)

    g = sub.add_parser("grpo", help="GRPO on a built-in environment", formatter_class=fmt)
    g.add_argument("--env", required=True, help="bandit4, constant or sequence3")
    g.add_argument("--config", default=None, help="JSON file with GrpoConfig overrides "
                   "(group_size 8, clip_eps 0.2, lr 1e-3, steps 500)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="run directory")
    g.set_defaults(func=cmd_grpo)

    d = sub.add_parser("diagnose", help="interference bound, gradient conflicts or transfer sweep",
                       formatter_class=fmt)
    d.add_argument("--mode", required=True, choices=["bound", "conflict", "transfer"])
    d.add_argument("--spec", default=None, help="JSON file with the mode's spec")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True, help="run directory")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("replay", help="rerun the command recorded in a manifest", formatter_class=fmt)
    r.add_argument("manifest", help="path to manifest.json")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except SSRError as exc:
        _say(f"error: {exc}")
        return exc.exit_code
    except FileNotFoundError as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except OSError as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except FloatingPointError as exc:
        _say(f"error: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
