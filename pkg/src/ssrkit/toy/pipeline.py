"""Staged training paradigms on the synthetic suite.

Three paradigms share the base stage and are given the same number of
gradient steps:

* ``ssr``: scaffold SFT, specialists fine-tuned from the scaffold, a data-free
  merge of their task vectors (relative to the base), then embodied SFT;
* ``sequential``: the same stages chained, each starting from the previous;
* ``joint``: one run on the pooled scaffold and specialist data, then
  embodied SFT.

An optional GRPO stage refines the final model's embodied head with a
token-match reward.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..checkpoint import ParameterMap, write_checkpoint
from ..errors import SSRError, StageError
from ..grpo import Env, GrpoConfig, grpo_train
from ..merge import MergeConfig, merge_models
from .domains import DOMAINS, SyntheticConfig, SyntheticSuite, build_suite
from .model import LabeledBatch, ToyModel, logits
from .train import sft_train, steps_per_epoch, train_steps

PARADIGMS = ("ssr", "sequential", "joint")

# per-stage stream offsets; stage seeds are 1000 * seed + offset
_SEED_OFFSETS = {"base": 7, "spatial": 1, "ad": 2, "uav": 3, "joint": 4, "embodied": 5, "grpo": 6}


def stage_seed(seed: int, stage: str) -> int:
    return 1000 * seed + _SEED_OFFSETS.get(stage, 8)


@dataclass
class SsrConfig:
    """Hyperparameters for every paradigm.

    Learning rates are the documented 5e-6 scaled by 1000 for toy parameter
    norms, except the specialists, which use a tenth of that so they stay
    close to the scaffold.
    """

    seed: int = 0
    scaffold: str | None = "spatial"
    specialists: list = field(default_factory=lambda: ["ad", "uav"])
    embodied: str | None = "embodied"
    hidden: int = 32
    batch_size: int = 32
    weight_decay: float = 0.0
    base_epochs: int = 60
    base_lr: float = 5e-3
    scaffold_epochs: int = 40
    scaffold_lr: float = 5e-3
    specialize_epochs: int = 60
    specialize_lr: float = 5e-4
    embodied_epochs: int = 60
    embodied_lr: float = 2e-3
    joint_lr: float = 5e-3
    merge: dict = field(default_factory=lambda: {"method": "wudi"})
    data: dict = field(default_factory=dict)
    grpo: dict | None = None

    def __post_init__(self):
        named = [d for d in [self.scaffold, *self.specialists, self.embodied] if d is not None]
        unknown = [d for d in named if d not in DOMAINS]
        if unknown:
            raise ValueError(f"stages reference unknown domains {unknown}; known: {list(DOMAINS)}")
        if len(set(named)) != len(named):
            raise ValueError(f"a domain appears in more than one stage: {named}")
        if not named:
            raise ValueError("config trains no domain")
        for k in ("base_epochs", "scaffold_epochs", "specialize_epochs", "embodied_epochs"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        self.merge_config()  # validate eagerly
        self.data_config()
        if self.grpo is not None:
            GrpoConfig.from_dict(self.grpo)

    @property
    def stages(self) -> list[str]:
        out = ["base"]
        if self.scaffold:
            out.append(self.scaffold)
        out += list(self.specialists)
        out.append("merge")
        if self.embodied:
            out.append(self.embodied)
        if self.grpo is not None:
            out.append("grpo")
        return out

    def merge_config(self) -> MergeConfig:
        return MergeConfig.from_dict(self.merge)

    def data_config(self) -> SyntheticConfig:
        return SyntheticConfig.from_dict(self.data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SsrConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SsrConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PipelineResult:
    paradigm: str
    models: dict  # stage -> ToyModel, in stage order
    metrics: list  # one row per (stage, domain)
    suite: SyntheticSuite
    merge_report: object = None

    def accuracy(self, stage: str, domain: str) -> float:
        for row in self.metrics:
            if row["stage"] == stage and row["domain"] == domain:
                return row["accuracy"]
        raise KeyError((stage, domain))

    @property
    def total_steps(self) -> int:
        seen = {}
        for row in self.metrics:
            seen[row["stage"]] = row["steps"]
        return int(sum(seen.values()))

    def metrics_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.metrics)

    def write(self, out_dir) -> dict:
        """Write one ABM-CKPT per stage plus ``metrics.jsonl``; return the paths."""
        os.makedirs(out_dir, exist_ok=True)
        paths = {}
        for stage, model in self.models.items():
            paths[stage] = os.path.join(out_dir, f"theta_{stage}.abmckpt")
            write_checkpoint(model.params, paths[stage])
        paths["metrics"] = os.path.join(out_dir, "metrics.jsonl")
        with open(paths["metrics"], "w") as fh:
            fh.write(self.metrics_jsonl())
        return paths


# ---------------------------------------------------------------------------
# stage helpers


def _epochs_steps(batch: LabeledBatch, epochs: int, batch_size: int) -> int:
    return epochs * steps_per_epoch(len(batch), batch_size) if len(batch) else 0


class _Run:
    """Bookkeeping shared by the paradigms: stage models and metric rows."""

    def __init__(self, paradigm: str, cfg: SsrConfig, suite: SyntheticSuite):
        self.paradigm, self.cfg, self.suite = paradigm, cfg, suite
        self.models, self.metrics = {}, []

    def record(self, stage: str, model: ToyModel, steps: int):
        self.models[stage] = model
        total = steps + sum(r["steps"] for r in self.metrics if r["domain"] == DOMAINS[0])
        for m in DOMAINS:
            ev = self.suite.eval(m)
            self.metrics.append({
                "paradigm": self.paradigm, "stage": stage, "domain": m,
                "accuracy": round(model.accuracy(ev), 6), "loss": round(model.loss(ev), 6),
                "steps": int(steps), "total_steps": int(total),
            })

    def sft(self, stage: str, model: ToyModel, domain: str, epochs: int, lr: float, seed_stage=None):
        data = self.suite.train(domain)
        try:
            out, _ = sft_train(model, data, epochs, lr, stage_seed(self.cfg.seed, seed_stage or domain),
                               self.cfg.batch_size, self.cfg.weight_decay, stage)
        except SSRError as exc:
            raise StageError(stage, str(exc)) from exc
        self.record(stage, out, _epochs_steps(data, epochs, self.cfg.batch_size))
        return out

    def result(self, report=None) -> PipelineResult:
        return PipelineResult(self.paradigm, self.models, self.metrics, self.suite, report)


def prepare(cfg: SsrConfig, suite: SyntheticSuite | None = None):
    """Build the suite and the base model (general-corpus SFT from a seeded init)."""
    suite = suite or build_suite(cfg.seed, cfg.data_config())
    model = ToyModel.init(suite.model_spec(cfg.hidden), cfg.seed)
    try:
        base, _ = sft_train(model, suite.general["embodied"], cfg.base_epochs, cfg.base_lr,
                            stage_seed(cfg.seed, "base"), cfg.batch_size, cfg.weight_decay, "base")
    except SSRError as exc:
        raise StageError("base", str(exc)) from exc
    return suite, base, _epochs_steps(suite.general["embodied"], cfg.base_epochs, cfg.batch_size)


def _start(paradigm, cfg, suite):
    suite, base, steps = prepare(cfg, suite)
    run = _Run(paradigm, cfg, suite)
    run.record("base", base, steps)
    return run, base


def _finish(run: _Run, model: ToyModel, report=None) -> PipelineResult:
    cfg = run.cfg
    if cfg.embodied:
        model = run.sft(cfg.embodied, model, cfg.embodied, cfg.embodied_epochs, cfg.embodied_lr)
    if cfg.grpo is not None:
        domain = cfg.embodied or cfg.scaffold or cfg.specialists[-1]
        try:
            model, steps = grpo_refine(model, run.suite.train(domain), GrpoConfig.from_dict(cfg.grpo))
        except SSRError as exc:
            raise StageError("grpo", str(exc)) from exc
        run.record("grpo", model, steps)
    return run.result(report)


def ssr_pipeline(cfg: SsrConfig, suite: SyntheticSuite | None = None) -> PipelineResult:
    """Scaffold, specialize, reconcile, then embodied SFT (and optional GRPO)."""
    run, base = _start("ssr", cfg, suite)
    scaffold = base
    if cfg.scaffold:
        scaffold = run.sft(cfg.scaffold, base, cfg.scaffold, cfg.scaffold_epochs, cfg.scaffold_lr)
    experts = [scaffold] if cfg.scaffold else []
    for m in cfg.specialists:
        experts.append(run.sft(m, scaffold, m, cfg.specialize_epochs, cfg.specialize_lr))
    report = None
    if experts:
        try:
            merged, report = merge_models(base.params, [e.params for e in experts], cfg.merge_config())
        except SSRError as exc:
            raise StageError("merge", str(exc)) from exc
        model = ToyModel(base.spec, merged.with_meta(stage="merge", seed=str(base.seed)), base.seed, "merge")
    else:
        model = base
    run.record("merge", model, 0)
    return _finish(run, model, report)


def sequential_baseline(cfg: SsrConfig, suite: SyntheticSuite | None = None) -> PipelineResult:
    """Every stage starts from the previous one; no merge."""
    run, model = _start("sequential", cfg, suite)
    if cfg.scaffold:
        model = run.sft(cfg.scaffold, model, cfg.scaffold, cfg.scaffold_epochs, cfg.scaffold_lr)
    for m in cfg.specialists:
        model = run.sft(m, model, m, cfg.specialize_epochs, cfg.specialize_lr)
    return _finish(run, model)


def joint_baseline(cfg: SsrConfig, suite: SyntheticSuite | None = None) -> PipelineResult:
    """Pooled scaffold and specialist data for the same number of steps as those stages."""
    run, model = _start("joint", cfg, suite)
    domains = ([cfg.scaffold] if cfg.scaffold else []) + list(cfg.specialists)
    data = [run.suite.train(m) for m in domains]
    steps = (_epochs_steps(data[0], cfg.scaffold_epochs, cfg.batch_size) if cfg.scaffold else 0)
    steps += sum(_epochs_steps(d, cfg.specialize_epochs, cfg.batch_size) for d in data[1 if cfg.scaffold else 0:])
    if data:
        try:
            model, _ = train_steps(model, data, steps, cfg.joint_lr, stage_seed(cfg.seed, "joint"),
                                   cfg.batch_size, cfg.weight_decay, "joint")
        except SSRError as exc:
            raise StageError("joint", str(exc)) from exc
        run.record("joint", model, steps)
    return _finish(run, model)


def run_paradigm(paradigm: str, cfg: SsrConfig, suite: SyntheticSuite | None = None) -> PipelineResult:
    fn = {"ssr": ssr_pipeline, "sequential": sequential_baseline, "joint": joint_baseline}
    if paradigm not in fn:
        raise ValueError(f"unknown paradigm {paradigm!r}; choose from {PARADIGMS}")
    return fn[paradigm](cfg, suite)


def transfer_routes(cfg: SsrConfig, suite: SyntheticSuite | None = None) -> dict:
    """Eval accuracy of each domain trained from the base and from the scaffold.

    Keys are ``"base"`` (the base model on its own) and ``"<start>-><domain>"``.
    """
    suite, base, _ = prepare(cfg, suite)
    scaffold, _ = sft_train(base, suite.train(cfg.scaffold), cfg.scaffold_epochs, cfg.scaffold_lr,
                            stage_seed(cfg.seed, cfg.scaffold), cfg.batch_size, cfg.weight_decay)
    out = {"base": {m: base.accuracy(suite.eval(m)) for m in DOMAINS}}
    for m in [*cfg.specialists, cfg.embodied]:
        if m is None:
            continue
        epochs, lr = ((cfg.embodied_epochs, cfg.embodied_lr) if m == cfg.embodied
                      else (cfg.specialize_epochs, cfg.specialize_lr))
        for name, start in (("base", base), (cfg.scaffold, scaffold)):
            model, _ = sft_train(start, suite.train(m), epochs, lr, stage_seed(cfg.seed, m),
                                 cfg.batch_size, cfg.weight_decay)
            out[f"{name}->{m}"] = model.accuracy(suite.eval(m))
    return out


# ---------------------------------------------------------------------------
# GRPO on a model head


class HeadPolicy:
    """Adapts one head of a :class:`ToyModel` to the GRPO policy interface.

    Prompt ``i`` is the i-th sample of ``batch``; the head emits all answer
    tokens at once, so the logits do not depend on earlier tokens.
    """

    def __init__(self, model: ToyModel, batch: LabeledBatch, params: ParameterMap | None = None):
        self.model, self.batch = model, batch
        self.params = params if params is not None else model.params
        self.n_prompts = len(batch)
        self.length = model.spec.head_lengths[batch.domain]
        self.vocab = model.spec.vocab
        self.eos = None

    def with_params(self, params) -> "HeadPolicy":
        return HeadPolicy(self.model, self.batch, ParameterMap(params))

    def token_logits(self, params, prompt: int, tokens):
        g = len(tokens)
        obs = np.repeat(self.batch.observations[prompt:prompt + 1], g, axis=0)
        cond = np.repeat(self.batch.cond[prompt:prompt + 1], g)
        return logits(params, self.model.spec, obs, cond, self.batch.domain)


def token_match_env(batch: LabeledBatch, t_max: int, vocab: int) -> Env:
    """Reward = fraction of answer tokens that match the target."""
    targets, lengths = batch.targets, batch.lengths

    def reward(p, completion):
        n = int(lengths[p])
        return float(np.mean(np.asarray(completion[:n]) == targets[p, :n]))

    return Env(f"{batch.domain}-tokens", len(batch), t_max, vocab, reward)


def grpo_refine(model: ToyModel, batch: LabeledBatch, cfg: GrpoConfig):
    """GRPO on ``batch``'s head; returns ``(model, gradient_steps)``."""
    policy = HeadPolicy(model, batch)
    env = token_match_env(batch, policy.length, policy.vocab)
    tuned, _ = grpo_train(policy, env, cfg)
    return model.with_params(ParameterMap(tuned.params, model.params.meta), "grpo"), cfg.steps
