"""Group Relative Policy Optimization on small autoregressive policies.

A group of G completions is sampled for a prompt, rewards are standardised
within the group, and the policy is updated with the clipped ratio surrogate
(no KL penalty, no value network). ``pi_old`` is the policy that produced the
samples, refreshed every step.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import ParameterMap
from .errors import DivergenceError, ShapeError, UsageError
from .optim import AdamW


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    lr: float = 1e-3
    steps: int = 500
    seed: int = 0
    prompts_per_step: int = 0  # 0 means every prompt every step
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError(f"clip_eps must lie in (0, 1), got {self.clip_eps}")
        if self.lr < 0 or self.steps < 0 or self.prompts_per_step < 0:
            raise ValueError("lr, steps and prompts_per_step must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GrpoConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GrpoConfig fields: {sorted(unknown)}")
        return cls(**d)


def group_advantages(rewards) -> np.ndarray:
    """``(r - mean(r)) / std(r)`` with the population std.

    A group whose rewards are all equal carries no preference signal and gets
    all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"need a 1-D group of at least 2 rewards, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    centred = r - r.mean()
    scale = np.max(np.abs(centred))
    if scale == 0.0:
        return np.zeros_like(r)
    # rescale first so tiny spreads do not underflow when squared
    unit = centred / scale
    return unit / np.sqrt(np.mean(unit ** 2))


@dataclass
class TrajectoryGroup:
    """G sampled completions for one prompt.

    ``tokens`` is (G, T) padded with 0 past each length; ``old_logprobs``
    holds the sampling policy's per-token log-probabilities (0 on padding).
    """

    prompt: int
    tokens: np.ndarray
    lengths: np.ndarray
    old_logprobs: np.ndarray | None = None
    rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]

    def completions(self) -> list[tuple]:
        return [tuple(int(t) for t in row[:n]) for row, n in zip(self.tokens, self.lengths)]

    def with_rewards(self, rewards) -> "TrajectoryGroup":
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != (self.size,):
            raise ShapeError(f"expected {self.size} rewards, got shape {rewards.shape}")
        return TrajectoryGroup(self.prompt, self.tokens, self.lengths, self.old_logprobs,
                               rewards, group_advantages(rewards))


# ---------------------------------------------------------------------------
# policies


class TabularPolicy:
    """Autoregressive policy over a small vocabulary.

    The context at step t is (prompt, t, previous token); it indexes an
    embedding table ``emb`` whose rows are read out by ``out`` to give
    logits. The factorisation lets a small Adam step move logits by more than
    the learning rate, which a raw logit table would not.
    """

    def __init__(self, n_prompts: int, length: int, vocab: int, params: ParameterMap,
                 eos: int | None = None):
        self.n_prompts, self.length, self.vocab, self.eos = n_prompts, length, vocab, eos
        self.params = params

    @classmethod
    def init(cls, n_prompts: int, length: int, vocab: int, dim: int = 16, seed: int = 0,
             eos: int | None = None) -> "TabularPolicy":
        rng = np.random.default_rng(seed)
        n_ctx = n_prompts * length * (vocab + 1)
        params = ParameterMap({
            "emb": rng.standard_normal((n_ctx, dim)),
            "out": np.zeros((dim, vocab)),
        })
        return cls(n_prompts, length, vocab, params, eos)

    def with_params(self, params) -> "TabularPolicy":
        return TabularPolicy(self.n_prompts, self.length, self.vocab, ParameterMap(params), self.eos)

    def _context(self, prompt: int, tokens: np.ndarray) -> np.ndarray:
        g, t = tokens.shape
        prev = np.concatenate([np.full((g, 1), self.vocab), tokens[:, :-1]], axis=1)
        pos = np.arange(t)[None, :]
        return (prompt * self.length + pos) * (self.vocab + 1) + prev

    def token_logits(self, params, prompt: int, tokens: np.ndarray):
        """Logits (G, T, V) at every position, teacher-forced on ``tokens``."""
        ctx = self._context(prompt, np.asarray(tokens))
        g, t = ctx.shape
        e = ad._lift(params["emb"])[ctx.reshape(-1)]
        return (e @ params["out"]).reshape(g, t, self.vocab)


def _logits_value(z):
    return getattr(z, "value", z)


def sample_group(policy, prompt: int, group_size: int, seed, temperature: float = 1.0,
                 max_len: int | None = None) -> TrajectoryGroup:
    """Sample ``group_size`` completions token by token.

    ``temperature=0`` takes the argmax at every step. The recorded old
    log-probabilities are those of the policy itself (temperature 1).
    """
    length = policy.length if max_len is None else max_len
    if length > policy.length:
        raise ShapeError(f"requested length {length} exceeds the policy's maximum {policy.length}")
    if not 0 <= prompt < policy.n_prompts:
        raise ValueError(f"prompt {prompt} out of range [0, {policy.n_prompts})")
    rng = np.random.default_rng(seed)
    params = policy.params.to_f64()
    tokens = np.zeros((group_size, length), dtype=np.int64)
    logp = np.zeros((group_size, length))
    lengths = np.full(group_size, length)
    done = np.zeros(group_size, dtype=bool)
    for t in range(length):
        z = _logits_value(policy.token_logits(params, prompt, tokens))[:, t]
        z = z - z.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        if temperature == 0:
            tok = np.argmax(lp, axis=1)
        else:
            zt = lp / temperature
            p = np.exp(zt - zt.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random(group_size)
            tok = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), policy.vocab - 1)
        tok = np.where(done, 0, tok)
        tokens[:, t] = tok
        logp[:, t] = np.where(done, 0.0, lp[np.arange(group_size), tok])
        if policy.eos is not None:
            ended = ~done & (tok == policy.eos)
            lengths[ended] = t + 1
            done |= ended
    return TrajectoryGroup(prompt, tokens, lengths, logp)


def grpo_loss(params, policy, groups: Sequence[TrajectoryGroup], clip_eps: float = 0.2):
    """Negated clipped surrogate averaged over tokens, completions and groups."""
    if isinstance(groups, TrajectoryGroup):
        groups = [groups]
    total = None
    for grp in groups:
        if grp.old_logprobs is None:
            raise ValueError("group has no old log-probabilities")
        if grp.advantages is None:
            raise ValueError("group has no advantages; call with_rewards first")
        lp = ad.log_softmax(policy.token_logits(params, grp.prompt, grp.tokens), axis=-1)
        lp = ad.take_along(lp, grp.tokens[..., None], axis=-1).reshape(*grp.tokens.shape)
        mask = grp.mask
        ratio = ad.exp(ad.where(mask, lp - grp.old_logprobs, 0.0))
        adv = grp.advantages[:, None]
        surr = ad.minimum(ratio * adv, ad.clip(ratio, 1 - clip_eps, 1 + clip_eps) * adv)
        per_seq = (surr * (mask / grp.lengths[:, None])).sum(axis=1)
        term = per_seq.mean()
        total = term if total is None else total + term
    return -(total * (1.0 / len(groups)))


# ---------------------------------------------------------------------------
# environments


@dataclass
class Env:
    """Prompts plus a reward in [0, 1] for each (prompt, completion)."""

    name: str
    n_prompts: int
    length: int
    vocab: int
    reward: Callable[[int, tuple], float]
    eos: int | None = None
    info: dict = field(default_factory=dict)

    def make_policy(self, seed: int = 0, dim: int = 16) -> TabularPolicy:
        return TabularPolicy.init(self.n_prompts, self.length, self.vocab, dim, seed, self.eos)


def bandit_env(arms: int = 4, best: int = 2) -> Env:
    return Env(f"bandit{arms}", 1, 1, arms, lambda p, c: float(c[0] == best), info={"best": best})


def constant_env(value: float = 0.5) -> Env:
    return Env("constant", 2, 3, 4, lambda p, c: value)


def sequence_env(n_prompts: int = 1, length: int = 3, vocab: int = 4, seed: int = 0) -> Env:
    targets = np.random.default_rng(seed).integers(0, vocab, size=(n_prompts, length))
    tgt = [tuple(int(x) for x in row) for row in targets]
    return Env(f"sequence{length}", n_prompts, length, vocab,
               lambda p, c: float(tuple(c) == tgt[p]), info={"targets": [list(t) for t in tgt]})


ENVS: dict[str, Callable[[], Env]] = {
    "bandit4": bandit_env,
    "constant": constant_env,
    "sequence3": sequence_env,
}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise UsageError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


# ---------------------------------------------------------------------------


def grpo_train(policy, env: Env, cfg: GrpoConfig, callback=None):
    """On-policy GRPO. Returns ``(policy, reward_curve)``.

    Each step samples one group per selected prompt from the current policy
    (which is also pi_old), takes one AdamW step on the surrogate, and records
    the mean sampled reward. Prompt streams are seeded from
    ``(seed, step, prompt)`` so runs are reproducible.
    """
    params = policy.params.to_f64()
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    curve = []
    all_prompts = np.arange(env.n_prompts)
    for step in range(cfg.steps):
        current = policy.with_params(params)
        if cfg.prompts_per_step and cfg.prompts_per_step < env.n_prompts:
            chosen = np.sort(np.random.default_rng([cfg.seed, step]).choice(
                all_prompts, cfg.prompts_per_step, replace=False))
        else:
            chosen = all_prompts
        groups = []
        for p in chosen:
            grp = sample_group(current, int(p), cfg.group_size, [cfg.seed, step, int(p)])
            groups.append(grp.with_rewards([env.reward(int(p), c) for c in grp.completions()]))
        curve.append(float(np.mean([g.rewards.mean() for g in groups])))
        loss, grads = ad.value_and_grad(lambda q: grpo_loss(q, current, groups, cfg.clip_eps), params)
        if not np.isfinite(loss):
            raise DivergenceError(f"GRPO loss became {loss} at step {step}")
        opt.step(params, grads)
        if callback is not None:
            callback(step, params, curve[-1])
    return policy.with_params(params), curve


def arm_probabilities(policy: TabularPolicy, prompt: int = 0) -> np.ndarray:
    """First-token distribution for ``prompt``."""
    z = _logits_value(policy.token_logits(policy.params.to_f64(), prompt,
                                          np.zeros((1, policy.length), dtype=np.int64)))[0, 0]
    p = np.exp(z - z.max())
    return p / p.sum()
