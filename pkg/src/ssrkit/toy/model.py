"""Toy conditional token model: shared MLP trunk plus one linear head per domain.

Biases are folded into the weight matrices (inputs carry a trailing constant
1), so every parameter is a matrix and takes part in matrix-aware merging.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..checkpoint import ParameterMap
from ..errors import ShapeError

PAD = -1


@dataclass(frozen=True)
class ModelSpec:
    obs_dim: int
    n_cond: int
    hidden: int = 32
    vocab: int = 16
    heads: tuple = (("spatial", 3), ("ad", 2), ("uav", 1), ("embodied", 4))

    @property
    def head_lengths(self) -> dict[str, int]:
        return dict(self.heads)

    @property
    def in_dim(self) -> int:
        return self.obs_dim + self.n_cond + 1

    def to_dict(self) -> dict:
        return {"obs_dim": self.obs_dim, "n_cond": self.n_cond, "hidden": self.hidden,
                "vocab": self.vocab, "heads": [list(h) for h in self.heads]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["obs_dim"], d["n_cond"], d["hidden"], d["vocab"],
                   tuple((str(k), int(t)) for k, t in d["heads"]))


@dataclass
class LabeledBatch:
    """One domain's samples.

    ``targets`` is (B, T_max) with :data:`PAD` past each response's length.
    ``weights`` holds the unnormalised per-token loss weights.
    """

    domain: str
    observations: np.ndarray
    cond: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.cond = np.asarray(self.cond, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        n = len(self.observations)
        if not (len(self.cond) == len(self.targets) == len(self.lengths) == n):
            raise ShapeError("batch fields disagree on the number of samples")
        if np.any(self.lengths < 1) or np.any(self.lengths > self.targets.shape[1]):
            raise ShapeError("response lengths must lie in [1, T_max]")
        if self.weights is None:
            self.weights = length_weights(self.lengths, self.targets.shape[1])

    def __len__(self):
        return len(self.observations)

    def subset(self, idx) -> "LabeledBatch":
        return LabeledBatch(self.domain, self.observations[idx], self.cond[idx],
                            self.targets[idx], self.lengths[idx], self.weights[idx])

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.targets.shape[1])[None, :] < self.lengths[:, None]


def length_weights(lengths, t_max: int, power: float = 0.5) -> np.ndarray:
    """Per-token weights ``T**-power`` for a response of length T (0 on padding).

    ``power=0.5`` is square averaging; 0 gives token averaging and 1 sample
    averaging once the batch is normalised by ``sum T**(1-power)``.
    """
    lengths = np.asarray(lengths, dtype=np.float64)
    w = np.repeat((lengths ** -power)[:, None], t_max, axis=1)
    w[np.arange(t_max)[None, :] >= lengths[:, None]] = 0.0
    return w


def init_params(spec: ModelSpec, seed: int) -> ParameterMap:
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        w = rng.standard_normal((n_in + 1, n_out)) / np.sqrt(n_in)
        w[-1] = 0.0
        return w

    params = {
        "trunk.l1": dense(spec.in_dim - 1, spec.hidden),
        "trunk.l2": dense(spec.hidden, spec.hidden),
    }
    # condition rows and heads start at zero: a domain nobody has trained on
    # predicts uniformly and leaves the trunk untouched
    params["trunk.l1"][spec.obs_dim:spec.obs_dim + spec.n_cond] = 0.0
    for name, t in spec.heads:
        params[f"head.{name}"] = np.zeros((spec.hidden + 1, t * spec.vocab))
    return ParameterMap(params, {"seed": str(seed), "stage": "init"})


def _with_ones(x):
    n = x.shape[0]
    return ad.concat([x, np.ones((n, 1))], axis=1)


def features(params, spec: ModelSpec, obs, cond):
    """Trunk output ``h2`` (B, hidden). Works on arrays or tape nodes."""
    onehot = np.eye(spec.n_cond)[np.asarray(cond)]
    x = np.concatenate([np.asarray(obs, dtype=np.float64), onehot, np.ones((len(onehot), 1))], axis=1)
    h1 = ad.tanh(ad._lift(x) @ params["trunk.l1"])
    return ad.tanh(_with_ones(h1) @ params["trunk.l2"])


def head_logits(params, spec: ModelSpec, h, domain: str):
    t = spec.head_lengths[domain]
    z = _with_ones(h) @ params[f"head.{domain}"]
    return z.reshape(h.shape[0], t, spec.vocab)


def logits(params, spec: ModelSpec, obs, cond, domain: str):
    return head_logits(params, spec, features(params, spec, obs, cond), domain)


def token_nll(params, spec: ModelSpec, batch: LabeledBatch):
    """Per-token negative log-likelihood (B, T_max); padding positions hold 0."""
    lp = ad.log_softmax(logits(params, spec, batch.observations, batch.cond, batch.domain), axis=-1)
    tgt = np.where(batch.targets == PAD, 0, batch.targets)[..., None]
    return -ad.take_along(lp, tgt, axis=-1).reshape(len(batch), batch.targets.shape[1])


def loss_square_avg(params, spec: ModelSpec, batches, power: float = 0.5):
    """Length-balanced token cross-entropy over one or more batches.

    ``L = sum_s sum_t l_st / sqrt(T_s)  /  sum_s sqrt(T_s)``; the weights are
    taken from each batch, so alternative schemes plug in via
    :func:`length_weights`.
    """
    if isinstance(batches, LabeledBatch):
        batches = [batches]
    batches = [b for b in batches if len(b)]
    if not batches:
        raise ValueError("empty batch")
    num = None
    den = 0.0
    for b in batches:
        w = b.weights if power == 0.5 else length_weights(b.lengths, b.targets.shape[1], power)
        term = (token_nll(params, spec, b) * w).sum()
        num = term if num is None else num + term
        den += float(np.sum(b.lengths.astype(np.float64) ** (1.0 - power)))
    return num * (1.0 / den)


def predict(params, spec: ModelSpec, obs, cond, domain: str) -> np.ndarray:
    z = logits(params, spec, obs, cond, domain)
    return np.argmax(getattr(z, "value", z), axis=-1)


def token_accuracy(params, spec: ModelSpec, batch: LabeledBatch) -> float:
    pred = predict(params, spec, batch.observations, batch.cond, batch.domain)
    mask = batch.mask
    per_sample = ((pred == batch.targets) & mask).sum(axis=1) / batch.lengths
    return float(per_sample.mean())


class ToyModel:
    """A parameter map bound to its architecture."""

    def __init__(self, spec: ModelSpec, params: ParameterMap, seed: int = 0, stage: str = "init"):
        self.spec = spec
        self.params = params
        self.seed = seed
        self.stage = stage

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "ToyModel":
        return cls(spec, init_params(spec, seed), seed, "init")

    def with_params(self, params: ParameterMap, stage: str | None = None) -> "ToyModel":
        stage = stage or self.stage
        return ToyModel(self.spec, params.with_meta(stage=stage, seed=str(self.seed)),
                        self.seed, stage)

    def logits(self, obs, cond, domain):
        return logits(self.params.to_f64(), self.spec, obs, cond, domain).value

    def accuracy(self, batch: LabeledBatch) -> float:
        return token_accuracy(self.params.to_f64(), self.spec, batch)

    def loss(self, batches) -> float:
        return float(loss_square_avg(self.params.to_f64(), self.spec, batches).value)
