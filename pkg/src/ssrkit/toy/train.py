"""Supervised fine-tuning loops for :class:`ToyModel`."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..autodiff import value_and_grad
from ..checkpoint import ParameterMap
from ..errors import DivergenceError
from ..optim import AdamW
from .model import LabeledBatch, ToyModel, loss_square_avg


def _batches_for(datasets: Sequence[LabeledBatch], idx: np.ndarray, offsets: np.ndarray):
    """Split global sample indices over the concatenated datasets into per-domain batches."""
    out = []
    for k, ds in enumerate(datasets):
        local = idx[(idx >= offsets[k]) & (idx < offsets[k + 1])] - offsets[k]
        if local.size:
            out.append(ds.subset(np.sort(local)))
    return out


def train_steps(model: ToyModel, datasets, steps: int, lr: float, seed: int,
                batch_size: int = 32, weight_decay: float = 0.0, stage: str | None = None,
                callback=None, callback_every: int = 0):
    """Run exactly ``steps`` AdamW steps on minibatches drawn from ``datasets``.

    Several datasets are sampled as one pool (mixed-domain minibatches). Each
    pass over the pool uses a fresh permutation from ``seed``. When given,
    ``callback(step, params)`` runs after every ``callback_every`` steps.
    Returns the updated model and the list of minibatch losses.
    """
    if isinstance(datasets, LabeledBatch):
        datasets = [datasets]
    datasets = [d for d in datasets if len(d)]
    params = model.params.to_f64()
    if steps <= 0 or not datasets:
        return model.with_params(model.params, stage), []
    sizes = np.array([len(d) for d in datasets])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    opt = AdamW(lr, weight_decay=weight_decay)
    spec = model.spec
    losses = []
    order = rng.permutation(total)
    pos = 0
    bs = min(batch_size, total)
    for step in range(1, steps + 1):
        if pos + bs > total:
            order = rng.permutation(total)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        batches = _batches_for(datasets, idx, offsets)
        loss, grads = value_and_grad(lambda p: loss_square_avg(p, spec, batches), params)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} after {len(losses)} steps")
        losses.append(loss)
        opt.step(params, grads)
        if callback is not None and callback_every and step % callback_every == 0:
            callback(step, params)
    return model.with_params(ParameterMap(params, model.params.meta), stage), losses


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, n_samples // min(batch_size, n_samples))


def sft_train(model: ToyModel, dataset, epochs: int, lr: float, seed: int,
              batch_size: int = 32, weight_decay: float = 0.0, stage: str | None = None):
    """Epoch-based SFT. Returns ``(model, loss_curve)``.

    The curve holds the full-dataset loss before training and after every
    epoch, so ``curve[0]`` is the initial loss.
    """
    datasets = [dataset] if isinstance(dataset, LabeledBatch) else list(dataset)
    n = sum(len(d) for d in datasets)
    curve = [model.loss(datasets)]
    spe = steps_per_epoch(n, batch_size)

    def record(step, params):
        curve.append(float(loss_square_avg(params, model.spec, datasets).value))

    model, _ = train_steps(model, datasets, epochs * spe, lr, seed, batch_size,
                           weight_decay, stage, callback=record, callback_every=spe)
    return model, curve
