"""Task vectors and data-free merging: plain averaging, TSVM and WUDI.

WUDI minimises, independently for every matrix-shaped parameter,

    sum_i ||(T - t_i) t_i^T||_F^2 / ||t_i||_F^2

over the merged task vector ``T`` with Adam, starting from the mean of the
expert task vectors. The objective is a convex quadratic, so
:func:`wudi_closed_form` gives an exact minimiser to compare against.
Vector-shaped parameters (biases, norms) fall back to plain averaging.
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .checkpoint import ParameterMap, validate_compatibility
from .errors import IncompatibleModelsError, NonFiniteError, ZeroTaskVectorError
from .optim import Adam
from .tensor import pinv, svd, sym_inv_sqrt

METHODS = ("avg", "tsvm", "wudi")


@dataclass
class TaskVector:
    """Per-parameter difference ``expert - base``, stored in float64."""

    tensors: dict[str, np.ndarray]
    expert_id: str = ""
    norms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.norms:
            self.norms = {k: float(np.linalg.norm(v)) for k, v in self.tensors.items()}

    def is_zero(self, name: str, threshold: float = 1e-12) -> bool:
        return _is_zero(self.tensors[name], threshold)

    def apply(self, base: ParameterMap, scale: float = 1.0) -> ParameterMap:
        return ParameterMap({k: base[k].astype(np.float64) + scale * self.tensors[k]
                             for k in base}, base.meta)


def _is_zero(t: np.ndarray, threshold: float) -> bool:
    return float(np.linalg.norm(t)) <= threshold * max(t.size, 1)


def compute_task_vector(expert: ParameterMap, base: ParameterMap, expert_id: str = "") -> TaskVector:
    validate_compatibility([base, expert]).raise_for_errors()
    # f32 - f32 is exact in f64, so base + tau reproduces the expert bit for bit
    tensors = {k: expert[k].astype(np.float64) - base[k].astype(np.float64) for k in base}
    return TaskVector(tensors, expert_id or expert.meta.get("stage", ""))


@dataclass
class MergeConfig:
    method: str = "wudi"
    iterations: int = 1000
    lr: float = 1e-5
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    zero_tau_threshold: float = 1e-12
    rank_fraction: float | None = None  # None means 1/K

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.rank_fraction is not None and not 0 < self.rank_fraction <= 1:
            raise ValueError("rank_fraction must lie in (0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MergeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MergeConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "MergeConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class MergeReport:
    method: str
    objective_trace: dict[str, list[float]] = field(default_factory=dict)
    layer_objectives: dict[str, float] = field(default_factory=dict)
    oracle_deviation: dict[str, float] = field(default_factory=dict)
    averaged: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def final_objective(self) -> float:
        return float(sum(self.layer_objectives.values()))

    def to_dict(self, include_wall_time: bool = True) -> dict:
        d = {
            "method": self.method,
            "final_objective": self.final_objective,
            "layer_objectives": self.layer_objectives,
            "oracle_deviation": self.oracle_deviation,
            "averaged": self.averaged,
            "objective_trace": self.objective_trace,
        }
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d


# ---------------------------------------------------------------------------
# averaging


def merge_average(models: Sequence[ParameterMap]) -> ParameterMap:
    models = list(models)
    if not models:
        raise ValueError("merge_average needs at least one model")
    if len(models) > 1:
        validate_compatibility(models).raise_for_errors()
    out = {}
    for name in models[0]:
        acc = np.zeros(models[0][name].shape, dtype=np.float64)
        for m in models:
            acc += m[name]
        out[name] = acc / len(models)
    return ParameterMap(out, {"merge": "avg"})


# ---------------------------------------------------------------------------
# WUDI


def _as_matrix(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape[0], -1)


def _wudi_terms(taus: Sequence[np.ndarray]):
    """Weighted Gram sums ``M = sum w G`` and ``P = sum w t G`` plus the constant."""
    n = taus[0].shape[1]
    M = np.zeros((n, n))
    P = np.zeros(taus[0].shape)
    const = 0.0
    for t in taus:
        w = 1.0 / float(np.sum(t * t))
        G = t.T @ t
        M += w * G
        P += w * (t @ G)
        const += w * float(np.sum((t @ t.T) ** 2))
    return M, P, const


def wudi_objective(tau_merge, taus, zero_tau_threshold: float = 1e-12) -> float:
    """``sum_i ||(tau_merge - t_i) t_i^T||_F^2 / ||t_i||_F^2``.

    Zero task vectors make the weight diverge and must be filtered out by the
    caller; passing one raises :class:`ZeroTaskVectorError`.
    """
    tm = _as_matrix(tau_merge)
    total = 0.0
    for t in taus:
        t = _as_matrix(t)
        if t.shape != tm.shape:
            raise IncompatibleModelsError(f"task vector shape {t.shape} != {tm.shape}")
        if _is_zero(t, zero_tau_threshold):
            raise ZeroTaskVectorError("zero task vector passed to wudi_objective")
        total += float(np.sum(((tm - t) @ t.T) ** 2)) / float(np.sum(t * t))
    return total


def wudi_gradient(tau_merge, taus) -> np.ndarray:
    """``sum_i 2/||t_i||^2 (tau_merge - t_i) t_i^T t_i``."""
    tm = _as_matrix(tau_merge)
    g = np.zeros_like(tm)
    for t in taus:
        t = _as_matrix(t)
        g += (2.0 / float(np.sum(t * t))) * ((tm - t) @ (t.T @ t))
    return g.reshape(np.shape(tau_merge))


def wudi_closed_form(taus) -> np.ndarray:
    """Minimum-norm minimiser ``(sum w t G) pinv(sum w G)`` of the WUDI objective."""
    taus = [_as_matrix(t) for t in taus]
    if not taus:
        raise ValueError("wudi_closed_form needs at least one task vector")
    M, P, _ = _wudi_terms(taus)
    return P @ pinv(M)


def _wudi_layer(taus: list[np.ndarray], cfg: MergeConfig):
    """Optimise one matrix layer. Returns (tau_merge, trace, final objective)."""
    shape = taus[0].shape
    mats = [_as_matrix(t) for t in taus]
    M, P, const = _wudi_terms(mats)
    state = {"tau": np.mean(mats, axis=0)}
    opt = Adam(cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay)

    def objective(tm, tmM):
        return max(float(np.sum(tmM * tm)) - 2.0 * float(np.sum(tm * P)) + const, 0.0)

    tmM = state["tau"] @ M
    trace = [objective(state["tau"], tmM)]
    for _ in range(cfg.iterations):
        g = 2.0 * (tmM - P)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite WUDI gradient")
        opt.step(state, {"tau": g})
        tmM = state["tau"] @ M
        trace.append(objective(state["tau"], tmM))
    tau = state["tau"]
    return tau.reshape(shape), trace, wudi_objective(tau, mats)


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("ABM_THREADS", "0")))
    except ValueError:
        return 0


def _map_names(fn, names):
    n = _threads()
    if n == 0 or len(names) < 2:
        return [fn(k) for k in names]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, names))


def _check_inputs(base: ParameterMap, taus: Sequence[TaskVector]):
    if not taus:
        raise ValueError("need at least one task vector")
    for tv in taus:
        if set(tv.tensors) != set(base):
            raise IncompatibleModelsError(
                f"task vector {tv.expert_id!r} names differ from base: "
                f"{sorted(set(tv.tensors) ^ set(base))}")
        for k in base:
            if tv.tensors[k].shape != base[k].shape:
                raise IncompatibleModelsError(
                    f"{k}: task vector shape {tv.tensors[k].shape} != base {base[k].shape}")


def _averaged(taus: Sequence[TaskVector], name: str) -> np.ndarray:
    return np.mean([tv.tensors[name] for tv in taus], axis=0)


def merge_wudi(base: ParameterMap, taus: Sequence[TaskVector], cfg: MergeConfig | None = None):
    """WUDI merge; returns ``(merged, report)``.

    Zero task vectors are dropped per parameter before optimisation (they
    impose no constraint); vector parameters use plain averaging over all
    task vectors, zero ones included.
    """
    cfg = cfg or MergeConfig(method="wudi")
    _check_inputs(base, taus)
    t0 = time.perf_counter()
    report = MergeReport(method="wudi")

    def work(name):
        if base[name].ndim < 2:
            return name, _averaged(taus, name), None
        live = [tv.tensors[name] for tv in taus if not tv.is_zero(name, cfg.zero_tau_threshold)]
        if not live:
            return name, np.zeros(base[name].shape), ([0.0], 0.0, 0.0)
        tau, trace, obj = _wudi_layer(live, cfg)
        star = wudi_closed_form(live)
        denom = float(np.linalg.norm(star))
        dev = float(np.linalg.norm(_as_matrix(tau) - star))
        return name, tau, (trace, obj, dev / denom if denom > 0 else dev)

    out = {}
    for name, tau, info in _map_names(work, list(base)):
        out[name] = base[name].astype(np.float64) + tau
        if info is None:
            report.averaged.append(name)
        else:
            trace, obj, dev = info
            report.objective_trace[name] = trace
            report.layer_objectives[name] = obj
            report.oracle_deviation[name] = dev
    merged = ParameterMap(out, {"merge": "wudi"})
    report.wall_time = time.perf_counter() - t0
    return merged, report


# ---------------------------------------------------------------------------
# TSVM


def tsvm_layer(taus: Sequence[np.ndarray], rank_fraction: float | None = None,
               floor: float = 1e-8) -> np.ndarray:
    """Merge nonzero matrix task vectors by whitened stacking of their top singular triplets."""
    mats = [_as_matrix(t) for t in taus]
    shape = np.shape(taus[0])
    m, n = mats[0].shape
    rf = rank_fraction if rank_fraction is not None else 1.0 / len(mats)
    k = max(1, int(np.floor(rf * min(m, n))))
    us, ss, vs = [], [], []
    for t in mats:
        u, s, vt = svd(t)
        us.append(u[:, :k])
        ss.append(s[:k])
        vs.append(vt[:k].T)
    U, S, V = np.hstack(us), np.concatenate(ss), np.hstack(vs)
    U_hat = U @ sym_inv_sqrt(U.T @ U, floor)
    V_hat = V @ sym_inv_sqrt(V.T @ V, floor)
    return ((U_hat * S) @ V_hat.T).reshape(shape)


def merge_tsvm(base: ParameterMap, taus: Sequence[TaskVector], cfg: MergeConfig | None = None) -> ParameterMap:
    cfg = cfg or MergeConfig(method="tsvm")
    _check_inputs(base, taus)

    def work(name):
        if base[name].ndim < 2:
            return name, _averaged(taus, name)
        live = [tv.tensors[name] for tv in taus if not tv.is_zero(name, cfg.zero_tau_threshold)]
        if not live:
            return name, np.zeros(base[name].shape)
        return name, tsvm_layer(live, cfg.rank_fraction)

    out = {name: base[name].astype(np.float64) + tau for name, tau in _map_names(work, list(base))}
    return ParameterMap(out, {"merge": "tsvm"})


# ---------------------------------------------------------------------------


def merge_models(base: ParameterMap, models: Sequence[ParameterMap], cfg: MergeConfig):
    """Merge full checkpoints with the method named in ``cfg``.

    Plain averaging is the entry-wise mean of ``models``; the other methods
    work on task vectors relative to ``base``. Returns ``(merged, report)``
    where ``report`` is ``None`` except for WUDI.
    """
    models = list(models)
    validate_compatibility([base, *models]).raise_for_errors()
    ids = [m.meta.get("stage", f"expert{i}") for i, m in enumerate(models)]
    if cfg.method == "avg":
        merged, report = merge_average(models), None
    else:
        taus = [compute_task_vector(m, base, i) for m, i in zip(models, ids)]
        if cfg.method == "wudi":
            merged, report = merge_wudi(base, taus, cfg)
        else:
            merged, report = merge_tsvm(base, taus, cfg), None
    meta = {"merge": cfg.method, "parents": ",".join(m.digest()[:16] for m in models)}
    return merged.with_meta(**meta), report
