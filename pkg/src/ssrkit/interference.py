"""Interference and transfer diagnostics.

* One-step interference bound for a jointly updated family of smooth
  quadratic risks, checked exactly.
* Pairwise gradient-conflict (cosine) matrices for joint training.
* A synthetic scaffold-transfer experiment: a probe trained on the scaffold
  distribution is evaluated on rotated observation channels and with a noisy
  geometry decoder.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.linalg import expm

from . import autodiff as ad
from .errors import DivergenceError, ShapeError

# ---------------------------------------------------------------------------
# quadratic task families


@dataclass
class QuadraticTaskFamily:
    """K risks ``R_i(t) = 0.5 (t - c_i)^T A_i (t - c_i)`` updated by one shared step."""

    A: np.ndarray
    c: np.ndarray
    w: np.ndarray
    eta: float
    L: float | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        k, d = self.c.shape
        if self.A.shape != (k, d, d) or self.w.shape != (k,):
            raise ShapeError(f"inconsistent family shapes A{self.A.shape} c{self.c.shape} w{self.w.shape}")
        if not np.allclose(self.A, self.A.transpose(0, 2, 1), atol=1e-8, rtol=0):
            raise ValueError("every A_i must be symmetric")
        if np.any(self.w < 0) or abs(self.w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")
        lmax = float(max(np.linalg.eigvalsh(a)[-1] for a in self.A))
        if np.linalg.eigvalsh(self.A).min() < -1e-9:
            raise ValueError("every A_i must be positive semidefinite")
        if self.L is None:
            self.L = lmax
        elif self.L < lmax - 1e-9:
            raise ValueError(f"L={self.L} is below the largest curvature {lmax}")

    @property
    def n_tasks(self) -> int:
        return len(self.c)

    @classmethod
    def random(cls, rng, n_tasks: int, dim: int, eta: float | None = None,
               isotropic: bool = False) -> "QuadraticTaskFamily":
        if isotropic:
            lam = rng.uniform(0.1, 5.0)
            A = np.stack([lam * np.eye(dim)] * n_tasks)
        else:
            A = []
            for _ in range(n_tasks):
                rank = rng.integers(1, dim + 1)
                m = rng.standard_normal((dim, rank)) * rng.uniform(0.1, 2.0)
                A.append(m @ m.T / rank)
            A = np.stack(A)
            A = 0.5 * (A + A.transpose(0, 2, 1))
        c = rng.standard_normal((n_tasks, dim)) * rng.uniform(0.1, 3.0)
        w = rng.dirichlet(np.ones(n_tasks))
        fam = cls(A, c, w, 1.0)
        fam.eta = float(rng.uniform(0.0, 1.0 / fam.L)) if eta is None else float(eta)
        return fam

    def risks(self, theta) -> np.ndarray:
        r = np.asarray(theta, dtype=np.float64)[None, :] - self.c
        return 0.5 * np.einsum("ki,kij,kj->k", r, self.A, r)

    def gradients(self, theta) -> np.ndarray:
        r = np.asarray(theta, dtype=np.float64)[None, :] - self.c
        return np.einsum("kij,kj->ki", self.A, r)


def one_step_joint_update(theta, family: QuadraticTaskFamily) -> np.ndarray:
    """``theta - eta * sum_j w_j g_j(theta)``."""
    g = family.gradients(theta)
    return np.asarray(theta, dtype=np.float64) - family.eta * (family.w @ g)


@dataclass
class InterferenceReport:
    risk_before: np.ndarray
    risk_after: np.ndarray
    self_term: np.ndarray
    cross_term: np.ndarray
    quad_term: float
    eta: float

    @property
    def delta_risk(self) -> np.ndarray:
        return self.risk_after - self.risk_before

    @property
    def bound(self) -> np.ndarray:
        return self.risk_before - self.eta * (self.self_term + self.cross_term) + self.quad_term

    @property
    def slack(self) -> np.ndarray:
        return self.bound - self.risk_after

    def to_dict(self) -> dict:
        return {"risk_before": self.risk_before.tolist(), "risk_after": self.risk_after.tolist(),
                "delta_risk": self.delta_risk.tolist(), "self_term": self.self_term.tolist(),
                "cross_term": self.cross_term.tolist(), "quad_term": self.quad_term,
                "slack": self.slack.tolist(), "eta": self.eta}


def interference_decomposition(theta, family: QuadraticTaskFamily) -> InterferenceReport:
    """Split each task's first-order progress into its own and the others' share.

    The risk after the step is exact (closed form for quadratics); the bound
    uses the family's smoothness constant ``L``.
    """
    g = family.gradients(theta)
    w = family.w
    gram = g @ g.T
    self_term = w * np.diag(gram)
    cross_term = gram @ w - self_term
    step = w @ g
    quad = 0.5 * family.L * family.eta ** 2 * float(step @ step)
    after = family.risks(one_step_joint_update(theta, family))
    return InterferenceReport(family.risks(theta), after, self_term, cross_term, quad, family.eta)


@dataclass
class BoundSpec:
    max_dim: int = 32
    max_tasks: int = 5
    eta: str | float = "auto"  # "auto": uniform in (0, 1/L]; "2/L"; or a number
    isotropic: bool = False
    tolerance: float = 1e-9

    @classmethod
    def from_dict(cls, d: dict) -> "BoundSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown BoundSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class BoundCheck:
    passed: bool
    trials: int
    worst_slack: float
    violations: list = field(default_factory=list)
    worst_abs_isotropic: float | None = None

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict}, worst slack {self.worst_slack:.3e} over {self.trials} trials"

    def to_dict(self) -> dict:
        return asdict(self)


def verify_bound_quadratic(spec: BoundSpec | None = None, trials: int = 1000, seed: int = 0) -> BoundCheck:
    """Sample random quadratic families and check the one-step bound on each task.

    With ``spec.isotropic`` every curvature equals ``L I``, where the bound is
    tight; the largest absolute slack is then reported as well.
    """
    spec = spec or BoundSpec()
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = np.inf
    worst_iso = 0.0
    violations = []
    for t in range(trials):
        k = int(rng.integers(1, spec.max_tasks + 1))
        d = int(rng.integers(1, spec.max_dim + 1))
        fam = QuadraticTaskFamily.random(rng, k, d, isotropic=spec.isotropic)
        if spec.eta == "2/L":
            fam.eta = 2.0 / fam.L
        elif spec.eta != "auto":
            fam.eta = float(spec.eta)
        theta = rng.standard_normal(d) * 2.0
        slack = interference_decomposition(theta, fam).slack
        if spec.isotropic:
            worst_iso = max(worst_iso, float(np.max(np.abs(slack))))
        m = float(slack.min())
        worst = min(worst, m)
        if m < -spec.tolerance:
            violations.append({"trial": t, "slack": m})
    return BoundCheck(not violations, trials, float(worst), violations,
                      worst_iso if spec.isotropic else None)


# ---------------------------------------------------------------------------
# gradient conflict


@dataclass
class ConflictReport:
    matrix: np.ndarray
    zero_gradient: list[bool]
    names: list[str]

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), "zero_gradient": self.zero_gradient,
                "names": self.names}


def gradient_conflict_matrix(models, batches, loss_fn=None, names=None) -> ConflictReport:
    """Cosine similarity between per-task gradients.

    ``models`` is either one parameter dict/map used for every task or one
    per task. Each task's gradient is taken on its own batch with
    ``loss_fn(params, batch)`` (default: the toy square-averaged loss with the
    batch's ``spec`` attribute or ``models`` being ToyModels). Only parameter
    names shared by all models enter the cosine. A task whose gradient is zero
    gets 0 off the diagonal and is flagged.
    """
    batches = list(batches)
    if not isinstance(models, (list, tuple)):
        models = [models] * len(batches)
    if len(models) != len(batches):
        raise ShapeError("need one model per batch (or a single shared model)")
    param_sets, fns = [], []
    for m in models:
        if hasattr(m, "spec") and hasattr(m, "params"):
            from .toy.model import loss_square_avg
            spec = m.spec
            param_sets.append(m.params.to_f64())
            fns.append(loss_fn or (lambda p, b, spec=spec: loss_square_avg(p, spec, b)))
        else:
            param_sets.append({k: np.asarray(v, dtype=np.float64) for k, v in m.items()})
            if loss_fn is None:
                raise ValueError("loss_fn is required for plain parameter maps")
            fns.append(loss_fn)
    shared = sorted(set.intersection(*(set(p) for p in param_sets)))
    if names is not None:
        shared = [n for n in shared if n in set(names)]
    for n in shared:
        if len({p[n].shape for p in param_sets}) > 1:
            raise ShapeError(f"parameter {n!r} has different shapes across models")
    vecs = []
    for p, fn, b in zip(param_sets, fns, batches):
        g = ad.grad(lambda q: fn(q, b), p)
        vecs.append(np.concatenate([g[n].ravel() for n in shared]))
    norms = np.array([np.linalg.norm(v) for v in vecs])
    zero = [bool(n == 0.0) for n in norms]
    k = len(vecs)
    mat = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            if zero[i] or zero[j]:
                c = 0.0
            else:
                c = float(np.clip(vecs[i] @ vecs[j] / (norms[i] * norms[j]), -1.0, 1.0))
            mat[i, j] = mat[j, i] = c
    return ConflictReport(mat, zero, shared)


def regression_loss(params, batch):
    x, y = batch
    r = ad._lift(np.asarray(x)) @ params["w"] - np.asarray(y).reshape(-1, 1)
    return (r * r).mean() * 0.5


def opposing_regression_tasks(seed: int = 0, n: int = 64, dim: int = 8):
    """Two linear-regression tasks on the same inputs with negated targets."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    y = x @ rng.standard_normal(dim)
    return (x, y), (x, -y)


def opposing_label_batch(batch, n_classes: int):
    """Copy of a toy batch with every class label ``v`` replaced by ``n - 1 - v``.

    Training one head on both copies is a direct conflict: the joint optimum
    cannot fit either labelling.
    """
    from .toy.model import PAD, LabeledBatch
    t = np.where(batch.targets == PAD, PAD, n_classes - 1 - batch.targets)
    return LabeledBatch(batch.domain, batch.observations, batch.cond, t, batch.lengths, batch.weights)


# ---------------------------------------------------------------------------
# scaffold transfer


@dataclass
class TransferExperimentSpec:
    latent_dim: int = 4
    nuisance_dim: int = 12
    noise: float = 0.05
    n_train: int = 2000
    n_eval: int = 4000
    deltas: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.45, 0.6, 0.8, 1.0, 1.2, 1.4])
    eps_g: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.4, 0.8])
    l2: float = 1e-3

    @classmethod
    def from_dict(cls, d: dict) -> "TransferExperimentSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TransferExperimentSpec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _channel(rng, spec: TransferExperimentSpec):
    dim = spec.latent_dim + spec.nuisance_dim
    q0 = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    # generator of plane rotations pairing each latent axis with a nuisance axis
    gen = np.zeros((dim, dim))
    for i in range(min(spec.latent_dim, spec.nuisance_dim)):
        j = spec.latent_dim + i
        gen[j, i], gen[i, j] = 1.0, -1.0
    return q0, gen


def _draw(rng, spec, q0, gen, delta, n):
    g = rng.standard_normal((n, spec.latent_dim))
    a = rng.standard_normal((n, spec.nuisance_dim))
    z = np.concatenate([g, a], axis=1) @ expm(delta * gen).T
    o = z @ q0.T + spec.noise * rng.standard_normal((n, q0.shape[0]))
    return g, o


def _logistic(w, feats, y, l2):
    z = feats @ w[:-1] + w[-1]
    loss = np.logaddexp(0.0, -y * z)
    s = -y * stats.logistic.cdf(-y * z)
    grad = np.concatenate([feats.T @ s, [s.sum()]]) / len(y)
    return loss.mean() + 0.5 * l2 * w[:-1] @ w[:-1], grad + l2 * np.concatenate([w[:-1], [0.0]])


def _per_sample_loss(w, feats, y):
    return np.logaddexp(0.0, -y * (feats @ w[:-1] + w[-1]))


@dataclass
class TransferReport:
    deltas: list
    risks: list
    risk_se: list
    eps_g: list
    eps_risks: list
    r_sp: float
    r_sp_se: float
    zero_shift_gap: float
    zero_shift_band: float
    spearman_delta: float
    spearman_eps: float
    c_m: float
    eps_m: float
    eps_m_lifted: float
    fit_residual: float
    lipschitz_probe: float
    lipschitz_bound: float
    eps_excess: list
    checks: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        lines = [f"scaffold risk {self.r_sp:.4f} (se {self.r_sp_se:.4f})",
                 f"delta=0 gap {self.zero_shift_gap:+.4f} vs band {self.zero_shift_band:.4f}",
                 f"spearman(delta, risk) = {self.spearman_delta:.3f}",
                 f"fit: C_m={self.c_m:.4f} eps_m={self.eps_m:.4f} (lifted {self.eps_m_lifted:.4f})"]
        lines += [f"{k}: {'PASS' if v else 'FAIL'}" for k, v in self.checks.items()]
        return "\n".join(lines)


def scaffold_transfer_experiment(spec: TransferExperimentSpec | None = None, seed: int = 0) -> TransferReport:
    """Train a scaffold decoder and probe, then measure target risk under shift.

    The decoder is a least-squares map from observations to the latent
    geometry fitted on scaffold data; the probe is a logistic classifier of
    ``sign(u . g)`` on decoded geometry. Targets see the observation channel
    rotated by ``delta`` radians (latent axes turned into nuisance axes) or a
    decoder perturbed by a fixed-norm error ``eps_g``. Risk is mean logistic
    loss on fresh samples.
    """
    spec = spec or TransferExperimentSpec()
    rng = np.random.default_rng(seed)
    q0, gen = _channel(rng, spec)
    u = rng.standard_normal(spec.latent_dim)
    u /= np.linalg.norm(u)
    label = lambda g: np.where(g @ u >= 0, 1.0, -1.0)

    g_tr, o_tr = _draw(rng, spec, q0, gen, 0.0, spec.n_train)
    dec, *_ = np.linalg.lstsq(np.c_[o_tr, np.ones(len(o_tr))], g_tr, rcond=None)
    decode = lambda o: np.c_[o, np.ones(len(o))] @ dec
    y_tr = label(g_tr)
    res = optimize.minimize(_logistic, np.zeros(spec.latent_dim + 1), args=(decode(o_tr), y_tr, spec.l2),
                            jac=True, method="L-BFGS-B")
    w = res.x
    if not np.all(np.isfinite(w)):
        raise DivergenceError("probe training produced non-finite weights")

    def risk(losses):
        return float(losses.mean()), float(losses.std() / np.sqrt(len(losses)))

    g_sp, o_sp = _draw(rng, spec, q0, gen, 0.0, spec.n_eval)
    r_sp, se_sp = risk(_per_sample_loss(w, decode(o_sp), label(g_sp)))

    risks, ses = [], []
    for delta in spec.deltas:
        g_m, o_m = _draw(rng, spec, q0, gen, float(delta), spec.n_eval)
        r, se = risk(_per_sample_loss(w, decode(o_m), label(g_m)))
        risks.append(r)
        ses.append(se)

    # decoder error of fixed norm eps_g in a per-sample random direction
    g_e, o_e = _draw(rng, spec, q0, gen, 0.0, spec.n_eval)
    dirs = rng.standard_normal(g_e.shape)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    base_feats, y_e = decode(o_e), label(g_e)
    base_loss = _per_sample_loss(w, base_feats, y_e)
    eps_risks = [float(_per_sample_loss(w, base_feats + e * dirs, y_e).mean()) for e in spec.eps_g]

    # Lipschitz constant of the loss in the geometry: largest central-difference
    # gradient norm over the eval points
    h = 1e-5
    grads = np.empty_like(base_feats)
    for i in range(spec.latent_dim):
        e = np.zeros(spec.latent_dim)
        e[i] = h
        grads[:, i] = (_per_sample_loss(w, base_feats + e, y_e)
                       - _per_sample_loss(w, base_feats - e, y_e)) / (2 * h)
    l_probe = float(np.max(np.linalg.norm(grads, axis=1)))
    l_bound = float(np.linalg.norm(w[:-1]))

    zero_idx = [i for i, d in enumerate(spec.deltas) if d == 0.0]
    gap = risks[zero_idx[0]] - r_sp if zero_idx else float("nan")
    band = 2.0 * np.hypot(se_sp, ses[zero_idx[0]]) if zero_idx else float("nan")

    excess = np.asarray(risks) - r_sp
    design = np.c_[np.asarray(spec.deltas, dtype=np.float64), np.ones(len(spec.deltas))]
    coef, resid = optimize.nnls(design, excess)
    c_m, eps_m = float(coef[0]), float(coef[1])
    lifted = float(max(eps_m, np.max(excess - c_m * design[:, 0])))

    rho_d = float(stats.spearmanr(spec.deltas, risks)[0])
    rho_e = float(stats.spearmanr(spec.eps_g, eps_risks)[0]) if len(spec.eps_g) > 1 else float("nan")
    eps_excess = [r - float(base_loss.mean()) for r in eps_risks]
    eps_ok = all(x <= 2.0 * l_probe * e + 2.0 * se_sp + 1e-12 for x, e in zip(eps_excess, spec.eps_g))
    rhs_ok = all(r <= r_sp + c_m * d + lifted + 1e-12 for r, d in zip(risks, spec.deltas))
    checks = {
        "zero_shift_within_band": bool(abs(gap) <= band),
        "monotone_in_delta": bool(rho_d >= 0.9),
        "monotone_in_eps_g": bool(np.isnan(rho_e) or rho_e >= 0.9),
        "eps_g_within_lipschitz_bound": bool(eps_ok),
        "bound_holds_with_fitted_constants": bool(rhs_ok),
    }
    return TransferReport(list(map(float, spec.deltas)), risks, ses, list(map(float, spec.eps_g)),
                          eps_risks, r_sp, se_sp, float(gap), float(band), rho_d, rho_e, c_m, eps_m,
                          lifted, float(resid), l_probe, l_bound, eps_excess, checks)


def report_json(obj) -> str:
    return json.dumps(obj.to_dict(), sort_keys=True, indent=2)
