"""Synthetic embodied domains sharing one latent geometry.

Every sample draws a geometry vector ``g ~ N(0, I_d)`` and a domain-specific
nuisance vector ``a``. The observation is an orthogonal mix of both,

    o = Q_m [g; a] + b_m + sigma * noise,

with ``Q_m`` the scaffold channel rotated by ``delta_m`` radians. Labels are
functions of ``g`` alone:

* spatial: three tokens, each the quantile bin of one projection ``u_k . g``;
* ad / uav: two / one tokens binning projections inside the spatial span;
* embodied: four sign tokens of projections inside the spatial span.

Because the geometry sits in a small subspace of a wide observation, a trunk
that has learned to find it (from plentiful spatial data) is a better
starting point for the small downstream sets than a fresh trunk.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.stats import norm

from .model import LabeledBatch, ModelSpec

DOMAINS = ("spatial", "ad", "uav", "embodied")
_TOKENS = {"spatial": 3, "ad": 2, "uav": 1, "embodied": 4}


@dataclass
class DomainSpec:
    domain: str
    cond: int
    channel: np.ndarray  # orthogonal (D, D)
    offset: np.ndarray
    directions: np.ndarray  # (tokens, latent_dim), unit rows
    bins: int  # 2 means sign tokens
    noise: float = 0.05
    latent_dim: int = 4
    nuisance_scale: float = 1.0
    n_train: int = 0
    n_eval: int = 1000
    shortcut: float = 0.0

    @property
    def tokens(self) -> int:
        return len(self.directions)

    @property
    def obs_dim(self) -> int:
        return len(self.channel)

    def label(self, g: np.ndarray) -> np.ndarray:
        z = g @ self.directions.T
        if self.bins == 2:
            return (z > 0).astype(np.int64)
        edges = norm.ppf(np.arange(1, self.bins) / self.bins)
        return np.digitize(z, edges).astype(np.int64)

    def sample(self, rng, n: int, shortcut: float = 0.0):
        """Return ``(g, observations, targets)`` for ``n`` fresh samples.

        ``shortcut > 0`` plants a spurious cue: the first nuisance coordinates
        are pushed towards ``shortcut * (2 y - 1)`` so that they predict the
        sign labels on this sample only.
        """
        d = self.latent_dim
        g = rng.standard_normal((n, d))
        a = self.nuisance_scale * rng.standard_normal((n, self.obs_dim - d))
        y = self.label(g)
        if shortcut:
            k = min(y.shape[1], a.shape[1])
            a[:, :k] = 0.3 * a[:, :k] + shortcut * (2.0 * y[:, :k] - 1.0)
        o = np.concatenate([g, a], axis=1) @ self.channel.T + self.offset
        o = o + self.noise * rng.standard_normal(o.shape)
        return g, o, y

    def batch(self, rng, n: int, shortcut: float = 0.0) -> LabeledBatch:
        _, o, y = self.sample(rng, n, shortcut)
        return LabeledBatch(self.domain, o, np.full(n, self.cond), y, np.full(n, self.tokens))


@dataclass
class SyntheticConfig:
    """Generator settings; ``sizes`` are training-set sizes per domain."""

    latent_dim: int = 4
    nuisance_dim: int = 28
    noise: float = 0.05
    nuisance_scale: float = 1.0
    bins: int = 4
    offset_scale: float = 0.0
    deltas: dict = field(default_factory=lambda: {"spatial": 0.0, "ad": 0.2, "uav": 0.2, "embodied": 0.2})
    sizes: dict = field(default_factory=lambda: {"spatial": 2000, "ad": 64, "uav": 64, "embodied": 32})
    n_eval: int = 1000
    general_size: int = 150
    embodied_shortcut: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SyntheticConfig fields: {sorted(unknown)}")
        cfg = cls()
        for k, v in d.items():
            if k in ("deltas", "sizes"):
                v = {**getattr(cfg, k), **v}
            setattr(cfg, k, v)
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def _rotation(rng, dim: int, angle: float) -> np.ndarray:
    """Rotation ``expm(angle * S)`` for a random skew generator of unit spectral norm."""
    m = rng.standard_normal((dim, dim))
    skew = m - m.T
    skew /= np.linalg.norm(skew, 2)
    return expm(angle * skew)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


@dataclass
class SyntheticSuite:
    """Domain specs, train/eval splits and small clean "general" corpora.

    ``general[m]`` is a shortcut-free sample of domain ``m``; the base stage
    trains on ``general["embodied"]``.
    """

    config: SyntheticConfig
    specs: dict
    splits: dict
    general: dict

    def model_spec(self, hidden: int = 64) -> ModelSpec:
        return ModelSpec(obs_dim=self.config.latent_dim + self.config.nuisance_dim,
                         n_cond=len(DOMAINS), hidden=hidden, vocab=16,
                         heads=tuple((m, _TOKENS[m]) for m in DOMAINS))

    def train(self, domain: str) -> LabeledBatch:
        return self.splits[domain][0]

    def eval(self, domain: str) -> LabeledBatch:
        return self.splits[domain][1]


def build_suite(seed: int = 0, config: SyntheticConfig | None = None) -> SyntheticSuite:
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    d, dim = cfg.latent_dim, cfg.latent_dim + cfg.nuisance_dim
    q0 = np.linalg.qr(rng.standard_normal((dim, dim)))[0]
    spatial_dirs = _unit_rows(rng.standard_normal((_TOKENS["spatial"], d)))
    # placeholder draws keep the stream layout stable across generator versions
    rng.standard_normal((_TOKENS["ad"] + _TOKENS["uav"], d))
    rng.standard_normal((d, d))
    # downstream projections live in the span of the spatial ones
    span = lambda n: _unit_rows(rng.standard_normal((n, len(spatial_dirs))) @ spatial_dirs)
    directions = {"spatial": spatial_dirs, "ad": span(_TOKENS["ad"]), "uav": span(_TOKENS["uav"])}
    directions["embodied"] = np.vstack([spatial_dirs, span(1)])
    specs, splits, general = {}, {}, {}
    for i, m in enumerate(DOMAINS):
        channel = _rotation(rng, dim, float(cfg.deltas.get(m, 0.0))) @ q0
        spec = DomainSpec(
            domain=m, cond=i, channel=channel, offset=cfg.offset_scale * rng.standard_normal(dim),
            directions=directions[m], bins=2 if m == "embodied" else cfg.bins, noise=cfg.noise,
            latent_dim=d, nuisance_scale=cfg.nuisance_scale, n_train=int(cfg.sizes.get(m, 0)),
            n_eval=cfg.n_eval, shortcut=cfg.embodied_shortcut if m == "embodied" else 0.0)
        specs[m] = spec
        train = spec.batch(rng, spec.n_train, spec.shortcut)
        splits[m] = (train, spec.batch(rng, spec.n_eval))
        general[m] = spec.batch(rng, cfg.general_size)
    return SyntheticSuite(cfg, specs, splits, general)


def make_synthetic_domains(seed: int = 0, config: SyntheticConfig | None = None) -> dict:
    """Map each domain to its ``(train, eval)`` pair of :class:`LabeledBatch`."""
    return build_suite(seed, config).splits
