"""Full model: provider + projection -> EA-CVAE -> SRNN -> heads."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import eacvae, predictor, srnn
from . import numerics as nx
from .encoder import Projection, make_provider
from .losses import instance_losses
from .numerics import ParameterStore, Tensor
from .predictor import PredictionOutput

TRAIN = eacvae.TRAIN
PREDICT = eacvae.PREDICT


@dataclass
class TrainConfig:
    m: int = 256
    lr: float = 1e-5
    batch_size: int = 24
    epochs: int = 50
    lambda1: float = 1.0
    lambda2: float = 0.01
    seed: int = 0
    provider: str = "hashing"
    provider_params: dict = field(default_factory=lambda: {"dim": 256})
    no_eacvae: bool = False
    no_logic_supervision: bool = False
    problem_ce_instead_of_logic: bool = False
    kl_direction: str = eacvae.PRIOR_POSTERIOR
    eval_epsilon_mode: str = "zero"
    u_in_last_mode: str = srnn.AGGREGATED
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_reduction: str = "mean"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("m", "batch_size"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("lr", "lambda1", "lambda2", "adam_eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")
        if self.no_logic_supervision and self.problem_ce_instead_of_logic:
            raise ValueError("no_logic_supervision and problem_ce_instead_of_logic are exclusive")
        if self.kl_direction not in (eacvae.PRIOR_POSTERIOR, eacvae.POSTERIOR_PRIOR):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.eval_epsilon_mode not in ("zero", "sample"):
            raise ValueError(f"unknown eval_epsilon_mode {self.eval_epsilon_mode!r}")
        if self.u_in_last_mode not in (srnn.AGGREGATED, srnn.RAW):
            raise ValueError(f"unknown u_in_last_mode {self.u_in_last_mode!r}")
        if self.batch_reduction != "mean":
            raise ValueError("only batch_reduction='mean' is supported")

    @property
    def logic_term(self) -> str:
        if self.no_logic_supervision:
            return "none"
        if self.problem_ce_instead_of_logic:
            return "problem_ce"
        return "logic"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def init_store(d: int, m: int, rng: np.random.Generator) -> ParameterStore:
    store = ParameterStore()
    Projection.init(store, d, m, rng)
    eacvae.init_params(store, m, rng)
    srnn.init_params(store, m, rng)
    predictor.init_params(store, m, rng)
    return store


class ReCoModel:
    """Parameters, provider, and the forward pass for one configuration."""

    def __init__(self, config: TrainConfig, store: Optional[ParameterStore] = None,
                 provider=None, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.provider = provider if provider is not None else make_provider(config.provider, **config.provider_params)
        if self.provider.dim is None:
            raise ValueError(f"provider {config.provider!r} needs an explicit 'dim'")
        if store is None:
            rng = rng if rng is not None else np.random.default_rng(config.seed)
            store = init_store(self.provider.dim, config.m, rng)
        self.store = store
        self._vec_cache: dict[str, np.ndarray] = {}

    # provider vectors are constants; cache them per text
    def vectors(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._vec_cache]
        if missing:
            for t, v in zip(missing, self.provider.embed(missing)):
                self._vec_cache[t] = v
        return np.stack([self._vec_cache[t] for t in texts])

    def _epsilons(self, n_pairs, shape, mode, rng, epsilon):
        if epsilon is not None:
            if len(epsilon) != n_pairs:
                raise ValueError(f"need {n_pairs} epsilon vectors, got {len(epsilon)}")
            return [np.asarray(e, dtype=np.float64) for e in epsilon]
        if mode == PREDICT and self.config.eval_epsilon_mode == "zero":
            return [np.zeros(shape) for _ in range(n_pairs)]
        if rng is None:
            raise ValueError("stochastic sampling needs an rng (or explicit epsilon)")
        return [rng.standard_normal(shape) for _ in range(n_pairs)]

    def forward(self, instances, mode: str = PREDICT, rng: Optional[np.random.Generator] = None,
                epsilon=None):
        """Forward a single instance (unbatched tensors) or a list of same-length instances.

        Returns (PredictionOutput, list of GaussianPair, list of latent tensors).
        """
        single = not isinstance(instances, (list, tuple))
        group = [instances] if single else list(instances)
        n = group[0].length
        if any(inst.length != n for inst in group):
            raise ValueError("a forward group must hold instances of one length")
        st, cfg = self.store, self.config

        ev = self.vectors([t for inst in group for t in inst.events]).reshape(len(group), n, -1)
        cx = self.vectors([t for inst in group for t in inst.contexts]).reshape(len(group), n - 1, -1)
        if single:
            ev, cx = ev[0], cx[0]
        h = [Projection.apply(ev[..., j, :], st) for j in range(n)]
        hc = [Projection.apply(cx[..., j, :], st) for j in range(n - 1)]

        gaussians = []
        if cfg.no_eacvae:
            latents = hc
        else:
            eps = self._epsilons(n - 1, h[0].shape, mode, rng, epsilon)
            latents = []
            for i in range(n - 1):
                gp = eacvae.estimate_gaussians(h[i], h[i + 1], hc[i], st)
                gaussians.append(gp)
                latents.append(eacvae.sample_exogenous(gp, eps[i], mode).u)

        fin = srnn.srnn_forward(h, latents, st, cfg.u_in_last_mode)
        p_t, p_s = predictor.problem_heads(fin.alpha_T, fin.beta_T, st)
        p_c, p1, p2 = predictor.reliability_head(fin.h_pen, fin.h_last, fin.u_in_last, fin.E_T, st)
        return PredictionOutput(p_t, p_s, p_c, p1, p2), gaussians, latents

    def group_loss(self, instances, rng=None, epsilon=None, mode: str = TRAIN):
        """Sum over the group of per-instance weighted totals, plus the parts."""
        po, gps, _ = self.forward(instances, mode, rng=rng, epsilon=epsilon)
        labels = [inst.label for inst in instances] if isinstance(instances, (list, tuple)) else instances.label
        cfg = self.config
        parts = instance_losses(po.p_threshold, po.p_scene, po.p_chain, labels, gps,
                                logic=cfg.logic_term, kl_direction=cfg.kl_direction)
        per = nx.add(nx.add(parts[0], nx.scale(parts[1], cfg.lambda1)), nx.scale(parts[2], cfg.lambda2))
        return nx.total(per), [float(p.data.sum()) for p in parts]


def forward_instance(instance, model: ReCoModel, mode: str = PREDICT, rng=None, epsilon=None):
    """(PredictionOutput, gaussians) for one instance."""
    po, gps, _ = model.forward(instance, mode, rng=rng, epsilon=epsilon)
    return po, gps


def group_by_length(instances: Sequence) -> dict[int, list]:
    groups: dict[int, list] = {}
    for inst in instances:
        groups.setdefault(inst.length, []).append(inst)
    return dict(sorted(groups.items()))
