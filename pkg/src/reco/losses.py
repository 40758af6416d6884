"""Chain cross-entropy, logic loss, KL aggregation and the total objective.

Every loss accepts a single prediction (probabilities of shape ``(2,)``) or
a same-length group (``(B, 2)`` with a list of labels) and returns one value
per instance; :func:`batch_mean` reduces left to right.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .eacvae import PRIOR_POSTERIOR, GaussianPair, kl_term
from .numerics import Tensor

CLAMP = 1e-12

NONE = "none"
THRESHOLD = "threshold"
SCENE = "scene"
PROBLEMS = (NONE, THRESHOLD, SCENE)


@dataclass(frozen=True)
class InstanceLabel:
    reliable: bool
    problem: str = NONE

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")
        if self.reliable and self.problem != NONE:
            raise ValueError("a reliable instance cannot carry a problem")
        if not self.reliable and self.problem == NONE:
            raise ValueError("an unreliable instance needs a problem (threshold or scene)")


@dataclass
class LossBreakdown:
    l_chain: float
    l_logic: float
    l_kl: float
    total: float
    lambda1: float
    lambda2: float
    tensor: Optional[Tensor] = None  # differentiable total

    def as_dict(self) -> dict:
        return {"l_chain": self.l_chain, "l_logic": self.l_logic, "l_kl": self.l_kl,
                "total": self.total, "lambda1": self.lambda1, "lambda2": self.lambda2}


def _as_labels(labels) -> list:
    return [labels] if isinstance(labels, InstanceLabel) else list(labels)


def _index(p: Tensor, labels, fn):
    """Per-row class index for ``pick``, matching ``p``'s rank."""
    labels = _as_labels(labels)
    idx = [fn(lb) for lb in labels]
    if p.data.ndim == 1:
        if len(idx) != 1:
            raise ValueError("one label expected for an unbatched prediction")
        return idx[0]
    if len(idx) != p.shape[0]:
        raise nx.ShapeError("labels", p.shape, (len(idx),))
    return np.array(idx)


def _logp(p: Tensor, idx) -> Tensor:
    return nx.log(nx.clamp_min(nx.pick(p, idx), CLAMP))


def chain_loss(p_chain: Tensor, labels) -> Tensor:
    """-log P^C[y] with y = 1 for reliable."""
    return nx.scale(_logp(p_chain, _index(p_chain, labels, lambda lb: int(lb.reliable))), -1.0)


def logic_loss(p_threshold: Tensor, p_scene: Tensor, p_chain: Tensor, labels) -> Tensor:
    """|log(P^T[t] * P^S[s]) - log P^C[c]| for the label's case.

    reliable: t=0, s=0, c=1; scene drift: t=0, s=1, c=0;
    threshold effect: t=1, s=0, c=0.
    """
    t = _index(p_threshold, labels, lambda lb: int(lb.problem == THRESHOLD))
    s = _index(p_scene, labels, lambda lb: int(lb.problem == SCENE))
    c = _index(p_chain, labels, lambda lb: int(lb.reliable))
    lhs = nx.add(_logp(p_threshold, t), _logp(p_scene, s))
    return nx.absolute(nx.sub(lhs, _logp(p_chain, c)))


def problem_ce(p_threshold: Tensor, p_scene: Tensor, labels) -> Tensor:
    """Two cross-entropies supervising the problem heads directly."""
    t = _index(p_threshold, labels, lambda lb: int(lb.problem == THRESHOLD))
    s = _index(p_scene, labels, lambda lb: int(lb.problem == SCENE))
    return nx.scale(nx.add(_logp(p_threshold, t), _logp(p_scene, s)), -1.0)


ablation_problem_ce = problem_ce


def kl_sum(gaussians: Sequence[GaussianPair], direction: str = PRIOR_POSTERIOR) -> Optional[Tensor]:
    """Sum of per-pair KL terms; None when there are no pairs (EA-CVAE bypassed)."""
    out = None
    for gp in gaussians:
        k = kl_term(gp, direction)
        out = k if out is None else nx.add(out, k)
    return out


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))


def instance_losses(p_threshold: Tensor, p_scene: Tensor, p_chain: Tensor, labels,
                    gaussians: Sequence[GaussianPair], *, logic: str = "logic",
                    kl_direction: str = PRIOR_POSTERIOR):
    """Per-instance (l_chain, l_logic, l_kl) tensors.

    ``logic`` selects the second term: ``"logic"`` (default), ``"none"``
    (problem heads unsupervised) or ``"problem_ce"``.
    """
    l_chain = chain_loss(p_chain, labels)
    if logic == "logic":
        l_logic = logic_loss(p_threshold, p_scene, p_chain, labels)
    elif logic == "problem_ce":
        l_logic = problem_ce(p_threshold, p_scene, labels)
    elif logic == "none":
        l_logic = _zeros_like(l_chain)
    else:
        raise ValueError(f"unknown logic term {logic!r}")
    l_kl = kl_sum(gaussians, kl_direction)
    if l_kl is None:
        l_kl = _zeros_like(l_chain)
    return l_chain, l_logic, l_kl


def batch_mean(t: Tensor) -> Tensor:
    n = t.data.size
    return nx.scale(nx.total(t), 1.0 / n)


def combine(l_chain: Tensor, l_logic: Tensor, l_kl: Tensor, lambda1: float, lambda2: float) -> Tensor:
    return nx.add(nx.add(l_chain, nx.scale(l_logic, lambda1)), nx.scale(l_kl, lambda2))


def total_loss(p_threshold: Tensor, p_scene: Tensor, p_chain: Tensor, labels,
               gaussians: Sequence[GaussianPair], lambda1: float = 1.0, lambda2: float = 0.01,
               **kw) -> LossBreakdown:
    """L = L_chain + lambda1 * L_logic + lambda2 * L_kl, averaged over the batch."""
    parts = [batch_mean(x) for x in instance_losses(p_threshold, p_scene, p_chain, labels, gaussians, **kw)]
    tot = combine(*parts, lambda1, lambda2)
    lc, ll, lk = (p.item() for p in parts)
    return LossBreakdown(lc, ll, lk, tot.item(), lambda1, lambda2, tensor=tot)
