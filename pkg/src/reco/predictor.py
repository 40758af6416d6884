"""Problem heads, the reliability head, and readable diagnoses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor


@dataclass
class PredictionOutput:
    p_threshold: Tensor  # [absent, present]
    p_scene: Tensor      # [absent, present]
    p_chain: Tensor      # [unreliable, reliable]
    p1: Tensor
    p2: Tensor


@dataclass
class Diagnosis:
    reliable: bool
    scene_drift: bool
    threshold_effect: bool
    probabilities: dict

    def to_json(self) -> dict:
        return {
            "prediction": "Reliable" if self.reliable else "Unreliable",
            "scene_drift": self.scene_drift,
            "threshold_effect": self.threshold_effect,
            "probabilities": self.probabilities,
        }


def init_params(store: ParameterStore, m: int, rng: np.random.Generator) -> None:
    store.init_linear("head.threshold", m, 2, rng)
    store.init_linear("head.scene", m, 2, rng)
    store.init_linear("head.p1", 2 * m, m, rng)
    store.init_linear("head.p2", 2 * m, m, rng)
    store.init_linear("head.chain", 2 * m, 2, rng)


def _lin(store, name, x):
    return nx.affine(x, store[f"{name}.W"], store[f"{name}.b"])


def problem_heads(alpha_T: Tensor, beta_T: Tensor, store: ParameterStore):
    """Returns (P^T from beta, P^S from alpha)."""
    p_t = nx.softmax2(_lin(store, "head.threshold", beta_T))
    p_s = nx.softmax2(_lin(store, "head.scene", alpha_T))
    return p_t, p_s


def reliability_head(h_pen: Tensor, h_last: Tensor, u_in_last: Tensor, E_T: Tensor, store: ParameterStore):
    p1 = nx.tanh(_lin(store, "head.p1", nx.concat(h_pen, u_in_last)))
    p2 = nx.tanh(_lin(store, "head.p2", nx.concat(h_last, E_T)))
    p_c = nx.softmax2(_lin(store, "head.chain", nx.concat(p1, p2)))
    return p_c, p1, p2


def _argmax2(p) -> bool:
    # exact ties go to index 0 (unreliable / problem absent)
    return bool(p[1] > p[0])


def diagnose(po: PredictionOutput) -> Diagnosis:
    """Argmax decisions for a single (unbatched) prediction."""
    pc, ps, pt = (np.asarray(t.data if isinstance(t, Tensor) else t) for t in
                  (po.p_chain, po.p_scene, po.p_threshold))
    if pc.ndim != 1:
        raise ValueError("diagnose expects a single prediction; use diagnose_batch")
    return Diagnosis(
        reliable=_argmax2(pc),
        scene_drift=_argmax2(ps),
        threshold_effect=_argmax2(pt),
        probabilities={
            "chain": {"unreliable": float(pc[0]), "reliable": float(pc[1])},
            "scene_drift": {"absent": float(ps[0]), "present": float(ps[1])},
            "threshold_effect": {"absent": float(pt[0]), "present": float(pt[1])},
        },
    )


def diagnose_batch(po: PredictionOutput) -> list[Diagnosis]:
    rows = po.p_chain.data.shape[0]
    return [diagnose(PredictionOutput(po.p_threshold.data[i], po.p_scene.data[i], po.p_chain.data[i],
                                      po.p1.data[i], po.p2.data[i]))
            for i in range(rows)]
