"""Structural causal recurrent network.

One step reads three consecutive endogenous vectors and two consecutive
exogenous vectors and runs five gates: scene drift (alpha), hidden
aggregation, threshold effect (beta), exogenous contradiction (E) and the
output gate that composes the next exogenous input. A chain of n events
takes n - 2 steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor

AGGREGATED = "aggregated"
RAW = "raw"


@dataclass
class SrnnInput:
    h_a: Tensor
    h_b: Tensor
    h_c: Tensor
    u_a: Tensor
    u_b: Tensor


@dataclass
class SrnnStepOutput:
    alpha: Tensor
    beta: Tensor
    h_b_agg: Tensor
    h_c_agg: Tensor
    E: Tensor
    u_agg: Tensor


@dataclass
class SrnnFinal:
    alpha_T: Tensor
    beta_T: Tensor
    h_pen: Tensor
    h_last: Tensor
    E_T: Tensor
    u_in_last: Tensor
    steps: list


def init_params(store: ParameterStore, m: int, rng: np.random.Generator) -> None:
    store.init_linear("srnn.scene_a", m, m, rng)
    store.init_linear("srnn.scene_b", m, m, rng)
    store.init_linear("srnn.hidden", 2 * m, m, rng)
    store.init_linear("srnn.threshold", 2 * m, m, rng, bias=False)
    store.init_linear("srnn.exo", m, m, rng)
    store.init_linear("srnn.out", 2 * m, m, rng)


def _lin(store, name, x, bias=True):
    return nx.affine(x, store[f"{name}.W"], store[f"{name}.b"] if bias else None)


def _check(*ts):
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise nx.ShapeError("srnn", ts[0].shape, t.shape)


def _ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones(t.shape))


def scene_drift(u_a: Tensor, u_b: Tensor, store: ParameterStore) -> Tensor:
    _check(u_a, u_b)
    return nx.sigmoid(nx.sub(_lin(store, "srnn.scene_a", u_a), _lin(store, "srnn.scene_b", u_b)))


def hidden_gate(h_a: Tensor, h_b: Tensor, h_c: Tensor, store: ParameterStore):
    _check(h_a, h_b, h_c)
    h_b_agg = nx.tanh(_lin(store, "srnn.hidden", nx.concat(h_a, h_b)))
    h_c_agg = nx.tanh(_lin(store, "srnn.hidden", nx.concat(h_b, h_c)))
    return h_b_agg, h_c_agg


def threshold_effect(u_a: Tensor, u_b: Tensor, h_b_agg: Tensor, h_c_agg: Tensor, alpha: Tensor,
                     store: ParameterStore) -> Tensor:
    _check(u_a, u_b, h_b_agg, h_c_agg, alpha)
    diff = nx.sub(nx.concat(u_b, h_c_agg), nx.concat(u_a, h_b_agg))
    pre = _lin(store, "srnn.threshold", diff, bias=False)
    return nx.sigmoid(nx.mul(pre, nx.sub(_ones_like(alpha), alpha)))


def exogenous_gate(u_a: Tensor, u_b: Tensor, alpha: Tensor, beta: Tensor, store: ParameterStore) -> Tensor:
    _check(u_a, u_b, alpha, beta)
    coef = nx.scale(nx.add(alpha, beta), 0.5)
    return nx.tanh(_lin(store, "srnn.exo", nx.add(u_b, nx.mul(coef, u_a))))


def output_gate(u_a: Tensor, E: Tensor, store: ParameterStore) -> Tensor:
    _check(u_a, E)
    return nx.tanh(_lin(store, "srnn.out", nx.concat(u_a, E)))


def srnn_step(inp: SrnnInput, store: ParameterStore, alpha: Optional[Tensor] = None,
              beta: Optional[Tensor] = None) -> SrnnStepOutput:
    """One recurrent step. ``alpha``/``beta`` override the computed gates (test hook)."""
    if alpha is None:
        alpha = scene_drift(inp.u_a, inp.u_b, store)
    h_b_agg, h_c_agg = hidden_gate(inp.h_a, inp.h_b, inp.h_c, store)
    if beta is None:
        beta = threshold_effect(inp.u_a, inp.u_b, h_b_agg, h_c_agg, alpha, store)
    E = exogenous_gate(inp.u_a, inp.u_b, alpha, beta, store)
    u_agg = output_gate(inp.u_a, E, store)
    return SrnnStepOutput(alpha, beta, h_b_agg, h_c_agg, E, u_agg)


def srnn_forward(events: Sequence[Tensor], latents: Sequence[Tensor], store: ParameterStore,
                 u_in_last_mode: str = AGGREGATED) -> SrnnFinal:
    """Run the recurrence over h_1..h_n and u_1..u_{n-1}.

    ``u_in_last`` is the exogenous first-slot input of the final step
    (``aggregated``) or the raw latent u_{n-2} (``raw``); for n = 3 both are u_1.
    """
    n = len(events)
    if not 3 <= n <= 5:
        raise ValueError(f"chains need 3-5 events, got {n}")
    if len(latents) != n - 1:
        raise ValueError(f"{n} events need {n - 1} latents, got {len(latents)}")
    if u_in_last_mode not in (AGGREGATED, RAW):
        raise ValueError(f"unknown u_in_last_mode {u_in_last_mode!r}")

    inp = SrnnInput(events[0], events[1], events[2], latents[0], latents[1])
    steps = []
    for t in range(n - 2):
        if t > 0:
            prev = steps[-1]
            inp = SrnnInput(prev.h_b_agg, prev.h_c_agg, events[t + 2], prev.u_agg, latents[t + 1])
        steps.append(srnn_step(inp, store))
    last = steps[-1]
    u_in_last = inp.u_a if u_in_last_mode == AGGREGATED else latents[n - 3]
    return SrnnFinal(last.alpha, last.beta, last.h_b_agg, last.h_c_agg, last.E, u_in_last, steps)
