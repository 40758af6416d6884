"""Exogenous-aware CVAE: per causal pair, a prior Gaussian from the two
events and a posterior Gaussian from events plus context, a
reparameterised sample of the exogenous variable, and the diagonal KL.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor

TRAIN = "train"
PREDICT = "predict"

PRIOR_POSTERIOR = "prior_posterior"  # KL(N(mu, sigma) || N(mu', sigma')), as printed
POSTERIOR_PRIOR = "posterior_prior"  # conventional CVAE direction


@dataclass
class GaussianPair:
    mu: Tensor
    sigma: Tensor
    mu_prime: Tensor
    sigma_prime: Tensor
    # pre-exp activations, kept so the KL never takes log(exp(.))
    log_sigma: Tensor
    log_sigma_prime: Tensor


@dataclass
class LatentSample:
    u: Tensor
    epsilon: np.ndarray
    mode: str


def init_params(store: ParameterStore, m: int, rng: np.random.Generator) -> None:
    store.init_linear("cvae.prior_mu", 2 * m, m, rng)
    store.init_linear("cvae.prior_logsigma", 2 * m, m, rng)
    store.init_linear("cvae.post_mu", 3 * m, m, rng)
    store.init_linear("cvae.post_logsigma", 3 * m, m, rng)


def _lin(store, name, x):
    return nx.affine(x, store[f"{name}.W"], store[f"{name}.b"])


def estimate_prior(h_i: Tensor, h_next: Tensor, store: ParameterStore):
    v = nx.concat(h_i, h_next)
    mu = _lin(store, "cvae.prior_mu", v)
    log_sigma = _lin(store, "cvae.prior_logsigma", v)
    return mu, log_sigma


def estimate_gaussians(h_i: Tensor, h_next: Tensor, h_ctx: Tensor, store: ParameterStore) -> GaussianPair:
    for other in (h_next, h_ctx):
        if other.shape != h_i.shape:
            raise nx.ShapeError("estimate_gaussians", h_i.shape, other.shape)
    mu, log_sigma = estimate_prior(h_i, h_next, store)
    v_post = nx.concat(nx.concat(h_i, h_ctx), h_next)
    mu_p = _lin(store, "cvae.post_mu", v_post)
    log_sigma_p = _lin(store, "cvae.post_logsigma", v_post)
    return GaussianPair(mu, nx.exp(log_sigma), mu_p, nx.exp(log_sigma_p), log_sigma, log_sigma_p)


def sample_exogenous(gp: GaussianPair, epsilon, mode: str) -> LatentSample:
    """u = mu' + eps * sigma' when training, mu + eps * sigma when predicting."""
    eps = np.asarray(epsilon, dtype=np.float64)
    if mode == TRAIN:
        mu, sigma = gp.mu_prime, gp.sigma_prime
    elif mode == PREDICT:
        mu, sigma = gp.mu, gp.sigma
    else:
        raise ValueError(f"mode must be {TRAIN!r} or {PREDICT!r}, got {mode!r}")
    if eps.shape != mu.shape:
        raise nx.ShapeError("sample_exogenous", mu.shape, eps.shape)
    u = nx.add(mu, nx.mul(nx.Tensor(eps), sigma))
    return LatentSample(u, eps, mode)


def kl_gaussians(mu_p: Tensor, ls_p: Tensor, mu_q: Tensor, ls_q: Tensor) -> Tensor:
    """KL(N(mu_p, e^{2 ls_p}) || N(mu_q, e^{2 ls_q})), summed over the last axis."""
    var_p = nx.exp(nx.scale(ls_p, 2.0))
    var_q = nx.exp(nx.scale(ls_q, 2.0))
    quad = nx.div(nx.add(var_p, nx.square(nx.sub(mu_p, mu_q))), nx.scale(var_q, 2.0))
    per_dim = nx.add(nx.sub(ls_q, ls_p), quad)
    s = nx.sum_last(per_dim)
    return nx.sub(s, nx.Tensor(np.full(s.shape, 0.5 * per_dim.shape[-1])))


def kl_term(gp: GaussianPair, direction: str = PRIOR_POSTERIOR) -> Tensor:
    if direction == PRIOR_POSTERIOR:
        return kl_gaussians(gp.mu, gp.log_sigma, gp.mu_prime, gp.log_sigma_prime)
    if direction == POSTERIOR_PRIOR:
        return kl_gaussians(gp.mu_prime, gp.log_sigma_prime, gp.mu, gp.log_sigma)
    raise ValueError(f"unknown KL direction {direction!r}")
