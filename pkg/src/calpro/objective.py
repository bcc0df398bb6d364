"""Training objective: NIG negative log-likelihood, evidence regularizer,
monotone prior hinge, and the soft-conformal surrogate, each with analytic
gradients.  total_loss chains everything through the head's backward pass.
"""

from dataclasses import dataclass

import numpy as np

from . import head as head_mod
from .numerics import digamma, lgamma, rng_stream, sigmoid, soft_quantile, soft_quantile_grad, softplus

_lgamma = np.vectorize(lgamma)
_digamma = np.vectorize(digamma)


@dataclass(frozen=True)
class ObjectiveConfig:
    gamma: float = 10.0
    kappa: float = 0.1
    lambda_evid: float = 0.01
    lambda_prior: float = 0.1
    lambda_conf: float = 0.05
    stopgrad_epochs: int = 10
    prior_penalty_reduction: str = "mean"
    monotone_hidden: int = 8
    mu_only: bool = False     # ablation: plain squared-error point head

    def validate(self):
        if self.gamma <= 0 or self.kappa <= 0:
            raise ValueError("gamma and kappa must be positive")
        # zero weights are allowed so ablations can switch terms off
        if min(self.lambda_evid, self.lambda_prior, self.lambda_conf) < 0:
            raise ValueError("objective weights must be nonnegative")
        if self.stopgrad_epochs < 0:
            raise ValueError("stopgrad_epochs must be >= 0")
        if self.prior_penalty_reduction not in ("sum", "mean"):
            raise ValueError("prior_penalty_reduction must be 'sum' or 'mean'")
        return self


class MonotoneMap:
    """Two-layer map m(b), nondecreasing on [0, 1] by construction: both
    weight layers are reparameterized through softplus, so effective weights
    are nonnegative and the composition with ReLU is monotone."""

    def __init__(self, w1_raw, b1, w2_raw, b2):
        self.w1_raw = np.asarray(w1_raw, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.w2_raw = np.asarray(w2_raw, dtype=float)
        self.b2 = float(b2)

    @classmethod
    def init(cls, hidden=8, seed=0):
        rng = rng_stream(seed, 11)
        return cls(rng.uniform(-1.0, 1.0, hidden), np.zeros(hidden),
                   rng.uniform(-1.0, 1.0, hidden), 0.0)

    def to_vector(self):
        return np.concatenate([self.w1_raw, self.b1, self.w2_raw, [self.b2]])

    def from_vector(self, vec):
        h = self.w1_raw.size
        return MonotoneMap(vec[:h], vec[h:2 * h], vec[2 * h:3 * h], vec[3 * h])

    def zeros_like(self):
        return self.from_vector(np.zeros(self.to_vector().size))

    def __call__(self, b):
        b = np.asarray(b, dtype=float)
        w1 = softplus(self.w1_raw)
        w2 = softplus(self.w2_raw)
        hidden = np.maximum(np.outer(b, w1) + self.b1, 0.0)
        out = hidden @ w2 + self.b2
        return out

    def value_and_grads(self, b):
        """m(b) plus gradients of sum-weighted outputs w.r.t. raw params.

        Returns (values, vjp) where vjp(d_out) gives a MonotoneMap-shaped
        gradient for a downstream gradient d_out per input.
        """
        b = np.asarray(b, dtype=float)
        w1 = softplus(self.w1_raw)
        w2 = softplus(self.w2_raw)
        pre = np.outer(b, w1) + self.b1
        hidden = np.maximum(pre, 0.0)
        out = hidden @ w2 + self.b2

        def vjp(d_out):
            d_out = np.asarray(d_out, dtype=float)
            d_hidden = np.outer(d_out, w2)
            d_pre = d_hidden * (pre > 0)
            g_w1 = (d_pre * b[:, None]).sum(axis=0) * sigmoid(self.w1_raw)
            g_b1 = d_pre.sum(axis=0)
            g_w2 = (hidden * d_out[:, None]).sum(axis=0) * sigmoid(self.w2_raw)
            g_b2 = d_out.sum()
            return MonotoneMap(g_w1, g_b1, g_w2, g_b2)

        return out, vjp


def monotone_eval(m: MonotoneMap, b):
    b = np.asarray(b, dtype=float)
    if np.any(b < 0) or np.any(b > 1):
        raise ValueError("prior inputs must lie in [0, 1]")
    out = m(b)
    return float(out[0]) if np.ndim(b) == 0 else out


def nig_nll(p: head_mod.NIGParams, y, with_grads=False):
    """Per-node NIG negative log-likelihood, averaged over nodes.

    L_i = 0.5 log(nu/pi) - alpha log(2 beta) + lgamma(alpha)
          + (alpha + 0.5) log(nu (y - mu)^2 + 2 beta) - lgamma(alpha + 0.5)
    """
    mu, nu, alpha, beta = (np.atleast_1d(np.asarray(v, dtype=float))
                           for v in (p.mu, p.nu, p.alpha, p.beta))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    e = y - mu
    a_term = nu * e ** 2 + 2.0 * beta
    vals = (0.5 * np.log(nu / np.pi) - alpha * np.log(2.0 * beta)
            + _lgamma(alpha) + (alpha + 0.5) * np.log(a_term) - _lgamma(alpha + 0.5))
    loss = float(np.mean(vals))
    if not with_grads:
        return loss
    n = mu.size
    d_mu = -(alpha + 0.5) * 2.0 * nu * e / a_term / n
    d_nu = (0.5 / nu + (alpha + 0.5) * e ** 2 / a_term) / n
    d_alpha = (-np.log(2.0 * beta) + _digamma(alpha) + np.log(a_term) - _digamma(alpha + 0.5)) / n
    d_beta = (-alpha / beta + (alpha + 0.5) * 2.0 / a_term) / n
    return loss, (d_mu, d_nu, d_alpha, d_beta)


def evidence_reg(alphas, with_grads=False):
    """Sum of exp(-alpha); penalizes low evidence."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    val = float(np.sum(np.exp(-alphas)))
    if not with_grads:
        return val
    return val, -np.exp(-alphas)


def prior_penalty(b, u, m: MonotoneMap, cfg: ObjectiveConfig, with_grads=False):
    """Hinge sum/mean of max(0, m(b) - u): prior volatility must be matched
    by at least that much epistemic variance."""
    b = np.atleast_1d(np.asarray(b, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(b < 0) or np.any(b > 1):
        raise ValueError("prior inputs must lie in [0, 1]")
    mb, vjp = m.value_and_grads(b)
    gap = mb - u
    active = gap > 0
    red = 1.0 / b.size if cfg.prior_penalty_reduction == "mean" else 1.0
    val = float(np.sum(np.maximum(gap, 0.0)) * red)
    if not with_grads:
        return val
    d_u = -active.astype(float) * red
    d_m = vjp(active.astype(float) * red)
    return val, d_u, d_m


def soft_conf_loss(scores, cfg: ObjectiveConfig, stopgrad=False, with_grads=False):
    """Mean softplus((s_i - Q_gamma(s)) / kappa) with the log-sum-exp soft
    quantile; with stopgrad the quantile is treated as a constant."""
    s = np.atleast_1d(np.asarray(scores, dtype=float))
    if s.size == 0:
        raise ValueError("soft_conf_loss of empty scores")
    q = soft_quantile(s, cfg.gamma)
    arg = (s - q) / cfg.kappa
    val = float(np.mean(softplus(arg)))
    if not with_grads:
        return val
    sig = sigmoid(arg) / cfg.kappa
    d_s = sig / s.size
    if not stopgrad:
        d_s = d_s - np.sum(sig) / s.size * soft_quantile_grad(s, cfg.gamma)
    return val, d_s


def total_loss(head_params, monotone, ds, cfg: ObjectiveConfig, epoch=0, with_grads=False):
    """Composite objective on one dataset/batch.

    Returns (value, parts) or, with_grads, (value, parts, head_grads,
    monotone_grads) where the gradients are HeadParams / MonotoneMap shaped.
    """
    cfg.validate()
    nig, _risk, cache = head_mod.forward(head_params, ds, with_cache=True)
    y = ds.target_y
    stopgrad = epoch < cfg.stopgrad_epochs
    u = head_mod.epistemic_variance(nig)
    scores = np.abs(y - nig.mu)

    if cfg.mu_only:
        mse = float(np.mean((y - nig.mu) ** 2))
        parts = {"nig": mse, "evidence": 0.0, "prior": 0.0, "soft_conf": 0.0}
        if not with_grads:
            return mse, parts
        d_mu = 2.0 * (nig.mu - y) / y.size
        zeros = np.zeros_like(d_mu)
        head_grads = head_mod.backward(head_params, cache, d_mu, zeros, zeros, zeros)
        return mse, parts, head_grads, monotone.zeros_like()

    if not with_grads:
        l_nig = nig_nll(nig, y)
        l_evid = evidence_reg(nig.alpha)
        l_prior = prior_penalty(ds.prior_b, u, monotone, cfg)
        l_conf = soft_conf_loss(scores, cfg, stopgrad=stopgrad)
        total = (l_nig + cfg.lambda_evid * l_evid + cfg.lambda_prior * l_prior
                 + cfg.lambda_conf * l_conf)
        return total, {"nig": l_nig, "evidence": l_evid, "prior": l_prior, "soft_conf": l_conf}

    l_nig, (d_mu, d_nu, d_alpha, d_beta) = nig_nll(nig, y, with_grads=True)
    l_evid, d_alpha_evid = evidence_reg(nig.alpha, with_grads=True)
    l_prior, d_u, mono_grads = prior_penalty(ds.prior_b, u, monotone, cfg, with_grads=True)
    l_conf, d_s = soft_conf_loss(scores, cfg, stopgrad=stopgrad, with_grads=True)
    total = (l_nig + cfg.lambda_evid * l_evid + cfg.lambda_prior * l_prior
             + cfg.lambda_conf * l_conf)
    parts = {"nig": l_nig, "evidence": l_evid, "prior": l_prior, "soft_conf": l_conf}

    d_alpha = d_alpha + cfg.lambda_evid * d_alpha_evid
    # epistemic u = beta / (nu (alpha - 1)) feeding the hinge
    am1 = nig.alpha - 1.0
    d_u = cfg.lambda_prior * d_u
    d_nu = d_nu + d_u * (-nig.beta / (nig.nu ** 2 * am1))
    d_alpha = d_alpha + d_u * (-nig.beta / (nig.nu * am1 ** 2))
    d_beta = d_beta + d_u * (1.0 / (nig.nu * am1))
    # scores s = |y - mu|
    d_mu = d_mu + cfg.lambda_conf * d_s * (-np.sign(y - nig.mu))

    head_grads = head_mod.backward(head_params, cache, d_mu, d_nu, d_alpha, d_beta)
    mono_grads = mono_grads.from_vector(cfg.lambda_prior * mono_grads.to_vector())
    return total, parts, head_grads, mono_grads
