"""Message-passing evidential head.

Produces per-node Normal-Inverse-Gamma parameters (mu, nu, alpha, beta) and a
risk logit.  Forward and backward passes are written out explicitly; backward
consumes gradients w.r.t. the five constrained outputs and returns gradients
w.r.t. all weights (the vector-Jacobian contract used by the objective).
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .numerics import rng_stream, sigmoid, softplus

HEAD_VERSION = "calpro-head/1"


@dataclass(frozen=True)
class NIGParams:
    """Evidential output; invariants nu > 0, alpha > 1, beta > 0."""
    mu: np.ndarray
    nu: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def validate(self):
        if np.any(self.nu <= 0) or np.any(self.alpha <= 1) or np.any(self.beta <= 0):
            raise ValueError("NIG constraint violation")
        return self


@dataclass(frozen=True)
class HeadConfig:
    widths: tuple = (16, 32, 16)
    layer_norm: bool = False
    init_seed: int = 0

    def validate(self):
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be positive")
        return self


@dataclass
class HeadParams:
    """Per-layer self/message/bias weights plus a 5-channel readout."""
    layers: list                 # dicts with w_self, w_msg, b
    w_out: np.ndarray
    b_out: np.ndarray
    config: HeadConfig = field(default_factory=HeadConfig)
    feature_dim: int = 16

    def to_vector(self):
        parts = []
        for lay in self.layers:
            parts.extend([lay["w_self"].ravel(), lay["w_msg"].ravel(), lay["b"].ravel()])
        parts.extend([self.w_out.ravel(), self.b_out.ravel()])
        return np.concatenate(parts)

    def from_vector(self, vec):
        """New HeadParams with the same shapes, weights taken from vec."""
        vec = np.asarray(vec, dtype=float)
        layers = []
        pos = 0
        for lay in self.layers:
            new = {}
            for key in ("w_self", "w_msg", "b"):
                n = lay[key].size
                new[key] = vec[pos:pos + n].reshape(lay[key].shape).copy()
                pos += n
            layers.append(new)
        w_out = vec[pos:pos + self.w_out.size].reshape(self.w_out.shape).copy()
        pos += self.w_out.size
        b_out = vec[pos:pos + self.b_out.size].copy()
        pos += self.b_out.size
        if pos != vec.size:
            raise ValueError("vector length mismatch")
        return HeadParams(layers, w_out, b_out, self.config, self.feature_dim)

    def zeros_like(self):
        return self.from_vector(np.zeros(self.to_vector().size))


def init_head(config: HeadConfig, feature_dim) -> HeadParams:
    """Symmetric uniform init scaled by fan-in."""
    config.validate()
    rng = rng_stream(config.init_seed, 10)
    dims = [feature_dim] + list(config.widths)
    layers = []
    for din, dout in zip(dims[:-1], dims[1:]):
        s = 1.0 / np.sqrt(din)
        layers.append({
            "w_self": rng.uniform(-s, s, size=(din, dout)),
            "w_msg": rng.uniform(-s, s, size=(din, dout)),
            "b": np.zeros(dout),
        })
    s = 1.0 / np.sqrt(dims[-1])
    w_out = rng.uniform(-s, s, size=(dims[-1], 5))
    return HeadParams(layers, w_out, np.zeros(5), config, feature_dim)


def mean_adjacency(n_nodes, edges):
    """Row-normalized neighbor matrix; empty neighborhoods give zero rows."""
    if len(edges) == 0:
        return sparse.csr_matrix((n_nodes, n_nodes))
    e = np.asarray(edges, dtype=int)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    deg = np.bincount(rows, minlength=n_nodes).astype(float)
    inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0)
    vals = inv[rows]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_nodes, n_nodes))


def forward(params: HeadParams, ds, with_cache=False):
    """Evaluate the head on a dataset.

    Returns (NIGParams, risk_logits) or, with_cache, an extra cache dict for
    the backward pass.
    """
    if ds.features.shape[1] != params.feature_dim:
        raise ValueError(f"feature dim {ds.features.shape[1]} does not match head "
                         f"({params.feature_dim})")
    adj = mean_adjacency(ds.n_nodes, ds.edges)
    h = ds.features
    cache = {"adj": adj, "hs": [h], "zs": [], "ln": []}
    for lay in params.layers:
        m = adj @ h
        z = h @ lay["w_self"] + m @ lay["w_msg"] + lay["b"]
        if params.config.layer_norm:
            mean = z.mean(axis=1, keepdims=True)
            cen = z - mean
            var = (cen ** 2).mean(axis=1, keepdims=True)
            inv = 1.0 / np.sqrt(var + 1e-6)
            zn = cen * inv
            cache["ln"].append((cen, inv))
            z_post = zn
        else:
            cache["ln"].append(None)
            z_post = z
        cache["zs"].append(z_post)
        h = np.maximum(z_post, 0.0)
        cache["hs"].append(h)
    raw = h @ params.w_out + params.b_out
    cache["raw"] = raw
    # softplus underflows to 0 for very negative inputs; floor far enough
    # above zero that the strict constraints hold and downstream terms like
    # beta / (nu^2 (alpha - 1)) stay finite
    floor = 1e-10
    nig = NIGParams(
        mu=raw[:, 0],
        nu=np.maximum(softplus(raw[:, 1]), floor),
        alpha=np.maximum(1.0 + softplus(raw[:, 2]), 1.0 + floor),
        beta=np.maximum(softplus(raw[:, 3]), floor),
    )
    risk = raw[:, 4]
    if with_cache:
        return nig, risk, cache
    return nig, risk


def backward(params: HeadParams, cache, d_mu, d_nu, d_alpha, d_beta, d_risk=None):
    """Vector-Jacobian product: gradients of a scalar loss w.r.t. HeadParams
    given its gradients w.r.t. the constrained outputs."""
    raw = cache["raw"]
    n = raw.shape[0]
    d_raw = np.zeros_like(raw)
    d_raw[:, 0] = d_mu
    d_raw[:, 1] = d_nu * sigmoid(raw[:, 1])
    d_raw[:, 2] = d_alpha * sigmoid(raw[:, 2])
    d_raw[:, 3] = d_beta * sigmoid(raw[:, 3])
    if d_risk is not None:
        d_raw[:, 4] = d_risk
    grads = params.zeros_like()
    h_last = cache["hs"][-1]
    grads.w_out += h_last.T @ d_raw
    grads.b_out += d_raw.sum(axis=0)
    d_h = d_raw @ params.w_out.T
    adj = cache["adj"]
    adj_t = adj.T.tocsr()
    for li in reversed(range(len(params.layers))):
        lay = params.layers[li]
        z_post = cache["zs"][li]
        d_z = d_h * (z_post > 0)
        if params.config.layer_norm:
            cen, inv = cache["ln"][li]
            d = z_post.shape[1]
            zn = cen * inv
            # d/dz of parameter-free layer norm
            d_z = inv * (d_z - d_z.mean(axis=1, keepdims=True)
                         - zn * (d_z * zn).mean(axis=1, keepdims=True))
        h_in = cache["hs"][li]
        m_in = adj @ h_in
        g = grads.layers[li]
        g["w_self"] += h_in.T @ d_z
        g["w_msg"] += m_in.T @ d_z
        g["b"] += d_z.sum(axis=0)
        d_h = d_z @ lay["w_self"].T + adj_t @ (d_z @ lay["w_msg"].T)
    return grads


def predictive_variance(p: NIGParams):
    """Marginal predictive variance beta / (nu * (alpha - 1))."""
    return p.beta / (p.nu * (p.alpha - 1.0))


def epistemic_variance(p: NIGParams):
    """Variance of the mean under the NIG posterior."""
    return p.beta / (p.nu * (p.alpha - 1.0))


def aleatoric_variance(p: NIGParams):
    """Expected observation variance beta / (alpha - 1)."""
    return p.beta / (p.alpha - 1.0)


def risk_probability(logit):
    return sigmoid(logit)


def label_risk(ds, threshold=2.0):
    """True where the realized per-node error exceeds the risk threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return ds.target_y > threshold


def save_head(params: HeadParams, path):
    doc = {
        "version": HEAD_VERSION,
        "config": {"widths": list(params.config.widths),
                   "layer_norm": params.config.layer_norm,
                   "init_seed": params.config.init_seed},
        "feature_dim": params.feature_dim,
        "shapes": [[list(lay["w_self"].shape), list(lay["w_msg"].shape), len(lay["b"])]
                   for lay in params.layers],
        "weights": [float(v) for v in params.to_vector()],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_head(path) -> HeadParams:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed head file at byte offset {exc.pos}: {exc.msg}") from exc
    if doc.get("version") != HEAD_VERSION:
        raise ValueError(f"unsupported head version {doc.get('version')!r}, expected {HEAD_VERSION!r}")
    cfg = HeadConfig(widths=tuple(doc["config"]["widths"]),
                     layer_norm=doc["config"]["layer_norm"],
                     init_seed=doc["config"]["init_seed"])
    template = init_head(cfg, doc["feature_dim"])
    expected = [[list(lay["w_self"].shape), list(lay["w_msg"].shape), len(lay["b"])]
                for lay in template.layers]
    if doc["shapes"] != expected:
        raise ValueError("head config does not match stored weight shapes")
    return template.from_vector(np.array(doc["weights"], dtype=float))
