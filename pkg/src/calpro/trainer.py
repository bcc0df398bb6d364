"""Minibatch training of the evidential head with adaptive-moment updates
and validation-ECE early stopping."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import head as head_mod
from .numerics import rng_stream
from .objective import MonotoneMap, ObjectiveConfig, total_loss

GRAD_CLIP_NORM = 10.0

VALIDATION_GRID = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    warmup_epochs: int = 0    # epochs ineligible for best-epoch selection
    seed: int = 0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    head: head_mod.HeadConfig = field(default_factory=head_mod.HeadConfig)

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("invalid training config")
        if self.patience < 0 or self.patience > self.max_epochs and self.max_epochs > 0:
            raise ValueError("patience must be in [0, max_epochs]")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        self.objective.validate()
        self.head.validate()
        return self


@dataclass
class TrainRecord:
    epochs: list                # per-epoch {epoch, loss, parts, val_ece}
    selected_epoch: int
    seed: int
    config_echo: dict
    wall_clock: float = 0.0     # excluded from serialized reports

    def to_dict(self):
        return {
            "epochs": self.epochs,
            "selected_epoch": self.selected_epoch,
            "seed": self.seed,
            "config_echo": self.config_echo,
        }


def validation_ece(head_params, val_ds, level_grid=VALIDATION_GRID):
    """Self-calibrated calibration-error proxy on the validation set.

    The validation nodes are split deterministically in half (even/odd
    order); normalized-mode quantiles fitted on one half are evaluated on the
    other, so the score reflects how well the predicted variance ranks the
    residuals without touching the held-out conformal set.
    """
    if val_ds.n_nodes == 0:
        raise ValueError("empty validation set")
    from . import conformal as conf_mod
    from .numerics import conformal_quantile
    nig, _ = head_mod.forward(head_params, val_ds)
    s = conf_mod.scores_from_nig(nig, val_ds.target_y, "normalized")
    half_a = s[0::2]
    half_b = s[1::2]
    if half_a.size == 0 or half_b.size == 0:
        half_a = half_b = s
    devs = []
    for tau in level_grid:
        q = conformal_quantile(half_a, 1.0 - tau)
        devs.append(abs(float(np.mean(half_b <= q)) - tau))
    return float(np.mean(devs))


def _batches(chain_ids, train_idx, batch_size, rng):
    """Minibatches of whole chains restricted to the given node indices."""
    chains = np.unique(chain_ids[train_idx])
    order = rng.permutation(chains.size)
    for start in range(0, chains.size, batch_size):
        sel = set(chains[order[start:start + batch_size]].tolist())
        yield np.array([i for i in train_idx if chain_ids[i] in sel], dtype=int)


def train(cfg: TrainConfig, train_ds, val_ds):
    """Adam training on total_loss with early stopping on validation ECE.

    Returns (HeadParams, MonotoneMap, TrainRecord) with the parameters from
    the best-ECE epoch.
    """
    cfg.validate()
    if train_ds.n_nodes == 0 or val_ds.n_nodes == 0:
        raise ValueError("train and validation datasets must be non-empty")
    t0 = time.perf_counter()
    head_cfg = head_mod.HeadConfig(widths=cfg.head.widths, layer_norm=cfg.head.layer_norm,
                                   init_seed=cfg.seed)
    params = head_mod.init_head(head_cfg, train_ds.features.shape[1])
    mono = MonotoneMap.init(hidden=cfg.objective.monotone_hidden, seed=cfg.seed)
    rng = rng_stream(cfg.seed, 20)

    theta = np.concatenate([params.to_vector(), mono.to_vector()])
    n_head = params.to_vector().size
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    train_idx = np.arange(train_ds.n_nodes)
    best_ece = np.inf
    best_theta = theta.copy()
    best_epoch = -1
    bad_epochs = 0
    records = []

    for epoch in range(cfg.max_epochs):
        losses = []
        parts_acc = {"nig": 0.0, "evidence": 0.0, "prior": 0.0, "soft_conf": 0.0}
        n_batches = 0
        for batch_idx in _batches(train_ds.chain_ids, train_idx, cfg.batch_size, rng):
            if batch_idx.size == 0:
                continue
            batch = train_ds.subset(batch_idx)
            val, parts, hg, mg = total_loss(params, mono, batch, cfg.objective,
                                            epoch=epoch, with_grads=True)
            if not np.isfinite(val):
                bad = [k for k, v in parts.items() if not np.isfinite(v)]
                raise FloatingPointError(f"non-finite training loss; offending terms: {bad}")
            g = np.concatenate([hg.to_vector(), mg.to_vector()])
            norm = float(np.linalg.norm(g))
            if norm > GRAD_CLIP_NORM:
                g *= GRAD_CLIP_NORM / norm
            step += 1
            m1 = beta1 * m1 + (1 - beta1) * g
            m2 = beta2 * m2 + (1 - beta2) * g * g
            mhat = m1 / (1 - beta1 ** step)
            vhat = m2 / (1 - beta2 ** step)
            theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
            params = params.from_vector(theta[:n_head])
            mono = mono.from_vector(theta[n_head:])
            losses.append(val)
            for k in parts_acc:
                parts_acc[k] += parts[k]
            n_batches += 1
        ece_val = validation_ece(params, val_ds)
        records.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "parts": {k: v / max(n_batches, 1) for k, v in parts_acc.items()},
            "val_ece": ece_val,
        })
        if epoch < cfg.warmup_epochs:
            continue
        if ece_val < best_ece - 1e-12:
            best_ece = ece_val
            best_theta = theta.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience > 0:
                break

    if best_epoch >= 0:
        params = params.from_vector(best_theta[:n_head])
        mono = mono.from_vector(best_theta[n_head:])
    record = TrainRecord(
        epochs=records,
        selected_epoch=best_epoch,
        seed=cfg.seed,
        config_echo=_config_echo(cfg),
        wall_clock=time.perf_counter() - t0,
    )
    return params, mono, record


def _config_echo(cfg: TrainConfig):
    return {
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "warmup_epochs": cfg.warmup_epochs,
        "seed": cfg.seed,
        "objective": {
            "gamma": cfg.objective.gamma, "kappa": cfg.objective.kappa,
            "lambda_evid": cfg.objective.lambda_evid,
            "lambda_prior": cfg.objective.lambda_prior,
            "lambda_conf": cfg.objective.lambda_conf,
            "stopgrad_epochs": cfg.objective.stopgrad_epochs,
            "prior_penalty_reduction": cfg.objective.prior_penalty_reduction,
            "monotone_hidden": cfg.objective.monotone_hidden,
        },
        "head": {"widths": list(cfg.head.widths), "layer_norm": cfg.head.layer_norm},
    }
