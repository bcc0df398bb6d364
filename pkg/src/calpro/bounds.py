"""Shift-robustness bounds: local Lipschitz estimation of the nonconformity
score, the Gaussian PAC-Bayes complexity surrogate, the worst-case coverage
lower bound, calibration-set sizing, and bound-vs-empirical sweeps."""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import conformal as conf_mod
from . import head as head_mod
from . import metrics as metrics_mod

METRIC_DESCRIPTION = "euclidean distance on standardized (features + target) space"


@dataclass(frozen=True)
class PosteriorSurrogate:
    """Isotropic Gaussian posterior around the trained weights, isotropic
    zero-mean Gaussian prior."""
    center: np.ndarray
    sigma: float
    sigma_p: float = 1.0

    def validate(self):
        if self.sigma <= 0 or self.sigma_p <= 0:
            raise ValueError("posterior/prior scales must be positive")
        return self


@dataclass(frozen=True)
class BoundReport:
    kl: float
    lipschitz: float
    delta: float
    n_cal: int
    epsilons: tuple
    bounds: tuple             # clamped values
    raw_bounds: tuple         # pre-clamp values
    vacuous: tuple
    empirical_coverage: tuple
    conservative: tuple       # bound <= empirical per condition
    metric: str = METRIC_DESCRIPTION

    def to_dict(self):
        return {
            "kl": self.kl, "lipschitz": self.lipschitz, "delta": self.delta,
            "n_cal": self.n_cal, "epsilons": list(self.epsilons),
            "bounds": list(self.bounds), "raw_bounds": list(self.raw_bounds),
            "vacuous": list(self.vacuous),
            "empirical_coverage": list(self.empirical_coverage),
            "conservative": list(self.conservative), "metric": self.metric,
        }


def _embed(ds, mean=None, std=None):
    """(features + target) rows, optionally standardized by given stats."""
    x = np.column_stack([ds.features, ds.target_y])
    if mean is None:
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return (x - mean) / std, mean, std
    return (x - mean) / std


def estimate_lipschitz(head_params, cal_ds, k_neighbors=5, standardize=True,
                       score_mode="absolute"):
    """Max local slope of the nonconformity score over k-NN pairs on the
    calibration set.  Exact duplicate points are collapsed first, which
    realizes the zero-distance skip."""
    scores = conf_mod.nonconformity(head_params, cal_ds, score_mode)
    x = np.column_stack([cal_ds.features, cal_ds.target_y])
    if standardize:
        x, _, _ = _embed(cal_ds)
    uniq, inv = np.unique(x, axis=0, return_index=True)
    x = x[np.sort(inv)]
    s = scores[np.sort(inv)]
    n = x.shape[0]
    if n < 2:
        raise ValueError("all calibration pairs are zero-distance")
    k = min(k_neighbors, n - 1)
    tree = cKDTree(x)
    dist, nn = tree.query(x, k=k + 1)
    best = 0.0
    for i in range(n):
        for d, j in zip(dist[i][1:], nn[i][1:]):
            if d > 0:
                best = max(best, abs(s[i] - s[j]) / d)
    return float(best)


def kl_gaussian(surrogate: PosteriorSurrogate):
    """KL between N(w_hat, sigma^2 I) and N(0, sigma_p^2 I), closed form."""
    surrogate.validate()
    w = np.asarray(surrogate.center, dtype=float)
    s, sp = surrogate.sigma, surrogate.sigma_p
    d = w.size
    return float(d * (math.log(sp / s) + s * s / (2 * sp * sp) - 0.5)
                 + np.sum(w * w) / (2 * sp * sp))


def coverage_lower_bound(alpha, kl, delta, n_cal, lipschitz, epsilon):
    """Worst-case coverage 1 - alpha - sqrt((KL + log(1/delta)) / (2 n_cal))
    - L_s * epsilon, clamped to [0, 1 - alpha].

    Returns (clamped value, raw value, vacuous flag).
    """
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if n_cal < 1:
        raise ValueError("n_cal must be >= 1")
    raw = 1.0 - alpha - math.sqrt((kl + math.log(1.0 / delta)) / (2.0 * n_cal)) - lipschitz * epsilon
    clamped = min(max(raw, 0.0), 1.0 - alpha)
    return clamped, raw, raw <= 0.0


def required_ncal(target_delta, epsilon, lipschitz, kl, delta):
    """Smallest calibration size meeting a target worst-case degradation."""
    slack = target_delta - lipschitz * epsilon
    if slack <= 0:
        raise ValueError("infeasible: target degradation does not exceed the shift term")
    return int(math.ceil((kl + math.log(1.0 / delta)) / (2.0 * slack * slack)))


def choose_posterior_scale(w_hat, sigma_p=1.0, grid=None):
    """Posterior sigma minimizing the KL complexity term over a log grid."""
    if grid is None:
        grid = sigma_p * np.logspace(-2, 1, 31)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty sigma grid")
    kls = [kl_gaussian(PosteriorSurrogate(w_hat, float(s), sigma_p)) for s in grid]
    return float(grid[int(np.argmin(kls))])


def epsilon_proxy(ref_ds, shifted_ds, mean, std):
    """Mean standardized displacement between aligned node embeddings."""
    a = _embed(ref_ds, mean, std)
    b = _embed(shifted_ds, mean, std)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def bound_vs_empirical_sweep(head_params, cal_ds, calib, ref_test_ds, shifted_series,
                             tau=0.9, delta=0.05, sigma_p=1.0) -> BoundReport:
    """Bound value and empirical coverage per shift condition.

    shifted_series is a list of shifted test datasets aligned with
    ref_test_ds; the reference itself is included as the epsilon = 0
    condition.  Conditions are reported in increasing epsilon order.
    """
    if len(shifted_series) == 0:
        raise ValueError("empty shift series")
    _, mean, std = _embed(cal_ds)
    lip = estimate_lipschitz(head_params, cal_ds, score_mode=calib.score_mode)
    sigma = choose_posterior_scale(head_params.to_vector(), sigma_p)
    kl = kl_gaussian(PosteriorSurrogate(head_params.to_vector(), sigma, sigma_p))
    conditions = [(0.0, ref_test_ds)]
    for ds in shifted_series:
        conditions.append((epsilon_proxy(ref_test_ds, ds, mean, std), ds))
    conditions.sort(key=lambda t: t[0])
    eps_list, bnds, raws, vac, emp, cons = [], [], [], [], [], []
    for eps, ds in conditions:
        b, raw, v = coverage_lower_bound(1.0 - tau, kl, delta, calib.n_cal, lip, eps)
        iv = conf_mod.intervals(head_params, ds, calib, tau)
        cov = metrics_mod.coverage(iv, ds.target_y)
        eps_list.append(eps)
        bnds.append(b)
        raws.append(raw)
        vac.append(v)
        emp.append(cov)
        cons.append(b <= cov)
    return BoundReport(kl=kl, lipschitz=lip, delta=delta, n_cal=calib.n_cal,
                       epsilons=tuple(eps_list), bounds=tuple(bnds),
                       raw_bounds=tuple(raws), vacuous=tuple(vac),
                       empirical_coverage=tuple(emp), conservative=tuple(cons))


def ncal_sweep(head_params, cal_pool_ds, ref_test_ds, shifted_test_ds,
               sizes=(250, 500, 1000, 2000, 4000), tau=0.9, delta=0.05,
               score_mode="absolute", sigma_p=1.0):
    """Bound vs empirical shifted coverage for nested calibration subsets.

    Returns rows of {n_cal, bound, empirical, gap}.  Subsets are nested
    prefixes of the pool so empirical coverage varies smoothly with size.
    """
    if cal_pool_ds.n_nodes < max(sizes):
        raise ValueError(f"calibration pool too small for size {max(sizes)}")
    _, mean, std = _embed(cal_pool_ds)
    sigma = choose_posterior_scale(head_params.to_vector(), sigma_p)
    kl = kl_gaussian(PosteriorSurrogate(head_params.to_vector(), sigma, sigma_p))
    eps = epsilon_proxy(ref_test_ds, shifted_test_ds, mean, std)
    out = []
    for size in sizes:
        sub = cal_pool_ds.subset(np.arange(size))
        calib = conf_mod.calibrate(head_params, sub, levels=(tau,), mode=score_mode)
        lip = estimate_lipschitz(head_params, sub, score_mode=score_mode)
        b, raw, v = coverage_lower_bound(1.0 - tau, kl, delta, size, lip, eps)
        iv = conf_mod.intervals(head_params, shifted_test_ds, calib, tau)
        cov = metrics_mod.coverage(iv, shifted_test_ds.target_y)
        out.append({"n_cal": size, "bound": b, "raw_bound": raw, "vacuous": v,
                    "empirical": cov, "gap": abs(cov - b)})
    return out


def export_bound_curve(path, report: BoundReport):
    """CSV of (epsilon, bound, empirical)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "bound", "empirical_coverage"])
        for e, b, c in zip(report.epsilons, report.bounds, report.empirical_coverage):
            w.writerow([e, b, c])
