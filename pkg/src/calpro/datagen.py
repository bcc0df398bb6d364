"""Synthetic graph-structured regression data.

Chains of 3D points stand in for protein-like structures: a reference chain
plus a noised "predicted" chain, with the per-node displacement as the
regression target.  A tabular generator with covariate-dependent noise covers
the non-geometric case.  All generators are deterministic in (config, seed).
"""

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .numerics import rng_stream

DATASET_VERSION = "calpro-dataset/1"

GROUP_TAGS = ("helix-analog", "sheet-analog", "loop-analog")


@dataclass(frozen=True)
class Node:
    """Single-node view of a Dataset row."""
    features: np.ndarray
    prior_b: float
    target_y: float
    group_tag: str
    disorder_flag: bool


@dataclass(frozen=True)
class GeneratorConfig:
    n_chains: int = 12
    chain_length: int = 40
    feature_dim: int = 16
    ordered_noise_scale: float = 0.3
    disordered_noise_scale: float = 1.5
    informativeness_eta: float = 1.0
    prior_noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_chains < 1 or self.chain_length < 4:
            raise ValueError("need at least one chain of length >= 4")
        if self.feature_dim < 8:
            raise ValueError("feature_dim must be >= 8")
        if self.ordered_noise_scale <= 0 or self.disordered_noise_scale <= 0:
            raise ValueError("noise scales must be positive")
        if not 0.0 <= self.informativeness_eta <= 1.0:
            raise ValueError("informativeness_eta must be in [0, 1]")
        if self.informativeness_eta > 0 and self.disordered_noise_scale < self.ordered_noise_scale:
            raise ValueError("disordered_noise_scale must be >= ordered_noise_scale when eta > 0")
        if not 0.0 <= self.prior_noise <= 1.0:
            raise ValueError("prior_noise must be in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Immutable graph-structured regression corpus.

    features: (n, F); prior_b, target_y: (n,); edges: (m, 2) symmetric and
    deduplicated with i < j per row; splits: per-node tag in
    {train, calibration, test}; chain_coords: (n, 3) predicted coordinates or
    None; metadata carries generator echo, chain ids and reference coords.
    """
    features: np.ndarray
    prior_b: np.ndarray
    target_y: np.ndarray
    group_tags: tuple
    disorder_flags: np.ndarray
    edges: np.ndarray
    splits: tuple
    chain_coords: np.ndarray | None
    chain_ids: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.features.shape[0]

    def node(self, i):
        return Node(self.features[i], float(self.prior_b[i]), float(self.target_y[i]),
                    self.group_tags[i], bool(self.disorder_flags[i]))

    def split_indices(self, tag):
        return np.array([i for i, t in enumerate(self.splits) if t == tag], dtype=int)

    def subset(self, idx):
        """Induced sub-dataset on the given node indices (edges relabeled)."""
        idx = np.asarray(idx, dtype=int)
        pos = -np.ones(self.n_nodes, dtype=int)
        pos[idx] = np.arange(idx.size)
        keep = []
        if self.edges.size:
            for a, b in self.edges:
                if pos[a] >= 0 and pos[b] >= 0:
                    keep.append((pos[a], pos[b]))
        edges = np.array(keep, dtype=int).reshape(-1, 2)
        meta = dict(self.metadata)
        if "reference_coords" in meta:
            meta["reference_coords"] = np.asarray(meta["reference_coords"])[idx]
        return Dataset(
            features=self.features[idx],
            prior_b=self.prior_b[idx],
            target_y=self.target_y[idx],
            group_tags=tuple(self.group_tags[i] for i in idx),
            disorder_flags=self.disorder_flags[idx],
            edges=edges,
            splits=tuple(self.splits[i] for i in idx),
            chain_coords=None if self.chain_coords is None else self.chain_coords[idx],
            chain_ids=self.chain_ids[idx],
            metadata=meta,
        )

    def validate(self):
        n = self.n_nodes
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite features")
        if np.any(self.prior_b < 0) or np.any(self.prior_b > 1):
            raise ValueError("prior_b out of [0, 1]")
        if np.any(self.target_y < 0):
            raise ValueError("negative target_y")
        if self.edges.size:
            if np.any(self.edges < 0) or np.any(self.edges >= n):
                raise ValueError("edge index out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValueError("self-loop edge")
        for t in self.splits:
            if t not in ("train", "calibration", "test"):
                raise ValueError(f"bad split tag {t!r}")
        return self


def _dedupe_edges(pairs):
    """Canonicalize to sorted unique (i, j) rows with i < j."""
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=int)
    arr = np.asarray(pairs, dtype=int)
    arr = np.sort(arr, axis=1)
    arr = arr[arr[:, 0] != arr[:, 1]]
    return np.unique(arr, axis=0)


def _segment_layout(length, rng):
    """Contiguous segments of length 5-12 with cycling group tags; loop
    segments carry the disorder flag."""
    tags = []
    disorder = []
    pos = 0
    k = 0
    while pos < length:
        seg_len = min(int(rng.integers(5, 13)), length - pos)
        tag = GROUP_TAGS[int(rng.integers(0, 3))]
        dis = tag == "loop-analog" and rng.random() < 0.8
        tags.extend([tag] * seg_len)
        disorder.extend([dis] * seg_len)
        pos += seg_len
        k += 1
    return tags, np.array(disorder, dtype=bool)


def _chain_features(pred_coords, target_y, group_tags, feature_dim, rng):
    """Per-node features: local geometry from the predicted chain, segment
    one-hots, a noisy copy of the target magnitude, and noise padding.

    The rng governs only the feature noise; callers reuse the same stream
    across perturbations so feature noise stays fixed and measured shifts
    reflect geometry/target changes only.
    """
    n = pred_coords.shape[0]
    feats = np.zeros((n, feature_dim))
    step_fwd = np.zeros(n)
    step_fwd[:-1] = np.linalg.norm(np.diff(pred_coords, axis=0), axis=1)
    step_bwd = np.roll(step_fwd, 1)
    step_bwd[0] = 0.0
    curv = np.zeros(n)
    if n >= 3:
        v1 = pred_coords[1:-1] - pred_coords[:-2]
        v2 = pred_coords[2:] - pred_coords[1:-1]
        curv[1:-1] = np.linalg.norm(v2 - v1, axis=1)
    feats[:, 0] = step_fwd
    feats[:, 1] = step_bwd
    feats[:, 2] = curv
    for j, tag in enumerate(GROUP_TAGS):
        feats[:, 3 + j] = [t == tag for t in group_tags]
    feats[:, 6] = target_y + 0.5 * rng.standard_normal(n)
    feats[:, 7] = np.linalg.norm(pred_coords - pred_coords.mean(axis=0), axis=1)
    if feature_dim > 8:
        feats[:, 8:] = rng.standard_normal((n, feature_dim - 8))
    return feats


def gen_chain_dataset(cfg: GeneratorConfig) -> Dataset:
    """Chains of 3D points with ordered/disordered segments.

    The reference chain is a unit-step random walk; the predicted chain adds
    per-node Gaussian displacement whose scale is ordered_noise_scale on
    ordered nodes and interpolates toward disordered_noise_scale on
    disordered nodes as eta grows.  target_y is the realized displacement.
    """
    cfg.validate()
    rng = rng_stream(cfg.seed, 0)
    ref_list, pred_list, tags, dis_list, y_list, chain_ids = [], [], [], [], [], []
    for c in range(cfg.n_chains):
        n = cfg.chain_length
        steps = rng.standard_normal((n - 1, 3))
        steps /= np.linalg.norm(steps, axis=1, keepdims=True)
        ref = np.vstack([np.zeros(3), np.cumsum(steps, axis=0)])
        ref = ref + rng.standard_normal(3) * 5.0
        seg_tags, seg_dis = _segment_layout(n, rng)
        scale = cfg.ordered_noise_scale + cfg.informativeness_eta * (
            cfg.disordered_noise_scale - cfg.ordered_noise_scale) * seg_dis
        disp = scale[:, None] * rng.standard_normal((n, 3))
        pred = ref + disp
        ref_list.append(ref)
        pred_list.append(pred)
        tags.extend(seg_tags)
        dis_list.append(seg_dis)
        y_list.append(np.linalg.norm(disp, axis=1))
        chain_ids.extend([c] * n)
    ref_coords = np.vstack(ref_list)
    pred_coords = np.vstack(pred_list)
    disorder = np.concatenate(dis_list)
    target_y = np.concatenate(y_list)
    prior_b = (1.0 - cfg.prior_noise) * disorder + cfg.prior_noise * rng.random(disorder.size)
    prior_b = np.clip(prior_b, 0.0, 1.0)
    feats = _chain_features(pred_coords, target_y, tags, cfg.feature_dim,
                            rng_stream(cfg.seed, 5))
    ds = Dataset(
        features=feats,
        prior_b=prior_b,
        target_y=target_y,
        group_tags=tuple(tags),
        disorder_flags=disorder,
        edges=np.zeros((0, 2), dtype=int),
        splits=tuple(["train"] * len(tags)),
        chain_coords=pred_coords,
        chain_ids=np.array(chain_ids, dtype=int),
        metadata={"generator": "chain", "config": _cfg_dict(cfg),
                  "reference_coords": ref_coords},
    )
    ds = build_edges(ds, chain_window=5, spatial_radius=2.5)
    ds = split(ds, (0.6, 0.2, 0.2), mode="family_aware", seed=cfg.seed)
    return ds.validate()


def gen_tabular_dataset(cfg: GeneratorConfig) -> Dataset:
    """Tabular regression with covariate-dependent noise; the prior flags
    extreme covariate magnitude.  Edges are 5-NN in covariate space."""
    cfg.validate()
    rng = rng_stream(cfg.seed, 1)
    n = cfg.n_chains * cfg.chain_length
    d_cov = max(2, cfg.feature_dim - 2)
    x = rng.standard_normal((n, d_cov))
    extreme = np.max(np.abs(x), axis=1) > 1.7
    scale = cfg.ordered_noise_scale + cfg.informativeness_eta * (
        cfg.disordered_noise_scale - cfg.ordered_noise_scale) * extreme
    target_y = scale * np.abs(rng.standard_normal(n))
    prior_b = (1.0 - cfg.prior_noise) * extreme + cfg.prior_noise * rng.random(n)
    prior_b = np.clip(prior_b, 0.0, 1.0)
    feats = np.zeros((n, cfg.feature_dim))
    feats[:, :d_cov] = x
    feats[:, d_cov] = target_y + 0.5 * rng.standard_normal(n)
    feats[:, d_cov + 1:] = rng.standard_normal((n, cfg.feature_dim - d_cov - 1))
    tree = cKDTree(x)
    _, nn = tree.query(x, k=6)
    pairs = [(i, int(j)) for i in range(n) for j in nn[i][1:]]
    ds = Dataset(
        features=feats,
        prior_b=prior_b,
        target_y=target_y,
        group_tags=tuple("extreme" if e else "core" for e in extreme),
        disorder_flags=extreme,
        edges=_dedupe_edges(pairs),
        splits=tuple(["train"] * n),
        chain_coords=None,
        chain_ids=np.arange(n) // 50,
        metadata={"generator": "tabular", "config": _cfg_dict(cfg)},
    )
    ds = split(ds, (0.6, 0.2, 0.2), mode="random", seed=cfg.seed)
    return ds.validate()


def build_edges(ds: Dataset, chain_window=5, spatial_radius=2.5) -> Dataset:
    """Edge set = same-chain pairs within chain_window, plus all pairs within
    spatial_radius of each other (predicted coordinates)."""
    if chain_window < 1 or spatial_radius < 0:
        raise ValueError("chain_window must be >= 1 and spatial_radius >= 0")
    pairs = []
    ids = ds.chain_ids
    for c in np.unique(ids):
        idx = np.flatnonzero(ids == c)
        for a in range(idx.size):
            for w in range(1, chain_window + 1):
                if a + w < idx.size:
                    pairs.append((int(idx[a]), int(idx[a + w])))
    if spatial_radius > 0:
        if ds.chain_coords is None:
            raise ValueError("spatial edges require chain_coords")
        if math.isinf(spatial_radius):
            for c in np.unique(ids):
                idx = np.flatnonzero(ids == c)
                for a in range(idx.size):
                    for b in range(a + 1, idx.size):
                        pairs.append((int(idx[a]), int(idx[b])))
        else:
            tree = cKDTree(ds.chain_coords)
            pairs.extend(tree.query_pairs(spatial_radius))
    return replace(ds, edges=_dedupe_edges(pairs))


def perturb(ds: Dataset, kind, magnitude, seed=0) -> Dataset:
    """Perturb the predicted chain and recompute target_y as the displacement
    from the reference chain.  Features are rebuilt from the perturbed chain
    so downstream predictions see the perturbed geometry."""
    if ds.chain_coords is None or "reference_coords" not in ds.metadata:
        raise ValueError("perturb requires chain_coords and reference coordinates")
    if magnitude <= 0:
        raise ValueError("magnitude must be positive")
    rng = rng_stream(seed, 2)
    coords = np.array(ds.chain_coords)
    ids = ds.chain_ids
    if kind == "gaussian":
        coords = coords + magnitude * rng.standard_normal(coords.shape)
    elif kind == "segment_swap":
        n_swaps = max(1, int(round(magnitude)))
        runs = _loop_runs(ds)
        for _ in range(n_swaps):
            if len(runs) < 2:
                break
            i, j = rng.choice(len(runs), size=2, replace=False)
            a, b = runs[i], runs[j]
            L = min(len(a), len(b))
            a, b = a[:L], b[:L]
            coords[a], coords[b] = coords[b].copy(), coords[a].copy()
    elif kind == "block_rotate":
        c = int(rng.integers(0, np.max(ids) + 1))
        idx = np.flatnonzero(ids == c)
        blk_len = max(3, idx.size // 4)
        start = int(rng.integers(0, idx.size - blk_len + 1))
        blk = idx[start:start + blk_len]
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        rot = _rotation_matrix(axis, magnitude)
        centroid = coords[blk].mean(axis=0)
        coords[blk] = (coords[blk] - centroid) @ rot.T + centroid
    elif kind == "blur":
        half = max(1, int(round(magnitude)))
        out = np.array(coords)
        for c in np.unique(ids):
            idx = np.flatnonzero(ids == c)
            for k, i in enumerate(idx):
                lo = max(0, k - half)
                hi = min(idx.size, k + half + 1)
                out[i] = coords[idx[lo:hi]].mean(axis=0)
        coords = out
    else:
        raise ValueError(f"unknown perturbation kind {kind!r}")
    ref = np.asarray(ds.metadata["reference_coords"])
    target_y = np.linalg.norm(coords - ref, axis=1)
    fdim = ds.features.shape[1]
    feat_seed = ds.metadata.get("config", {}).get("seed", 0)
    feats = _chain_features(coords, target_y, ds.group_tags, fdim,
                            rng_stream(feat_seed, 5))
    meta = dict(ds.metadata)
    meta["perturbation"] = {"kind": kind, "magnitude": magnitude, "seed": seed}
    return replace(ds, chain_coords=coords, target_y=target_y, features=feats, metadata=meta)


def _loop_runs(ds):
    """Contiguous same-chain runs of loop-analog nodes."""
    runs = []
    cur = []
    for i in range(ds.n_nodes):
        if ds.group_tags[i] == "loop-analog" and (not cur or (ds.chain_ids[i] == ds.chain_ids[cur[-1]] and i == cur[-1] + 1)):
            cur.append(i)
        else:
            if len(cur) >= 3:
                runs.append(np.array(cur))
            cur = [i] if ds.group_tags[i] == "loop-analog" else []
    if len(cur) >= 3:
        runs.append(np.array(cur))
    return runs


def _rotation_matrix(axis, theta):
    """Rodrigues rotation about a unit axis."""
    ux, uy, uz = axis
    c, s = math.cos(theta), math.sin(theta)
    k = np.array([[0, -uz, uy], [uz, 0, -ux], [-uy, ux, 0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


def corrupt_priors(ds: Dataset, mode, seed=0, sigma=0.2) -> Dataset:
    """Replace prior_b per the corruption mode; all other fields untouched."""
    rng = rng_stream(seed, 3)
    b = np.array(ds.prior_b)
    if mode == "shuffle":
        b = b[rng.permutation(b.size)]
    elif mode == "invert":
        b = 1.0 - b
    elif mode == "noise":
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        b = np.clip(b + sigma * rng.standard_normal(b.size), 0.0, 1.0)
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    return replace(ds, prior_b=b)


def split(ds: Dataset, fractions, mode="family_aware", seed=0) -> Dataset:
    """Assign train/calibration/test tags.  family_aware assigns whole chains
    to one split; random assigns nodes independently."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative values summing to 1")
    rng = rng_stream(seed, 4)
    names = ("train", "calibration", "test")
    if mode == "family_aware":
        chains = np.unique(ds.chain_ids)
        order = rng.permutation(chains.size)
        counts = _allocate(chains.size, fractions)
        tag_by_chain = {}
        pos = 0
        for name, cnt in zip(names, counts):
            for k in order[pos:pos + cnt]:
                tag_by_chain[chains[k]] = name
            pos += cnt
        tags = tuple(tag_by_chain[c] for c in ds.chain_ids)
    elif mode == "random":
        order = rng.permutation(ds.n_nodes)
        counts = _allocate(ds.n_nodes, fractions)
        tags = [""] * ds.n_nodes
        pos = 0
        for name, cnt in zip(names, counts):
            for i in order[pos:pos + cnt]:
                tags[i] = name
            pos += cnt
        tags = tuple(tags)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return replace(ds, splits=tags)


def _allocate(total, fractions):
    """Largest-remainder allocation of total items to the three fractions."""
    raw = [f * total for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    rem = total - sum(counts)
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(rem):
        counts[order[i]] += 1
    return counts


def _cfg_dict(cfg):
    return {
        "n_chains": cfg.n_chains, "chain_length": cfg.chain_length,
        "feature_dim": cfg.feature_dim,
        "ordered_noise_scale": cfg.ordered_noise_scale,
        "disordered_noise_scale": cfg.disordered_noise_scale,
        "informativeness_eta": cfg.informativeness_eta,
        "prior_noise": cfg.prior_noise, "seed": cfg.seed,
    }


def save_dataset(ds: Dataset, path):
    """UTF-8 JSON, schema calpro-dataset/1."""
    meta = dict(ds.metadata)
    ref = meta.pop("reference_coords", None)
    doc = {
        "version": DATASET_VERSION,
        "nodes": [
            list(map(float, ds.features[i])) + [float(ds.prior_b[i]), float(ds.target_y[i]),
                                                ds.group_tags[i], bool(ds.disorder_flags[i])]
            for i in range(ds.n_nodes)
        ],
        "edges": [[int(a), int(b)] for a, b in ds.edges],
        "splits": list(ds.splits),
        "chain_coords": None if ds.chain_coords is None else [list(map(float, r)) for r in ds.chain_coords],
        "metadata": {
            **meta,
            "chain_ids": [int(c) for c in ds.chain_ids],
            "reference_coords": None if ref is None else [list(map(float, r)) for r in np.asarray(ref)],
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed dataset file at byte offset {exc.pos}: {exc.msg}") from exc
    if doc.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset schema version {doc.get('version')!r}, "
                         f"expected {DATASET_VERSION!r}")
    rows = doc["nodes"]
    fdim = len(rows[0]) - 4
    feats = np.array([r[:fdim] for r in rows], dtype=float)
    meta = dict(doc["metadata"])
    chain_ids = np.array(meta.pop("chain_ids"), dtype=int)
    ref = meta.pop("reference_coords", None)
    if ref is not None:
        meta["reference_coords"] = np.array(ref, dtype=float)
    ds = Dataset(
        features=feats,
        prior_b=np.array([r[fdim] for r in rows], dtype=float),
        target_y=np.array([r[fdim + 1] for r in rows], dtype=float),
        group_tags=tuple(r[fdim + 2] for r in rows),
        disorder_flags=np.array([r[fdim + 3] for r in rows], dtype=bool),
        edges=np.array(doc["edges"], dtype=int).reshape(-1, 2),
        splits=tuple(doc["splits"]),
        chain_coords=None if doc["chain_coords"] is None else np.array(doc["chain_coords"], dtype=float),
        chain_ids=chain_ids,
        metadata=meta,
    )
    return ds.validate()


def export_csv(ds: Dataset, path):
    """Flat per-node CSV for external metrics tooling."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "chain_id", "prior_b", "target_y", "group_tag",
                    "disorder_flag", "split"])
        for i in range(ds.n_nodes):
            w.writerow([i, int(ds.chain_ids[i]), float(ds.prior_b[i]), float(ds.target_y[i]),
                        ds.group_tags[i], int(ds.disorder_flags[i]), ds.splits[i]])
