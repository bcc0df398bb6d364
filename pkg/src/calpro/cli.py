"""Command-line entry points.

Every subcommand reads an optional strict JSON config (unknown keys are
rejected), takes --seed / --out overrides, and writes its artifacts under the
output directory.  Reports embed the artifact version, a hash of the
effective config, and the seed; no wall-clock timestamps, so reruns are
byte-identical.  CALPRO_THREADS caps worker threads for seed fan-out.
"""

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields, replace

import numpy as np

from . import active as active_mod
from . import bounds as bounds_mod
from . import conformal as conf_mod
from . import datagen
from . import experiments as exp_mod
from . import head as head_mod
from . import metrics as metrics_mod
from . import trainer as trainer_mod
from .objective import ObjectiveConfig

REPORT_VERSION = "calpro-report/1"

EXPERIMENT_NAMES = ("calibration", "shift", "perturbation", "prior_corruption",
                    "efficiency", "bound_sweep")


def _load_config(path):
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SystemExit(f"error: malformed config at byte offset {exc.pos}: {exc.msg}")
    if not isinstance(cfg, dict):
        raise SystemExit("error: config must be a JSON object")
    return cfg


def _check_keys(cfg, allowed, where="config"):
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise SystemExit(f"error: unknown {where} keys: {', '.join(unknown)}")


def _dataclass_from(cls, cfg, where):
    names = {f.name for f in fields(cls)}
    _check_keys(cfg, names, where)
    kwargs = dict(cfg)
    for key in ("widths", "seeds", "ablations", "corruption_modes", "levels", "sizes"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def _generator_config(cfg, seed):
    gen = _dataclass_from(datagen.GeneratorConfig, cfg.get("generator", {}), "generator")
    if seed is not None:
        gen = replace(gen, seed=seed)
    return gen


def _train_config(cfg, seed):
    sub = dict(cfg.get("train", {}))
    obj = _dataclass_from(ObjectiveConfig, sub.pop("objective", {}), "objective")
    head = _dataclass_from(head_mod.HeadConfig, sub.pop("head", {}), "head")
    tcfg = _dataclass_from(trainer_mod.TrainConfig,
                           dict(sub, objective=obj, head=head), "train")
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    return tcfg


def _config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _stamp(doc, cfg, seed, artifact):
    doc = dict(doc)
    doc.update({"artifact": artifact, "version": REPORT_VERSION,
                "config_hash": _config_hash(cfg), "seed": seed})
    return doc


def _sanitize(obj):
    """Replace non-finite floats so artifacts stay strict JSON."""
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _sanitize(obj.item())
    return obj


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_sanitize(doc), fh, sort_keys=True, indent=1, allow_nan=False)
    return path


def _out_dir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _threads():
    raw = os.environ.get("CALPRO_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"error: CALPRO_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise SystemExit("error: CALPRO_THREADS must be >= 1")
    return n


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "kind", "split_mode"})
    gen = _generator_config(cfg, args.seed)
    maker = datagen.gen_tabular_dataset if cfg.get("kind") == "tabular" else datagen.gen_chain_dataset
    ds = maker(gen)
    out = _out_dir(args)
    datagen.save_dataset(ds, os.path.join(out, "dataset.json"))
    datagen.export_csv(ds, os.path.join(out, "dataset.csv"))
    _write_json(os.path.join(out, "gen_report.json"),
                _stamp({"n_nodes": ds.n_nodes, "n_edges": int(ds.edges.shape[0]),
                        "generator": datagen._cfg_dict(gen)},
                       cfg, gen.seed, "gen-data"))
    return 0


def _pipeline_pieces(cfg, seed, score_mode):
    """Shared generate/train/calibrate path for pipeline and bound."""
    gen = _generator_config(cfg, seed)
    tcfg = _train_config(cfg, seed)
    spec = exp_mod.ExperimentSpec(generator=gen, train=tcfg, score_mode=score_mode,
                                  seeds=(gen.seed,))
    run = exp_mod.train_config_run(spec, "full", gen.seed)
    calib = conf_mod.calibrate(run["params"], run["cal_ds"],
                               levels=conf_mod.DEFAULT_LEVELS, mode=score_mode)
    return gen, run, calib


def cmd_pipeline(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "train"})
    gen, run, calib = _pipeline_pieces(cfg, args.seed, args.score_mode)
    out = _out_dir(args)
    datagen.save_dataset(run["ds"], os.path.join(out, "dataset.json"))
    head_mod.save_head(run["params"], os.path.join(out, "head.json"))
    conf_mod.save_calibration(calib, os.path.join(out, "calibration.json"))
    report = metrics_mod.full_report(run["params"], calib, run["test_ds"])
    metrics_mod.export_calibration_curve(os.path.join(out, "calibration_curve.csv"),
                                         run["params"], calib, run["test_ds"])
    iv = conf_mod.intervals(run["params"], run["test_ds"], calib, 0.9)
    conf_mod.export_intervals_csv(os.path.join(out, "intervals.csv"),
                                  iv, run["test_ds"].target_y)
    _write_json(os.path.join(out, "report.json"),
                _stamp({"metrics": report.to_dict(),
                        "train_record": run["record"].to_dict(),
                        "score_mode": args.score_mode},
                       cfg, gen.seed, "pipeline"))
    return 0


def cmd_bound(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "train", "magnitudes", "tau", "delta"})
    gen, run, calib = _pipeline_pieces(cfg, args.seed, args.score_mode)
    tau = float(cfg.get("tau", 0.9))
    shifted = []
    for mag in cfg.get("magnitudes", [0.1, 0.25, 0.5, 1.0]):
        pert = datagen.perturb(run["ds"], "gaussian", float(mag), seed=gen.seed)
        shifted.append(pert.subset(pert.split_indices("test")))
    report = bounds_mod.bound_vs_empirical_sweep(
        run["params"], run["cal_ds"], calib, run["test_ds"], shifted,
        tau=tau, delta=float(cfg.get("delta", 0.05)))
    out = _out_dir(args)
    bounds_mod.export_bound_curve(os.path.join(out, "bound_curve.csv"), report)
    _write_json(os.path.join(out, "bound_report.json"),
                _stamp(report.to_dict(), cfg, gen.seed, "bound"))
    return 0


def cmd_ncal_sweep(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "train", "sizes", "tau", "delta", "magnitude"})
    gen, run, _calib = _pipeline_pieces(cfg, args.seed, args.score_mode)
    sizes = tuple(int(s) for s in cfg.get("sizes", (250, 500, 1000, 2000, 4000)))
    ds = run["ds"]
    pool_idx = np.concatenate([ds.split_indices("calibration"), ds.split_indices("train")])
    pool = ds.subset(pool_idx)
    pool = datagen.replace(pool, splits=tuple(["calibration"] * pool.n_nodes))
    pert = datagen.perturb(ds, "gaussian", float(cfg.get("magnitude", 0.5)), seed=gen.seed)
    rows = bounds_mod.ncal_sweep(run["params"], pool, run["test_ds"],
                                 pert.subset(pert.split_indices("test")),
                                 sizes=sizes, tau=float(cfg.get("tau", 0.9)),
                                 delta=float(cfg.get("delta", 0.05)),
                                 score_mode=args.score_mode)
    out = _out_dir(args)
    _write_json(os.path.join(out, "ncal_sweep.json"),
                _stamp({"rows": rows}, cfg, gen.seed, "ncal-sweep"))
    return 0


def cmd_active(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "train", "active", "seeds"})
    gen = _generator_config(cfg, args.seed)
    tcfg = _train_config(cfg, args.seed)
    sub = dict(cfg.get("active", {}))
    strategies = tuple(sub.pop("strategies", active_mod.STRATEGIES))
    acfg = _dataclass_from(active_mod.ActiveConfig, dict(sub, retrain=tcfg), "active")
    pool = datagen.gen_chain_dataset(gen)
    seeds = tuple(cfg.get("seeds", [gen.seed]))
    table = active_mod.compare_strategies(
        pool, [replace(acfg, strategy=s) for s in strategies], seeds)
    out = _out_dir(args)
    for s in strategies:
        curve = active_mod.run_active(pool, replace(acfg, strategy=s, seed=seeds[0]))
        active_mod.export_curve_csv(os.path.join(out, f"active_{s}.csv"), curve)
    _write_json(os.path.join(out, "active_report.json"),
                _stamp(table, cfg, gen.seed, "active"))
    return 0


def cmd_experiment(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "shifted_generator", "shift_perturbation", "train",
                      "ablations", "corruption_modes", "corruption_sigma", "seeds",
                      "levels", "score_mode", "magnitudes", "tau"})
    gen = _generator_config(cfg, args.seed)
    tcfg = _train_config(cfg, args.seed)
    spec = exp_mod.ExperimentSpec(
        name=args.name,
        generator=gen,
        shifted_generator=None if "shifted_generator" not in cfg
        else _dataclass_from(datagen.GeneratorConfig, cfg["shifted_generator"],
                             "shifted_generator"),
        shift_perturbation=cfg.get("shift_perturbation"),
        train=tcfg,
        ablations=tuple(cfg.get("ablations", ["full"])),
        corruption_modes=tuple(cfg.get("corruption_modes", ["shuffle", "invert", "noise"])),
        corruption_sigma=float(cfg.get("corruption_sigma", 0.2)),
        seeds=tuple(cfg.get("seeds", [gen.seed])),
        levels=tuple(cfg.get("levels", [0.8, 0.9, 0.95])),
        score_mode=cfg.get("score_mode", args.score_mode),
    )
    if args.name == "calibration":
        if spec.ablations == ("full",):
            spec = replace(spec, ablations=exp_mod.ABLATIONS)
        result = exp_mod.run_calibration_experiment(spec)
    elif args.name == "shift":
        if spec.shifted_generator is None and spec.shift_perturbation is None:
            spec = replace(spec, shift_perturbation={"kind": "gaussian", "magnitude": 0.5})
        result = exp_mod.run_shift_experiment(spec)
    elif args.name == "perturbation":
        result = exp_mod.run_perturbation_correlation(spec)
    elif args.name == "prior_corruption":
        result = exp_mod.run_prior_corruption(spec)
    elif args.name == "efficiency":
        result = exp_mod.run_efficiency_experiment(spec)
    elif args.name == "bound_sweep":
        result = exp_mod.run_bound_sweep(
            spec, magnitudes=tuple(cfg.get("magnitudes", [0.1, 0.25, 0.5, 1.0])),
            tau=float(cfg.get("tau", 0.9)))
    else:
        raise SystemExit(f"error: unknown experiment {args.name!r}")
    out = _out_dir(args)
    _write_json(os.path.join(out, f"experiment_{args.name}.json"),
                _stamp(result, cfg, gen.seed, f"experiment:{args.name}"))
    return 0


def cmd_corrupt_priors(args):
    cfg = _load_config(args.config)
    _check_keys(cfg, {"generator", "dataset", "mode", "sigma"})
    mode = cfg.get("mode", "shuffle")
    seed = args.seed if args.seed is not None else 0
    if "dataset" in cfg:
        ds = datagen.load_dataset(cfg["dataset"])
    else:
        ds = datagen.gen_chain_dataset(_generator_config(cfg, args.seed))
        seed = ds.metadata["config"]["seed"]
    corrupted = datagen.corrupt_priors(ds, mode, seed=seed,
                                       sigma=float(cfg.get("sigma", 0.2)))
    out = _out_dir(args)
    datagen.save_dataset(corrupted, os.path.join(out, "dataset_corrupted.json"))
    _write_json(os.path.join(out, "corrupt_report.json"),
                _stamp({"mode": mode, "n_nodes": corrupted.n_nodes}, cfg, seed,
                       "corrupt-priors"))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="calpro",
                                description="prior-aware evidential-conformal toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--score-mode", choices=("absolute", "normalized"),
                        default="normalized", help="nonconformity score mode")

    for name, fn in [("gen-data", cmd_gen_data), ("pipeline", cmd_pipeline),
                     ("bound", cmd_bound), ("ncal-sweep", cmd_ncal_sweep),
                     ("active", cmd_active), ("corrupt-priors", cmd_corrupt_priors)]:
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("experiment")
    sp.add_argument("name", choices=EXPERIMENT_NAMES)
    common(sp)
    sp.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _threads()
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
