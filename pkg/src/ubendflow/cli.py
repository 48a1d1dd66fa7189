"""Command-line entry point.

Subcommands: generate, train, ablate, predict, evaluate, bench, maps.
Configuration comes from an optional flat ``key = value`` text file
(``--config``) plus ``key=value`` overrides on the command line; every run
writes the fully resolved configuration to ``run_manifest.json`` in its
output directory.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dataset as ds_mod, geometry, raster, solver
from .nn import model as nn_model
from .nn import train as nn_train


class ConfigError(ValueError):
    pass


# Table 1 / Table 2 reference values, printed as labeled context only.
REFERENCE_ABLATION = {
    ("sdf", False, False): 0.1071,
    ("sdf", True, False): 0.0820,
    ("sdf", False, True): 0.0673,
    ("sdf", True, True): 0.0350,
    ("binary", True, True): 0.009,
}
REFERENCE_TIMINGS = [
    ("reference: 1x surrogate, CPU", 1, 0.826),
    ("reference: 1x CFD, 4 CPU cores", 1, 12.6),
    ("reference: 900x CFD", 900, 11340.0),
]
ABLATION_VARIANTS = [
    ("sdf", False, False), ("sdf", True, False), ("sdf", False, True),
    ("sdf", True, True), ("binary", True, True),
]


def parse_config_file(path) -> dict:
    cfg = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def _coerce(key: str, raw, default):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return type(default)(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def resolve_config(defaults: dict, args) -> dict:
    """Merge defaults <- config file <- command-line overrides."""
    raw = {}
    if args.config:
        raw.update(parse_config_file(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = dict(defaults)
    for key, value in raw.items():
        if defaults[key] is None:
            cfg[key] = value
        else:
            cfg[key] = _coerce(key, value, defaults[key])
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")
    return cfg


def _write_run_manifest(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, "config": cfg}
    with open(out_dir / "run_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _open_dataset(cfg) -> ds_mod.Dataset:
    return ds_mod.Dataset.open(cfg["dataset"])


def _load_checkpoint(cfg):
    return nn_train.load_checkpoint(cfg["checkpoint"])


# ---------------------------------------------------------------- generate

GENERATE_DEFAULTS = {
    "out": None, "preset": "desk", "train": 0, "val": 0, "test": 0,
    "n": 0, "seed": 0, "workers": 1, "grid_resolution": 12,
}
_PRESETS = {"desk": (300, 60, 60, 64), "paper": (4500, 900, 900, 128)}


def cmd_generate(cfg) -> int:
    if cfg["preset"] not in _PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    ptr, pva, pte, pn = _PRESETS[cfg["preset"]]
    counts = (cfg["train"] or ptr, cfg["val"] or pva, cfg["test"] or pte)
    n = cfg["n"] or pn
    out = Path(cfg["out"])
    _write_run_manifest(out, "generate", dict(cfg, train=counts[0],
                                              val=counts[1], test=counts[2], n=n))
    solver_cfg = solver.SolverConfig(grid_resolution=cfg["grid_resolution"])
    ds = ds_mod.generate_dataset(counts, seed=cfg["seed"], out_dir=out,
                                 solver_config=solver_cfg, n=n,
                                 workers=cfg["workers"])
    report = ds_mod.restricted_region_report(ds)
    print(f"generated {sum(counts)} samples at n={n} in {out}")
    print(f"restricted-region contact per split: {report}")
    return 0


# ------------------------------------------------------------------- train

TRAIN_DEFAULTS = {
    "dataset": None, "out": None, "input": "sdf", "residual": True,
    "augment": True, "epochs": 100, "batch_size": 32, "lr": 3e-4,
    "seed": 0, "dtype": "float32",
}


def _train_one(ds, cfg, input_kind, residual, augment, seed):
    mcfg = nn_model.default_config(n=ds.grid.n, input_kind=input_kind,
                                   use_residual=residual, init_seed=seed)
    tcfg = nn_train.TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                                learning_rate=cfg["lr"], seed=seed,
                                augment=augment, dtype=cfg["dtype"])
    return nn_train.train(mcfg, ds, tcfg)


def cmd_train(cfg) -> int:
    if cfg["input"] not in ("sdf", "binary"):
        raise ConfigError(f"input must be sdf or binary, got {cfg['input']!r}")
    ds = _open_dataset(cfg)
    out = Path(cfg["out"])
    _write_run_manifest(out, "train", cfg)
    model, history = _train_one(ds, cfg, cfg["input"], cfg["residual"],
                                cfg["augment"], cfg["seed"])
    nn_train.save_checkpoint(out / "checkpoint.fbnn", model, ds.stats)
    nn_train.write_history_csv(out / "history.csv", history)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs; "
              f"final val RMSE {last['val_rmse_mps']:.4f} m/s")
    result = nn_train.evaluate(model, ds, "test", cfg["batch_size"])
    print(f"test RMSE {result['rmse_mps']:.4f} m/s")
    return 0


# ------------------------------------------------------------------ ablate

ABLATE_DEFAULTS = dict(TRAIN_DEFAULTS)
for _k in ("input", "residual", "augment"):
    ABLATE_DEFAULTS.pop(_k)


def cmd_ablate(cfg) -> int:
    ds = _open_dataset(cfg)
    out = Path(cfg["out"])
    _write_run_manifest(out, "ablate", cfg)
    rows = []
    for input_kind, residual, augment in ABLATION_VARIANTS:
        label = (f"{'SDF' if input_kind == 'sdf' else 'BIG'}/"
                 f"{'RC' if residual else 'noRC'}/{'DA' if augment else 'noDA'}")
        try:
            model, _ = _train_one(ds, cfg, input_kind, residual, augment,
                                  cfg["seed"])
            rmse = nn_train.evaluate(model, ds, "test", cfg["batch_size"])["rmse_mps"]
            note = ""
        except nn_train.TrainError as exc:
            rmse, note = float("nan"), f"diverged: {exc}"
        rows.append({
            "label": label, "input_kind": input_kind, "use_residual": residual,
            "use_augmentation": augment, "test_rmse_mps": rmse,
            "reference_rmse_mps": REFERENCE_ABLATION[(input_kind, residual, augment)],
            "note": note,
        })
        print(f"{label:>14}: measured {rmse:.4f} m/s "
              f"(reference {rows[-1]['reference_rmse_mps']} m/s) {note}")
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("label,input_kind,use_residual,use_augmentation,"
                 "test_rmse_mps,reference_rmse_mps,note\n")
        for r in rows:
            fh.write(f"{r['label']},{r['input_kind']},{int(r['use_residual'])},"
                     f"{int(r['use_augmentation'])},{r['test_rmse_mps']:.6f},"
                     f"{r['reference_rmse_mps']},{r['note']}\n")
    return 0


# ----------------------------------------------------------------- predict

PREDICT_DEFAULTS = {"dataset": None, "checkpoint": None, "out": None, "id": None}


def cmd_predict(cfg) -> int:
    ds = _open_dataset(cfg)
    model, stats = _load_checkpoint(cfg)
    out = Path(cfg["out"])
    _write_run_manifest(out, "predict", cfg)
    sample = ds.load_sample(cfg["id"])
    vx, vy = nn_train.predict_sample(model, sample, stats)
    for name, field in (("vx", vx), ("vy", vy)):
        with open(out / f"{sample.id}_{name}.fbs", "wb") as fh:
            raster.write_field(fh, field)
        raster.write_pgm(out / f"{sample.id}_{name}.pgm", field.values)
    rmse = nn_model.masked_rmse(
        np.stack([vx.values, vy.values])[None],
        np.stack([sample.vx.values, sample.vy.values])[None],
        sample.mask.values[None, None])
    print(f"{sample.id}: prediction RMSE {rmse:.4f} m/s")
    return 0


# ---------------------------------------------------------------- evaluate

EVALUATE_DEFAULTS = {"dataset": None, "checkpoint": None, "out": None,
                     "split": "test"}


def cmd_evaluate(cfg) -> int:
    ds = _open_dataset(cfg)
    model, stats = _load_checkpoint(cfg)
    out = Path(cfg["out"])
    _write_run_manifest(out, "evaluate", cfg)
    result = nn_train.evaluate(model, ds, cfg["split"])
    intersecting = {
        r["id"]: ds_mod.sample_intersects_restricted(ds, ds.load_sample(r["id"]))
        for r in result["per_sample"]}
    with open(out / "evaluation.csv", "w", encoding="utf-8") as fh:
        fh.write("id,rmse_mps,intersects_restricted\n")
        for row in result["per_sample"]:
            fh.write(f"{row['id']},{row['rmse_mps']:.6f},"
                     f"{int(intersecting[row['id']])}\n")
    print(f"{cfg['split']} RMSE {result['rmse_mps']:.4f} m/s "
          f"({len(result['per_sample'])} samples)")
    probe = generalization_probe(ds, model, stats, cfg["split"])
    for key in ("intersecting", "non_intersecting"):
        group = probe[key]
        print(f"  {key.replace('_', '-')}: n={group['count']}, "
              f"RMSE {group['rmse_mps']:.4f} m/s")
    with open(out / "generalization.json", "w", encoding="utf-8") as fh:
        json.dump(probe, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return 0


def generalization_probe(ds, model, stats, split="test") -> dict:
    """RMSE split by whether a sample's fluid domain touches the region that
    was off limits while drawing the training geometries."""
    groups = {True: [0.0, 0.0, 0], False: [0.0, 0.0, 0]}
    for rec in ds.split_records(split):
        sample = ds.load_sample(rec)
        vx, vy = nn_train.predict_sample(model, sample, stats)
        mask = sample.mask.values
        d = ((vx.values - sample.vx.values) ** 2
             + (vy.values - sample.vy.values) ** 2) * mask
        key = ds_mod.sample_intersects_restricted(ds, sample)
        groups[key][0] += float(d.sum())
        groups[key][1] += 2.0 * float(mask.sum())
        groups[key][2] += 1
    out = {}
    for key, name in ((True, "intersecting"), (False, "non_intersecting")):
        sq, msum, count = groups[key]
        out[name] = {"count": count,
                     "rmse_mps": float(np.sqrt(sq / msum)) if msum else 0.0}
    return out


# ------------------------------------------------------------------- bench

BENCH_DEFAULTS = {"dataset": None, "checkpoint": None, "out": None, "k": 10}


def cmd_bench(cfg) -> int:
    ds = _open_dataset(cfg)
    model, stats = _load_checkpoint(cfg)
    out = Path(cfg["out"])
    _write_run_manifest(out, "bench", cfg)
    if cfg["k"] < 1:
        raise ConfigError("k must be at least 1")
    records = ds.split_records("test")
    records = [records[i % len(records)] for i in range(cfg["k"])]
    samples = [ds.load_sample(r) for r in records]

    t0 = time.perf_counter()
    for sample in samples:
        nn_train.predict_sample(model, sample, stats)
    t_unbatched = time.perf_counter() - t0

    xs, masks = [], []
    for sample in samples:
        xs.append(raster.standardize_values(
            getattr(sample, model.config.input_kind).values, stats,
            model.config.input_kind))
        masks.append(sample.mask.values)
    x = np.stack(xs)[:, None]
    mask = np.stack(masks)[:, None]
    t0 = time.perf_counter()
    model.forward(x.astype(model.dtype), mask.astype(model.dtype))
    t_batched = time.perf_counter() - t0

    solver_cfg = solver.SolverConfig(**ds.manifest["solver_config"])
    t0 = time.perf_counter()
    for sample in samples:
        boundary = geometry.build_boundary(sample.params)
        solver.solve_flow(boundary, solver_cfg)
    t_solver = time.perf_counter() - t0

    rows = [
        ("surrogate, one-by-one", cfg["k"], t_unbatched),
        ("surrogate, one batch", cfg["k"], t_batched),
        ("solver, one-by-one", cfg["k"], t_solver),
    ]
    speedup = (t_solver / cfg["k"]) / (t_unbatched / cfg["k"])
    with open(out / "timing.csv", "w", encoding="utf-8") as fh:
        fh.write("label,evaluations,wall_time_s,per_eval_s\n")
        for label, k, wall in rows + REFERENCE_TIMINGS:
            fh.write(f"{label},{k},{wall:.6f},{wall / k:.6f}\n")
    for label, k, wall in rows:
        print(f"{label}: {wall:.3f} s total, {wall / k:.4f} s per evaluation")
    for label, k, wall in REFERENCE_TIMINGS:
        print(f"{label}: {wall} s total, {wall / k:.4f} s per evaluation")
    print(f"measured speed-up (solver / surrogate, per evaluation): {speedup:.1f}x")
    return 0


# -------------------------------------------------------------------- maps

MAPS_DEFAULTS = {"dataset": None, "checkpoint": None, "out": None,
                 "split": "test", "count": 4}


def cmd_maps(cfg) -> int:
    ds = _open_dataset(cfg)
    model, stats = _load_checkpoint(cfg)
    out = Path(cfg["out"])
    _write_run_manifest(out, "maps", cfg)
    records = ds.split_records(cfg["split"])[:cfg["count"]]
    for rec in records:
        sample = ds.load_sample(rec)
        pvx, pvy = nn_train.predict_sample(model, sample, stats)
        panels = {
            "vx": (sample.vx.values, pvx.values),
            "vy": (sample.vy.values, pvy.values),
            "magnitude": (np.hypot(sample.vx.values, sample.vy.values),
                          np.hypot(pvx.values, pvy.values)),
        }
        for name, (truth, pred) in panels.items():
            base = out / f"{sample.id}_{name}"
            raster.write_pgm(f"{base}_truth.pgm", truth)
            raster.write_pgm(f"{base}_pred.pgm", pred)
            raster.write_pgm(f"{base}_absdiff.pgm", np.abs(pred - truth))
    print(f"wrote error maps for {len(records)} samples to {out}")
    return 0


# -------------------------------------------------------------------- main

_COMMANDS = {
    "generate": (cmd_generate, GENERATE_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "ablate": (cmd_ablate, ABLATE_DEFAULTS),
    "predict": (cmd_predict, PREDICT_DEFAULTS),
    "evaluate": (cmd_evaluate, EVALUATE_DEFAULTS),
    "bench": (cmd_bench, BENCH_DEFAULTS),
    "maps": (cmd_maps, MAPS_DEFAULTS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ubendflow",
        description="U-bend channel flow dataset generation and surrogate training")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, defaults) in _COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help=f"overrides; keys: {', '.join(sorted(defaults))}")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func, defaults = _COMMANDS[args.command]
    try:
        cfg = resolve_config(defaults, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return func(cfg)
    except (ConfigError, geometry.GeometryError, raster.RasterError,
            nn_model.NNError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ds_mod.DatasetError, solver.SolverError, nn_train.TrainError,
            OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
