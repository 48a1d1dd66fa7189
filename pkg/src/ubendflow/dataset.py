"""Dataset generation, persistence and batch serving.

One dataset is a directory with two files:

  manifest.json  counts, grid frame, seeds, solver config (+hash), sampling
                 bounds, training-set standardization stats and the record
                 table (id, split, byte offset, distortion parameters)
  records.fbs    per record, five framed fields in fixed order:
                 binary, sdf, mask, vx, vy

Train/validation geometries are drawn under the ``restricted`` policy, test
geometries under ``unrestricted``.  Failed geometry builds or non-converged
solves are replaced by fresh draws; generation aborts when more than 20% of
all attempts fail.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import geometry, raster, solver
from .geometry import BendParams, DistortionBounds
from .raster import GridSpec, ScalarField, StandardizationStats

MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.fbs"
RECORD_FIELDS = ("binary", "sdf", "mask", "vx", "vy")
SPLITS = ("train", "val", "test")
_SPLIT_POLICY = {"train": "restricted", "val": "restricted", "test": "unrestricted"}
_MAX_RECORD_ATTEMPTS = 50
_MAX_FAILURE_RATE = 0.2


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    """One dataset record in physical units (velocities in m/s)."""

    id: str
    params: BendParams
    binary: ScalarField
    sdf: ScalarField
    mask: ScalarField
    vx: ScalarField
    vy: ScalarField
    split: str

    def validate(self) -> None:
        grids = {f.grid for f in (self.binary, self.sdf, self.mask, self.vx, self.vy)}
        if len(grids) != 1:
            raise DatasetError(f"{self.id}: fields disagree on grid metadata")
        m = self.mask.values
        if not np.all((m == 0.0) | (m == 1.0)):
            raise DatasetError(f"{self.id}: mask is not binary")
        if not np.array_equal(m, self.binary.values):
            raise DatasetError(f"{self.id}: mask differs from binary image")
        bg = m == 0.0
        for name in ("sdf", "vx", "vy"):
            if np.any(getattr(self, name).values[bg] != 0.0):
                raise DatasetError(f"{self.id}: {name} non-zero outside the fluid")
        if np.any(self.sdf.values[m == 1.0] <= 0.0):
            raise DatasetError(f"{self.id}: sdf not positive inside the fluid")


def _params_to_json(params: BendParams) -> dict:
    return {
        "inner_offsets": np.asarray(params.inner_offsets).tolist(),
        "outer_offsets": np.asarray(params.outer_offsets).tolist(),
        "width": params.width,
        "leg_length": params.leg_length,
        "seed": params.seed,
    }


def _params_from_json(obj: dict) -> BendParams:
    return BendParams(
        inner_offsets=np.array(obj["inner_offsets"], dtype=float),
        outer_offsets=np.array(obj["outer_offsets"], dtype=float),
        width=float(obj["width"]),
        leg_length=float(obj["leg_length"]),
        seed=int(obj["seed"]),
    )


def solver_config_hash(config: solver.SolverConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _param_seed(master_seed: int, split: str, index: int, attempt: int) -> int:
    return (master_seed * 1000003 + SPLITS.index(split) * 100003
            + index * 101 + attempt)


def _make_record(args):
    """Worker: draw, solve and rasterize one record; returns failure count."""
    master_seed, split, index, solver_cfg, grid, bounds = args
    failures = 0
    for attempt in range(_MAX_RECORD_ATTEMPTS):
        seed = _param_seed(master_seed, split, index, attempt)
        try:
            params = geometry.sample_params(seed, _SPLIT_POLICY[split], bounds)
            boundary = geometry.build_boundary(params)
            flow = solver.solve_flow(boundary, solver_cfg)
        except (geometry.GeometryError, solver.SolverError):
            failures += 1
            continue
        binary = raster.rasterize_binary(boundary, grid)
        sdf = raster.compute_sdf(boundary, grid)
        vx, vy = raster.resample_velocity(flow, grid, binary)
        arrays = (binary.values, sdf.values, binary.values.copy(),
                  vx.values, vy.values)
        return split, index, params, arrays, failures
    raise DatasetError(
        f"record {split}/{index}: no valid sample in {_MAX_RECORD_ATTEMPTS} attempts")


def generate_dataset(counts, seed: int, out_dir,
                     solver_config: solver.SolverConfig | None = None,
                     bounds: DistortionBounds | None = None,
                     n: int = 128, workers: int = 1,
                     grid: GridSpec | None = None) -> "Dataset":
    """Generate, solve and persist a full train/val/test dataset."""
    counts = dict(zip(SPLITS, counts)) if not isinstance(counts, dict) else counts
    for split in SPLITS:
        if counts.get(split, 0) < 1:
            raise DatasetError("every split needs at least one sample")
    if solver_config is None:
        solver_config = solver.SolverConfig()
    if bounds is None:
        bounds = DistortionBounds()
    bounds.validate()
    solver_config.validate()
    if grid is None:
        grid = raster.default_grid(bounds, n=n)
    grid.validate()

    jobs = [(seed, split, i, solver_config, grid, bounds)
            for split in SPLITS for i in range(counts[split])]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_make_record, jobs, chunksize=1))
    else:
        results = [_make_record(job) for job in jobs]

    failures = sum(r[4] for r in results)
    attempts = failures + len(results)
    if failures > _MAX_FAILURE_RATE * attempts:
        raise DatasetError(
            f"failure rate {failures}/{attempts} exceeds {_MAX_FAILURE_RATE:.0%}; "
            "solver or bounds look mis-tuned")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    with open(out_dir / RECORDS_NAME, "wb") as fh:
        for split, index, params, arrays, _ in results:
            offset = fh.tell()
            for values in arrays:
                raster.write_field(fh, raster.field_on(grid, values))
            records.append({
                "id": f"{split}-{index:05d}",
                "split": split,
                "offset": offset,
                "params": _params_to_json(params),
            })

    train_arrays = [r[3] for r in results if r[0] == "train"]
    stats = raster.compute_stats({
        "binary": [a[0] for a in train_arrays],
        "sdf": [a[1] for a in train_arrays],
        "vx": [a[3] for a in train_arrays],
        "vy": [a[4] for a in train_arrays],
    })

    manifest = {
        "counts": {s: counts[s] for s in SPLITS},
        "seed": seed,
        "grid": {"n": grid.n, "origin": list(grid.origin), "spacing": grid.spacing},
        "bounds": asdict(bounds),
        "solver_config": asdict(solver_config),
        "solver_config_hash": solver_config_hash(solver_config),
        "stats": stats.to_json(),
        "failed_attempts": failures,
        "records": records,
    }
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return Dataset.open(out_dir)


class Dataset:
    """Read-only view over a generated dataset directory."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.grid = GridSpec(
            n=int(manifest["grid"]["n"]),
            origin=tuple(manifest["grid"]["origin"]),
            spacing=float(manifest["grid"]["spacing"]),
        )
        self.stats = StandardizationStats.from_json(manifest["stats"])
        self.bounds = DistortionBounds(**manifest["bounds"])
        self._by_id = {r["id"]: r for r in manifest["records"]}

    @classmethod
    def open(cls, root) -> "Dataset":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        ds = cls(root, manifest)
        for split in SPLITS:
            have = len(ds.split_records(split))
            want = manifest["counts"][split]
            if have != want:
                raise DatasetError(f"{split}: manifest counts {want} records, found {have}")
        return ds

    def split_records(self, split: str) -> list[dict]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [r for r in self.manifest["records"] if r["split"] == split]

    def load_sample(self, record_or_id) -> Sample:
        rec = (self._by_id.get(record_or_id)
               if isinstance(record_or_id, str) else record_or_id)
        if rec is None:
            raise DatasetError(f"unknown record id {record_or_id!r}")
        fields = {}
        try:
            with open(self.root / RECORDS_NAME, "rb") as fh:
                fh.seek(rec["offset"])
                for name in RECORD_FIELDS:
                    fields[name] = raster.read_field(fh)
        except (OSError, raster.RasterError) as exc:
            raise DatasetError(f"record {rec['id']}: {exc}") from exc
        return Sample(id=rec["id"], params=_params_from_json(rec["params"]),
                      split=rec["split"], **fields)


def load_batches(dataset: Dataset, split: str, batch_size: int,
                 shuffle_seed: int, epoch: int = 0):
    """Yield lists of Samples covering the split exactly once, in an order
    deterministic for (shuffle_seed, epoch)."""
    if batch_size < 1:
        raise DatasetError("batch_size must be positive")
    records = dataset.split_records(split)
    order = np.random.default_rng(
        np.random.SeedSequence([shuffle_seed, epoch])).permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield [dataset.load_sample(records[k]) for k in order[start:start + batch_size]]


def restricted_region_report(dataset: Dataset) -> dict:
    """Per split, how many samples' fluid domains touch the restricted area."""
    rect = geometry.restricted_rectangle(dataset.bounds)
    xg, yg = dataset.grid.cell_centers()
    in_rect = ((xg >= rect[0]) & (xg <= rect[2])
               & (yg >= rect[1]) & (yg <= rect[3]))
    report = {}
    for split in SPLITS:
        count = 0
        for rec in dataset.split_records(split):
            sample = dataset.load_sample(rec)
            if np.any(sample.binary.values[in_rect] == 1.0):
                count += 1
        report[split] = count
    return report


def sample_intersects_restricted(dataset: Dataset, sample: Sample) -> bool:
    rect = geometry.restricted_rectangle(dataset.bounds)
    xg, yg = dataset.grid.cell_centers()
    in_rect = ((xg >= rect[0]) & (xg <= rect[2])
               & (yg >= rect[1]) & (yg <= rect[3]))
    return bool(np.any(sample.binary.values[in_rect] == 1.0))
