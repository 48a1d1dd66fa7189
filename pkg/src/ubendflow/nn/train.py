"""Training loop, evaluation and checkpoint serialization.

Training minimizes the mean of squared masked residuals in standardized
units; the reported metric is the destandardized masked RMSE in m/s.
Augmentation (if enabled) is applied in physical units, then each channel
is standardized with the training-set statistics of its own kind.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .. import augment as aug
from .. import dataset as ds_mod
from ..raster import StandardizationStats, destandardize_values, standardize_values
from .model import Model, ModelConfig, masked_rmse
from .optim import AdamState, adam_step

CHECKPOINT_MAGIC = b"FBNN"
HISTORY_HEADER = "epoch,train_loss,val_loss,val_rmse_mps"


class TrainError(RuntimeError):
    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 3e-4
    seed: int = 0
    augment: bool = True
    p_rotate: float = 0.44
    p_flip: float = 0.44
    dtype: str = "float32"

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise TrainError("epochs/batch_size/learning_rate out of range")
        aug.AugmentConfig(self.p_rotate, self.p_flip).validate()


def _batch_arrays(samples, stats: StandardizationStats, input_kind: str,
                  dtype, rng=None, aug_config=None):
    """Stack samples into (x, mask, target) arrays, standardized."""
    xs, masks, targets = [], [], []
    for sample in samples:
        if rng is not None and aug_config is not None and aug_config.enabled:
            sample, _ = aug.augment_sample(sample, rng, aug_config)
        xs.append(standardize_values(getattr(sample, input_kind).values,
                                     stats, input_kind))
        masks.append(sample.mask.values)
        targets.append(np.stack([
            standardize_values(sample.vx.values, stats, "vx"),
            standardize_values(sample.vy.values, stats, "vy")]))
    x = np.stack(xs)[:, None].astype(dtype)
    mask = np.stack(masks)[:, None].astype(dtype)
    target = np.stack(targets).astype(dtype)
    return x, mask, target


def _split_rmse_mps(model: Model, dataset: ds_mod.Dataset, split: str,
                    batch_size: int):
    """(standardized mean-squared loss, destandardized RMSE in m/s)."""
    stats = dataset.stats
    sq_std = sq_mps = msum = 0.0
    for batch in ds_mod.load_batches(dataset, split, batch_size, 0, 0):
        x, mask, target = _batch_arrays(batch, stats, model.config.input_kind,
                                        model.dtype)
        pred, _ = model.forward(x, mask)
        m = np.broadcast_to(mask, pred.shape)
        diff = (pred.astype(np.float64) - target) * m
        sq_std += float((diff * diff).sum())
        for ci, kind in enumerate(("vx", "vy")):
            d = (destandardize_values(pred[:, ci].astype(np.float64), stats, kind)
                 - destandardize_values(target[:, ci].astype(np.float64), stats, kind))
            sq_mps += float((d * d * mask[:, 0]).sum())
        msum += float(m.sum())
    if msum == 0.0:
        return 0.0, 0.0
    return sq_std / msum, float(np.sqrt(sq_mps / msum))


def train(model_config: ModelConfig, dataset: ds_mod.Dataset,
          train_config: TrainConfig | None = None):
    """Returns (model holding the best-validation weights, history rows)."""
    if train_config is None:
        train_config = TrainConfig()
    train_config.validate()
    model = Model(model_config, dtype=np.float64)
    if train_config.epochs == 0:
        return model, []
    model.astype(np.dtype(train_config.dtype))

    aug_config = aug.AugmentConfig(train_config.p_rotate, train_config.p_flip,
                                   enabled=train_config.augment)
    aug_rng = np.random.default_rng(
        np.random.SeedSequence([train_config.seed, 0xA46]))
    state = AdamState(learning_rate=train_config.learning_rate)
    history = []
    best_val = np.inf
    best_params = None
    for epoch in range(train_config.epochs):
        loss_sum = seen = 0
        for batch in ds_mod.load_batches(dataset, "train", train_config.batch_size,
                                         train_config.seed, epoch):
            x, mask, target = _batch_arrays(batch, dataset.stats,
                                            model.config.input_kind, model.dtype,
                                            aug_rng, aug_config)
            loss, grads, _ = model.loss_and_grads(x, mask, target)
            if not np.isfinite(loss):
                raise TrainError(f"training diverged at epoch {epoch}", history)
            adam_step(model.params, grads, state)
            loss_sum += loss * len(batch)
            seen += len(batch)
        val_loss, val_rmse = _split_rmse_mps(model, dataset, "val",
                                             train_config.batch_size)
        if not np.isfinite(val_loss):
            raise TrainError(f"validation loss diverged at epoch {epoch}", history)
        history.append({"epoch": epoch, "train_loss": loss_sum / seen,
                        "val_loss": val_loss, "val_rmse_mps": val_rmse})
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.astype(np.float64) for k, v in model.params.items()}
    model.astype(np.float64)
    model.params = best_params
    return model, history


def evaluate(model: Model, dataset: ds_mod.Dataset, split: str = "test",
             batch_size: int = 32) -> dict:
    """Pooled destandardized RMSE (m/s) plus a per-sample breakdown."""
    stats = dataset.stats
    per_sample = []
    sq = msum = 0.0
    for rec in dataset.split_records(split):
        sample = dataset.load_sample(rec)
        vx, vy = predict_sample(model, sample, stats)
        pred = np.stack([vx.values, vy.values])[None]
        target = np.stack([sample.vx.values, sample.vy.values])[None]
        mask = sample.mask.values[None, None]
        rmse = masked_rmse(pred, target, mask)
        per_sample.append({"id": sample.id, "rmse_mps": rmse})
        m = np.broadcast_to(mask, pred.shape)
        sq += float((((pred - target) * m) ** 2).sum())
        msum += float(m.sum())
    overall = float(np.sqrt(sq / msum)) if msum else 0.0
    return {"split": split, "rmse_mps": overall, "per_sample": per_sample}


def predict_sample(model: Model, sample, stats: StandardizationStats):
    """Predict one sample; returns (vx, vy) ScalarFields in m/s, masked."""
    from dataclasses import replace

    x, mask, _ = _batch_arrays([sample], stats, model.config.input_kind,
                               model.dtype)
    pred, _ = model.forward(x, mask)
    fields = []
    for ci, kind in enumerate(("vx", "vy")):
        values = destandardize_values(pred[0, ci].astype(np.float64), stats, kind)
        values *= sample.mask.values
        fields.append(replace(getattr(sample, kind), values=values))
    return tuple(fields)


def save_checkpoint(path, model: Model, stats: StandardizationStats) -> None:
    """FBNN container: magic, length-prefixed JSON header, f64 tensors in
    parameter declaration order."""
    header = json.dumps({"model": model.config.to_json(),
                         "stats": stats.to_json()}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for value in model.params.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, standardization stats)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise TrainError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        model = Model(ModelConfig.from_json(header["model"]), dtype=np.float64)
        for key, value in model.params.items():
            raw = fh.read(8 * value.size)
            if len(raw) != 8 * value.size:
                raise TrainError(f"{path}: truncated tensor {key}")
            model.params[key] = np.frombuffer(raw, dtype="<f8").reshape(
                value.shape).copy()
    return model, StandardizationStats.from_json(header["stats"])


def write_history_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(HISTORY_HEADER + "\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']:.9e},"
                     f"{row['val_loss']:.9e},{row['val_rmse_mps']:.9e}\n")


def read_history_csv(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != HISTORY_HEADER:
            raise TrainError(f"{path}: unexpected history header {header!r}")
        for line in fh:
            e, tl, vl, vr = line.strip().split(",")
            rows.append({"epoch": int(e), "train_loss": float(tl),
                         "val_loss": float(vl), "val_rmse_mps": float(vr)})
    return rows
