"""Encoder-decoder network with a dense bottleneck and two decoder branches.

The encoder is a stack of strided convolutions feeding a dense bottleneck;
after the bottleneck the decoder splits into two branches (one per velocity
component), each a dense layer followed by transposed convolutions.  With
``use_residual`` the activation of the first convolution is added to the
output of the second-to-last transposed convolution of each branch, which
mirrors it in shape.  Branch outputs are multiplied elementwise by the
binary fluid mask.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import ops


class NNError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    kernel: int
    stride: int
    padding: int


@dataclass(frozen=True)
class ModelConfig:
    input_kind: str = "sdf"  # "sdf" or "binary"
    n: int = 128
    encoder: tuple = (
        LayerSpec(64, 8, 4, 2), LayerSpec(128, 4, 2, 1), LayerSpec(256, 4, 2, 1))
    bottleneck_width: int = 1024
    decoder: tuple = (
        LayerSpec(128, 4, 2, 1), LayerSpec(64, 4, 2, 1), LayerSpec(1, 8, 4, 2))
    use_residual: bool = True
    init_seed: int = 0

    def validate(self) -> None:
        if self.input_kind not in ("sdf", "binary"):
            raise NNError(f"unknown input_kind {self.input_kind!r}")
        if self.n < 8 or self.bottleneck_width < 1:
            raise NNError("grid size and bottleneck width must be sensible")
        if len(self.encoder) < 2 or len(self.decoder) < 2:
            raise NNError("need at least two encoder and two decoder layers")
        if self.decoder[-1].filters != 1:
            raise NNError("final decoder layer must emit a single channel")

    def to_json(self) -> dict:
        d = asdict(self)
        d["encoder"] = [list(asdict(s).values()) for s in self.encoder]
        d["decoder"] = [list(asdict(s).values()) for s in self.decoder]
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["encoder"] = tuple(LayerSpec(*s) for s in obj["encoder"])
        obj["decoder"] = tuple(LayerSpec(*s) for s in obj["decoder"])
        return cls(**obj)


def default_config(n: int = 128, input_kind: str = "sdf",
                   use_residual: bool = True, init_seed: int = 0) -> ModelConfig:
    return ModelConfig(input_kind=input_kind, n=n, use_residual=use_residual,
                       init_seed=init_seed)


def tiny_config(n: int = 16, use_residual: bool = False,
                init_seed: int = 0) -> ModelConfig:
    """Small two-level ladder for gradient checks and fast tests."""
    return ModelConfig(
        input_kind="sdf", n=n,
        encoder=(LayerSpec(4, 4, 2, 1), LayerSpec(8, 4, 2, 1)),
        bottleneck_width=8,
        decoder=(LayerSpec(4, 4, 2, 1), LayerSpec(1, 4, 2, 1)),
        use_residual=use_residual, init_seed=init_seed)


BRANCHES = ("vx", "vy")


def _shape_ladder(config: ModelConfig):
    """Per-layer output shapes; raises on any inconsistency."""
    enc_shapes = []
    c, h = 1, config.n
    for spec in config.encoder:
        h = ops.conv_out_size(h, spec.kernel, spec.stride, spec.padding)
        c = spec.filters
        enc_shapes.append((c, h, h))
    if h < 4:
        raise NNError(f"encoder output spatial size {h} < 4")
    dec_shapes = []
    for spec in config.decoder:
        h = ops.deconv_out_size(h, spec.kernel, spec.stride, spec.padding)
        c = spec.filters
        dec_shapes.append((c, h, h))
    if dec_shapes[-1] != (1, config.n, config.n):
        raise NNError(f"decoder ends at {dec_shapes[-1]}, expected (1, {config.n}, {config.n})")
    if config.use_residual:
        target = dec_shapes[len(config.decoder) - 2]
        if target != enc_shapes[0]:
            raise NNError(
                f"residual shapes differ: first conv {enc_shapes[0]} vs "
                f"target deconv {target}")
    return enc_shapes, dec_shapes


class Model:
    """Network parameters plus forward/backward passes.

    Parameters live in a name -> array dict whose iteration order is the
    checkpoint declaration order.
    """

    def __init__(self, config: ModelConfig, dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.enc_shapes, self.dec_shapes = _shape_ladder(config)
        self.enc_flat = int(np.prod(self.enc_shapes[-1]))
        self.residual_index = len(config.decoder) - 2
        self.params = self._init_params()

    def _init_params(self) -> dict:
        rng = np.random.default_rng(self.config.init_seed)

        def uniform(shape, fan_in):
            limit = np.sqrt(1.0 / fan_in)
            return rng.uniform(-limit, limit, size=shape).astype(self.dtype)

        params = {}
        cin = 1
        for i, spec in enumerate(self.config.encoder):
            params[f"enc{i}_w"] = uniform(
                (spec.filters, cin, spec.kernel, spec.kernel),
                cin * spec.kernel * spec.kernel)
            params[f"enc{i}_b"] = np.zeros(spec.filters, dtype=self.dtype)
            cin = spec.filters
        params["bottleneck_w"] = uniform(
            (self.enc_flat, self.config.bottleneck_width), self.enc_flat)
        params["bottleneck_b"] = np.zeros(self.config.bottleneck_width, dtype=self.dtype)
        for branch in BRANCHES:
            params[f"{branch}_dense_w"] = uniform(
                (self.config.bottleneck_width, self.enc_flat),
                self.config.bottleneck_width)
            params[f"{branch}_dense_b"] = np.zeros(self.enc_flat, dtype=self.dtype)
            cin = self.enc_shapes[-1][0]
            for i, spec in enumerate(self.config.decoder):
                params[f"{branch}_dec{i}_w"] = uniform(
                    (cin, spec.filters, spec.kernel, spec.kernel),
                    cin * spec.kernel * spec.kernel)
                params[f"{branch}_dec{i}_b"] = np.zeros(spec.filters, dtype=self.dtype)
                cin = spec.filters
        return params

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        return self

    def forward(self, x: np.ndarray, mask: np.ndarray):
        """x, mask: (N, 1, n, n).  Returns masked (N, 2, n, n) plus cache."""
        n_batch = x.shape[0]
        if x.shape != (n_batch, 1, self.config.n, self.config.n):
            raise NNError(f"input shape {x.shape} does not match config n={self.config.n}")
        if mask.shape != x.shape:
            raise NNError("mask shape must match input shape")
        p = self.params
        h = np.ascontiguousarray(x, dtype=self.dtype)
        mask = np.ascontiguousarray(mask, dtype=self.dtype)
        cache = {"x_shape": x.shape, "mask": mask, "enc": []}
        for i, spec in enumerate(self.config.encoder):
            y, cols = ops.conv2d_forward(h, p[f"enc{i}_w"], p[f"enc{i}_b"],
                                         spec.stride, spec.padding)
            a = ops.relu(y)
            cache["enc"].append((h.shape, cols, a))
            h = a
        conv1_out = cache["enc"][0][2]
        flat = h.reshape(n_batch, -1)
        z = ops.dense(flat, p["bottleneck_w"], p["bottleneck_b"])
        zb = ops.relu(z)
        cache["flat"] = flat
        cache["zb"] = zb
        preds = []
        for branch in BRANCHES:
            d = ops.dense(zb, p[f"{branch}_dense_w"], p[f"{branch}_dense_b"])
            da = ops.relu(d)
            h = da.reshape(n_batch, *self.enc_shapes[-1])
            layers = []
            for i, spec in enumerate(self.config.decoder):
                y, xm = ops.deconv2d_forward(h, p[f"{branch}_dec{i}_w"],
                                             p[f"{branch}_dec{i}_b"],
                                             spec.stride, spec.padding)
                if self.config.use_residual and i == self.residual_index:
                    y = y + conv1_out
                a = ops.relu(y) if i < len(self.config.decoder) - 1 else y
                layers.append((h.shape, xm, a))
                h = a
            cache[branch] = {"dense_act": da, "layers": layers}
            preds.append(h)
        pred = np.concatenate(preds, axis=1) * mask
        cache["pred"] = pred
        return pred, cache

    def backward(self, cache: dict, dpred: np.ndarray) -> dict:
        """Gradients of a scalar loss given d(loss)/d(masked prediction)."""
        p = self.params
        mask = cache["mask"]
        grads = {k: None for k in p}
        dzb = np.zeros_like(cache["zb"])
        dres = 0.0
        for bi, branch in enumerate(BRANCHES):
            bc = cache[branch]
            da = (dpred[:, bi:bi + 1] * mask).astype(self.dtype)
            for i in range(len(self.config.decoder) - 1, -1, -1):
                spec = self.config.decoder[i]
                in_shape, xm, act = bc["layers"][i]
                dy = da if i == len(self.config.decoder) - 1 else ops.relu_backward(da, act)
                if self.config.use_residual and i == self.residual_index:
                    dres = dres + dy
                da, dw, db = ops.deconv2d_backward(dy, in_shape, p[f"{branch}_dec{i}_w"],
                                                   xm, spec.stride, spec.padding)
                grads[f"{branch}_dec{i}_w"] = dw
                grads[f"{branch}_dec{i}_b"] = db
            dd = ops.relu_backward(da.reshape(da.shape[0], -1), bc["dense_act"])
            dzb_b, dw, db = ops.dense_backward(dd, cache["zb"], p[f"{branch}_dense_w"])
            grads[f"{branch}_dense_w"] = dw
            grads[f"{branch}_dense_b"] = db
            dzb += dzb_b
        dz = ops.relu_backward(dzb, cache["zb"])
        dflat, dw, db = ops.dense_backward(dz, cache["flat"], p["bottleneck_w"])
        grads["bottleneck_w"] = dw
        grads["bottleneck_b"] = db
        da = dflat.reshape(cache["enc"][-1][2].shape)
        for i in range(len(self.config.encoder) - 1, -1, -1):
            spec = self.config.encoder[i]
            in_shape, cols, act = cache["enc"][i]
            if self.config.use_residual and i == 0:
                da = da + dres
            dy = ops.relu_backward(da, act)
            da, dw, db = ops.conv2d_backward(dy, in_shape, p[f"enc{i}_w"], cols,
                                             spec.stride, spec.padding)
            grads[f"enc{i}_w"] = dw
            grads[f"enc{i}_b"] = db
        return grads

    def loss_and_grads(self, x, mask, target):
        """Mean-squared masked loss over both branches, with gradients."""
        pred, cache = self.forward(x, mask)
        m = np.broadcast_to(mask, pred.shape)
        msum = m.sum()
        diff = (pred - target) * m
        if msum == 0:
            return 0.0, {k: np.zeros_like(v) for k, v in self.params.items()}, pred
        loss = float((diff * diff).sum() / msum)
        grads = self.backward(cache, (2.0 / msum) * diff)
        return loss, grads, pred


def masked_rmse(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """RMSE over masked pixels pooled across all channels; 0 for empty mask."""
    m = np.broadcast_to(mask, pred.shape)
    msum = m.sum()
    if msum == 0:
        return 0.0
    diff = (pred - target) * m
    return float(np.sqrt((diff * diff).sum() / msum))


def config_to_text(config: ModelConfig) -> str:
    return json.dumps(config.to_json(), sort_keys=True)


def config_from_text(text: str) -> ModelConfig:
    return ModelConfig.from_json(json.loads(text))
