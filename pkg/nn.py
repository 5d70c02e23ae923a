"""
Layers, the dilated residual keyword-spotting CNN (ResNet-15) and checkpoints.

Layer walk (fixed; parameter and checkpoint order follow it):
    conv0: 1 -> channels, dilation 1, ReLU, no BN (stem)
    conv{i}, i = 1..n_layers-1: channels -> channels, dilation 2**((i-1) // 3),
        ReLU; after every even i the output is added to the previous block
        output (6 residual blocks for 13 layers); BN follows every conv but the stem
    global average pool over (H, W), linear channels -> n_classes

Before every convolution the configured uncertainty method is applied to the
convolution's input (training only).
"""

import json
import logging
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from errors import ConfigError, DataError
from tensor import Function, Tensor, no_grad
from uncertainty import UncertaintyConfig, apply_uncertainty

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"KWSCKPT1"


class ModelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_layers: int = Field(13, ge=1)
    channels: int = Field(45, ge=1)
    kernel: int = Field(3, ge=1)
    dilation_period: int = Field(3, ge=1)
    augment_input: Optional[List[bool]] = None  # one flag per conv; None means every conv
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value):
        if value % 2 != 1:
            raise ValueError("kernel size must be odd for same-padding")
        return value

    def dilation(self, layer: int) -> int:
        if layer == 0:
            return 1
        return 2 ** ((layer - 1) // self.dilation_period)

    def augment_flags(self) -> List[bool]:
        if self.augment_input is None:
            return [True] * self.n_layers
        if len(self.augment_input) != self.n_layers:
            raise ConfigError(f"augment_input has {len(self.augment_input)} flags for {self.n_layers} layers")
        return list(self.augment_input)

    @property
    def n_residual_blocks(self) -> int:
        return (self.n_layers - 1) // 2


class Conv2dFn(Function):
    """Stride-1 dilated cross-correlation with same padding, no bias"""

    def forward(self, x, w, dilation=1):
        batch, channels, height, width = x.shape
        out_channels, in_channels, kh, kw = w.shape
        if in_channels != channels:
            raise ValueError(f"conv expects {in_channels} input channels, got {channels}")
        self.dilation, self.in_shape, self.w = dilation, x.shape, w
        self.pad = dilation * (kh - 1) // 2
        self.xp = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        cols = self._im2col(self.xp, kh, kw, height, width)
        out = np.matmul(w.reshape(out_channels, -1), cols)
        return out.reshape(batch, out_channels, height, width)

    def _im2col(self, xp, kh, kw, height, width):
        d = self.dilation
        batch, channels = xp.shape[:2]
        cols = np.empty((batch, channels, kh, kw, height, width), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i * d:i * d + height, j * d:j * d + width]
        return cols.reshape(batch, channels * kh * kw, height * width)

    def backward(self, grad):
        batch, channels, height, width = self.in_shape
        out_channels, _, kh, kw = self.w.shape
        d = self.dilation
        g = grad.reshape(batch, out_channels, height * width)
        cols = self._im2col(self.xp, kh, kw, height, width)
        dw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(self.w.shape)
        dcols = np.matmul(self.w.reshape(out_channels, -1).T, g).reshape(batch, channels, kh, kw, height, width)
        dxp = np.zeros_like(self.xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i * d:i * d + height, j * d:j * d + width] += dcols[:, :, i, j]
        dx = dxp[:, :, self.pad:self.pad + height, self.pad:self.pad + width]
        return dx, dw


class BatchNormFn(Function):
    """Per-channel affine normalization with given mean/var (batch or running)"""

    def forward(self, x, gamma, beta, mean=None, var=None, eps=1e-5, batch_stats=True):
        view = (1, -1, 1, 1)
        self.batch_stats = batch_stats
        self.inv_std = (1.0 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)).astype(x.dtype).reshape(view)
        self.xhat = (x - np.asarray(mean).astype(x.dtype).reshape(view)) * self.inv_std
        self.gamma = gamma.reshape(view)
        return self.xhat * self.gamma + beta.reshape(view)

    def backward(self, grad):
        axes = (0, 2, 3)
        dgamma = np.sum(grad * self.xhat, axis=axes, dtype=np.float64).astype(grad.dtype)
        dbeta = np.sum(grad, axis=axes, dtype=np.float64).astype(grad.dtype)
        dxhat = grad * self.gamma
        if not self.batch_stats:
            return dxhat * self.inv_std, dgamma, dbeta
        n = grad.size // grad.shape[1]
        sum_dxhat = np.sum(dxhat, axis=axes, keepdims=True, dtype=np.float64)
        sum_dxhat_xhat = np.sum(dxhat * self.xhat, axis=axes, keepdims=True, dtype=np.float64)
        dx = (self.inv_std / n) * (n * dxhat - sum_dxhat - self.xhat * sum_dxhat_xhat)
        return dx.astype(grad.dtype), dgamma, dbeta


class SoftmaxCrossEntropyFn(Function):
    def forward(self, logits, labels=None):
        labels = np.asarray(labels, dtype=np.int64)
        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_probs = z - log_norm
        self.probs = np.exp(log_probs)
        self.labels = labels
        self.dtype = logits.dtype
        return np.asarray(-log_probs[np.arange(len(labels)), labels].mean(), dtype=logits.dtype)

    def backward(self, grad):
        batch = len(self.labels)
        d = self.probs.copy()
        d[np.arange(batch), self.labels] -= 1.0
        return ((d / batch) * grad).astype(self.dtype),


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]"""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"labels outside [0, {logits.shape[1]})")
    return SoftmaxCrossEntropyFn.apply(logits, labels=labels)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel: int, dilation: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.dilation = dilation
        shape = (out_channels, in_channels, kernel, kernel)
        self.weight = Tensor(_kaiming_uniform(rng, shape, in_channels * kernel * kernel, dtype),
                             requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return Conv2dFn.apply(x, self.weight, dilation=self.dilation)


class BatchNorm2d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum, self.eps = momentum, eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
            n = x.data.size // x.shape[1]
            unbiased = var * n / max(n - 1, 1)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        return BatchNormFn.apply(x, self.weight, self.bias, mean=mean, var=var,
                                 eps=self.eps, batch_stats=training)


class Linear:
    """y = x @ weight + bias, weight stored as (in_features, out_features)"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Tensor(_kaiming_uniform(rng, (in_features, out_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class ResNet15:
    def __init__(self, spec: ModelSpec, n_classes: int, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        ch = spec.channels
        self.convs = [Conv2d(1 if i == 0 else ch, ch, spec.kernel, spec.dilation(i), rng, dtype)
                      for i in range(spec.n_layers)]
        self.bns = [None] + [BatchNorm2d(ch, spec.bn_momentum, spec.bn_eps, dtype)
                             for _ in range(1, spec.n_layers)]
        self.fc = Linear(ch, n_classes, rng, dtype)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = OrderedDict()
        for i, conv in enumerate(self.convs):
            params[f"conv{i}.weight"] = conv.weight
            if self.bns[i] is not None:
                params[f"bn{i}.weight"] = self.bns[i].weight
                params[f"bn{i}.bias"] = self.bns[i].bias
        params["fc.weight"] = self.fc.weight
        params["fc.bias"] = self.fc.bias
        return params

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        buffers = OrderedDict()
        for i, bn in enumerate(self.bns):
            if bn is not None:
                buffers[f"bn{i}.running_mean"] = bn.running_mean
                buffers[f"bn{i}.running_var"] = bn.running_var
        return buffers

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, training: bool = False, augment: Optional[UncertaintyConfig] = None,
                rng: Optional[np.random.Generator] = None, trace: Optional[list] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 1:
            raise DataError(f"model input must be (B, 1, H, W), got {x.shape}")
        flags = self.spec.augment_flags()
        previous = None
        for i, conv in enumerate(self.convs):
            inp = apply_uncertainty(x, augment, rng, training) if flags[i] else x
            y = conv(inp).relu()
            if i == 0:
                previous = y
            if i > 0 and i % 2 == 0:
                x = y + previous
                previous = x
            else:
                x = y
            if trace is not None:
                trace.append(x)
            if self.bns[i] is not None:
                x = self.bns[i](x, training)
        pooled = x.mean(axis=(2, 3))
        return self.fc(pooled)

    __call__ = forward


def build_resnet15(spec: ModelSpec, n_classes: int, rng: np.random.Generator, dtype=np.float32) -> ResNet15:
    if n_classes < 2:
        raise ConfigError(f"a classifier needs at least 2 classes, got {n_classes}")
    model = ResNet15(spec, n_classes, rng, dtype)
    logger.info(f"Built ResNet-15: {spec.n_layers} conv layers, {spec.channels} maps, "
                f"{n_classes} classes, {model.parameter_count():,} parameters")
    return model


def forward_with_augment(model: ResNet15, x, cfg: Optional[UncertaintyConfig],
                         rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Forward pass with the uncertainty method applied before every convolution"""
    return model.forward(x, training=training, augment=cfg, rng=rng)


def predict_logits(model: ResNet15, features: np.ndarray, batch_size: int = 100) -> np.ndarray:
    """Eval-mode logits for a stack of (N, 1, H, W) feature maps"""
    features = np.asarray(features)
    if len(features) == 0:
        return np.zeros((0, model.n_classes), dtype=model.dtype)
    outputs = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            batch = features[start:start + batch_size].astype(model.dtype, copy=False)
            outputs.append(model.forward(batch, training=False).data)
    return np.concatenate(outputs, axis=0)


def save_checkpoint(path: Union[str, Path], model: ResNet15, header: Optional[dict] = None):
    """
    Write magic, little-endian u64 header length, JSON header, then one raw
    little-endian float32 block per parameter and buffer in walk order.
    """
    tensors = [(name, t.data) for name, t in model.named_parameters().items()]
    tensors += list(model.named_buffers().items())
    entries, offset = [], 0
    for name, array in tensors:
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        offset += array.size * 4
    meta = dict(header or {})
    meta.update({
        "format": CHECKPOINT_MAGIC.decode(),
        "spec": model.spec.model_dump(),
        "n_classes": model.n_classes,
        "tensors": entries,
    })
    encoded = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        for _, array in tensors:
            f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_checkpoint(path: Union[str, Path]) -> Tuple[ResNet15, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (length,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + length].decode("utf-8"))
    body = raw[16 + length:]

    spec = ModelSpec(**header["spec"])
    model = ResNet15(spec, header["n_classes"], np.random.default_rng(0))
    params = model.named_parameters()
    buffers = model.named_buffers()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"])
        values = values.reshape(entry["shape"]).astype(np.float32)
        name = entry["name"]
        if name in params:
            params[name].data[...] = values
        elif name in buffers:
            buffers[name][...] = values
        else:
            raise DataError(f"{path}: unknown tensor '{name}'")
    return model, header
