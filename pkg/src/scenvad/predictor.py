"""Future-frame predictor: a small U-Net with an optional convolutional GRU bottleneck.

The model is kept functional: a :class:`FramePredictor` is an immutable pair
of (config, named parameter tensors) and :func:`forward` evaluates the network
for any parameter dict. That is what lets the meta-learner differentiate
through inner adaptation steps.

Tensor layout is channels-first: a model input is (T'-1, H, W), or
(B, T'-1, H, W) for a batch, and a prediction is (H, W) or (B, H, W).
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidConfig, SchemaError, ShapeMismatch, TooSmallForScales
from .losses import gdl_per_sample, l1_per_sample, max_msssim_scales, msssim_per_sample

CHECKPOINT_VERSION = 1
Params = Mapping[str, torch.Tensor]


@dataclass(frozen=True)
class PredictorConfig:
    frame_size: tuple[int, int] = (32, 32)
    input_frames: int = 4
    base_channels: int = 8
    depth: int = 2
    recurrent_bottleneck: bool = False

    def __post_init__(self):
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))
        h, w = self.frame_size
        if self.depth < 1:
            raise InvalidConfig("depth must be >= 1")
        if self.base_channels < 1 or self.input_frames < 1:
            raise InvalidConfig("base_channels and input_frames must be positive")
        if h < 1 or w < 1 or h % 2**self.depth or w % 2**self.depth:
            raise InvalidConfig(f"frame size {h}x{w} is not divisible by 2**depth = {2 ** self.depth}")

    @property
    def window(self) -> int:
        return self.input_frames + 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PredictorConfig":
        return cls(**{**obj, "frame_size": tuple(obj["frame_size"])})


def parameter_layout(config: PredictorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the flat parameter vector follows this order."""
    c = config.base_channels
    in_ch = 1 if config.recurrent_bottleneck else config.input_frames
    layout = [("enc0.weight", (c, in_ch, 3, 3)), ("enc0.bias", (c,))]
    for lvl in range(1, config.depth + 1):
        cin, cout = c * 2 ** (lvl - 1), c * 2**lvl
        layout += [(f"enc{lvl}.weight", (cout, cin, 3, 3)), (f"enc{lvl}.bias", (cout,))]
    if config.recurrent_bottleneck:
        cb = c * 2**config.depth
        layout += [
            ("gru.gates.weight", (2 * cb, 2 * cb, 3, 3)),
            ("gru.gates.bias", (2 * cb,)),
            ("gru.cand.weight", (cb, 2 * cb, 3, 3)),
            ("gru.cand.bias", (cb,)),
        ]
    for lvl in range(config.depth, 0, -1):
        cin = c * 2**lvl + c * 2 ** (lvl - 1)
        cout = c * 2 ** (lvl - 1)
        layout += [(f"dec{lvl}.weight", (cout, cin, 3, 3)), (f"dec{lvl}.bias", (cout,))]
    layout += [("out.weight", (1, c, 1, 1)), ("out.bias", (1,))]
    return layout


def parameter_count(config: PredictorConfig) -> int:
    return sum(math.prod(shape) for _, shape in parameter_layout(config))


@dataclass(frozen=True, eq=False)
class FramePredictor:
    config: PredictorConfig
    params: Mapping[str, torch.Tensor] = field(repr=False)

    def __post_init__(self):
        layout = parameter_layout(self.config)
        if [n for n, _ in layout] != list(self.params):
            raise SchemaError("parameter names do not match the config layout")
        for name, shape in layout:
            if tuple(self.params[name].shape) != shape:
                raise SchemaError(f"{name}: shape {tuple(self.params[name].shape)} != {shape}")
        object.__setattr__(self, "params", OrderedDict(self.params))

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def flat(self) -> torch.Tensor:
        """Parameter vector in layout order (a copy)."""
        return torch.cat([p.detach().reshape(-1) for p in self.params.values()])

    @classmethod
    def from_flat(cls, config: PredictorConfig, vector) -> "FramePredictor":
        vector = torch.as_tensor(vector)
        layout = parameter_layout(config)
        total = sum(math.prod(s) for _, s in layout)
        if vector.numel() != total:
            raise SchemaError(f"expected {total} parameters, got {vector.numel()}")
        params, offset = OrderedDict(), 0
        for name, shape in layout:
            n = math.prod(shape)
            params[name] = vector[offset : offset + n].reshape(shape).clone()
            offset += n
        return cls(config, params)

    def with_params(self, params: Params) -> "FramePredictor":
        return FramePredictor(self.config, OrderedDict((k, v.detach().clone()) for k, v in params.items()))

    def replace(self, **updates: torch.Tensor) -> "FramePredictor":
        """Copy with some named tensors swapped out (keys use '.' or '__' separators)."""
        params = OrderedDict((k, v.detach().clone()) for k, v in self.params.items())
        for key, value in updates.items():
            name = key.replace("__", ".")
            params[name] = torch.as_tensor(value, dtype=self.dtype).reshape(params[name].shape).clone()
        return FramePredictor(self.config, params)


def init_predictor(config: PredictorConfig, seed: int = 0, dtype: torch.dtype = torch.float64) -> FramePredictor:
    """Fan-in scaled uniform weights U(-sqrt(3/fan_in), sqrt(3/fan_in)) and zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    params = OrderedDict()
    for name, shape in parameter_layout(config):
        if name.endswith(".bias"):
            params[name] = torch.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(3.0 / fan_in)
            w = torch.rand(shape, generator=gen, dtype=torch.float64) * (2 * bound) - bound
            params[name] = w.to(dtype)
    return FramePredictor(config, params)


def _conv(x, params, name, padding=1):
    return F.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding=padding)


def _encode(x, params, depth):
    h = F.silu(_conv(x, params, "enc0"))
    skips = [h]
    for lvl in range(1, depth + 1):
        h = F.silu(_conv(F.avg_pool2d(h, 2), params, f"enc{lvl}"))
        skips.append(h)
    return skips


def forward(config: PredictorConfig, params: Params, x: torch.Tensor) -> torch.Tensor:
    """Evaluate the network on a batch (B, T'-1, H, W) and return (B, H, W)."""
    b, t = x.shape[:2]
    if config.recurrent_bottleneck:
        frames = x.reshape(b * t, 1, *x.shape[2:])
        per_frame = [s.reshape(b, t, *s.shape[1:]) for s in _encode(frames, params, config.depth)]
        skips = [s[:, -1] for s in per_frame[:-1]]
        seq = per_frame[-1]
        h = torch.zeros_like(seq[:, 0])
        for step in range(t):
            xt = seq[:, step]
            zr = torch.sigmoid(_conv(torch.cat([xt, h], 1), params, "gru.gates"))
            z, r = zr.chunk(2, dim=1)
            cand = torch.tanh(_conv(torch.cat([xt, r * h], 1), params, "gru.cand"))
            h = (1 - z) * h + z * cand
    else:
        enc = _encode(x, params, config.depth)
        skips, h = enc[:-1], enc[-1]
    for lvl in range(config.depth, 0, -1):
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(_conv(torch.cat([h, skips[lvl - 1]], 1), params, f"dec{lvl}"))
    out = torch.sigmoid(_conv(h, params, "out", padding=0))
    return out[:, 0]


def _check_input(config: PredictorConfig, x: torch.Tensor) -> bool:
    expected = (config.input_frames, *config.frame_size)
    if tuple(x.shape[-3:]) != expected or x.dim() not in (3, 4):
        raise ShapeMismatch(f"input shape {tuple(x.shape)} does not match (B?, {expected})")
    return x.dim() == 3


def predict(model: FramePredictor, inputs):
    """Predict the next frame from T'-1 frames; accepts one sample or a batch.

    Numpy input yields numpy output, tensors yield tensors.
    """
    is_numpy = isinstance(inputs, np.ndarray)
    x = torch.as_tensor(inputs, dtype=model.dtype)
    single = _check_input(model.config, x)
    with torch.no_grad():
        y = forward(model.config, model.params, x[None] if single else x)
    y = y[0] if single else y
    return y.numpy() if is_numpy else y


# --------------------------------------------------------------------------
# composite loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    """Weights of the L1, MS-SSIM and gradient-difference terms plus loss options.

    ``extra`` holds additional ``(weight, fn)`` terms where ``fn(pred, target)``
    maps (B, H, W) tensors to per-sample values of shape (B,).
    """

    w_l1: float = 1.0
    w_msssim: float = 1.0
    w_gdl: float = 1.0
    msssim_scales: int | None = None
    gdl_alpha: float = 1.0
    extra: tuple[tuple[float, Callable], ...] = ()

    def __post_init__(self):
        ws = (self.w_l1, self.w_msssim, self.w_gdl, *(w for w, _ in self.extra))
        if any(w < 0 for w in ws):
            raise InvalidConfig("loss weights must be nonnegative")
        if not any(w > 0 for w in ws):
            raise InvalidConfig("at least one loss weight must be positive")

    def to_json(self) -> dict:
        return {
            "w_l1": self.w_l1,
            "w_msssim": self.w_msssim,
            "w_gdl": self.w_gdl,
            "msssim_scales": self.msssim_scales,
            "gdl_alpha": self.gdl_alpha,
        }


def per_sample_loss(pred: torch.Tensor, target: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    total = torch.zeros(pred.shape[:-2], dtype=pred.dtype)
    if weights.w_l1:
        total = total + weights.w_l1 * l1_per_sample(pred, target)
    if weights.w_msssim:
        scales = weights.msssim_scales
        if scales is None:
            scales = max_msssim_scales(pred.shape[-2:])
            if scales == 0:
                raise TooSmallForScales(f"{tuple(pred.shape[-2:])} frames are too small for MS-SSIM")
        total = total + weights.w_msssim * msssim_per_sample(pred, target, scales)
    if weights.w_gdl:
        total = total + weights.w_gdl * gdl_per_sample(pred, target, weights.gdl_alpha)
    for w, fn in weights.extra:
        total = total + w * fn(pred, target)
    return total


def batch_loss(config: PredictorConfig, params: Params, inputs: torch.Tensor, targets: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Mean composite loss over a batch of pairs, differentiable w.r.t. ``params``."""
    return per_sample_loss(forward(config, params, inputs), targets, weights).mean()


def stack_pairs(pairs, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    inputs = torch.as_tensor(np.stack([p.input_frames for p in pairs]), dtype=dtype)
    targets = torch.as_tensor(np.stack([p.target_frame for p in pairs]), dtype=dtype)
    return inputs, targets


def composite_loss(model: FramePredictor, pair, weights: LossWeights = LossWeights()) -> tuple[float, torch.Tensor]:
    """Loss of one temporal block and its gradient w.r.t. the flat parameter vector."""
    inputs, targets = stack_pairs([pair], model.dtype)
    _check_input(model.config, inputs[0])
    if tuple(targets.shape[-2:]) != model.config.frame_size:
        raise ShapeMismatch("target frame does not match the configured frame size")
    params = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in model.params.items())
    loss = batch_loss(model.config, params, inputs, targets, weights)
    grads = torch.autograd.grad(loss, list(params.values()))
    return float(loss.detach()), torch.cat([g.reshape(-1) for g in grads])


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model: FramePredictor, path, extra: dict | None = None) -> Path:
    """Write ``version byte | uint32 header length | JSON header | float64 LE params``."""
    path = Path(path)
    header = {
        "config": model.config.to_json(),
        "layout": [[n, list(s)] for n, s in parameter_layout(model.config)],
        "num_parameters": model.num_parameters,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    values = model.flat().to(torch.float64).numpy().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes())
    return path


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> tuple[FramePredictor, dict]:
    data = Path(path).read_bytes()
    if not data or data[0] != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version")
    (n,) = struct.unpack("<I", data[1:5])
    header = json.loads(data[5 : 5 + n].decode("utf-8"))
    config = PredictorConfig.from_json(header["config"])
    values = np.frombuffer(data[5 + n :], dtype="<f8")
    if values.size != header["num_parameters"]:
        raise SchemaError(f"{path}: truncated parameter block")
    model = FramePredictor.from_flat(config, torch.tensor(values.astype(np.float64), dtype=dtype))
    return model, header.get("extra", {})
