"""Configurable 3-D DenseNet used as both the VOI extractor and the classifier.

Layout (pre-activation ordering throughout)::

    stem conv -> [dense block -> (transition)] * B -> BN -> ReLU -> GAP -> FC -> sigmoid

A dense layer is BN -> ReLU -> conv(k x k x k) producing ``growth_rate``
channels; each layer sees the concatenation of the block input and every
earlier layer output. A transition is BN -> ReLU -> 1x1x1 conv halving the
channel count -> 2x2x2 average pooling.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn import ops
from .nn.ops import BatchNormState
from .nn.tensor import DimensionError, Tensor

CHECKPOINT_MAGIC = b"GMGM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DenseBlockConfig:
    num_layers: int
    growth_rate: int
    kernel: tuple[int, int, int] = (3, 3, 3)

    def __post_init__(self):
        if self.num_layers < 1 or self.growth_rate < 1:
            raise ConfigError(f"dense block needs num_layers >= 1 and growth_rate >= 1, got {self}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigError(f"dense block kernel extents must be odd and positive, got {self.kernel}")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int, int]  # (C, D, H, W)
    blocks: tuple[DenseBlockConfig, ...]
    initial_channels: int = 8
    transitions: tuple[bool, ...] | None = None  # default: after every block but the last
    stem_kernel: int = 3
    stem_stride: int = 1
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("model needs at least one dense block")
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (C, D, H, W) with positive extents, got {self.input_shape}")
        if self.transitions is None:
            object.__setattr__(self, "transitions", tuple(i < len(self.blocks) - 1 for i in range(len(self.blocks))))
        elif len(self.transitions) != len(self.blocks):
            raise ConfigError("transitions needs one flag per block")
        else:
            object.__setattr__(self, "transitions", tuple(bool(t) for t in self.transitions))

    @property
    def transition_flags(self) -> tuple[bool, ...]:
        return self.transitions

    def with_input(self, shape) -> "ModelConfig":
        return replace(self, input_shape=tuple(int(s) for s in shape))

    def to_text(self) -> str:
        blocks = ";".join(
            f"{b.num_layers},{b.growth_rate},{'x'.join(str(k) for k in b.kernel)}" for b in self.blocks
        )
        lines = [
            f"input_shape={','.join(str(s) for s in self.input_shape)}",
            f"blocks={blocks}",
            f"initial_channels={self.initial_channels}",
            f"transitions={','.join('1' if t else '0' for t in self.transition_flags)}",
            f"stem_kernel={self.stem_kernel}",
            f"stem_stride={self.stem_stride}",
            f"seed={self.seed}",
            f"bn_eps={self.bn_eps!r}",
            f"bn_momentum={self.bn_momentum!r}",
            f"dtype={self.dtype}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines() if line)
        blocks = []
        for spec in kv["blocks"].split(";"):
            n, k, kern = spec.split(",")
            blocks.append(DenseBlockConfig(int(n), int(k), tuple(int(v) for v in kern.split("x"))))
        return cls(
            input_shape=tuple(int(v) for v in kv["input_shape"].split(",")),
            blocks=tuple(blocks),
            initial_channels=int(kv["initial_channels"]),
            transitions=tuple(v == "1" for v in kv["transitions"].split(",")),
            stem_kernel=int(kv["stem_kernel"]),
            stem_stride=int(kv["stem_stride"]),
            seed=int(kv["seed"]),
            bn_eps=float(kv["bn_eps"]),
            bn_momentum=float(kv["bn_momentum"]),
            dtype=kv["dtype"],
        )


def full_scale_config(seed: int = 0) -> ModelConfig:
    """Five dense blocks on the 150x150x90 grid (D=90, H=W=150)."""
    return ModelConfig(
        input_shape=(1, 90, 150, 150),
        blocks=tuple(DenseBlockConfig(4, 12) for _ in range(5)),
        initial_channels=16,
        stem_stride=2,
        seed=seed,
    )


def small_config(seed: int = 0, input_shape=(1, 32, 32, 32)) -> ModelConfig:
    """Desk-scale default: 2 blocks, 2 layers each, growth rate 4."""
    return ModelConfig(
        input_shape=tuple(input_shape),
        blocks=(DenseBlockConfig(2, 4), DenseBlockConfig(2, 4)),
        initial_channels=8,
        seed=seed,
    )


@dataclass
class DenseLayer:
    norm: BatchNormState
    weight: Tensor
    padding: tuple[int, int, int]


@dataclass
class DenseBlock:
    config: DenseBlockConfig
    in_channels: int
    layers: list[DenseLayer] = field(default_factory=list)

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.config.num_layers * self.config.growth_rate


@dataclass
class Transition:
    norm: BatchNormState
    weight: Tensor


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, dtype=dtype)


def plan_shapes(config: ModelConfig) -> list[dict]:
    """Channel and spatial bookkeeping per block, validating the configuration."""
    c, *spatial = config.input_shape
    k, s = config.stem_kernel, config.stem_stride
    spatial = [(n + 2 * (k // 2) - k) // s + 1 for n in spatial]
    if min(spatial) < 1:
        raise ConfigError(f"stem collapses input {config.input_shape[1:]} to {spatial}")
    channels = config.initial_channels
    plan = []
    for i, (block, trans) in enumerate(zip(config.blocks, config.transition_flags)):
        out = channels + block.num_layers * block.growth_rate
        entry = {"block": i, "in_channels": channels, "out_channels": out, "spatial": tuple(spatial)}
        if trans:
            if min(spatial) < 2:
                raise ConfigError(f"transition after block {i} would collapse spatial extent {tuple(spatial)}")
            channels = max(1, out // 2)
            spatial = [n // 2 for n in spatial]
            entry["transition_channels"] = channels
        else:
            channels = out
        plan.append(entry)
    return plan


class Model:
    """Parameters and forward pass of a 3-D DenseNet built from a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.training = True
        self.plan = plan_shapes(config)
        dtype = np.dtype(config.dtype)
        rng = np.random.default_rng(config.seed)
        cin = config.input_shape[0]
        sk = config.stem_kernel
        self.stem = _he_uniform(rng, (config.initial_channels, cin, sk, sk, sk), cin * sk**3, dtype)
        self.blocks: list[DenseBlock] = []
        self.transitions: list[Transition | None] = []
        for entry, bcfg, trans in zip(self.plan, config.blocks, config.transition_flags):
            block = DenseBlock(bcfg, entry["in_channels"])
            kd, kh, kw = bcfg.kernel
            for layer in range(bcfg.num_layers):
                ch = entry["in_channels"] + layer * bcfg.growth_rate
                norm = BatchNormState.create(ch, dtype, config.bn_momentum)
                w = _he_uniform(rng, (bcfg.growth_rate, ch, kd, kh, kw), ch * kd * kh * kw, dtype)
                block.layers.append(DenseLayer(norm, w, (kd // 2, kh // 2, kw // 2)))
            self.blocks.append(block)
            if trans:
                out = entry["out_channels"]
                tch = entry["transition_channels"]
                self.transitions.append(
                    Transition(BatchNormState.create(out, dtype, config.bn_momentum), _he_uniform(rng, (tch, out, 1, 1, 1), out, dtype))
                )
            else:
                self.transitions.append(None)
        final_ch = self.feature_channels
        self.final_norm = BatchNormState.create(final_ch, dtype, config.bn_momentum)
        bound = 1.0 / np.sqrt(final_ch)
        self.fc_weight = Tensor(rng.uniform(-bound, bound, size=(1, final_ch)).astype(dtype), requires_grad=True, dtype=dtype)
        self.fc_bias = Tensor(np.zeros(1, dtype=dtype), requires_grad=True, dtype=dtype)

    @property
    def feature_channels(self) -> int:
        last = self.plan[-1]
        return last.get("transition_channels", last["out_channels"])

    # ---- parameter access, declaration order

    def norm_states(self) -> list[tuple[str, BatchNormState]]:
        out = []
        for b, (block, trans) in enumerate(zip(self.blocks, self.transitions)):
            for i, layer in enumerate(block.layers):
                out.append((f"block{b}.layer{i}.norm", layer.norm))
            if trans is not None:
                out.append((f"transition{b}.norm", trans.norm))
        out.append(("final.norm", self.final_norm))
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [("stem.weight", self.stem)]
        for b, (block, trans) in enumerate(zip(self.blocks, self.transitions)):
            for i, layer in enumerate(block.layers):
                params += [
                    (f"block{b}.layer{i}.norm.scale", layer.norm.scale),
                    (f"block{b}.layer{i}.norm.shift", layer.norm.shift),
                    (f"block{b}.layer{i}.conv.weight", layer.weight),
                ]
            if trans is not None:
                params += [
                    (f"transition{b}.norm.scale", trans.norm.scale),
                    (f"transition{b}.norm.shift", trans.norm.shift),
                    (f"transition{b}.conv.weight", trans.weight),
                ]
        params += [
            ("final.norm.scale", self.final_norm.scale),
            ("final.norm.shift", self.final_norm.shift),
            ("fc.weight", self.fc_weight),
            ("fc.bias", self.fc_bias),
        ]
        return params

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, norm in self.norm_states():
            out += [(f"{name}.running_mean", norm.running_mean), (f"{name}.running_var", norm.running_var)]
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    # ---- forward

    def _bn_relu(self, x: Tensor, norm: BatchNormState) -> Tensor:
        return ops.relu(ops.batchnorm3d(x, norm, train=self.training, eps=self.config.bn_eps))

    def dense_block_forward(self, block: DenseBlock, x: Tensor) -> Tensor:
        if x.shape[1] != block.in_channels:
            raise DimensionError(f"dense block expects {block.in_channels} channels, got {x.shape[1]}")
        features = [x]
        for layer in block.layers:
            inp = ops.concat_channels(features)
            features.append(ops.conv3d(self._bn_relu(inp, layer.norm), layer.weight, padding=layer.padding))
        return ops.concat_channels(features)

    def features(self, batch: Tensor) -> Tensor:
        """Final feature map (after the closing BN and ReLU) that the head pools."""
        cfg = self.config
        if batch.ndim != 5 or tuple(batch.shape[1:]) != tuple(cfg.input_shape):
            raise DimensionError(f"model expects (N, {', '.join(map(str, cfg.input_shape))}), got {batch.shape}")
        if batch.dtype != self.stem.dtype:
            batch = Tensor._wrap(batch.data.astype(self.stem.dtype))
        x = ops.conv3d(batch, self.stem, stride=cfg.stem_stride, padding=cfg.stem_kernel // 2)
        for block, trans in zip(self.blocks, self.transitions):
            x = self.dense_block_forward(block, x)
            if trans is not None:
                x = ops.conv3d(self._bn_relu(x, trans.norm), trans.weight)
                x = ops.avgpool3d(x, 2, 2)
        return self._bn_relu(x, self.final_norm)

    def forward_logits(self, batch: Tensor) -> tuple[Tensor, Tensor]:
        act = self.features(batch)
        logits = ops.linear(ops.globalavgpool3d(act), self.fc_weight, self.fc_bias)
        return logits, act

    def forward(self, batch: Tensor) -> tuple[Tensor, Tensor]:
        """Return (probabilities (N, 1), last convolutional activation)."""
        logits, act = self.forward_logits(batch)
        return ops.sigmoid(logits), act

    __call__ = forward


def build_model(config: ModelConfig) -> Model:
    return Model(config)


# ---------------------------------------------------------------- checkpoints
#
# little-endian layout:
#   b"GMGM" | u16 version | u32 len | config text (utf-8) | u32 count |
#   count * (u16 name len | name | u8 ndim | ndim * u32 extent | float32 payload)
# parameters come first in declaration order, then batchnorm running statistics.

def _tensor_entries(model: Model) -> list[tuple[str, np.ndarray]]:
    return [(n, p.data) for n, p in model.named_parameters()] + model.named_buffers()


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    cfg = model.config.to_text().encode()
    entries = _tensor_entries(model)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    return model_from_bytes(data)


def model_from_bytes(data: bytes) -> Model:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r} at offset 0")
    off = 4
    try:
        version, clen = struct.unpack_from("<HI", data, off)
        off += 6
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
        config = ModelConfig.from_text(data[off : off + clen].decode())
        off += clen
        model = Model(config)
        targets = dict(_tensor_entries(model))
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        if count != len(targets):
            raise CheckpointError(f"checkpoint holds {count} tensors, model declares {len(targets)}")
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            target = targets.get(name)
            if target is None or tuple(target.shape) != tuple(shape):
                raise CheckpointError(f"tensor {name!r} with shape {shape} at offset {off} does not match the model")
            size = int(np.prod(shape)) * 4
            if off + size > len(data):
                raise CheckpointError(f"truncated payload for {name!r} at offset {off}")
            target[...] = np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape)
            off += size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at offset {off}: {exc}") from None
    return model
