"""FGR-Net topology: VGG-style encoder, skip-connected decoder, MLP classifier.

The decoder only runs during training. Inference goes encoder -> classifier.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError, DimensionError
from .tensor import Tensor

PAPER_CHANNELS = [64, 128, 256, 512, 512]
DESK_CHANNELS = [8, 16, 32, 64, 64]


@dataclass
class ModelConfig:
    input_size: int = 64
    in_channels: int = 3
    block_conv_counts: list[int] = field(default_factory=lambda: [2, 2, 2, 3, 3])
    block_channels: list[int] = field(default_factory=lambda: list(DESK_CHANNELS))
    bottleneck_channels: int | None = None
    num_classes: int = 2
    classifier_widths: list[int] = field(default_factory=lambda: [256, 128, 64])
    preset: str = "desk"
    dtype: str = "float32"

    def __post_init__(self):
        if self.bottleneck_channels is None:
            self.bottleneck_channels = self.block_channels[-1] if self.block_channels else 0
        self.validate()

    @classmethod
    def paper(cls, num_classes: int = 3, **overrides) -> "ModelConfig":
        kw = dict(input_size=480, block_channels=list(PAPER_CHANNELS), num_classes=num_classes, preset="paper")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def desk(cls, num_classes: int = 2, **overrides) -> "ModelConfig":
        kw = dict(input_size=64, block_channels=list(DESK_CHANNELS), num_classes=num_classes, preset="desk")
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "ModelConfig":
        if preset == "paper":
            return cls.paper(**overrides)
        if preset == "desk":
            return cls.desk(**overrides)
        raise ConfigError(f"unknown preset {preset!r} (expected 'paper' or 'desk')")

    @property
    def num_stages(self) -> int:
        return len(self.block_channels)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.num_stages

    def validate(self):
        if len(self.block_conv_counts) != len(self.block_channels):
            raise ConfigError("block_conv_counts and block_channels must have equal length")
        if self.num_stages != 5:
            raise ConfigError(f"the decoder is wired for 5 stages, got {self.num_stages}")
        if any(n < 1 for n in self.block_conv_counts) or any(c < 1 for c in self.block_channels):
            raise ConfigError("conv counts and channel widths must be positive")
        if self.input_size < 2 ** self.num_stages or self.input_size % 2 ** self.num_stages:
            raise ConfigError(f"input_size {self.input_size} must be a positive multiple of {2 ** self.num_stages}")
        if self.num_classes not in (2, 3):
            raise ConfigError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if self.bottleneck_channels != self.block_channels[-1]:
            raise ConfigError("bottleneck_channels must equal the last stage width")
        if self.block_channels[0] % 2 or self.block_channels[-1] % 2:
            raise ConfigError("first and last stage widths must be even (decoder halves them)")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def decoder_plan(config: ModelConfig) -> dict:
    """Channel plan for the decoder.

    With c = block_channels this yields, at paper widths, exactly the concat
    widths 768, 768, 512, 192, 96 of the published decoder table.
    """
    c1, c2, c3, c4, c5 = config.block_channels
    return {
        "center": [(c5, c5), (c5, c5 // 2)],
        # (skip stage, conv widths); input = upsampled stream + skip channels
        "blocks": [
            (5, [c5, c3]),
            (4, [c4, c3]),
            (3, [c3, c1]),
            (2, [c2, c1 // 2]),
        ],
        "block1": c1 // 2,
    }


@dataclass
class FGRNetParams:
    config: ModelConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def frozen(self) -> "FGRNetParams":
        """Same arrays, no gradient tracking (inference and input attribution)."""
        return FGRNetParams(self.config, {k: Tensor(v.data) for k, v in self.tensors.items()})

    def tracked(self) -> "FGRNetParams":
        """Fresh leaves over the same arrays, each tracking its own gradient."""
        return FGRNetParams(self.config, {k: Tensor(v.data, requires_grad=True, name=k)
                                          for k, v in self.tensors.items()})

    def copy(self) -> "FGRNetParams":
        return FGRNetParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                          for k, v in self.tensors.items()})

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = config.in_channels
    for s, (n, c) in enumerate(zip(config.block_conv_counts, config.block_channels), start=1):
        for j in range(1, n + 1):
            conv(f"enc.s{s}.conv{j}", cin, c)
            cin = c

    plan = decoder_plan(config)
    for j, (ci, co) in enumerate(plan["center"], start=1):
        conv(f"dec.center.conv{j}", ci, co)
    stream = plan["center"][-1][1]
    for skip_stage, widths in plan["blocks"]:
        cin = stream + config.block_channels[skip_stage - 1]
        for j, w in enumerate(widths, start=1):
            conv(f"dec.b{skip_stage}.conv{j}", cin, w)
            cin = w
        stream = widths[-1]
    conv("dec.b1.conv1", stream + config.block_channels[0], plan["block1"], k=1)
    conv("dec.final", plan["block1"], config.in_channels, k=1)

    fin = config.bottleneck_channels
    for j, w in enumerate(list(config.classifier_widths) + [config.num_classes], start=1):
        shapes[f"cls.fc{j}.weight"] = (fin, w)
        shapes[f"cls.fc{j}.bias"] = (w,)
        fin = w
    return shapes


def build_model(config: ModelConfig, seed: int = 0) -> FGRNetParams:
    """Fan-in scaled uniform weights, zero biases, deterministic in ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[0] if name.startswith("cls.") else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return FGRNetParams(config, tensors)


def _as_tensor(image, dtype) -> Tensor:
    if isinstance(image, Tensor):
        return image
    return Tensor(np.asarray(image, dtype=dtype))


def _conv_relu(params: FGRNetParams, name: str, x: Tensor, padding: int = 1) -> Tensor:
    return T.relu(T.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=1, padding=padding))


def encode(params: FGRNetParams, image) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder; returns the bottleneck and each stage's pre-pool map."""
    cfg = params.config
    x = _as_tensor(image, cfg.dtype)
    if x.ndim != 4:
        raise DimensionError(f"image batch must be 4-d (B,C,H,W), got {x.shape}", axis="rank")
    if x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected {cfg.in_channels} channels, got {x.shape[1]}", axis="channel")
    if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
        raise DimensionError(f"expected {cfg.input_size}x{cfg.input_size} images, got {x.shape[2]}x{x.shape[3]}",
                             axis="height" if x.shape[2] != cfg.input_size else "width")
    skips = []
    for s, n in enumerate(cfg.block_conv_counts, start=1):
        for j in range(1, n + 1):
            x = _conv_relu(params, f"enc.s{s}.conv{j}", x)
        skips.append(x)
        x = T.maxpool2d(x, 2, 2)
    return x, skips


def decode(params: FGRNetParams, bottleneck: Tensor, skips: list[Tensor]) -> Tensor:
    cfg = params.config
    if len(skips) != cfg.num_stages:
        raise ContractError(f"expected {cfg.num_stages} skip maps, got {len(skips)}")
    for s, (skip, c) in enumerate(zip(skips, cfg.block_channels), start=1):
        side = cfg.input_size // 2 ** (s - 1)
        if skip.shape[1:] != (c, side, side) or skip.shape[0] != bottleneck.shape[0]:
            raise ContractError(f"skip map of stage {s} has shape {skip.shape}, expected (B, {c}, {side}, {side})")

    plan = decoder_plan(cfg)
    x = bottleneck
    for j in range(1, len(plan["center"]) + 1):
        x = _conv_relu(params, f"dec.center.conv{j}", x)
    for skip_stage, widths in plan["blocks"]:
        x = T.concat_channels(T.bilinear_upsample(x, 2), skips[skip_stage - 1])
        for j in range(1, len(widths) + 1):
            x = _conv_relu(params, f"dec.b{skip_stage}.conv{j}", x)
    x = T.concat_channels(T.bilinear_upsample(x, 2), skips[0])
    x = _conv_relu(params, "dec.b1.conv1", x, padding=0)
    x = T.conv2d(x, params["dec.final.weight"], params["dec.final.bias"], padding=0)
    return T.sigmoid(x)


def classify(params: FGRNetParams, bottleneck: Tensor) -> Tensor:
    """Global average pool, then the linear chain with ReLU between stages."""
    h = T.global_avg_pool(bottleneck)
    n_fc = len(params.config.classifier_widths) + 1
    for j in range(1, n_fc + 1):
        h = T.linear(h, params[f"cls.fc{j}.weight"], params[f"cls.fc{j}.bias"])
        if j < n_fc:
            h = T.relu(h)
    return h


def forward_train(params: FGRNetParams, image) -> tuple[Tensor, Tensor]:
    bottleneck, skips = encode(params, image)
    logits = classify(params, bottleneck)
    return decode(params, bottleneck, skips), logits


def forward_infer(params: FGRNetParams, image) -> Tensor:
    bottleneck, _ = encode(params, image)
    return classify(params, bottleneck)


def stage_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """(channels, height, width) after each encoder stage's pool."""
    return [(c, config.input_size // 2 ** s, config.input_size // 2 ** s)
            for s, c in enumerate(config.block_channels, start=1)]


# checkpoints ---------------------------------------------------------------

_MAGIC = b"FGRNETCK1\n"


def save_checkpoint(params: FGRNetParams, path) -> None:
    """Write config + tensors: magic, header length, JSON header, raw '<' payloads."""
    entries, blobs, offset = [], [], 0
    for name in sorted(params.tensors):
        arr = params.tensors[name].data
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": params.config.to_dict(), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> FGRNetParams:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ContractError(f"{path} is not an FGR-Net checkpoint")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen])
    pos += hlen
    config = ModelConfig.from_dict(header["config"])
    tensors = {}
    for e in header["tensors"]:
        start = pos + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).astype(np.dtype(config.dtype)).copy()
        tensors[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    expected = parameter_shapes(config)
    if set(expected) != set(tensors):
        raise ContractError("checkpoint tensors do not match its config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ContractError(f"{name} has shape {tensors[name].shape}, config implies {shape}")
    return FGRNetParams(config, {k: tensors[k] for k in expected})
