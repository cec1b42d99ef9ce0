"""The hierarchical MetaFormer with a pluggable token mixer.

Parameter order (also the checkpoint order): for each stage the patch
embedding, then each block as norm1, mixer, norm2, mlp; then the head norm and
the classifier.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .deform import DeformConv2d
from .tensor import (NARROW, BackwardError, ChannelNorm, Conv2d, Identity, Layer, Linear,
                     Mlp, PoolMixer, conv_output_size, initialize, load_tensor, save_tensor)

MIXER_KINDS = ("deformable", "pooling", "identity")


@dataclass
class StageConfig:
    patch_kernel: int
    patch_stride: int
    channels: int
    depth: int
    mixer_kernel: int = 3
    mlp_ratio: int = 4

    def validate(self):
        for name, v in asdict(self).items():
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"stage {name} must be a positive integer, got {v!r}")


@dataclass
class ModelConfig:
    stages: list[StageConfig] = field(default_factory=lambda: [
        StageConfig(7, 4, 64, 2),
        StageConfig(3, 2, 128, 2),
        StageConfig(3, 2, 320, 6),
        StageConfig(3, 2, 512, 2),
    ])
    mixer_kind: str = "deformable"
    num_classes: int = 2
    input_channels: int = 3
    depthwise: bool = False
    input_size: int = 1600

    def validate(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        for s in self.stages:
            s.validate()
        if self.mixer_kind not in MIXER_KINDS:
            raise ValueError(f"mixer_kind must be one of {MIXER_KINDS}")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ValueError("num_classes and input_channels must be positive")
        if self.input_size < 1 or self.input_size % self.reduction:
            raise ValueError(f"input_size {self.input_size} must be a positive multiple "
                             f"of {self.reduction}")
        return self

    @property
    def reduction(self) -> int:
        return int(np.prod([s.patch_stride for s in self.stages]))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "stages" in d:
            d["stages"] = [StageConfig(**s) for s in d["stages"]]
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def full_config() -> ModelConfig:
    return ModelConfig()


def desk_config(mixer_kind="deformable") -> ModelConfig:
    return ModelConfig(stages=[StageConfig(7, 4, 16, 1), StageConfig(3, 2, 32, 1)],
                       mixer_kind=mixer_kind, input_size=64)


def make_mixer(kind, channels, kernel, depthwise=False, dtype=NARROW):
    if kind == "deformable":
        return DeformConv2d(channels, channels, kernel, depthwise=depthwise, dtype=dtype)
    if kind == "pooling":
        return PoolMixer(kernel)
    if kind == "identity":
        return Identity()
    raise ValueError(f"unknown mixer kind {kind!r}")


class Block(Layer):
    """x + Mixer(Norm(x)), then + Mlp(Norm(.))."""

    _children = ("norm1", "mixer", "norm2", "mlp")

    def __init__(self, channels, mixer, mlp_ratio=4, dtype=NARROW):
        self.channels = channels
        self.norm1 = ChannelNorm(channels, dtype=dtype)
        self.mixer = mixer
        self.norm2 = ChannelNorm(channels, dtype=dtype)
        self.mlp = Mlp(channels, mlp_ratio * channels, dtype)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"block of width {self.channels} got input {x.shape}")
        x = x + self.mixer.forward(self.norm1.forward(x))
        return x + self.mlp.forward(self.norm2.forward(x))

    def backward(self, grad_out):
        g = grad_out + self.norm2.backward(self.mlp.backward(grad_out))
        return g + self.norm1.backward(self.mixer.backward(g))


class Stage(Layer):
    def __init__(self, in_channels, cfg: StageConfig, mixer_kind, depthwise, dtype):
        k = cfg.patch_kernel
        self.embed = Conv2d(in_channels, cfg.channels, k, cfg.patch_stride, k // 2, dtype)
        self.blocks = [Block(cfg.channels,
                             make_mixer(mixer_kind, cfg.channels, cfg.mixer_kernel, depthwise, dtype),
                             cfg.mlp_ratio, dtype)
                       for _ in range(cfg.depth)]

    def named_parameters(self, prefix=""):
        out = self.embed.named_parameters(prefix + "embed.")
        for i, blk in enumerate(self.blocks):
            out += blk.named_parameters(f"{prefix}blocks.{i}.")
        return out

    def forward(self, x):
        x = self.embed.forward(x)
        for blk in self.blocks:
            x = blk.forward(x)
        return x

    def backward(self, g):
        for blk in reversed(self.blocks):
            g = blk.backward(g)
        return self.embed.backward(g)


class Model(Layer):
    def __init__(self, config: ModelConfig, dtype=NARROW):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        chans = config.input_channels
        self.stages = []
        for s in config.stages:
            self.stages.append(Stage(chans, s, config.mixer_kind, config.depthwise, dtype))
            chans = s.channels
        self.head_norm = ChannelNorm(chans, dtype=dtype)
        self.head = Linear(chans, config.num_classes, dtype)
        self.stage_shapes: list[tuple] = []

    def named_parameters(self, prefix=""):
        out = []
        for i, st in enumerate(self.stages):
            out += st.named_parameters(f"{prefix}stages.{i}.")
        out += self.head_norm.named_parameters(prefix + "head_norm.")
        out += self.head.named_parameters(prefix + "head.")
        return out

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.config.input_channels:
            raise ValueError(f"expected (B, {self.config.input_channels}, H, W), got {shape}")
        r = self.config.reduction
        if shape[2] % r or shape[3] % r:
            raise ValueError(f"input size {shape[2]}x{shape[3]} not divisible by {r}")

    def forward(self, x):
        self.check_input(x.shape)
        self.stage_shapes = []
        for st in self.stages:
            x = st.forward(x)
            self.stage_shapes.append(x.shape)
        x = self.head_norm.forward(x)
        self._hw = x.shape[2:]
        self._save(True)
        return self.head.forward(x.mean(axis=(2, 3)))

    def backward(self, grad_logits):
        self._pop()
        g = self.head.backward(grad_logits)
        h, w = self._hw
        g = np.broadcast_to((g / (h * w))[:, :, None, None], g.shape + (h, w)).copy()
        g = self.head_norm.backward(g)
        for st in reversed(self.stages):
            g = st.backward(g)
        return g


def stage_shapes(config: ModelConfig, input_shape):
    """Stage output shapes computed from the layer arithmetic alone."""
    b, _, h, w = input_shape
    out = []
    for s in config.stages:
        pad = s.patch_kernel // 2
        h = conv_output_size(h, s.patch_kernel, s.patch_stride, pad)
        w = conv_output_size(w, s.patch_kernel, s.patch_stride, pad)
        out.append((b, s.channels, h, w))
    return out


def build_model(config: ModelConfig, seed=0, dtype=NARROW) -> Model:
    model = Model(config, dtype)
    initialize(model.named_parameters(), seed)
    return model


def block_forward(x, block: Block):
    return block.forward(x)


def model_forward(model: Model, x):
    return model.forward(x)


def model_backward(model: Model, grad_logits):
    """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
    try:
        return model.backward(grad_logits)
    except BackwardError:
        raise BackwardError("model_backward called without a preceding forward") from None


def count_parameters(model: Model) -> int:
    return sum(p.value.size for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, directory, extra=None):
    """Write ``index.json`` plus one DFT1 container per parameter."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"{i:04d}_{name}.dft"
        save_tensor(d / fname, p.value)
        entries.append({"name": name, "file": fname, "shape": list(p.value.shape)})
    index = {"format": "DFT1", "dtype": model.dtype.name, "config": model.config.to_dict(),
             "parameters": entries, "extra": extra or {}}
    (d / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_checkpoint(directory):
    """Returns (model, extra)."""
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    model = Model(ModelConfig.from_dict(index["config"]), np.dtype(index["dtype"]))
    params = dict(model.named_parameters())
    names = [e["name"] for e in index["parameters"]]
    if names != list(params):
        raise ValueError("checkpoint parameters do not match its config")
    for e in index["parameters"]:
        arr = load_tensor(d / e["file"]).reshape(e["shape"])
        params[e["name"]].value[...] = arr
    return model, index.get("extra", {})
