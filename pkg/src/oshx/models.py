"""The four classifiers: custom CNN, ViT, ResNet50 and the CNN+ViT fusion model.

Every model records an optional shape trace: a list of
``(layer, input_shape, output_shape)`` rows with the batch axis dropped,
channels-first.  That trace is what the architecture tables are checked
against.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import functional as F
from .nn import BatchNorm2d, Conv2d, Dropout, LayerNorm, Linear, Module, MultiHeadAttention, Parameter, normal
from .tensor import DimensionError, Tensor, as_tensor, make_rng, no_grad, recompute

ARCHS = ("cnn", "vit", "resnet50", "hybrid")
SCALES = ("paper", "tiny")
DISPLAY_NAMES = {"cnn": "CNN", "vit": "ViT", "resnet50": "ResNet", "hybrid": "CNN + ViT"}


class ConfigurationError(ValueError):
    """An architecture was requested with inconsistent settings."""


class UnsupportedArchitectureError(ConfigurationError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    name: str
    scale: str = "paper"
    num_classes: int = 4
    input_side: int = 128
    # (embed_dim, depth, heads, mlp_dim, patch_size)
    vit_dims: tuple[int, int, int, int, int] = (768, 12, 12, 3072, 16)
    vit_input_side: int = 224
    cnn_filters: tuple[int, int, int] = (64, 128, 256)
    dense_units: int = 1024
    resnet_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    resnet_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    mlp_hidden: tuple[int, int] = (1024, 256)
    leaky_alpha: float = 0.25
    hybrid_activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.name not in ARCHS:
            raise ConfigurationError(f"unknown architecture {self.name!r}; expected one of {ARCHS}")
        if self.scale not in SCALES:
            raise ConfigurationError(f"unknown scale {self.scale!r}")
        if self.num_classes not in (2, 3, 4):
            raise ConfigurationError(f"num_classes must be 2, 3 or 4, got {self.num_classes}")
        embed, _, heads, _, patch = self.vit_dims
        if embed % heads:
            raise ConfigurationError(f"vit embed_dim {embed} not divisible by {heads} heads")
        if self.hybrid_activation not in ("relu", "leaky_relu"):
            raise ConfigurationError(f"hybrid_activation must be relu or leaky_relu, got {self.hybrid_activation!r}")

    @property
    def vit_side(self) -> int:
        """Side length the ViT (standalone or as a fusion branch) consumes."""
        return self.input_side if self.name == "vit" else self.vit_input_side

    @property
    def vit_tokens(self) -> int:
        return (self.vit_side // self.vit_dims[4]) ** 2

    @property
    def fused_width(self) -> int:
        return self.dense_units + self.vit_tokens * self.vit_dims[0]

    def branch(self, name: str) -> ArchSpec:
        """Spec of one fusion branch as a standalone classifier."""
        side = self.vit_input_side if name == "vit" else self.input_side
        return dataclasses.replace(self, name=name, input_side=side)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ArchSpec:
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


def preset(name: str, scale: str = "paper", num_classes: int = 4, **overrides) -> ArchSpec:
    """Named architecture settings; ``tiny`` is the desk/CI scale."""
    if scale == "paper":
        side = 224 if name == "vit" else 128
        base = dict(input_side=side)
    elif scale == "tiny":
        base = dict(
            input_side=64,
            vit_dims=(64, 2, 4, 128, 16),
            vit_input_side=64,
            cnn_filters=(8, 16, 32),
            dense_units=64,
            resnet_widths=(8, 16, 32, 64),
            mlp_hidden=(64, 32),
        )
    else:
        raise ConfigurationError(f"unknown scale {scale!r}")
    base.update(overrides)
    return ArchSpec(name=name, scale=scale, num_classes=num_classes, **base)


def _strip(shape) -> tuple[int, ...]:
    return tuple(int(s) for s in shape[1:])


class Model(Module):
    """A classifier built from an :class:`ArchSpec`; ``forward`` returns logits."""

    spec: ArchSpec

    def expected_side(self) -> int:
        return self.spec.input_side

    def check_input(self, x: Tensor) -> None:
        side = self.expected_side()
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != side or x.shape[3] != side:
            raise DimensionError(
                f"{self.spec.name} expects input of shape (N, 3, {side}, {side}), got {tuple(x.shape)}"
            )

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        for _, m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def trace(self, x: Tensor) -> list[tuple[str, tuple, tuple]]:
        """Run an eval-mode forward pass and return the per-layer shape rows."""
        rows: list = []
        self.eval()
        with no_grad():
            self.forward(as_tensor(x), trace=rows)
        return rows


# ---------------------------------------------------------------------------
# custom CNN
# ---------------------------------------------------------------------------

class CNN(Model):
    """Three double-conv blocks, global average pooling, two wide dense layers."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator, drop_rng: np.random.Generator):
        super().__init__()
        if spec.name != "cnn":
            raise ConfigurationError(f"build_cnn needs spec.name == 'cnn', got {spec.name!r}")
        self.spec = spec
        convs = []
        c_in = 3
        for filters in spec.cnn_filters:
            convs.append(Conv2d(c_in, filters, 3, rng, padding=1))
            convs.append(Conv2d(filters, filters, 3, rng, padding=1))
            c_in = filters
        self.convs = convs
        self.fc1 = Linear(c_in, spec.dense_units, rng)
        self.fc2 = Linear(spec.dense_units, spec.dense_units, rng)
        self.head = Linear(spec.dense_units, spec.num_classes, rng)
        self.drop = Dropout(spec.dropout_rate, drop_rng)

    @property
    def feature_dim(self) -> int:
        return self.spec.dense_units

    def features(self, x: Tensor, trace: list | None = None) -> Tensor:
        alpha = self.spec.leaky_alpha
        if trace is not None:
            trace.append(("input", _strip(x.shape), _strip(x.shape)))
        for b in range(len(self.spec.cnn_filters)):
            x_in = x
            x = F.leaky_relu(self.convs[2 * b](x), alpha)
            x = F.leaky_relu(self.convs[2 * b + 1](x), alpha)
            x = F.maxpool2d(x, 2, 2)
            if trace is not None:
                trace.append((f"block{b + 1}", _strip(x_in.shape), _strip(x.shape)))
        pooled = F.global_avg_pool(x)
        if trace is not None:
            trace.append(("gap", _strip(x.shape), _strip(pooled.shape)))
        h = self.drop(F.leaky_relu(self.fc1(pooled), alpha))
        if trace is not None:
            trace.append(("dense1", _strip(pooled.shape), _strip(h.shape)))
        feats = F.leaky_relu(self.fc2(h), alpha)
        if trace is not None:
            trace.append(("dense2", _strip(h.shape), _strip(feats.shape)))
        return feats

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        self.check_input(x)
        feats = self.features(x, trace)
        logits = self.head(self.drop(feats))
        if trace is not None:
            trace.append(("head", _strip(feats.shape), _strip(logits.shape)))
        return logits


# ---------------------------------------------------------------------------
# Vision Transformer
# ---------------------------------------------------------------------------

class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float, rng, drop_rng):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_dim, rng)
        self.fc2 = Linear(mlp_dim, dim, rng)
        self.drop = Dropout(dropout, drop_rng)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        h = self.norm1(x)
        if trace is not None:
            trace.append(("norm1", _strip(x.shape), _strip(h.shape)))
        a = self.drop(self.attn(h, trace=trace))
        if trace is not None:
            trace.append(("attention", _strip(h.shape), _strip(a.shape)))
        x = x + a
        h = self.norm2(x)
        if trace is not None:
            trace.append(("norm2", _strip(x.shape), _strip(h.shape)))
        m = F.gelu(self.fc1(h))
        if trace is not None:
            trace.append(("mlp_fc1", _strip(h.shape), _strip(m.shape)))
        m2 = self.drop(self.fc2(self.drop(m)))
        if trace is not None:
            trace.append(("mlp_fc2", _strip(m.shape), _strip(m2.shape)))
        out = x + m2
        if trace is not None:
            trace.append(("block", _strip(x.shape), _strip(out.shape)))
        return out


class ViT(Model):
    """Patch-embedding transformer classifying from the CLS token."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator, drop_rng: np.random.Generator):
        super().__init__()
        if spec.name != "vit":
            raise ConfigurationError(f"build_vit needs spec.name == 'vit', got {spec.name!r}")
        self.spec = spec
        embed, depth, heads, mlp_dim, patch = self.spec.vit_dims
        side = self.spec.input_side
        if side % patch:
            raise ConfigurationError(f"input side {side} is not divisible by patch size {patch}")
        n = (side // patch) ** 2
        self.patch_embed = Conv2d(3, embed, patch, rng, stride=patch)
        self.cls_token = Parameter(normal(rng, (1, 1, embed), 0.02))
        self.pos_embed = Parameter(normal(rng, (1, n + 1, embed), 0.02))
        self.pos_drop = Dropout(self.spec.dropout_rate, drop_rng)
        self.blocks = [
            TransformerBlock(embed, heads, mlp_dim, self.spec.dropout_rate, rng, drop_rng) for _ in range(depth)
        ]
        self.norm = LayerNorm(embed)
        self.head = Linear(embed, self.spec.num_classes, rng)
        # trade compute for memory: block activations are rebuilt during backward
        self.recompute_blocks = True

    @property
    def num_tokens(self) -> int:
        return (self.spec.input_side // self.spec.vit_dims[4]) ** 2

    @property
    def feature_dim(self) -> int:
        return self.num_tokens * self.spec.vit_dims[0]

    def tokens(self, x: Tensor, trace: list | None = None) -> Tensor:
        """Final layer-normed token states, CLS first: (N, tokens + 1, embed)."""
        if trace is not None:
            trace.append(("input", _strip(x.shape), _strip(x.shape)))
        grid = self.patch_embed(x)
        if trace is not None:
            trace.append(("patch_conv", _strip(x.shape), _strip(grid.shape)))
        n, d = grid.shape[0], grid.shape[1]
        tok = F.transpose(F.reshape(grid, (n, d, -1)), (0, 2, 1))
        if trace is not None:
            trace.append(("patch_embed", _strip(grid.shape), _strip(tok.shape)))
        cls = F.broadcast_to(self.cls_token, (n, 1, d))
        seq = self.pos_drop(F.concat([cls, tok], axis=1) + self.pos_embed)
        if trace is not None:
            trace.append(("pos_embed", _strip(tok.shape), _strip(seq.shape)))
        for block in self.blocks:
            if self.recompute_blocks and trace is None:
                seq = recompute(block, seq, [r for r in (block.drop.rng,) if r is not None])
            else:
                seq = block(seq, trace=trace)
        out = self.norm(seq)
        if trace is not None:
            trace.append(("norm", _strip(seq.shape), _strip(out.shape)))
        return out

    def features(self, x: Tensor, trace: list | None = None) -> Tensor:
        seq = self.tokens(x, trace)
        feats = F.flatten(seq[:, 1:, :])
        if trace is not None:
            trace.append(("token_features", _strip(seq.shape), _strip(feats.shape)))
        return feats

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        self.check_input(x)
        seq = self.tokens(x, trace)
        cls = seq[:, 0, :]
        if trace is not None:
            trace.append(("cls_pool", _strip(seq.shape), _strip(cls.shape)))
        logits = self.head(cls)
        if trace is not None:
            trace.append(("head", _strip(cls.shape), _strip(logits.shape)))
        return logits


# ---------------------------------------------------------------------------
# ResNet50
# ---------------------------------------------------------------------------

class Bottleneck(Module):
    expansion = 4

    def __init__(self, in_channels: int, width: int, stride: int, rng):
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = Conv2d(in_channels, width, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, padding=1, bias=False)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_channels, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut_conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm2d(out_channels)
        else:
            self.shortcut_conv = None
            self.shortcut_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)))
        h = F.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        skip = x if self.shortcut_conv is None else self.shortcut_bn(self.shortcut_conv(x))
        return F.relu(h + skip)


class ResNet50(Model):
    def __init__(self, spec: ArchSpec, rng: np.random.Generator, drop_rng: np.random.Generator):
        super().__init__()
        if spec.name != "resnet50":
            raise ConfigurationError(f"build_resnet50 needs spec.name == 'resnet50', got {spec.name!r}")
        self.spec = spec
        base = spec.resnet_widths[0]
        self.stem = Conv2d(3, base, 7, rng, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm2d(base)
        stages = []
        c_in = base
        for i, (width, blocks) in enumerate(zip(spec.resnet_widths, spec.resnet_blocks)):
            stage = []
            for j in range(blocks):
                stride = 2 if (i > 0 and j == 0) else 1
                stage.append(Bottleneck(c_in, width, stride, rng))
                c_in = width * Bottleneck.expansion
            stages.append(Stage(stage))
        self.stages = stages
        self.drop = Dropout(spec.dropout_rate, drop_rng)
        self.fc = Linear(c_in, spec.num_classes, rng)

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        self.check_input(x)
        if trace is not None:
            trace.append(("input", _strip(x.shape), _strip(x.shape)))
        h = F.relu(self.stem_bn(self.stem(x)))
        if trace is not None:
            trace.append(("conv1", _strip(x.shape), _strip(h.shape)))
        p = F.maxpool2d(h, 3, 2, padding=1)
        if trace is not None:
            trace.append(("maxpool1", _strip(h.shape), _strip(p.shape)))
        h = p
        for i, stage in enumerate(self.stages):
            h_in = h
            h = stage(h)
            if trace is not None:
                trace.append((f"residual_block{i + 1}", _strip(h_in.shape), _strip(h.shape)))
        pooled = F.global_avg_pool(h)
        if trace is not None:
            trace.append(("gap", _strip(h.shape), _strip(pooled.shape)))
        logits = self.fc(self.drop(pooled))
        if trace is not None:
            trace.append(("fc", _strip(pooled.shape), _strip(logits.shape)))
            trace.append(("softmax", _strip(logits.shape), _strip(logits.shape)))
        return logits


class Stage(Module):
    def __init__(self, blocks: list[Bottleneck]):
        super().__init__()
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


# ---------------------------------------------------------------------------
# CNN + ViT fusion
# ---------------------------------------------------------------------------

class Hybrid(Model):
    """Frozen CNN and ViT feature extractors feeding a three-layer MLP."""

    def __init__(self, cnn: CNN, vit: ViT, spec: ArchSpec, rng: np.random.Generator, drop_rng: np.random.Generator):
        super().__init__()
        if spec.name != "hybrid":
            raise ConfigurationError(f"build_hybrid needs spec.name == 'hybrid', got {spec.name!r}")
        if cnn.feature_dim != spec.dense_units:
            raise ConfigurationError(f"CNN branch yields {cnn.feature_dim} features, spec expects {spec.dense_units}")
        expected_vit = spec.vit_tokens * spec.vit_dims[0]
        if vit.feature_dim != expected_vit:
            raise ConfigurationError(f"ViT branch yields {vit.feature_dim} features, spec expects {expected_vit}")
        self.spec = spec
        self.cnn = cnn
        self.vit = vit
        cnn.freeze()
        vit.freeze()
        width = cnn.feature_dim + vit.feature_dim
        h1, h2 = spec.mlp_hidden
        self.fc1 = Linear(width, h1, rng)
        self.fc2 = Linear(h1, h2, rng)
        self.head = Linear(h2, spec.num_classes, rng)
        self.drop = Dropout(spec.dropout_rate, drop_rng)

    @property
    def fused_width(self) -> int:
        return self.cnn.feature_dim + self.vit.feature_dim

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(("cnn.", "vit."))]

    def train(self, mode: bool = True) -> Module:
        super().train(mode)
        self.cnn.eval()
        self.vit.eval()
        return self

    def fused_features(self, x: Tensor, trace: list | None = None) -> Tensor:
        """Concatenated [CNN | ViT] feature rows for a batch of images."""
        with no_grad():
            local = self.cnn.features(x)
            vit_in = x
            side = self.vit.spec.input_side
            if x.shape[-1] != side:
                vit_in = Tensor(F.resize_bilinear(x.data, side), dtype=x.dtype)
            global_ = self.vit.features(vit_in)
            fused = F.concat([local, global_], axis=1)
        if trace is not None:
            trace.append(("input", _strip(x.shape), _strip(x.shape)))
            trace.append(("cnn_features", _strip(x.shape), _strip(local.shape)))
            trace.append(("vit_features", _strip(x.shape), _strip(global_.shape)))
            trace.append(("concat", (_strip(local.shape), _strip(global_.shape)), _strip(fused.shape)))
        return fused

    def classify(self, fused: Tensor, trace: list | None = None) -> Tensor:
        act = F.relu if self.spec.hybrid_activation == "relu" else (lambda t: F.leaky_relu(t, self.spec.leaky_alpha))
        h1 = self.drop(act(self.fc1(fused)))
        if trace is not None:
            trace.append(("mlp1", _strip(fused.shape), _strip(h1.shape)))
        h2 = self.drop(act(self.fc2(h1)))
        if trace is not None:
            trace.append(("mlp2", _strip(h1.shape), _strip(h2.shape)))
        logits = self.head(h2)
        if trace is not None:
            trace.append(("output", _strip(h2.shape), _strip(logits.shape)))
            trace.append(("softmax", _strip(logits.shape), _strip(logits.shape)))
        return logits

    def forward(self, x: Tensor, trace: list | None = None) -> Tensor:
        self.check_input(x)
        return self.classify(self.fused_features(x, trace), trace)


# ---------------------------------------------------------------------------
# builders and model-level helpers
# ---------------------------------------------------------------------------

def _rngs(seed: int, tag: int) -> tuple[np.random.Generator, np.random.Generator]:
    return make_rng([seed, tag, 0]), make_rng([seed, tag, 1])


def build_cnn(spec: ArchSpec, seed: int = 0) -> CNN:
    if spec.name != "cnn":
        raise ConfigurationError(f"build_cnn needs spec.name == 'cnn', got {spec.name!r}")
    return CNN(spec, *_rngs(seed, 1))


def build_vit(spec: ArchSpec, seed: int = 0) -> ViT:
    if spec.name != "vit":
        raise ConfigurationError(f"build_vit needs spec.name == 'vit', got {spec.name!r}")
    return ViT(spec, *_rngs(seed, 2))


def build_resnet50(spec: ArchSpec, seed: int = 0) -> ResNet50:
    return ResNet50(spec, *_rngs(seed, 3))


def build_hybrid(cnn: CNN, vit: ViT, spec: ArchSpec, seed: int = 0) -> Hybrid:
    return Hybrid(cnn, vit, spec, *_rngs(seed, 4))


def build_model(spec: ArchSpec, seed: int = 0) -> Model:
    """Build any architecture; a fusion model gets freshly initialized branches."""
    if spec.name == "cnn":
        return build_cnn(spec, seed)
    if spec.name == "vit":
        return build_vit(spec, seed)
    if spec.name == "resnet50":
        return build_resnet50(spec, seed)
    cnn = build_cnn(spec.branch("cnn"), seed)
    vit = build_vit(spec.branch("vit"), seed)
    return build_hybrid(cnn, vit, spec, seed)


@dataclass
class FeatureVector:
    source: str
    values: Tensor = field(repr=False)

    def __len__(self) -> int:
        return self.values.shape[-1]


def extract_features(model: Model, image: Tensor) -> FeatureVector:
    """Penultimate CNN activations or flattened ViT patch tokens (eval mode)."""
    if not isinstance(model, (CNN, ViT)):
        raise UnsupportedArchitectureError(
            f"feature extraction supports cnn and vit, not {model.spec.name}"
        )
    image = as_tensor(image)
    single = image.ndim == 3
    batch = F.reshape(image, (1,) + image.shape) if single else image
    model.check_input(batch)
    model.eval()
    with no_grad():
        feats = model.features(batch)
    if single:
        feats = Tensor(feats.data[0], dtype=feats.dtype)
    return FeatureVector(model.spec.name, feats)


def forward(model: Model, batch: Tensor, training: bool = False) -> Tensor:
    """Pre-softmax logits; ``training`` toggles dropout and batch statistics."""
    batch = as_tensor(batch)
    model.train(training)
    if training:
        return model(batch)
    with no_grad():
        return model(batch)


def count_parameters(model: Module) -> dict[str, int]:
    """Parameter count per layer (module owning the parameters) plus ``total``."""
    counts: dict[str, int] = {}
    for name, module in model.modules():
        own = sum(v.size for v in vars(module).values() if isinstance(v, Parameter))
        if own:
            counts[name or "<root>"] = own
    counts["total"] = sum(p.size for p in model.parameters())
    return counts
