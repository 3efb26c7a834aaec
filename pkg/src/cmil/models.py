"""Crop extractor, permutation-invariant accumulators and the bag classifier.

All modules run in float64. Parameters fall into three groups:

* ``theta``: crop feature extractor (the only part used at inference),
* ``phi``:   accumulator that pools crop embeddings into a bag representation,
* ``psi``:   linear identity classifier on top of bag representations.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "ExtractorConfig",
    "AccumulatorConfig",
    "CMILModel",
    "MeanPool",
    "MaxPool",
    "SumPool",
    "SetTransformer",
    "build_extractor",
    "build_accumulator",
    "extract_features",
    "accumulate",
    "set_transformer_forward",
    "classify_bag",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

DTYPE = torch.float64
CHECKPOINT_FORMAT = "cmil-checkpoint/1"
EXTRACTOR_KINDS = ("toy_mlp", "toy_cnn", "external")
ACCUMULATOR_KINDS = ("mean", "max", "sum", "set_transformer")


@dataclass(frozen=True)
class ExtractorConfig:
    kind: str = "toy_mlp"
    input_shape: tuple[int, ...] = (32,)
    embed_dim: int = 16
    hidden_sizes: tuple[int, ...] = (64, 64)
    feature_norm: bool = False

    def __post_init__(self):
        if self.kind not in EXTRACTOR_KINDS:
            raise ValueError(f"extractor kind must be one of {EXTRACTOR_KINDS}, got {self.kind!r}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(s) for s in self.hidden_sizes))


@dataclass(frozen=True)
class AccumulatorConfig:
    kind: str = "mean"
    st_layers: int = 2
    st_heads: int = 4
    st_hidden: int | None = None  # defaults to the embedding dimension
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ACCUMULATOR_KINDS:
            raise ValueError(f"accumulator kind must be one of {ACCUMULATOR_KINDS}, got {self.kind!r}")
        if self.st_layers < 1 or self.st_heads < 1:
            raise ValueError("st_layers and st_heads must be >= 1")


# ---------------------------------------------------------------------------
# extractor
# ---------------------------------------------------------------------------


class ToyMLP(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.Tanh()]
            prev = h
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.flatten(1))


class ToyCNN(nn.Module):
    """Two conv blocks and global average pooling for (C, H, W) crops."""

    def __init__(self, input_shape: Sequence[int], hidden: Sequence[int], out_dim: int):
        super().__init__()
        if len(input_shape) != 3:
            raise ValueError(f"toy_cnn expects input_shape (C, H, W), got {tuple(input_shape)}")
        c1, c2 = (list(hidden) + [16, 32])[:2]
        self.features = nn.Sequential(
            nn.Conv2d(input_shape[0], c1, 3, padding=1),
            nn.Tanh(),
            nn.Conv2d(c1, c2, 3, padding=1, stride=2),
            nn.Tanh(),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(c2, out_dim)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class Extractor(nn.Module):
    def __init__(self, body: nn.Module, feature_norm: bool):
        super().__init__()
        self.body = body
        self.feature_norm = feature_norm

    def forward(self, x):
        z = self.body(x)
        if self.feature_norm:
            z = F.normalize(z, dim=-1)
        return z


def build_extractor(cfg: ExtractorConfig, external: nn.Module | None = None) -> Extractor:
    if cfg.kind == "toy_mlp":
        body: nn.Module = ToyMLP(math.prod(cfg.input_shape), cfg.hidden_sizes, cfg.embed_dim)
    elif cfg.kind == "toy_cnn":
        body = ToyCNN(cfg.input_shape, cfg.hidden_sizes, cfg.embed_dim)
    else:
        if external is None:
            raise ValueError("extractor kind 'external' needs a module passed as `external`")
        body = external
    return Extractor(body, cfg.feature_norm)


# ---------------------------------------------------------------------------
# accumulators: (B, S, D) -> (B, D)
# ---------------------------------------------------------------------------


class MeanPool(nn.Module):
    def forward(self, z):
        return z.mean(dim=-2)


class MaxPool(nn.Module):
    def forward(self, z):
        return z.amax(dim=-2)


class SumPool(nn.Module):
    def forward(self, z):
        return z.sum(dim=-2)


class MultiheadAttentionBlock(nn.Module):
    """MAB(X, Y) = H + rFF(H) with H = X + Multihead(X, Y, Y)."""

    def __init__(self, dim: int, hidden: int, heads: int):
        super().__init__()
        if hidden % heads:
            raise ValueError(f"set transformer width {hidden} is not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, hidden)
        self.k = nn.Linear(dim, hidden)
        self.v = nn.Linear(dim, hidden)
        self.o = nn.Linear(hidden, dim)
        self.ff = nn.Sequential(nn.Linear(dim, hidden), nn.Tanh(), nn.Linear(hidden, dim))

    def _split(self, t):
        b, n, _ = t.shape
        return t.view(b, n, self.heads, -1).transpose(1, 2)

    def forward(self, x, y):
        q, k, v = self._split(self.q(x)), self._split(self.k(y)), self._split(self.v(y))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        att = torch.softmax(scores, dim=-1) @ v
        att = att.transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        h = x + self.o(att)
        return h + self.ff(h)


class SetTransformer(nn.Module):
    """Stacked self-attention blocks followed by attention pooling with one seed."""

    def __init__(self, dim: int, hidden: int | None = None, heads: int = 4, layers: int = 2):
        super().__init__()
        hidden = hidden or dim
        self.blocks = nn.ModuleList(MultiheadAttentionBlock(dim, hidden, heads) for _ in range(layers))
        self.seed_vector = nn.Parameter(torch.empty(1, 1, dim))
        nn.init.uniform_(self.seed_vector, -1 / math.sqrt(dim), 1 / math.sqrt(dim))
        self.pool = MultiheadAttentionBlock(dim, hidden, heads)

    def forward(self, z):
        squeeze = z.dim() == 2
        if squeeze:
            z = z.unsqueeze(0)
        for block in self.blocks:
            z = block(z, z)
        out = self.pool(self.seed_vector.expand(z.shape[0], -1, -1), z).squeeze(1)
        return out.squeeze(0) if squeeze else out


def build_accumulator(cfg: AccumulatorConfig, dim: int) -> nn.Module:
    if cfg.kind == "mean":
        return MeanPool()
    if cfg.kind == "max":
        return MaxPool()
    if cfg.kind == "sum":
        return SumPool()
    return SetTransformer(dim, cfg.st_hidden, cfg.st_heads, cfg.st_layers)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class CMILModel(nn.Module):
    """f_theta (extractor), g_phi (accumulator) and h_psi (classifier)."""

    def __init__(
        self,
        extractor: ExtractorConfig,
        accumulator: AccumulatorConfig,
        num_classes: int,
        *,
        seed: int | None = None,
        external: nn.Module | None = None,
    ):
        super().__init__()
        self.extractor_config = extractor
        self.accumulator_config = accumulator
        self.num_classes = int(num_classes)
        seed = accumulator.seed if seed is None else seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.extractor = build_extractor(extractor, external)
            self.accumulator = build_accumulator(accumulator, extractor.embed_dim)
            self.classifier = nn.Linear(extractor.embed_dim, self.num_classes)
        self.to(DTYPE)

    @property
    def embed_dim(self) -> int:
        return self.extractor_config.embed_dim

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "theta": list(self.extractor.parameters()),
            "phi": list(self.accumulator.parameters()),
            "psi": list(self.classifier.parameters()),
        }

    def named_groups(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            "theta": dict(self.extractor.named_parameters()),
            "phi": dict(self.accumulator.named_parameters()),
            "psi": dict(self.classifier.named_parameters()),
        }

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Crop embeddings, shape (N, D)."""
        return self.extractor(torch.as_tensor(x, dtype=DTYPE))

    def forward(self, x: torch.Tensor):
        """Run a batch of sub-bags.

        ``x`` has shape (B, S, *input_shape). Returns crop embeddings (B, S, D),
        bag representations (B, D) and class probabilities (B, C).
        """
        x = torch.as_tensor(x, dtype=DTYPE)
        b, s = x.shape[:2]
        z = self.extractor(x.reshape(b * s, *x.shape[2:])).reshape(b, s, -1)
        r = self.accumulator(z)
        return z, r, torch.softmax(self.classifier(r), dim=-1)


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------


def extract_features(crops, model: CMILModel) -> torch.Tensor:
    """Embed crops independently; ``crops`` is (N, *input_shape)."""
    x = torch.as_tensor(np.asarray(crops) if not torch.is_tensor(crops) else crops, dtype=DTYPE)
    shape = tuple(model.extractor_config.input_shape)
    if model.extractor_config.kind != "external" and tuple(x.shape[1:]) != shape:
        raise ValueError(f"crop shape {tuple(x.shape[1:])} does not match input_shape {shape}")
    z = model.embed(x)
    if not torch.isfinite(z).all():
        raise FloatingPointError("extractor produced non-finite embeddings")
    return z


def accumulate(embeddings, accumulator: nn.Module) -> torch.Tensor:
    """Pool a set of crop embeddings (S, D) into one bag representation (D,)."""
    z = torch.as_tensor(embeddings, dtype=DTYPE) if not torch.is_tensor(embeddings) else embeddings
    if z.dim() != 2 or z.shape[0] == 0:
        raise ValueError("accumulate needs a non-empty (S, D) set of embeddings")
    return accumulator(z.unsqueeze(0)).squeeze(0)


def set_transformer_forward(embeddings, accumulator: SetTransformer) -> torch.Tensor:
    if not isinstance(accumulator, SetTransformer):
        raise TypeError("expected a SetTransformer accumulator")
    return accumulate(embeddings, accumulator)


def classify_bag(r: torch.Tensor, classifier: nn.Linear) -> torch.Tensor:
    return torch.softmax(classifier(r), dim=-1)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: CMILModel, path: str | Path, *, labels: Sequence[str] = (), extra: dict | None = None) -> None:
    """Write configs and named flat parameter arrays (groups theta/phi/psi) as JSON."""
    params = {
        group: {
            name: {"shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
            for name, p in named.items()
        }
        for group, named in model.named_groups().items()
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "extractor": asdict(model.extractor_config),
        "accumulator": asdict(model.accumulator_config),
        "num_classes": model.num_classes,
        "labels": list(labels),
        "extra": extra or {},
        "params": params,
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[CMILModel, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    ext = ExtractorConfig(**doc["extractor"])
    if ext.kind == "external":
        raise ValueError("checkpoints with external extractors must be restored by the caller")
    model = CMILModel(ext, AccumulatorConfig(**doc["accumulator"]), doc["num_classes"])
    with torch.no_grad():
        for group, named in model.named_groups().items():
            stored = doc["params"][group]
            if set(stored) != set(named):
                raise ValueError(f"checkpoint group {group!r} does not match the model architecture")
            for name, p in named.items():
                arr = torch.tensor(stored[name]["data"], dtype=DTYPE).reshape(stored[name]["shape"])
                p.copy_(arr)
    return model, doc
