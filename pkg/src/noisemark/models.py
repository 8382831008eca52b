"""Dual-view network: expression and landmark backbones with classifier,
landmark-regression, and projection heads, plus momentum copies of the
encoders used to produce contrastive keys.

Everything runs in float64 on CPU; the networks are deliberately small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64


@dataclass(frozen=True)
class DualBackboneConfig:
    """Architecture settings for both views.

    Exactly one of input_dim (flat vectors -> MLP backbones) or input_shape
    (channels, height, width -> small conv backbones) must be given. For the
    conv path, hidden_dims acts as the per-stage channel list.
    """

    num_classes: int
    landmark_dim: int                      # flattened landmark vector length (2 per point)
    input_dim: int | None = None
    input_shape: tuple[int, int, int] | None = None
    hidden_dims: tuple[int, ...] = (128, 128)
    feature_dim_u: int = 64
    feature_dim_v: int = 64
    proj_dim: int = 64
    momentum: float = 0.99

    def __post_init__(self):
        if (self.input_dim is None) == (self.input_shape is None):
            raise ValueError("exactly one of input_dim or input_shape must be set")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.landmark_dim < 2 or self.landmark_dim % 2 != 0:
            raise ValueError(f"landmark_dim must be a positive even number, got {self.landmark_dim}")
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if self.proj_dim < 2:
            raise ValueError(f"proj_dim must be >= 2, got {self.proj_dim}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def _reset_linear(layer: nn.Linear, gen: torch.Generator) -> None:
    # mirrors the default Linear init, but drawn from an explicit generator
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def _reset_conv(layer: nn.Conv2d, gen: torch.Generator) -> None:
    fan_in = layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=gen)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=gen)


def init_module(module: nn.Module, gen: torch.Generator) -> nn.Module:
    """Re-draw all Linear/Conv2d parameters of `module` from `gen`."""
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            _reset_linear(sub, gen)
        elif isinstance(sub, nn.Conv2d):
            _reset_conv(sub, gen)
    return module


def mlp_backbone(input_dim: int, hidden_dims: tuple[int, ...], feature_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = input_dim
    for width in hidden_dims:
        layers += [nn.Linear(prev, width, dtype=DTYPE), nn.ReLU()]
        prev = width
    layers.append(nn.Linear(prev, feature_dim, dtype=DTYPE))
    return nn.Sequential(*layers)


class ConvBackbone(nn.Module):
    """Small conv net for raster inputs: conv/relu/pool stages, then a linear
    map from globally pooled channels to the feature vector."""

    def __init__(self, input_shape: tuple[int, int, int], channels: tuple[int, ...],
                 feature_dim: int):
        super().__init__()
        stages: list[nn.Module] = []
        prev = input_shape[0]
        for ch in channels:
            stages += [nn.Conv2d(prev, ch, kernel_size=3, padding=1, dtype=DTYPE),
                       nn.ReLU(), nn.MaxPool2d(2, ceil_mode=True)]
            prev = ch
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(prev, feature_dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stages(x)
        h = h.mean(dim=(2, 3))
        return self.head(h)


def projection_head(feature_dim: int, proj_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(feature_dim, feature_dim, dtype=DTYPE),
        nn.ReLU(),
        nn.Linear(feature_dim, proj_dim, dtype=DTYPE),
    )


def project(head: nn.Module, features: torch.Tensor) -> torch.Tensor:
    """Run a projection head and normalize each row to unit Euclidean norm."""
    return F.normalize(head(features), dim=1, eps=1e-12)


def _build_backbone(cfg: DualBackboneConfig, feature_dim: int) -> nn.Module:
    if cfg.input_dim is not None:
        return mlp_backbone(cfg.input_dim, cfg.hidden_dims, feature_dim)
    return ConvBackbone(cfg.input_shape, cfg.hidden_dims, feature_dim)


class DualViewModel(nn.Module):
    """Both backbones, their heads, and momentum copies of the key encoders.

    The expression path produces features u and class probabilities; the
    landmark path produces features v (the layer feeding the regression head)
    and predicted landmark coordinates. Key encoders mirror backbone +
    projection head per view and are only ever updated through
    momentum_update().
    """

    def __init__(self, cfg: DualBackboneConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        self.expr_backbone = init_module(_build_backbone(cfg, cfg.feature_dim_u), gen)
        self.lm_backbone = init_module(_build_backbone(cfg, cfg.feature_dim_v), gen)
        self.classifier = init_module(nn.Linear(cfg.feature_dim_u, cfg.num_classes, dtype=DTYPE), gen)
        self.landmark_head = init_module(nn.Linear(cfg.feature_dim_v, cfg.landmark_dim, dtype=DTYPE), gen)
        self.proj_u = init_module(projection_head(cfg.feature_dim_u, cfg.proj_dim), gen)
        self.proj_v = init_module(projection_head(cfg.feature_dim_v, cfg.proj_dim), gen)

        self.key_expr_backbone = _build_backbone(cfg, cfg.feature_dim_u)
        self.key_lm_backbone = _build_backbone(cfg, cfg.feature_dim_v)
        self.key_proj_u = projection_head(cfg.feature_dim_u, cfg.proj_dim)
        self.key_proj_v = projection_head(cfg.feature_dim_v, cfg.proj_dim)
        for online, key in self._encoder_pairs():
            key.load_state_dict(online.state_dict())
            key.requires_grad_(False)

    def _encoder_pairs(self):
        return [
            (self.expr_backbone, self.key_expr_backbone),
            (self.lm_backbone, self.key_lm_backbone),
            (self.proj_u, self.key_proj_u),
            (self.proj_v, self.key_proj_v),
        ]

    def expression_logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        u = self.expr_backbone(x)
        return u, self.classifier(u)

    def forward_expression(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (features u, class probabilities)."""
        u, logits = self.expression_logits(x)
        return u, F.softmax(logits, dim=1)

    def forward_landmark(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (features v, predicted landmark coordinates)."""
        v = self.lm_backbone(x)
        return v, self.landmark_head(v)

    def query_projections(self, u: torch.Tensor, v: torch.Tensor
                          ) -> tuple[torch.Tensor, torch.Tensor]:
        return project(self.proj_u, u), project(self.proj_v, v)

    @torch.no_grad()
    def key_projections(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        k_u = project(self.key_proj_u, self.key_expr_backbone(x))
        k_v = project(self.key_proj_v, self.key_lm_backbone(x))
        return k_u, k_v

    @torch.no_grad()
    def momentum_update(self, m: float | None = None) -> None:
        """key <- m * key + (1 - m) * online, for every key-encoder parameter."""
        m = self.cfg.momentum if m is None else m
        if not 0.0 <= m < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {m}")
        for online, key in self._encoder_pairs():
            for p_q, p_k in zip(online.parameters(), key.parameters()):
                p_k.mul_(m).add_(p_q, alpha=1.0 - m)

    def online_parameters(self):
        """Parameters trained by the optimizer (key encoders excluded)."""
        for module in (self.expr_backbone, self.lm_backbone, self.classifier,
                       self.landmark_head, self.proj_u, self.proj_v):
            yield from module.parameters()


def generator_from_seed(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


def as_model_input(rows, cfg: DualBackboneConfig) -> torch.Tensor:
    """Convert flat dataset rows into the tensor shape the backbones expect."""
    x = torch.as_tensor(rows, dtype=DTYPE)
    if x.ndim != 2:
        raise ValueError(f"expected (n, input_dim) rows, got shape {tuple(x.shape)}")
    if cfg.input_shape is not None:
        return x.reshape(x.shape[0], *cfg.input_shape)
    return x
