"""Domain- and content-adaptive dynamic convolution heads.

A domain predictor maps globally pooled multiscale encoder features to a
probability vector over the source domains. Linear controllers turn a
conditioning vector into a flat parameter vector that fills a small stack of
per-sample convolution kernels. The domain-adaptive head is conditioned on
the domain probabilities, the content-adaptive head on the pooled bottleneck,
and the two are applied one after the other on the decoder output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

NEGATIVE_SLOPE = 0.01


@dataclass(frozen=True)
class DynamicHeadSpec:
    layers: tuple[tuple[int, int, int], ...]  # (in_channels, out_channels, kernel_size)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        for i, (cin, cout, k) in enumerate(self.layers):
            if cin < 1 or cout < 1:
                raise ValueError(f"layer {i}: channel counts must be positive")
            if k < 1 or k % 2 == 0:
                raise ValueError(f"layer {i}: kernel size must be odd and >= 1, got {k}")
            if i and self.layers[i - 1][1] != cin:
                raise ValueError(f"layer {i}: in_channels {cin} != previous out_channels")

    @classmethod
    def chain(cls, channels: Sequence[int], kernel_sizes: Sequence[int]) -> DynamicHeadSpec:
        """Spec with ``len(kernel_sizes)`` layers through ``channels``."""
        if len(channels) != len(kernel_sizes) + 1:
            raise ValueError("need one more channel count than kernel sizes")
        return cls(tuple((channels[i], channels[i + 1], k) for i, k in enumerate(kernel_sizes)))

    @property
    def in_channels(self) -> int:
        return self.layers[0][0]

    @property
    def out_channels(self) -> int:
        return self.layers[-1][1]


def param_count(spec: DynamicHeadSpec) -> int:
    return sum(cin * cout * k * k + cout for cin, cout, k in spec.layers)


@dataclass
class FlatKernelParams:
    values: torch.Tensor  # (B, param_count(spec))
    spec: DynamicHeadSpec

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] != param_count(self.spec):
            raise ValueError(
                f"flat parameter width {tuple(self.values.shape)} does not match spec "
                f"({param_count(self.spec)})"
            )


def split_params(params: FlatKernelParams) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Per layer ``(weight (B,out,in,k,k), bias (B,out))``; weights precede biases."""
    b = params.values.shape[0]
    out, pos = [], 0
    for cin, cout, k in params.spec.layers:
        n_w = cin * cout * k * k
        w = params.values[:, pos:pos + n_w].reshape(b, cout, cin, k, k)
        pos += n_w
        bias = params.values[:, pos:pos + cout]
        pos += cout
        out.append((w, bias))
    return out


def flatten_params(layers: Sequence[tuple[torch.Tensor, torch.Tensor]],
                   spec: DynamicHeadSpec) -> FlatKernelParams:
    if not layers:
        return FlatKernelParams(torch.zeros(0, 0), spec)
    b = layers[0][0].shape[0]
    parts = [t.reshape(b, -1) for w, bias in layers for t in (w, bias)]
    return FlatKernelParams(torch.cat(parts, dim=1), spec)


def pool_concat(features: Sequence[torch.Tensor]) -> torch.Tensor:
    """Global average pool each stage and concatenate in stage order -> (B, sum c_s)."""
    return torch.cat([f.mean(dim=(2, 3)) for f in features], dim=1)


def rms_normalize(v: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Scale each row to unit root-mean-square; keeps direction, drops magnitude."""
    return v * torch.rsqrt(v.pow(2).mean(dim=-1, keepdim=True) + eps)


def domain_descriptor(features: Sequence[torch.Tensor], normalize: bool) -> torch.Tensor:
    """``pool_concat`` with optional per-stage RMS normalisation of the pooled vectors."""
    if not normalize:
        return pool_concat(features)
    return torch.cat([rms_normalize(f.mean(dim=(2, 3))) for f in features], dim=1)


class RunningStandardizer(nn.Module):
    """Feature-wise standardisation with running statistics, in training and evaluation alike.

    Batch statistics are useless at a batch size of two, so each training
    forward first folds the (detached) batch moments into the running
    estimates and then normalises with them. The update weight is
    ``max(momentum, 1 / count)``: a cumulative mean for the first
    ``1 / momentum`` batches, an exponential one afterwards. Evaluation mode
    only reads the statistics.
    """

    def __init__(self, num_features: int, momentum: float = 0.01, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_sq", torch.ones(num_features))
        self.register_buffer("count", torch.zeros(()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            with torch.no_grad():
                self.count += 1
                w = max(self.momentum, 1.0 / float(self.count))
                self.running_mean.lerp_(x.mean(0).to(self.running_mean.dtype), w)
                self.running_sq.lerp_(x.pow(2).mean(0).to(self.running_sq.dtype), w)
        var = (self.running_sq - self.running_mean.pow(2)).clamp_min(0)
        return (x - self.running_mean) * torch.rsqrt(var + self.eps)


class DomainPredictor(nn.Module):
    """Two-layer perceptron producing domain logits."""

    def __init__(self, in_features: int, num_domains: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_features, hidden)
        self.fc2 = nn.Linear(hidden, num_domains)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fc1.in_features:
            raise ValueError(f"domain predictor expects {self.fc1.in_features} features, got {x.shape[-1]}")
        return self.fc2(F.leaky_relu(self.fc1(x), NEGATIVE_SLOPE))


def predict_domain(vector: torch.Tensor, predictor: DomainPredictor) -> torch.Tensor:
    return torch.softmax(predictor(vector), dim=-1)


def generate_kernels(cond: torch.Tensor, controller: nn.Linear, spec: DynamicHeadSpec) -> FlatKernelParams:
    if controller.out_features != param_count(spec):
        raise ValueError(
            f"controller width {controller.out_features} != param_count {param_count(spec)}"
        )
    return FlatKernelParams(controller(cond), spec)


def dynamic_conv_apply(x: torch.Tensor, params: FlatKernelParams,
                       negative_slope: float = NEGATIVE_SLOPE) -> torch.Tensor:
    """Apply the per-sample kernel stack; each batch element uses its own weights.

    Implemented as one grouped convolution per layer with the batch folded
    into the channel axis.
    """
    b, c, h, w = x.shape
    spec = params.spec
    if c != spec.in_channels:
        raise ValueError(f"channel mismatch: input has {c}, head expects {spec.in_channels}")
    if params.values.shape[0] != b:
        raise ValueError("one parameter vector per batch element required")
    layers = split_params(params)
    out = x.reshape(1, b * c, h, w)
    for i, ((cin, cout, k), (weight, bias)) in enumerate(zip(spec.layers, layers)):
        out = F.conv2d(out, weight.reshape(b * cout, cin, k, k), bias.reshape(b * cout),
                       padding=(k - 1) // 2, groups=b)
        if i < len(layers) - 1:
            out = F.leaky_relu(out, negative_slope)
    return out.reshape(b, spec.out_channels, h, w)


def dac_head(pre_head: torch.Tensor, domain_encoding: torch.Tensor, controller: nn.Linear,
             spec: DynamicHeadSpec) -> torch.Tensor:
    return dynamic_conv_apply(pre_head, generate_kernels(domain_encoding, controller, spec))


def cac_head(dac_output: torch.Tensor, bottleneck: torch.Tensor, controller: nn.Linear,
             spec: DynamicHeadSpec, normalize: bool = False) -> torch.Tensor:
    cond = bottleneck.mean(dim=(2, 3))
    if normalize:
        cond = rms_normalize(cond)
    return dynamic_conv_apply(dac_output, generate_kernels(cond, controller, spec))


def init_controller(controller: nn.Linear, spec: DynamicHeadSpec, generator: torch.Generator,
                    weight_std: float = 0.01) -> None:
    """Small random weights; the bias holds a He-uniform kernel stack so that a
    fresh head starts out as an ordinary convolution."""
    with torch.no_grad():
        controller.weight.normal_(0.0, weight_std, generator=generator)
        parts = []
        for cin, cout, k in spec.layers:
            bound = math.sqrt(6.0 / ((1 + NEGATIVE_SLOPE ** 2) * cin * k * k))
            parts.append(torch.empty(cin * cout * k * k).uniform_(-bound, bound, generator=generator))
            parts.append(torch.zeros(cout))
        controller.bias.copy_(torch.cat(parts))


class DCAC(nn.Module):
    def __init__(self, encoder_channels: Sequence[int], num_domains: int, num_classes: int,
                 predictor_hidden: int = 128, dac_kernel_sizes: Sequence[int] = (1,),
                 cac_kernel_sizes: Sequence[int] = (1, 1), descriptor_norm: str = "none"):
        super().__init__()
        if descriptor_norm not in ("none", "stage_rms", "standardize"):
            raise ValueError(f"unknown descriptor_norm {descriptor_norm!r}")
        self.normalize = descriptor_norm != "none"
        base = encoder_channels[0]
        self.dac_spec = DynamicHeadSpec.chain([base] * (len(dac_kernel_sizes) + 1), dac_kernel_sizes)
        self.cac_spec = DynamicHeadSpec.chain([base] * len(cac_kernel_sizes) + [num_classes],
                                              cac_kernel_sizes)
        self.standardizer = (RunningStandardizer(sum(encoder_channels))
                             if descriptor_norm == "standardize" else None)
        self.predictor = DomainPredictor(sum(encoder_channels), num_domains, predictor_hidden)
        self.dac_controller = nn.Linear(num_domains, param_count(self.dac_spec))
        self.cac_controller = nn.Linear(encoder_channels[-1], param_count(self.cac_spec))

    def reset_parameters(self, generator: torch.Generator) -> None:
        for lin in (self.predictor.fc1, self.predictor.fc2):
            nn.init.kaiming_uniform_(lin.weight, a=NEGATIVE_SLOPE, generator=generator)
            nn.init.zeros_(lin.bias)
        init_controller(self.dac_controller, self.dac_spec, generator)
        init_controller(self.cac_controller, self.cac_spec, generator)
        if self.standardizer is not None:
            self.standardizer.running_mean.zero_()
            self.standardizer.running_sq.fill_(1.0)
            self.standardizer.count.zero_()

    def forward(self, features: Sequence[torch.Tensor], pre_head: torch.Tensor,
                stop_gradient_domain_encoding: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(segmentation logits, domain logits)``."""
        descriptor = domain_descriptor(features, self.normalize)
        if self.standardizer is not None:
            descriptor = self.standardizer(descriptor)
        domain_logits = self.predictor(descriptor)
        encoding = torch.softmax(domain_logits, dim=-1)
        if stop_gradient_domain_encoding:
            encoding = encoding.detach()
        h = dac_head(pre_head, encoding, self.dac_controller, self.dac_spec)
        logits = cac_head(h, features[-1], self.cac_controller, self.cac_spec, self.normalize)
        return logits, domain_logits
