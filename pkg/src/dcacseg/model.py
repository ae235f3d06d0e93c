"""Full segmentation model: U-Net backbone with optional DCAC heads."""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn

from . import backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .dcac import DCAC
from .planner import PlanConfig


class ModelOutput(NamedTuple):
    logits: torch.Tensor
    domain_logits: torch.Tensor | None = None

    @property
    def domain_probs(self) -> torch.Tensor | None:
        return None if self.domain_logits is None else torch.softmax(self.domain_logits, dim=-1)


class SegmentationModel(nn.Module):
    def __init__(self, plan: PlanConfig):
        super().__init__()
        self.plan = plan
        self.backbone = backbone.UNet(plan)
        self.dcac = None
        if plan.dcac_enabled:
            self.dcac = DCAC(plan.channels, plan.num_domains, plan.num_classes,
                             plan.predictor_hidden, plan.dac_kernel_sizes, plan.cac_kernel_sizes,
                             plan.descriptor_norm)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        backbone.init_weights(self.backbone, gen)
        if self.dcac is not None:
            self.dcac.reset_parameters(gen)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        features, dec = self.backbone(x)
        if self.dcac is None:
            return ModelOutput(dec.baseline_logits)
        logits, domain_logits = self.dcac(features, dec.pre_head,
                                          self.plan.stop_gradient_domain_encoding)
        return ModelOutput(logits, domain_logits)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        save_checkpoint(path, self.state_dict(), self.plan, meta)

    @classmethod
    def load(cls, path: str | Path) -> SegmentationModel:
        state, plan, _ = load_checkpoint(path)
        model = cls(plan)
        model.load_state_dict(state)
        return model


def build_model(plan: PlanConfig, seed: int | None = None) -> SegmentationModel:
    model = SegmentationModel(plan)
    model.reset_parameters(plan.seed if seed is None else seed)
    return model
