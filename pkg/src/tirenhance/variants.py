"""Named model/training presets covering the ablation grid."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch.nn as nn

from .backbone import BackboneConfig, build_backbone
from .prompts import PromptConfig, wrap_backbone


@dataclass(frozen=True)
class Variant:
    wrap: bool
    progressive: bool
    prompt_overrides: tuple = ()


VARIANTS = {
    # plain backbone, one pass from the fully degraded input to the clean image
    "baseline": Variant(wrap=False, progressive=False),
    # plain backbone trained with progressive removal
    "iter": Variant(wrap=False, progressive=True),
    # degradation prompts only
    "dsp": Variant(True, True, (("use_type_prompt", False),)),
    "ppfn-linear": Variant(True, True, (("fusion_activation", "identity"),)),
    "ppfn-multiply": Variant(True, True, (("fusion", "multiply"),)),
    "ppfn": Variant(wrap=True, progressive=True),
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


def build_model(variant: str, backbone_cfg: BackboneConfig, prompt_cfg: PromptConfig,
                seed: int = 0) -> nn.Module:
    """Backbone (optionally prompt-wrapped) with seeded initialization."""
    v = get_variant(variant)
    backbone = build_backbone(backbone_cfg, seed)
    if not v.wrap:
        return backbone
    cfg = replace(prompt_cfg, **dict(v.prompt_overrides))
    return wrap_backbone(backbone, cfg, seed + 1)
