"""
Desk-scale overfit experiment.

Trains the prompt-conditioned progressive model and the plain one-pass
baseline on a handful of procedural scenes, then scores both on a hard-tier
composite subset built from the same scenes, together with the per-iteration
analysis and the prompt/order ablations of the progressive model.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .backbone import BackboneConfig
from .evaluation import (EvalReport, TestSubset, ablate_order, ablate_prompts, build_subset, degraded_report,
                         evaluate_dataset, iteration_analysis)
from .io import Image, synthetic_thermal_scene
from .prompts import PromptConfig
from .spt import ModelSpec, SPTTrainer, TrainConfig
from .variants import get_variant


@dataclass
class OverfitConfig:
    n_images: int = 16
    size: int = 64
    steps: int = 2000
    batch_size: int = 4
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    levels: int = 2
    base_channels: int = 16
    seed: int = 0
    variants: tuple = ("ppfn", "baseline")


@dataclass
class OverfitResult:
    degraded: EvalReport
    reports: dict[str, EvalReport]
    # (first-pass PSNR, final-pass PSNR) per test image, progressive model
    iterations: list[tuple[float, float]] = field(default_factory=list)
    order_psnr: dict[tuple[str, ...], float] = field(default_factory=dict)
    prompt_psnr: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def mean_psnr(self, variant: str) -> float:
        return self.reports[variant].mean_psnr()

    def gain(self, variant: str = "ppfn") -> float:
        return self.mean_psnr(variant) - self.degraded.mean_psnr()

    def improved_fraction(self) -> float:
        return float(np.mean([last >= first for first, last in self.iterations]))

    def summary(self) -> dict:
        return {"degraded_psnr": self.degraded.mean_psnr(),
                "variant_psnr": {v: r.mean_psnr() for v, r in self.reports.items()},
                "improved_fraction": self.improved_fraction() if self.iterations else None,
                "order_psnr": {">".join(k): v for k, v in self.order_psnr.items()},
                "prompt_psnr": dict(self.prompt_psnr), "seconds": dict(self.seconds)}


def overfit_images(cfg: OverfitConfig) -> dict[str, Image]:
    rng = np.random.default_rng(cfg.seed)
    return {f"scene{i:02d}": synthetic_thermal_scene(cfg.size, rng) for i in range(cfg.n_images)}


def train_variant(variant: str, images: dict[str, Image], cfg: OverfitConfig,
                  progress: Optional[Callable[[dict], None]] = None) -> SPTTrainer:
    spec = ModelSpec(variant, BackboneConfig(levels=cfg.levels, base_channels=cfg.base_channels),
                     PromptConfig(), cfg.seed)
    tcfg = TrainConfig(batch_size=cfg.batch_size, crop_size=cfg.size, steps=cfg.steps, lr_init=cfg.lr_init,
                       lr_final=cfg.lr_final, tier="hard", seed=cfg.seed)
    return SPTTrainer(spec, images, tcfg, extra={"experiment": asdict(cfg)}).run(progress=progress)


def analyse(model, subset: TestSubset, result: OverfitResult) -> None:
    """Fill the iteration and ablation fields of ``result`` for a progressive model."""
    for item in subset.items:
        outs = iteration_analysis(model, item)
        result.iterations.append((outs[0].psnr, outs[-1].psnr))
    result.order_psnr = {perm: rep.mean_psnr() for perm, rep in ablate_order(model, subset).items()}
    right, wrong = ablate_prompts(model, subset)
    result.prompt_psnr = {"composite": right.mean_psnr(), "single": wrong.mean_psnr()}


def run_overfit(cfg: OverfitConfig = OverfitConfig(),
                progress: Optional[Callable[[str, dict], None]] = None) -> OverfitResult:
    images = overfit_images(cfg)
    subset = build_subset("hard", images, cfg.seed)
    result = OverfitResult(degraded_report(subset), {})
    models = {}
    for variant in cfg.variants:
        t0 = time.perf_counter()
        cb = (lambda rec, v=variant: progress(v, rec)) if progress else None
        model = train_variant(variant, images, cfg, cb).model.eval()
        single_pass = not get_variant(variant).progressive
        result.reports[variant] = evaluate_dataset(model, subset, single_pass=single_pass, setting=variant)
        result.seconds[variant] = time.perf_counter() - t0
        models[variant] = model
    progressive = [v for v in cfg.variants if get_variant(v).progressive and get_variant(v).wrap]
    if progressive:
        analyse(models[progressive[0]], subset, result)
    return result
