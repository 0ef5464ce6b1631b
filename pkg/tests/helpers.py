"""Independent oracles and toy models shared by the test modules."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tirenhance.degradation import (BlurParams, ContrastParams, DegradationSpec, FixedPatternParams,
                                    RandomNoiseParams, generate_sequence)
from tirenhance.io import synthetic_thermal_scene


class OneSiteNet(nn.Module):
    """conv(1->C) -> hook site "s0" -> tanh -> conv(C->1), no padding tricks."""

    def __init__(self, channels: int = 2):
        super().__init__()
        self.c = channels
        self.conv_in = nn.Conv2d(1, channels, 3, padding=1)
        self.conv_out = nn.Conv2d(channels, 1, 3, padding=1)

    def injection_sites(self):
        return [("s0", self.c)]

    def forward(self, x, deg_idx=None, type_idx=None, hook=None, clamp=None):
        h = self.conv_in(x)
        if hook is not None:
            h = hook("s0", h)
        out = x + self.conv_out(torch.tanh(h))
        return out.clamp(0, 1) if clamp else out


def randomize_heads(model, std=0.3, seed=0):
    """Replace zero-initialized modulation heads by random weights."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in model.prompts.modulation.heads.values():
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g, dtype=lin.weight.dtype) * std)
            lin.bias.copy_(torch.randn(lin.bias.shape, generator=g, dtype=lin.bias.dtype) * std)


def central_difference(loss_fn, params, step=1e-5):
    """Numerical gradient of ``loss_fn()`` w.r.t. every entry of every tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def toy_sequence(n_steps: int, scenario: str, size: int = 16, seed: int = 0):
    rng = np.random.default_rng(seed)
    clean = synthetic_thermal_scene(size, rng)
    blocks = {
        "contrast": dict(contrast=ContrastParams(0.6, 0.03)),
        "blur": dict(blur=BlurParams("gaussian", sigma=1.0)),
        "noise": dict(fpn=FixedPatternParams(0.02, 0.01, 4, seed=seed + 1),
                      random_noise=RandomNoiseParams(0.02, seed=seed + 2)),
    }
    kinds = ["contrast", "blur", "noise"][3 - n_steps:]
    kw = {}
    for k in kinds:
        kw.update(blocks[k])
    return generate_sequence(clean, DegradationSpec(**kw, seed=seed), scenario)


def to_t(img, dtype=torch.float64):
    return torch.as_tensor(np.ascontiguousarray(img.pixels), dtype=dtype)[None, None]


def detached_sum_loss(model, batch, progressive=True):
    """Reference objective: sum over samples and iterations of L1 / B with every
    chained input detached, written without any trainer code."""
    total = 0.0
    b = len(batch)
    for seq in batch:
        n = seq.n_steps
        clean = to_t(seq.clean)
        deg = [to_t(d) for d in seq.degraded]
        typ = "composite" if seq.scenario == "composite" and n > 1 else "single"
        if not progressive and seq.scenario == "composite":
            out = model(deg[-1], seq.step_kinds[-1], typ, clamp=False)
            total = total + F.l1_loss(out, clean) / b
            continue
        x = deg[-1]
        for k in range(n, 0, -1):
            out = model(x, seq.step_kinds[k - 1], typ, clamp=False)
            if seq.scenario == "single":
                gt = clean
                nxt = deg[k - 2] if k > 1 else None
            else:
                gt = deg[k - 2] if k > 1 else clean
                nxt = out.detach()
            total = total + F.l1_loss(out, gt) / b
            x = nxt
    return total


class NoStep(torch.optim.Optimizer):
    """Optimizer that keeps gradients and never changes parameters."""

    def __init__(self, params):
        super().__init__(params, {})
        self.calls = 0

    def step(self, closure=None):
        self.calls += 1
