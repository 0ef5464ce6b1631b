"""
Reference restoration backbone.

A small residual convolutional U-Net. Every encoder, bottleneck and decoder
block output is an *injection site*: ``forward`` accepts a ``hook`` callable
that may rewrite the feature at each site, which is how the prompt wrapper
conditions the network. External backbones can be wrapped by exposing the
same two things: ``injection_sites()`` and a ``hook`` keyword on ``forward``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .io import Image

SiteHook = Callable[[str, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class BackboneConfig:
    levels: int = 3
    base_channels: int = 32
    blocks_per_level: int = 2
    residual_output: bool = True
    head_init_std: float = 1e-3
    global_context: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.blocks_per_level < 1:
            raise ValueError(f"invalid backbone config {self}")

    def to_dict(self) -> dict:
        return asdict(self)


class HookedBackbone(Protocol):
    """What a network must provide to be wrapped with prompt conditioning."""

    def injection_sites(self) -> list[tuple[str, int]]: ...

    def forward(self, x: torch.Tensor, deg_idx=None, type_idx=None,
                hook: Optional[SiteHook] = None) -> torch.Tensor: ...


class ResBlock(nn.Module):
    """conv-GELU-conv residual block, optionally with a pooled global-context term.

    The context term (a 1x1 conv on the spatial mean, added to every pixel)
    gives each location access to image-wide intensity statistics, which
    global degradations such as a contrast stretch depend on. It is additive,
    so the block stays linear in that statistic and cannot amplify itself.
    """

    def __init__(self, ch: int, global_context: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.context = nn.Conv2d(ch, ch, 1) if global_context else None

    def forward(self, x):
        y = F.gelu(self.conv1(x))
        if self.context is not None:
            y = y + self.context(y.mean(dim=(-2, -1), keepdim=True))
        return x + self.conv2(y)


class UNetBackbone(nn.Module):
    """Encoder (``levels`` stages) -> bottleneck -> decoder with skip connections.

    Stage ``i`` runs at ``base_channels * 2**i`` channels; the bottleneck sits
    at ``2**levels`` downsampling, so inputs are padded to that multiple.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = [cfg.base_channels * 2**i for i in range(cfg.levels + 1)]
        nb = cfg.blocks_per_level
        gc = cfg.global_context
        self.stem = nn.Conv2d(1, c[0], 3, padding=1, padding_mode="reflect")
        self.enc = nn.ModuleList(nn.ModuleList(ResBlock(c[i], gc) for _ in range(nb)) for i in range(cfg.levels))
        self.down = nn.ModuleList(nn.Conv2d(c[i], c[i + 1], 2, stride=2) for i in range(cfg.levels))
        self.mid = nn.ModuleList(ResBlock(c[-1], gc) for _ in range(nb))
        self.up = nn.ModuleList(nn.ConvTranspose2d(c[i + 1], c[i], 2, stride=2) for i in range(cfg.levels))
        self.fuse = nn.ModuleList(nn.Conv2d(2 * c[i], c[i], 1) for i in range(cfg.levels))
        self.dec = nn.ModuleList(nn.ModuleList(ResBlock(c[i], gc) for _ in range(nb)) for i in range(cfg.levels))
        self.head = nn.Conv2d(c[0], 1, 3, padding=1, padding_mode="reflect")
        nn.init.normal_(self.head.weight, std=cfg.head_init_std)
        nn.init.zeros_(self.head.bias)

        sites = []
        for i in range(cfg.levels):
            sites += [(f"enc{i}_{j}", c[i]) for j in range(nb)]
        sites += [(f"mid_{j}", c[-1]) for j in range(nb)]
        for i in reversed(range(cfg.levels)):
            sites += [(f"dec{i}_{j}", c[i]) for j in range(nb)]
        self._sites = sites

    @property
    def stride(self) -> int:
        return 2**self.cfg.levels

    def injection_sites(self) -> list[tuple[str, int]]:
        return list(self._sites)

    def _blocks(self, blocks, x, prefix, hook):
        for j, blk in enumerate(blocks):
            x = blk(x)
            if hook is not None:
                x = hook(f"{prefix}_{j}", x)
        return x

    def forward(self, x: torch.Tensor, deg_idx=None, type_idx=None,
                hook: Optional[SiteHook] = None, clamp: Optional[bool] = None) -> torch.Tensor:
        """Restore a ``(B, 1, H, W)`` batch; H and W must be multiples of ``stride``.

        Prompt indices are accepted for interface compatibility and ignored.
        The output is clamped to [0, 1] when ``clamp`` is true, which defaults
        to ``not self.training``.
        """
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {self.stride}")
        h = self.stem(x)
        skips = []
        for i in range(self.cfg.levels):
            h = self._blocks(self.enc[i], h, f"enc{i}", hook)
            skips.append(h)
            h = self.down[i](h)
        h = self._blocks(self.mid, h, "mid", hook)
        for i in reversed(range(self.cfg.levels)):
            h = self.fuse[i](torch.cat([self.up[i](h), skips[i]], dim=1))
            h = self._blocks(self.dec[i], h, f"dec{i}", hook)
        out = self.head(h)
        if self.cfg.residual_output:
            out = x + out
        if clamp is None:
            clamp = not self.training
        return out.clamp(0.0, 1.0) if clamp else out


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> UNetBackbone:
    """Construct a backbone with parameters drawn from a private torch generator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNetBackbone(cfg)


def injection_sites(model: nn.Module) -> list[tuple[str, int]]:
    if hasattr(model, "injection_sites"):
        return model.injection_sites()
    raise TypeError(f"{type(model).__name__} does not expose injection sites")


def _pad_to_multiple(x: torch.Tensor, m: int) -> tuple[torch.Tensor, tuple[int, int]]:
    # reflect padding inside the convolutions needs at least 2x2 at the bottleneck
    h, w = x.shape[-2:]
    ph, pw = max((-h) % m, 2 * m - h), max((-w) % m, 2 * m - w)
    if ph == 0 and pw == 0:
        return x, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x, (0, pw, 0, ph), mode=mode), (h, w)


def model_stride(model: nn.Module) -> int:
    base = getattr(model, "backbone", model)
    return getattr(base, "stride", 1)


def run_model(model: nn.Module, x: torch.Tensor, deg_idx=None, type_idx=None,
              clamp: Optional[bool] = None) -> torch.Tensor:
    """Forward with reflect padding to the model stride and cropping back."""
    xp, (h, w) = _pad_to_multiple(x, model_stride(model))
    out = model(xp, deg_idx, type_idx, clamp=clamp)
    return out[..., :h, :w]


def image_to_tensor(img: Image | np.ndarray, dtype=torch.float32) -> torch.Tensor:
    px = img.pixels if isinstance(img, Image) else np.asarray(img)
    return torch.as_tensor(np.ascontiguousarray(px), dtype=dtype)[None, None]


def tensor_to_image(t: torch.Tensor, source_depth: int = 16) -> Image:
    px = t.detach().to(torch.float64).cpu().numpy()[0, 0]
    return Image(np.clip(px, 0.0, 1.0), source_depth)


@torch.no_grad()
def forward_restore(model: nn.Module, img: Image, deg_idx: str | None = None,
                    type_idx: str | None = None) -> Image:
    """Inference on one image: pad, run clamped, crop. Prompts are ignored by bare backbones."""
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        out = run_model(model, image_to_tensor(img, dtype), deg_idx, type_idx, clamp=True)
    finally:
        model.train(was_training)
    return tensor_to_image(out, img.source_depth)
