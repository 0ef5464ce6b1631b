"""
Dual prompt banks, prompt fusion and channel-wise feature modulation.

Conditioning pipeline for one forward call::

    F_deg = E_deg(deg_prompt[i])          i in {noise, blur, contrast}
    F_type = E_type(type_prompt[j])       j in {single, composite}
    F_p = phi(W_fusion([F_deg, F_type]))
    gamma_l, beta_l = W_p^l(F_p)          one linear head per injection site
    F_l <- F_l * (1 + gamma_l) + beta_l

The per-site heads start at zero, so a freshly wrapped backbone computes
exactly what the bare backbone computes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn

DEG_KINDS = ("noise", "blur", "contrast")
TYPE_KINDS = ("single", "composite")
FUSION_MODES = ("concat", "multiply")
ACTIVATIONS = {"gelu": nn.GELU, "identity": nn.Identity, "silu": nn.SiLU, "tanh": nn.Tanh}


@dataclass(frozen=True)
class PromptConfig:
    """Prompt-side dimensions and ablation switches.

    ``use_type_prompt=False`` drops the type branch (degradation prompts
    only); ``fusion="multiply"`` replaces concatenation by an elementwise
    product; ``fusion_activation="identity"`` removes the fusion
    nonlinearity. ``activation`` is the encoders' inner nonlinearity.
    """

    prompt_dim: int = 64
    hidden_dim: int = 128
    activation: str = "gelu"
    fusion_activation: str = "gelu"
    fusion: str = "concat"
    use_type_prompt: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.prompt_dim < 1 or self.hidden_dim < 1:
            raise ValueError("prompt dimensions must be positive")
        for act in (self.activation, self.fusion_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _index(value, names: Sequence[str], batch: int | None = None) -> torch.Tensor:
    """Normalize a prompt selector (name, int, or per-sample sequence) to a LongTensor."""
    if isinstance(value, torch.Tensor):
        idx = value.long().reshape(-1)
    elif isinstance(value, (str, int)):
        idx = torch.tensor([_one(value, names)])
    else:
        idx = torch.tensor([_one(v, names) for v in value])
    if idx.numel() and (idx.min() < 0 or idx.max() >= len(names)):
        raise KeyError(f"prompt index out of range for {names}")
    return idx


def _one(v, names):
    if isinstance(v, str):
        if v not in names:
            raise KeyError(f"unknown prompt {v!r}; expected one of {names}")
        return names.index(v)
    if not 0 <= int(v) < len(names):
        raise KeyError(f"prompt index {v} out of range for {names}")
    return int(v)


class PromptBank(nn.Module):
    """Three degradation prompts and two type prompts, all learnable."""

    def __init__(self, prompt_dim: int = 64, init_std: float = 0.02):
        super().__init__()
        self.prompt_dim = prompt_dim
        self.deg_prompts = nn.Parameter(torch.randn(len(DEG_KINDS), prompt_dim) * init_std)
        self.type_prompts = nn.Parameter(torch.randn(len(TYPE_KINDS), prompt_dim) * init_std)

    def select(self, deg_idx, type_idx) -> tuple[torch.Tensor, torch.Tensor]:
        return (self.deg_prompts[_index(deg_idx, DEG_KINDS)],
                self.type_prompts[_index(type_idx, TYPE_KINDS)])


def _mlp(d_in, d_hidden, act):
    return nn.Sequential(nn.Linear(d_in, d_hidden), ACTIVATIONS[act](), nn.Linear(d_hidden, d_hidden))


class PromptEncoder(nn.Module):
    """Independent two-layer encoders for degradation and type prompts."""

    def __init__(self, prompt_dim: int = 64, hidden_dim: int = 128, activation: str = "gelu"):
        super().__init__()
        self.deg_encoder = _mlp(prompt_dim, hidden_dim, activation)
        self.type_encoder = _mlp(prompt_dim, hidden_dim, activation)

    def forward(self, p_deg, p_type):
        return self.deg_encoder(p_deg), self.type_encoder(p_type)


class FusionHead(nn.Module):
    def __init__(self, hidden_dim: int = 128, activation: str = "gelu", mode: str = "concat",
                 use_type: bool = True):
        super().__init__()
        self.mode = mode
        self.use_type = use_type
        d_in = 2 * hidden_dim if (mode == "concat" and use_type) else hidden_dim
        self.linear = nn.Linear(d_in, hidden_dim)
        self.phi = ACTIVATIONS[activation]()

    def forward(self, f_deg: torch.Tensor, f_type: torch.Tensor) -> torch.Tensor:
        if f_deg.shape != f_type.shape:
            raise ValueError(f"prompt features differ in shape: {tuple(f_deg.shape)} vs {tuple(f_type.shape)}")
        if not self.use_type:
            z = f_deg
        elif self.mode == "concat":
            z = torch.cat([f_deg, f_type], dim=-1)
        else:
            z = f_deg * f_type
        if z.shape[-1] != self.linear.in_features:
            raise ValueError(f"fusion input has width {z.shape[-1]}, expected {self.linear.in_features}")
        return self.phi(self.linear(z))


class ModulationHead(nn.Module):
    """One zero-initialized ``hidden_dim -> 2*C_l`` linear head per site."""

    def __init__(self, hidden_dim: int, sites: Sequence[tuple[str, int]]):
        super().__init__()
        self.channels = dict(sites)
        self.heads = nn.ModuleDict()
        for site, ch in sites:
            lin = nn.Linear(hidden_dim, 2 * ch)
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
            self.heads[site] = lin

    def forward(self, f_p: torch.Tensor, site: str) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (gamma, beta), each shaped ``(C, 1, 1)`` for a vector ``f_p``
        or ``(B, C, 1, 1)`` for a batch of them."""
        if site not in self.heads:
            raise KeyError(f"unregistered injection site {site!r}")
        gb = self.heads[site](f_p)
        gamma, beta = gb.chunk(2, dim=-1)
        return gamma[..., None, None], beta[..., None, None]


def modulate(feat: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``feat * (1 + gamma) + beta`` with per-channel parameters.

    ``feat`` is channel-first, ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    c = feat.shape[-3]
    if gamma.shape[-3] != c or beta.shape[-3] != c:
        raise ValueError(f"channel mismatch: feature has {c}, modulation has "
                         f"{gamma.shape[-3]}/{beta.shape[-3]}")
    return feat * (1 + gamma) + beta


class PromptFusion(nn.Module):
    """Bank + encoders + fusion + per-site heads, bundled."""

    def __init__(self, sites: Sequence[tuple[str, int]], cfg: PromptConfig = PromptConfig()):
        super().__init__()
        self.cfg = cfg
        self.bank = PromptBank(cfg.prompt_dim, cfg.init_std)
        self.encoder = PromptEncoder(cfg.prompt_dim, cfg.hidden_dim, cfg.activation)
        self.fusion = FusionHead(cfg.hidden_dim, cfg.fusion_activation, cfg.fusion, cfg.use_type_prompt)
        self.modulation = ModulationHead(cfg.hidden_dim, sites)

    def encode(self, deg_idx, type_idx) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(*self.bank.select(deg_idx, type_idx))

    def prompt_feature(self, deg_idx, type_idx) -> torch.Tensor:
        """Fused conditioning vector, shape ``(B, hidden_dim)``."""
        f_deg, f_type = self.encode(deg_idx, type_idx)
        if f_deg.shape[0] != f_type.shape[0]:
            if f_deg.shape[0] == 1:
                f_deg = f_deg.expand_as(f_type)
            elif f_type.shape[0] == 1:
                f_type = f_type.expand_as(f_deg)
        return self.fusion(f_deg, f_type)


def encode_prompts(pf: PromptFusion, deg_idx, type_idx) -> tuple[torch.Tensor, torch.Tensor]:
    f_deg, f_type = pf.encode(deg_idx, type_idx)
    return f_deg[0], f_type[0]


def fuse_prompts(fh: FusionHead, f_deg: torch.Tensor, f_type: torch.Tensor) -> torch.Tensor:
    return fh(f_deg, f_type)


def modulation_params(mh: ModulationHead, f_p: torch.Tensor, site: str):
    return mh(f_p, site)


class ConditionedModel(nn.Module):
    """A backbone whose injection sites are modulated by the fused prompt."""

    def __init__(self, backbone: nn.Module, prompts: PromptFusion):
        super().__init__()
        sites = backbone.injection_sites()
        if not sites:
            raise ValueError("backbone exposes no injection sites")
        missing = [s for s, _ in sites if s not in prompts.modulation.heads]
        if missing:
            raise ValueError(f"no modulation head for sites {missing}")
        self.backbone = backbone
        self.prompts = prompts

    def injection_sites(self):
        return self.backbone.injection_sites()

    def forward(self, x: torch.Tensor, deg_idx="noise", type_idx="single", clamp=None,
                hook=None) -> torch.Tensor:
        f_p = self.prompts.prompt_feature(deg_idx, type_idx)
        if f_p.shape[0] == 1 and x.shape[0] != 1:
            f_p = f_p.expand(x.shape[0], -1)
        elif f_p.shape[0] != x.shape[0]:
            raise ValueError(f"{f_p.shape[0]} prompt selections for a batch of {x.shape[0]}")
        heads = self.prompts.modulation

        def site_hook(site, feat):
            gamma, beta = heads(f_p, site)
            feat = modulate(feat, gamma, beta)
            return feat if hook is None else hook(site, feat)

        return self.backbone(x, hook=site_hook, clamp=clamp)


def wrap_backbone(backbone: nn.Module, cfg: PromptConfig = PromptConfig(), seed: int = 0) -> ConditionedModel:
    """Attach freshly initialized prompt fusion to ``backbone``."""
    if not hasattr(backbone, "injection_sites") or not backbone.injection_sites():
        raise ValueError(f"{type(backbone).__name__} has no registered injection sites")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        prompts = PromptFusion(backbone.injection_sites(), cfg)
    return ConditionedModel(backbone, prompts)
