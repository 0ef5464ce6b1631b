"""
Synthetic thermal-infrared degradations.

The forward model applied to a clean frame is, innermost first::

    low contrast -> blur -> fixed-pattern noise (stripe + optics) -> random noise

Each operator clamps its output to [0, 1] and is the exact identity at its
identity parameters. All randomness is driven by integer seeds stored in the
parameter blocks, so a :class:`DegradationSpec` reproduces its output bit for
bit.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .io import Image

# Addition order of the three removable steps; removal runs in reverse.
STEP_KINDS = ("contrast", "blur", "noise")
REMOVAL_ORDER = tuple(reversed(STEP_KINDS))
BLUR_FAMILIES = ("gaussian", "defocus", "motion")
SCENARIOS = ("single", "composite")


@dataclass(frozen=True)
class ContrastParams:
    alpha: float = 1.0
    delta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not -0.1 <= self.delta <= 0.1:
            raise ValueError(f"delta must be in [-0.1, 0.1], got {self.delta}")


@dataclass(frozen=True)
class BlurParams:
    """Blur kernel description. Unused fields of other families are ignored."""

    family: str = "gaussian"
    sigma: float = 0.0
    radius: float = 0.0
    length: float = 1.0
    angle: float = 0.0

    def __post_init__(self):
        if self.family not in BLUR_FAMILIES:
            raise ValueError(f"unknown blur family {self.family!r}")
        if self.sigma < 0 or self.radius < 0 or self.length < 1:
            raise ValueError("blur sizes must be non-negative (length >= 1)")

    def kernel(self) -> np.ndarray:
        if self.family == "gaussian":
            return gaussian_kernel(self.sigma)
        if self.family == "defocus":
            return disk_kernel(self.radius)
        return motion_kernel(self.length, self.angle)


@dataclass(frozen=True)
class FixedPatternParams:
    """Column stripes plus a smooth optical field.

    ``mode="multiplicative"`` applies the optical field as a gain
    (``x * (1 + field)``) instead of an offset.
    """

    sigma_stripe: float = 0.0
    sigma_optical: float = 0.0
    optical_grid: int = 8
    seed: int = 0
    mode: str = "additive"

    def __post_init__(self):
        if self.sigma_stripe < 0 or self.sigma_optical < 0:
            raise ValueError("FPN sigmas must be non-negative")
        if self.optical_grid < 2:
            raise ValueError("optical_grid must be at least 2")
        if self.mode not in ("additive", "multiplicative"):
            raise ValueError(f"unknown FPN mode {self.mode!r}")


@dataclass(frozen=True)
class RandomNoiseParams:
    sigma_r: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be non-negative")


@dataclass(frozen=True)
class DegradationSpec:
    """Concrete parameters of one degradation draw.

    A step is active iff its parameter block is present; ``fpn`` and
    ``random_noise`` together form the noise step.
    """

    contrast: Optional[ContrastParams] = None
    blur: Optional[BlurParams] = None
    fpn: Optional[FixedPatternParams] = None
    random_noise: Optional[RandomNoiseParams] = None
    seed: int = 0

    def __post_init__(self):
        if not any(self.gates):
            raise ValueError("degradation spec has no active gate")

    @property
    def gates(self) -> tuple[bool, bool, bool]:
        """(contrast, blur, noise) activity flags."""
        return (self.contrast is not None, self.blur is not None,
                self.fpn is not None or self.random_noise is not None)

    @property
    def active_steps(self) -> tuple[str, ...]:
        return tuple(k for k, g in zip(STEP_KINDS, self.gates) if g)

    def to_dict(self) -> dict:
        return {
            "contrast": None if self.contrast is None else asdict(self.contrast),
            "blur": None if self.blur is None else asdict(self.blur),
            "fpn": None if self.fpn is None else asdict(self.fpn),
            "random_noise": None if self.random_noise is None else asdict(self.random_noise),
            "gates": list(self.gates),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        def block(kind, key):
            return None if d.get(key) is None else kind(**d[key])

        spec = cls(block(ContrastParams, "contrast"), block(BlurParams, "blur"),
                   block(FixedPatternParams, "fpn"), block(RandomNoiseParams, "random_noise"),
                   int(d.get("seed", 0)))
        if "gates" in d and tuple(d["gates"]) != spec.gates:
            raise ValueError(f"gates {d['gates']} inconsistent with parameter blocks")
        return spec


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma == 0:
        return np.ones((1, 1))
    r = int(math.ceil(3 * sigma))
    ax = np.arange(-r, r + 1)
    # divide before squaring so a tiny sigma cannot underflow to 0/0; the
    # off-center taps may overflow to inf, which correctly gives weight 0
    with np.errstate(over="ignore"):
        g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def disk_kernel(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    if r == 0:
        return np.ones((1, 1))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    k = (xx**2 + yy**2 <= radius**2).astype(np.float64)
    return k / k.sum()


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Line of the given length through the kernel center, bilinearly splatted."""
    n = int(math.ceil(length))
    n += 1 - n % 2
    if n == 1:
        return np.ones((1, 1))
    c = n // 2
    k = np.zeros((n + 1, n + 1))
    theta = math.radians(angle)
    half = (length - 1) / 2
    for t in np.linspace(-half, half, 4 * n + 1):
        x, y = c + t * math.cos(theta), c - t * math.sin(theta)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        k[y0, x0] += (1 - fx) * (1 - fy)
        k[y0, x0 + 1] += fx * (1 - fy)
        k[y0 + 1, x0] += (1 - fx) * fy
        k[y0 + 1, x0 + 1] += fx * fy
    k = k[:n, :n]
    k = 0.5 * (k + k[::-1, ::-1])  # splatting is point-symmetric up to rounding
    return k / k.sum()


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

def apply_low_contrast(img: Image, p: ContrastParams) -> Image:
    """Compress intensities toward the image mean and add an offset."""
    x = img.pixels
    mu = x.mean()
    # alpha*x + (1-alpha)*mu is exact at alpha == 1, unlike mu + alpha*(x - mu)
    out = p.alpha * x + (1.0 - p.alpha) * mu + p.delta
    return img.with_pixels(np.clip(out, 0.0, 1.0))


def correlate_reflect(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2-D correlation with symmetric (edge-including) reflection, no clamping."""
    return ndimage.correlate(x, kernel, mode="reflect")


def apply_blur(img: Image, p: BlurParams) -> Image:
    k = p.kernel()
    if k.shape[0] > img.height or k.shape[1] > img.width:
        raise ValueError(f"blur kernel {k.shape} larger than image {img.shape}")
    return img.with_pixels(np.clip(correlate_reflect(img.pixels, k), 0.0, 1.0))


def bilinear_upsample(grid: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a coarse grid onto ``shape``."""
    gh, gw = grid.shape
    h, w = shape
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.minimum(np.floor(ys).astype(int), gh - 2)
    x0 = np.minimum(np.floor(xs).astype(int), gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def fixed_pattern_fields(shape: tuple[int, int], p: FixedPatternParams) -> tuple[np.ndarray, np.ndarray]:
    """Draw (per-column stripe offsets, H x W optical field) from ``p.seed``."""
    rng = np.random.default_rng(p.seed)
    stripe = p.sigma_stripe * rng.standard_normal(shape[1])
    coarse = p.sigma_optical * rng.standard_normal((p.optical_grid, p.optical_grid))
    return stripe, bilinear_upsample(coarse, shape)


def apply_fixed_pattern_noise(img: Image, p: FixedPatternParams) -> Image:
    stripe, optical = fixed_pattern_fields(img.shape, p)
    if p.mode == "additive":
        out = img.pixels + stripe[None, :] + optical
    else:
        out = img.pixels * (1.0 + optical) + stripe[None, :]
    return img.with_pixels(np.clip(out, 0.0, 1.0))


def apply_random_noise(img: Image, p: RandomNoiseParams) -> Image:
    g = p.sigma_r * np.random.default_rng(p.seed).standard_normal(img.shape)
    return img.with_pixels(np.clip(img.pixels + g, 0.0, 1.0))


def apply_step(img: Image, kind: str, spec: DegradationSpec) -> Image:
    """Apply one removable step (contrast, blur, or the combined noise step)."""
    if kind == "contrast":
        return apply_low_contrast(img, spec.contrast)
    if kind == "blur":
        return apply_blur(img, spec.blur)
    if kind == "noise":
        if spec.fpn is not None:
            img = apply_fixed_pattern_noise(img, spec.fpn)
        if spec.random_noise is not None:
            img = apply_random_noise(img, spec.random_noise)
        return img
    raise ValueError(f"unknown step kind {kind!r}")


def compose_eq1(img: Image, spec: DegradationSpec) -> Image:
    """Full forward model: every active step in addition order."""
    for kind in spec.active_steps:
        img = apply_step(img, kind, spec)
    return img


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

Range = tuple[float, float]


@dataclass(frozen=True)
class TierRanges:
    alpha: Range
    delta: Range
    gaussian_sigma: Range
    defocus_radius: Range
    motion_length: Range
    sigma_stripe: Range
    sigma_optical: Range
    sigma_r: Range
    blur_families: tuple[str, ...] = BLUR_FAMILIES
    optical_grid: int = 8
    fpn_mode: str = "additive"

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("blur_families", "optical_grid", "fpn_mode"):
                continue
            lo, hi = getattr(self, f.name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"invalid range for {f.name}: {(lo, hi)}")
            object.__setattr__(self, f.name, (float(lo), float(hi)))
        if not self.blur_families or set(self.blur_families) - set(BLUR_FAMILIES):
            raise ValueError(f"invalid blur families {self.blur_families}")
        object.__setattr__(self, "blur_families", tuple(self.blur_families))
        if not (0 < self.alpha[0] and self.alpha[1] <= 1):
            raise ValueError("alpha range must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TierRanges":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown tier range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}


DEFAULT_TIERS = {
    "normal": TierRanges(
        alpha=(0.55, 0.8), delta=(-0.05, 0.05), gaussian_sigma=(0.8, 1.8),
        defocus_radius=(1.0, 3.0), motion_length=(3.0, 7.0), sigma_stripe=(0.01, 0.03),
        sigma_optical=(0.01, 0.02), sigma_r=(0.005, 0.015)),
    "hard": TierRanges(
        alpha=(0.3, 0.55), delta=(-0.1, 0.1), gaussian_sigma=(1.8, 3.0),
        defocus_radius=(3.0, 5.0), motion_length=(7.0, 15.0), sigma_stripe=(0.03, 0.05),
        sigma_optical=(0.02, 0.04), sigma_r=(0.015, 0.03)),
}


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def sample_gates(rng: np.random.Generator, gate_prob: float = 0.8) -> tuple[bool, bool, bool]:
    """Independent Bernoulli gates, redrawn until at least one is active."""
    if not 0.0 < gate_prob <= 1.0:
        raise ValueError("gate_prob must be in (0, 1]")
    while True:
        gates = tuple(bool(g) for g in rng.random(3) < gate_prob)
        if any(gates):
            return gates


def sample_spec(ranges: dict[str, TierRanges] | TierRanges, rng: np.random.Generator,
                tier: str = "hard", gate_prob: float = 0.8,
                gates: tuple[bool, bool, bool] | None = None) -> DegradationSpec:
    """Draw a gated degradation spec.

    Parameters
    ----------
    ranges : dict or TierRanges
        Range table keyed by tier name, or a single tier.
    gates : tuple of bool, optional
        Force the (contrast, blur, noise) gates instead of sampling them.
    """
    if isinstance(ranges, TierRanges):
        r = ranges
    else:
        if not ranges:
            raise ValueError("empty range table")
        if tier not in ranges:
            raise ValueError(f"unknown tier {tier!r}; have {sorted(ranges)}")
        r = ranges[tier]
    if gates is None:
        gates = sample_gates(rng, gate_prob)
    elif not any(gates):
        raise ValueError("forced gates must activate at least one step")

    def u(rg: Range) -> float:
        return float(rng.uniform(*rg))

    seed = _seed(rng)
    contrast = blur = fpn = noise = None
    if gates[0]:
        contrast = ContrastParams(u(r.alpha), u(r.delta))
    if gates[1]:
        family = r.blur_families[int(rng.integers(len(r.blur_families)))]
        if family == "gaussian":
            blur = BlurParams("gaussian", sigma=u(r.gaussian_sigma))
        elif family == "defocus":
            blur = BlurParams("defocus", radius=u(r.defocus_radius))
        else:
            blur = BlurParams("motion", length=u(r.motion_length), angle=float(rng.uniform(0, 180)))
    if gates[2]:
        fpn = FixedPatternParams(u(r.sigma_stripe), u(r.sigma_optical), r.optical_grid,
                                 _seed(rng), r.fpn_mode)
        noise = RandomNoiseParams(u(r.sigma_r), _seed(rng))
    return DegradationSpec(contrast, blur, fpn, noise, seed)


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

@dataclass
class TrainingSequence:
    """Degraded images ``degraded[k-1] = I^k_d`` for k = 1..N."""

    scenario: str
    clean: Image
    degraded: list[Image]
    step_kinds: tuple[str, ...]
    spec: DegradationSpec

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if len(self.degraded) != len(self.step_kinds) or not 1 <= len(self.degraded) <= 3:
            raise ValueError("sequence length must match step kinds and lie in 1..3")

    @property
    def n_steps(self) -> int:
        return len(self.degraded)

    @property
    def type_prompt(self) -> str:
        # a one-step chain is a single-degradation case whatever the scenario flag says
        return "composite" if self.scenario == "composite" and self.n_steps > 1 else "single"

    def with_images(self, clean: Image, degraded: list[Image]) -> "TrainingSequence":
        return TrainingSequence(self.scenario, clean, degraded, self.step_kinds, self.spec)


def generate_sequence(clean: Image, spec: DegradationSpec, scenario: str) -> TrainingSequence:
    kinds = spec.active_steps
    if scenario == "composite":
        out, cur = [], clean
        for kind in kinds:
            cur = apply_step(cur, kind, spec)
            out.append(cur)
    elif scenario == "single":
        out = [apply_step(clean, kind, spec) for kind in kinds]
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    return TrainingSequence(scenario, clean, out, kinds, spec)
