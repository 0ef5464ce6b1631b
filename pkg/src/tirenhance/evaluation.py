"""
Test-subset construction, dataset evaluation and ablation runners.

A test subset is a list of :class:`SubsetItem` (clean image, degraded input,
and the exact :class:`DegradationSpec` that produced it). Evaluation reads the
spec to decide how many restoration passes to run and with which prompts, in
removal order (noise -> blur -> contrast).
"""

from __future__ import annotations

import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np
import torch.nn as nn

from .backbone import forward_restore
from .degradation import DEFAULT_TIERS, DegradationSpec, TierRanges, generate_sequence, sample_spec
from .io import DatasetManifest, Image, load_image, save_image
from .metrics import psnr, ssim, ssim_settings

SUBSET_NAMES = ("normal", "hard", "single_noise", "single_blur", "single_contrast")
_SUBSET_RULES = {
    # name -> (tier key, forced gates, scenario); None tier means "single-degradation tier"
    "normal": ("normal", (True, True, True), "composite"),
    "hard": ("hard", (True, True, True), "composite"),
    "single_contrast": (None, (True, False, False), "single"),
    "single_blur": (None, (False, True, False), "single"),
    "single_noise": (None, (False, False, True), "single"),
}

Plan = list[tuple[str, str]]


@dataclass
class SubsetItem:
    image_id: str
    clean: Image
    degraded: Image
    spec: DegradationSpec
    scenario: str

    @property
    def step_kinds(self) -> tuple[str, ...]:
        return self.spec.active_steps

    @property
    def n_steps(self) -> int:
        return len(self.step_kinds)

    @property
    def type_prompt(self) -> str:
        return "composite" if self.scenario == "composite" and self.n_steps > 1 else "single"

    def sidecar(self) -> dict:
        return {"image_id": self.image_id, "scenario": self.scenario,
                "step_kinds": list(self.step_kinds), "spec": self.spec.to_dict()}


@dataclass
class TestSubset:
    name: str
    items: list[SubsetItem]

    def __len__(self):
        return len(self.items)


def _clean_images(clean) -> dict[str, Image]:
    if isinstance(clean, DatasetManifest):
        clean = clean.load_all()
    clean = dict(sorted(clean.items()))
    if not clean:
        raise ValueError("empty clean set")
    return clean


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def build_subset(name: str, clean, seed: int, ranges: dict[str, TierRanges] | None = None,
                 tier: str | None = None, scenario: str | None = None, workers: int = 1) -> TestSubset:
    """One named subset. ``tier``/``scenario`` override the subset's defaults.

    Specs are drawn serially in sorted id order; only the image synthesis is
    spread over ``workers`` threads, so the result does not depend on it.
    """
    if name not in _SUBSET_RULES:
        raise ValueError(f"unknown subset {name!r}")
    ranges = DEFAULT_TIERS if ranges is None else ranges
    rule_tier, gates, rule_scenario = _SUBSET_RULES[name]
    tier = tier or rule_tier or "hard"
    scenario = scenario or rule_scenario
    rng = np.random.default_rng([seed, SUBSET_NAMES.index(name)])
    jobs = [(image_id, img, sample_spec(ranges, rng, tier, gates=gates))
            for image_id, img in _clean_images(clean).items()]

    def make(job):
        image_id, img, spec = job
        return SubsetItem(image_id, img, generate_sequence(img, spec, scenario).degraded[-1], spec, scenario)

    return TestSubset(name, _map(make, jobs, workers))


def build_test_subsets(clean, seed: int, ranges: dict[str, TierRanges] | None = None,
                       names: Sequence[str] = SUBSET_NAMES, workers: int = 1) -> dict[str, TestSubset]:
    """Normal/Hard composite subsets (all three steps) and the three single-step subsets.

    Single-step subsets use the hard-tier ranges.
    """
    clean = _clean_images(clean)
    return {name: build_subset(name, clean, seed, ranges, workers=workers) for name in names}


def write_subset(subset: TestSubset, root: str | os.PathLike, depth: int = 16,
                 extra: dict | None = None) -> Path:
    """Write ``clean/``, ``degraded/`` and one JSON sidecar per image under ``root/name``."""
    d = Path(root) / subset.name
    for sub in ("clean", "degraded", "specs"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    index = []
    for it in subset.items:
        fname = f"{it.image_id.replace('/', '__')}.png"
        save_image(it.clean, d / "clean" / fname, depth)
        save_image(it.degraded, d / "degraded" / fname, depth)
        side = it.sidecar() | {"clean": f"clean/{fname}", "degraded": f"degraded/{fname}"}
        side.update(extra or {})
        (d / "specs" / f"{fname[:-4]}.json").write_text(json.dumps(side, indent=2, sort_keys=True),
                                                       encoding="utf-8")
        index.append([it.image_id, fname])
    meta = {"subset": subset.name, "entries": index}
    meta.update(extra or {})
    (d / "subset.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return d


def read_subset(path: str | os.PathLike) -> TestSubset:
    d = Path(path)
    meta = json.loads((d / "subset.json").read_text(encoding="utf-8"))
    items = []
    for image_id, fname in meta["entries"]:
        side_path = d / "specs" / f"{fname[:-4]}.json"
        if not side_path.is_file():
            raise FileNotFoundError(f"missing sidecar spec {side_path}")
        side = json.loads(side_path.read_text(encoding="utf-8"))
        items.append(SubsetItem(image_id, load_image(d / side["clean"]), load_image(d / side["degraded"]),
                                DegradationSpec.from_dict(side["spec"]), side["scenario"]))
    return TestSubset(meta["subset"], items)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricResult:
    image_id: str
    subset: str
    psnr: float
    ssim: float
    setting: str = "default"


@dataclass
class EvalReport:
    rows: list[MetricResult] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_id: str = ""

    def groups(self) -> dict[tuple[str, str], list[MetricResult]]:
        out: dict[tuple[str, str], list[MetricResult]] = {}
        for r in self.rows:
            out.setdefault((r.subset, r.setting), []).append(r)
        return out

    def means(self) -> dict[str, dict]:
        """Arithmetic means per ``subset`` (or ``subset|setting`` when settings vary)."""
        settings = {r.setting for r in self.rows}
        out = {}
        for (subset, setting), rows in self.groups().items():
            key = subset if len(settings) == 1 else f"{subset}|{setting}"
            out[key] = {"psnr": float(np.mean([r.psnr for r in rows])),
                        "ssim": float(np.mean([r.ssim for r in rows])), "count": len(rows)}
        return out

    def mean_psnr(self, subset: str | None = None, setting: str | None = None) -> float:
        rows = [r for r in self.rows if (subset is None or r.subset == subset)
                and (setting is None or r.setting == setting)]
        return float(np.mean([r.psnr for r in rows]))

    def mean_ssim(self, subset: str | None = None, setting: str | None = None) -> float:
        rows = [r for r in self.rows if (subset is None or r.subset == subset)
                and (setting is None or r.setting == setting)]
        return float(np.mean([r.ssim for r in rows]))

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "means": self.means(),
                "config": self.config, "checkpoint_id": self.checkpoint_id}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([MetricResult(**r) for r in d["rows"]], d.get("config", {}), d.get("checkpoint_id", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self


def render_table(report: EvalReport) -> str:
    """Plain-text table: one row per image, one PSNR/SSIM column per subset/setting, then Average."""
    columns = sorted(report.groups())
    label = {c: c[0] if len({s for _, s in columns}) == 1 else f"{c[0]}|{c[1]}" for c in columns}
    cells: dict[str, dict] = {}
    for col, rows in report.groups().items():
        for r in rows:
            cells.setdefault(r.image_id, {})[col] = f"{r.psnr:.2f}/{r.ssim:.3f}"
    avg = {c: f"{np.mean([r.psnr for r in rs]):.2f}/{np.mean([r.ssim for r in rs]):.3f}"
           for c, rs in report.groups().items()}
    header = ["image"] + [label[c] for c in columns]
    body = [[i] + [cells[i].get(c, "-") for c in columns] for i in sorted(cells)]
    body.append(["Average"] + [avg[c] for c in columns])
    widths = [max(len(str(row[j])) for row in [header] + body) for j in range(len(header))]
    fmt = lambda row: "  ".join(str(v).ljust(w) for v, w in zip(row, widths))
    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in body[:-1]] + ["  ".join("-" * w for w in widths), fmt(body[-1])]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# inference with a removal plan
# ---------------------------------------------------------------------------

def default_plan(item: SubsetItem, type_prompt: str | None = None) -> Plan:
    typ = type_prompt or item.type_prompt
    return [(kind, typ) for kind in reversed(item.step_kinds)]


def restore_progressive(model: nn.Module, img: Image, plan: Plan) -> list[Image]:
    """Run one clamped pass per plan entry, feeding each output to the next."""
    outs = []
    for deg, typ in plan:
        img = forward_restore(model, img, deg, typ)
        outs.append(img)
    return outs


PlanArg = Union[None, Plan, Callable[[SubsetItem], Plan]]


def _resolve_plan(plan: PlanArg, item: SubsetItem) -> Plan:
    if plan is None:
        return default_plan(item)
    if callable(plan):
        return plan(item)
    return list(plan)


def evaluate_dataset(model: nn.Module, subset: TestSubset, removal_plan: PlanArg = None,
                     setting: str = "default", single_pass: bool = False,
                     checkpoint_id: str = "", config: dict | None = None, workers: int = 1) -> EvalReport:
    """Restore every item and score the final output against its clean image.

    ``single_pass=True`` runs only the first plan entry, which is how a model
    trained without progressive removal is evaluated.
    """
    def score(it):
        plan = _resolve_plan(removal_plan, it)
        if single_pass:
            plan = plan[:1]
        out = restore_progressive(model, it.degraded, plan)[-1]
        return MetricResult(it.image_id, subset.name, psnr(out, it.clean), ssim(out, it.clean), setting)

    rows = _map(score, subset.items, workers)
    cfg = {"metrics": ssim_settings()} | (config or {})
    return EvalReport(rows, cfg, checkpoint_id)


def degraded_report(subset: TestSubset) -> EvalReport:
    """Scores of the untouched degraded inputs."""
    rows = [MetricResult(it.image_id, subset.name, psnr(it.degraded, it.clean), ssim(it.degraded, it.clean),
                         "degraded") for it in subset.items]
    return EvalReport(rows, {"metrics": ssim_settings()})


@dataclass
class IterationOutput:
    k: int
    deg_prompt: str
    restored: Image
    error_map: np.ndarray
    psnr: float
    ssim: float


def iteration_analysis(model: nn.Module, item: SubsetItem, plan: Plan | None = None) -> list[IterationOutput]:
    """Intermediate restorations, absolute error maps and scores, one per pass."""
    plan = default_plan(item) if plan is None else plan
    outs = restore_progressive(model, item.degraded, plan)
    n = len(plan)
    return [IterationOutput(n - i, deg, out, np.abs(out.pixels - item.clean.pixels),
                            psnr(out, item.clean), ssim(out, item.clean))
            for i, ((deg, _), out) in enumerate(zip(plan, outs))]


def ablate_prompts(model: nn.Module, subset: TestSubset, **kw) -> tuple[EvalReport, EvalReport]:
    """Same removal order, correct (composite) vs incorrect (single) type prompt."""
    right = evaluate_dataset(model, subset, lambda it: default_plan(it, "composite"),
                             setting="type=composite", **kw)
    wrong = evaluate_dataset(model, subset, lambda it: default_plan(it, "single"),
                             setting="type=single", **kw)
    return right, wrong


def ablate_order(model: nn.Module, subset: TestSubset, **kw) -> dict[tuple[str, ...], EvalReport]:
    """Evaluate every permutation of the removal order (items must share their step set)."""
    kinds = {it.step_kinds for it in subset.items}
    if len(kinds) != 1:
        raise ValueError("order ablation needs items with identical active steps")
    canonical = tuple(reversed(next(iter(kinds))))
    out = {}
    for perm in itertools.permutations(canonical):
        plan = lambda it, p=perm: [(k, it.type_prompt) for k in p]
        out[perm] = evaluate_dataset(model, subset, plan, setting="order=" + ">".join(perm), **kw)
    return out


def error_map_rgb(err: np.ndarray, vmax: float = 0.25) -> np.ndarray:
    """Pseudo-color an absolute error map: clip to [0, vmax], scale, apply 'inferno'."""
    from matplotlib import colormaps

    x = np.clip(np.asarray(err, dtype=np.float64) / vmax, 0.0, 1.0)
    rgb = colormaps["inferno"](x)[..., :3]
    return np.rint(rgb * 255).astype(np.uint8)


def save_iteration_grid(outputs: Sequence[IterationOutput], item: SubsetItem, path: str | os.PathLike,
                        vmax: float = 0.25) -> Path:
    """Top row: degraded input, each pass, clean. Bottom row: matching error maps. 8-bit RGB PNG."""
    from PIL import Image as PILImage

    imgs = [item.degraded.pixels] + [o.restored.pixels for o in outputs] + [item.clean.pixels]
    errs = [np.abs(p - item.clean.pixels) for p in imgs]
    gray = lambda p: np.repeat(np.rint(np.clip(p, 0, 1) * 255).astype(np.uint8)[..., None], 3, axis=2)
    top = np.concatenate([gray(p) for p in imgs], axis=1)
    bottom = np.concatenate([error_map_rgb(e, vmax) for e in errs], axis=1)
    path = Path(path)
    PILImage.fromarray(np.concatenate([top, bottom], axis=0)).save(path)
    return path
