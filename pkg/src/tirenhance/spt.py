"""
Selective progressive training.

For one training sample with N degradation steps the network removes the
steps in reverse order, k = N .. 1:

* input: ``I^N_d`` at k = N; afterwards the stored ``I^{k-1}_d`` (single
  scenario) or the detached restoration of the previous iteration (composite)
* target: the clean image (single) or ``I^{k-1}_d`` (composite, ``I^0_d`` =
  clean)
* gradients of every iteration's L1 loss are accumulated and the optimizer
  steps once per batch.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, image_to_tensor, run_model
from .degradation import DEFAULT_TIERS, TierRanges, TrainingSequence, generate_sequence, sample_spec
from .io import DatasetManifest, Image, flip_stack, random_crop_stack
from .prompts import PromptConfig
from .variants import build_model, get_variant

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    crop_size: int = 256
    lr_init: float = 8e-5
    lr_final: float = 1e-6
    schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epochs: int = 300
    steps: Optional[int] = None  # overrides epochs when set
    gate_prob: float = 0.8
    scenario_prob_composite: float = 0.5
    tier: str = "hard"  # "normal", "hard" or "mixed"
    flip: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if not 0 < self.gate_prob <= 1:
            raise ValueError("gate_prob must be in (0, 1]")
        if not 0 <= self.scenario_prob_composite <= 1:
            raise ValueError("scenario_prob_composite must be in [0, 1]")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.batch_size < 1 or self.crop_size < 1:
            raise ValueError("batch_size and crop_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def total_steps(self, n_images: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_images / self.batch_size)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_final: float) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at step ``total_steps - 1``."""
    span = max(total_steps - 1, 1)
    t = min(max(step, 0), span) / span
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# ground truth / next-input rules
# ---------------------------------------------------------------------------

def select_gt(k: int, scenario: str, clean, seq):
    """Target of removal iteration ``k`` (1-based)."""
    n = len(seq.degraded)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside 1..{n}")
    if scenario == "single" or k == 1:
        return clean
    if scenario == "composite":
        return seq.degraded[k - 2]
    raise ValueError(f"unknown scenario {scenario!r}")


def next_input(k: int, scenario: str, seq, restored):
    """Input of iteration ``k - 1`` given the restoration produced at ``k``."""
    if not 2 <= k <= len(seq.degraded):
        raise ValueError(f"no next input after iteration k={k}")
    if scenario == "single":
        return seq.degraded[k - 2]
    if scenario == "composite":
        return restored.detach() if isinstance(restored, torch.Tensor) else restored
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass
class _TensorSeq:
    clean: torch.Tensor
    degraded: list[torch.Tensor]


def _to_tensors(seq: TrainingSequence, dtype) -> _TensorSeq:
    return _TensorSeq(image_to_tensor(seq.clean, dtype), [image_to_tensor(d, dtype) for d in seq.degraded])


@dataclass
class IterationRecord:
    k: int
    input_id: str
    gt_kind: str
    loss_value: float
    deg_prompt: str
    type_prompt: str
    scenario: str

    def to_dict(self):
        return asdict(self)


@dataclass
class StepResult:
    records: list[IterationRecord]
    updated: bool
    error: Optional[str] = None

    @property
    def losses(self) -> list[float]:
        return [r.loss_value for r in self.records]


def removal_passes(seq: TrainingSequence, progressive: bool = True):
    """(k, deg_prompt, type_prompt) for every training iteration of ``seq``."""
    n = seq.n_steps
    if progressive or seq.scenario == "single":
        return [(k, seq.step_kinds[k - 1], seq.type_prompt) for k in range(n, 0, -1)]
    # non-progressive composite: one pass from I^N_d straight to the clean
    # image, which is exactly the k = 1 target rule
    return [(1, seq.step_kinds[-1], seq.type_prompt)]


def spt_step(model: nn.Module, batch: Sequence[TrainingSequence], opt: torch.optim.Optimizer,
             progressive: bool = True, ids: Sequence[str] | None = None) -> StepResult:
    """Accumulate gradients over all samples and iterations, then update once.

    Each iteration's L1 loss is divided by the batch size only. Samples at
    the same removal pass (and with equal image shapes) share one forward
    call with per-sample prompts, which leaves the accumulated gradient
    unchanged. A non-finite loss aborts the batch without touching the
    parameters.
    """
    dtype = next(model.parameters()).dtype
    ids = list(ids) if ids is not None else [str(i) for i in range(len(batch))]
    opt.zero_grad(set_to_none=True)
    scale = 1.0 / len(batch)
    seqs = [_to_tensors(seq, dtype) for seq in batch]
    passes = [removal_passes(seq, progressive) for seq in batch]
    inputs = [t.degraded[-1] for t in seqs]
    records: list[list[IterationRecord]] = [[] for _ in batch]

    def flat():
        return [r for rs in records for r in rs]

    for j in range(max(len(p) for p in passes)):
        groups: dict[tuple, list[int]] = {}
        for i in range(len(batch)):
            if j < len(passes[i]):
                groups.setdefault(tuple(inputs[i].shape), []).append(i)
        for live in groups.values():
            x = torch.cat([inputs[i] for i in live])
            out = run_model(model, x, [passes[i][j][1] for i in live], [passes[i][j][2] for i in live],
                            clamp=False)
            gts = [select_gt(passes[i][j][0], batch[i].scenario, seqs[i].clean, seqs[i]) for i in live]
            per_sample = (out - torch.cat(gts)).abs().mean(dim=(1, 2, 3))
            values = per_sample.detach().tolist()
            for i, gt, value in zip(live, gts, values):
                k, deg, typ = passes[i][j]
                gt_kind = "clean" if gt is seqs[i].clean else "previous_degraded"
                records[i].append(IterationRecord(k, ids[i], gt_kind, value, deg, typ, batch[i].scenario))
            bad = [(ids[i], passes[i][j][0]) for i, v in zip(live, values) if not math.isfinite(v)]
            if bad:
                opt.zero_grad(set_to_none=True)
                msg = f"non-finite loss at sample {bad[0][0]}, k={bad[0][1]}"
                logger.warning("%s; skipping update", msg)
                return StepResult(flat(), False, msg)
            (per_sample.sum() * scale).backward()
            for n, i in enumerate(live):
                if j + 1 < len(passes[i]):
                    inputs[i] = next_input(passes[i][j][0], batch[i].scenario, seqs[i], out[n:n + 1])
    opt.step()
    return StepResult(flat(), True)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    variant: str = "ppfn"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    seed: int = 0

    def build(self) -> nn.Module:
        return build_model(self.variant, self.backbone, self.prompts, self.seed)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "backbone": self.backbone.to_dict(),
                "prompts": self.prompts.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["variant"], BackboneConfig(**d["backbone"]), PromptConfig(**d["prompts"]), d["seed"])


@dataclass
class CheckpointManifest:
    path: Path
    epoch: int
    global_step: int
    total_steps: int
    format_version: int = FORMAT_VERSION


class SPTTrainer:
    """Owns the model, optimizer, data RNG and step counter of one run.

    Everything that influences future updates lives in :meth:`state_dict`,
    so a resumed run continues exactly like an uninterrupted one.
    """

    def __init__(self, spec: ModelSpec, images: dict[str, Image], cfg: TrainConfig,
                 ranges: dict[str, TierRanges] | None = None, extra: dict | None = None):
        if not images:
            raise ValueError("empty training set")
        self.spec = spec
        self.cfg = cfg
        self.ranges = dict(DEFAULT_TIERS if ranges is None else ranges)
        self.images = dict(sorted(images.items()))
        self.extra = dict(extra or {})
        self.progressive = get_variant(spec.variant).progressive
        self.model = spec.build()
        self.model.train()
        self.opt = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_init,
                                    betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.rng = np.random.default_rng(cfg.seed)
        self.queue: deque[str] = deque()
        self.step = 0
        self.total_steps = cfg.total_steps(len(self.images))
        self.history: list[dict] = []

    @property
    def epoch(self) -> int:
        return (self.step * self.cfg.batch_size) // len(self.images)

    def _next_ids(self) -> list[str]:
        ids = []
        keys = list(self.images)
        while len(ids) < self.cfg.batch_size:
            if not self.queue:
                self.queue.extend(keys[i] for i in self.rng.permutation(len(keys)))
            ids.append(self.queue.popleft())
        return ids

    def _tier(self) -> str:
        if self.cfg.tier == "mixed":
            return sorted(self.ranges)[int(self.rng.integers(len(self.ranges)))]
        return self.cfg.tier

    def make_sample(self, image_id: str) -> TrainingSequence:
        clean = self.images[image_id]
        scenario = "composite" if self.rng.random() < self.cfg.scenario_prob_composite else "single"
        spec = sample_spec(self.ranges, self.rng, self._tier(), self.cfg.gate_prob)
        seq = generate_sequence(clean, spec, scenario)
        stack = [seq.clean] + seq.degraded
        stack = random_crop_stack(stack, self.cfg.crop_size, self.rng)
        if self.cfg.flip:
            stack = flip_stack(stack, self.rng)
        return seq.with_images(stack[0], stack[1:])

    def train_step(self) -> StepResult:
        ids = self._next_ids()
        batch = [self.make_sample(i) for i in ids]
        lr = cosine_lr(self.step, self.total_steps, self.cfg.lr_init, self.cfg.lr_final)
        for g in self.opt.param_groups:
            g["lr"] = lr
        result = spt_step(self.model, batch, self.opt, self.progressive, ids)
        rec = {"step": self.step, "lr": lr, "updated": result.updated,
               "losses": result.losses, "scenarios": [s.scenario for s in batch],
               "gates": [list(s.spec.gates) for s in batch]}
        if result.error:
            rec["error"] = result.error
        self.history.append(rec)
        self.step += 1
        return result

    def run(self, n_steps: int | None = None, log_path: str | os.PathLike | None = None,
            ckpt_dir: str | os.PathLike | None = None, progress: Callable[[dict], None] | None = None):
        end = self.total_steps if n_steps is None else min(self.step + n_steps, self.total_steps)
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.step < end:
                self.train_step()
                rec = self.history[-1]
                if log:
                    log.write(json.dumps(rec) + "\n")
                if progress:
                    progress(rec)
                every = self.cfg.checkpoint_every
                if ckpt_dir and every and self.step % every == 0:
                    self.save(Path(ckpt_dir) / f"step_{self.step:07d}.pt")
        finally:
            if log:
                log.close()
        return self

    # -- checkpointing -----------------------------------------------------

    def manifest(self) -> dict:
        return {"format_version": FORMAT_VERSION, "epoch": self.epoch, "global_step": self.step,
                "total_steps": self.total_steps, "model_spec": self.spec.to_dict(),
                "train_config": asdict(self.cfg),
                "ranges": {k: v.to_dict() for k, v in self.ranges.items()},
                "image_ids": list(self.images), "extra": self.extra}

    def save(self, path: str | os.PathLike) -> CheckpointManifest:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        state = {
            "manifest": json.dumps(self.manifest()),
            "rng": json.dumps(self.rng.bit_generator.state),
            "queue": json.dumps(list(self.queue)),
            "model": self.model.state_dict(),
            "optimizer": self.opt.state_dict(),
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        try:
            torch.save(state, tmp)
            os.replace(tmp, path)
        except OSError as exc:
            raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
        return CheckpointManifest(path, self.epoch, self.step, self.total_steps)

    @classmethod
    def resume(cls, path: str | os.PathLike, images: dict[str, Image]) -> "SPTTrainer":
        ckpt = load_checkpoint(path)
        man = ckpt["manifest"]
        missing = set(man["image_ids"]) - set(images)
        if missing:
            raise CheckpointError(f"training images missing for resume: {sorted(missing)[:5]}")
        trainer = cls(ModelSpec.from_dict(man["model_spec"]),
                      {i: images[i] for i in man["image_ids"]},
                      TrainConfig.from_dict(man["train_config"]),
                      {k: TierRanges.from_dict(v) for k, v in man["ranges"].items()},
                      man.get("extra"))
        trainer.model.load_state_dict(ckpt["model"])
        trainer.opt.load_state_dict(ckpt["optimizer"])
        trainer.rng.bit_generator.state = ckpt["rng"]
        trainer.queue = deque(ckpt["queue"])
        trainer.step = man["global_step"]
        trainer.total_steps = man["total_steps"]
        return trainer


def load_checkpoint(path: str | os.PathLike) -> dict:
    """Read a checkpoint; raises :class:`CheckpointError` on corruption or version mismatch."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        raw = torch.load(path, map_location="cpu", weights_only=True)
        manifest = json.loads(raw["manifest"])
    except Exception as exc:  # torch raises a variety of types for truncated files
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version} != supported {FORMAT_VERSION}")
    return {"manifest": manifest, "model": raw["model"], "optimizer": raw["optimizer"],
            "rng": json.loads(raw["rng"]), "queue": json.loads(raw["queue"])}


def load_model(path: str | os.PathLike) -> tuple[nn.Module, dict]:
    """Rebuild the model stored in a checkpoint, in eval mode."""
    ckpt = load_checkpoint(path)
    model = ModelSpec.from_dict(ckpt["manifest"]["model_spec"]).build()
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt["manifest"]


def train(spec: ModelSpec, data: DatasetManifest, cfg: TrainConfig,
          ranges: dict[str, TierRanges] | None = None, out_dir: str | os.PathLike = "runs",
          extra: dict | None = None) -> CheckpointManifest:
    """Train from scratch on ``data`` and write ``last.pt`` plus a JSONL log into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = SPTTrainer(spec, data.load_all(), cfg, ranges, extra)
    trainer.run(log_path=out_dir / "train_log.jsonl", ckpt_dir=out_dir)
    return trainer.save(out_dir / "last.pt")
