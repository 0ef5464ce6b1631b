"""
``tir`` command line: corpus synthesis, training, evaluation, inference.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .evaluation import (SUBSET_NAMES, EvalReport, TestSubset, ablate_order, ablate_prompts, build_subset,
                         default_plan, degraded_report, evaluate_dataset, iteration_analysis, read_subset,
                         render_table, restore_progressive, save_iteration_grid, write_subset)
from .io import DatasetManifest, ImageFormatError, load_image, save_image, split_manifest, write_synthetic_dataset
from .prompts import DEG_KINDS, TYPE_KINDS
from .spt import CheckpointError, SPTTrainer, load_model
from .variants import VARIANTS, get_variant

log = logging.getLogger("tirenhance")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    paths = cfg.paths
    if getattr(args, "clean_dir", None):
        paths = replace(paths, clean_dir=args.clean_dir)
    if getattr(args, "out", None):
        paths = replace(paths, output_dir=args.out)
    cfg = cfg.with_overrides(paths=paths)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    if getattr(args, "variant", None):
        if args.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {args.variant!r}")
        cfg = cfg.with_overrides(variant=args.variant)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.with_overrides(train=replace(cfg.train, steps=args.steps))
    return cfg


def _manifests(cfg: ExperimentConfig) -> tuple[DatasetManifest, DatasetManifest]:
    clean = Path(cfg.paths.clean_dir)
    if not clean.is_dir():
        raise UsageError(f"clean image directory not found: {clean}")
    return split_manifest(clean, cfg.seed, cfg.data.train_fraction)


def _eval_images(cfg: ExperimentConfig):
    train, val = _manifests(cfg)
    if cfg.data.eval_split == "train":
        return train.load_all()
    if cfg.data.eval_split == "all":
        return train.load_all() | val.load_all()
    return val.load_all()


def corpus_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.output_dir) / "corpus"


def train_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.output_dir) / f"train_{cfg.variant}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_init_config(args) -> int:
    cfg = ExperimentConfig()
    out = Path(args.path)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    cfg.save(out)
    print(out)
    return 0


def cmd_make_data(args) -> int:
    paths = write_synthetic_dataset(args.dest, args.count, args.size, args.seed)
    print(f"wrote {len(paths)} images to {args.dest}")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.scenario == "composite":
        names = [args.tier]
    else:
        names = ["single_noise", "single_blur", "single_contrast"]
    root = corpus_dir(cfg)
    existing = [n for n in names if (root / n).exists()]
    if existing and not args.force:
        raise UsageError(f"corpus folders exist: {existing}; pass --force to overwrite")
    for n in existing:
        shutil.rmtree(root / n)
    images = _eval_images(cfg)
    ranges = cfg.degradation.ranges()
    extra = cfg.provenance() | {"tier": args.tier}
    for name in names:
        subset = build_subset(name, images, cfg.seed, ranges, tier=args.tier, workers=args.workers)
        d = write_subset(subset, root, extra=extra)
        print(f"{name}: {len(subset)} images -> {d}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = train_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    train_m, _ = _manifests(cfg)
    images = train_m.load_all()
    if args.resume:
        trainer = SPTTrainer.resume(args.resume, images)
        if args.steps is not None and args.steps != trainer.total_steps:
            raise UsageError("--steps must match the resumed run's total steps")
    else:
        trainer = SPTTrainer(cfg.model_spec(), images, cfg.train_config(), cfg.degradation.ranges(),
                             extra=cfg.provenance() | {"config": cfg.to_dict()})
    cfg.save(out / "config.json")

    def progress(rec):
        if rec["step"] % 100 == 0 or rec["step"] + 1 == trainer.total_steps:
            log.info("step %d/%d lr %.2e loss %.4f", rec["step"] + 1, trainer.total_steps, rec["lr"],
                     float(np.sum(rec["losses"])))

    trainer.run(n_steps=args.max_steps, log_path=out / "train_log.jsonl", ckpt_dir=out, progress=progress)
    man = trainer.save(out / "last.pt")
    print(man.path)
    return 0


def _resolve_ckpt(cfg: ExperimentConfig, name: str) -> Path:
    if name in ("last", "best"):
        # no validation-based selection is done; the final checkpoint is "best"
        return train_dir(cfg) / "last.pt"
    return Path(name)


def _load_subset(cfg: ExperimentConfig, name: str) -> TestSubset:
    d = corpus_dir(cfg) / name
    if not (d / "subset.json").is_file():
        raise UsageError(f"subset {name!r} not synthesized under {corpus_dir(cfg)}; run `tir synth` first")
    return read_subset(d)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    ckpt = _resolve_ckpt(cfg, args.ckpt)
    model, manifest = load_model(ckpt)
    subset = _load_subset(cfg, args.subset)
    variant = manifest["model_spec"]["variant"]
    single_pass = not get_variant(variant).progressive
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "variant": variant,
            "checkpoint_config_hash": manifest.get("extra", {}).get("config_hash")}
    kw = dict(checkpoint_id=str(ckpt), config=meta, workers=args.workers or cfg.eval.workers)
    if args.ablate == "prompts":
        right, wrong = ablate_prompts(model, subset, **kw)
        report, tag = right.extend(wrong), "prompts"
    elif args.ablate == "order":
        reports = ablate_order(model, subset, **kw)
        report, tag = EvalReport([], reports[next(iter(reports))].config, str(ckpt)), "order"
        for r in reports.values():
            report.extend(r)
    else:
        report = evaluate_dataset(model, subset, single_pass=single_pass, setting=variant, **kw)
        report.extend(degraded_report(subset))
        tag = "eval"
    out = Path(cfg.paths.output_dir) / "reports"
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{tag}_{variant}_{args.subset}"
    report.save(out / f"{stem}.json")
    table = render_table(report)
    (out / f"{stem}.txt").write_text(table + "\n", encoding="utf-8")
    if args.grids:
        gdir = out / f"{stem}_grids"
        gdir.mkdir(exist_ok=True)
        for it in subset.items:
            plan = default_plan(it)[:1] if single_pass else None
            save_iteration_grid(iteration_analysis(model, it, plan), it,
                                gdir / f"{it.image_id.replace('/', '__')}.png")
    print(table)
    return 0


def _parse_plan(plan: str, typ: str) -> list[tuple[str, str]]:
    kinds = [k.strip() for k in plan.split(",") if k.strip()]
    bad = [k for k in kinds if k not in DEG_KINDS]
    if not kinds or bad:
        raise UsageError(f"invalid --plan {plan!r}; use a comma list of {DEG_KINDS}")
    if typ not in TYPE_KINDS:
        raise UsageError(f"invalid --type {typ!r}")
    return [(k, typ) for k in kinds]


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    plan = _parse_plan(args.plan, args.type)
    model, _ = load_model(_resolve_ckpt(cfg, args.ckpt))
    try:
        img = load_image(args.input)
    except ImageFormatError as exc:
        raise UsageError(str(exc)) from exc
    outs = restore_progressive(model, img, plan)
    src = Path(args.input)
    dest = Path(args.output) if args.output else src.with_name(f"{src.stem}_enhanced.png")
    save_image(outs[-1], dest, img.source_depth)
    written = [dest]
    if args.save_iterations:
        for i, (o, (deg, _)) in enumerate(zip(outs, plan), 1):
            p = dest.with_name(f"{dest.stem}_iter{i}_{deg}.png")
            save_image(o, p, img.source_depth)
            written.append(p)
    side = cfg.provenance() | {"input": str(src), "plan": [list(p) for p in plan],
                               "outputs": [str(p) for p in written]}
    dest.with_suffix(".json").write_text(json.dumps(side, indent=2), encoding="utf-8")
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tir", description="Thermal-infrared enhancement toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out=True):
        sp.add_argument("--config", help="experiment JSON (defaults used when omitted)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--clean-dir", dest="clean_dir")
        if out:
            sp.add_argument("--out", help="output directory (overrides paths.output_dir)")

    sp = sub.add_parser("init-config", help="write a default config")
    sp.add_argument("path")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_init_config)

    sp = sub.add_parser("make-data", help="write procedural clean stand-in images")
    sp.add_argument("dest")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("synth", help="synthesize degraded test corpora with spec sidecars")
    common(sp)
    sp.add_argument("--tier", choices=("normal", "hard"), default="hard")
    sp.add_argument("--scenario", choices=("composite", "single"), default="composite")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--workers", type=int, default=1, help="threads used to render degraded images")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--steps", type=int, help="total optimizer steps (overrides epochs)")
    sp.add_argument("--max-steps", dest="max_steps", type=int, help="stop after this many steps in this call")
    sp.add_argument("--variant", choices=sorted(VARIANTS))
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a synthesized subset")
    common(sp)
    sp.add_argument("--ckpt", default="last")
    sp.add_argument("--subset", default="hard", choices=SUBSET_NAMES)
    sp.add_argument("--variant", choices=sorted(VARIANTS), help="selects the train_<variant> run for last/best")
    sp.add_argument("--ablate", choices=("prompts", "order"))
    sp.add_argument("--grids", action="store_true", help="write per-iteration image/error grids")
    sp.add_argument("--workers", type=int, help="evaluation threads (default: eval.workers)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="enhance one image with an explicit removal plan")
    common(sp, out=False)
    sp.add_argument("input")
    sp.add_argument("--ckpt", default="last")
    sp.add_argument("--plan", default="noise,blur,contrast")
    sp.add_argument("--type", default="composite")
    sp.add_argument("--variant", choices=sorted(VARIANTS))
    sp.add_argument("-o", "--output")
    sp.add_argument("--save-iterations", dest="save_iterations", action="store_true")
    sp.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"tir: error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"tir: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
