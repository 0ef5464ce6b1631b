import json
import math

import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from tirenhance.backbone import BackboneConfig, build_backbone
from tirenhance.evaluation import (SUBSET_NAMES, EvalReport, MetricResult, ablate_order, ablate_prompts,
                                   build_subset, build_test_subsets, default_plan, degraded_report,
                                   error_map_rgb, evaluate_dataset, iteration_analysis, read_subset,
                                   render_table, save_iteration_grid, write_subset)
from tirenhance.io import Image, synthetic_thermal_scene
from tirenhance.metrics import psnr, ssim
from tirenhance.prompts import PromptConfig, wrap_backbone


@pytest.fixture(scope="module")
def clean():
    rng = np.random.default_rng(0)
    return {f"c{i}": synthetic_thermal_scene(40, rng) for i in range(4)}


def identity_model():
    bb = build_backbone(BackboneConfig(levels=1, base_channels=4, blocks_per_level=1))
    with torch.no_grad():
        bb.head.weight.zero_()
    return wrap_backbone(bb, PromptConfig(prompt_dim=4, hidden_dim=8)).double()


def test_subset_construction_rules(clean):
    subsets = build_test_subsets(clean, seed=5)
    assert set(subsets) == set(SUBSET_NAMES)
    for it in subsets["hard"].items:
        assert it.spec.gates == (True, True, True) and it.scenario == "composite"
    for it in subsets["single_noise"].items:
        assert it.spec.gates == (False, False, True)
    for it in subsets["single_blur"].items:
        assert it.spec.gates == (False, True, False)
    for it in subsets["single_contrast"].items:
        assert it.spec.gates == (True, False, False)
        assert 0.3 <= it.spec.contrast.alpha <= 0.55  # hard-tier ranges
    with pytest.raises(ValueError):
        build_subset("hard", {}, 0)


def test_subset_regeneration_bit_identical(clean):
    a = build_subset("normal", clean, 9)
    b = build_subset("normal", clean, 9, workers=3)
    for x, y in zip(a.items, b.items):
        assert x.spec == y.spec and np.array_equal(x.degraded.pixels, y.degraded.pixels)


def test_write_and_read_subset(tmp_path, clean):
    sub = build_subset("hard", clean, 1)
    d = write_subset(sub, tmp_path)
    back = read_subset(d)
    assert [it.image_id for it in back.items] == [it.image_id for it in sub.items]
    for x, y in zip(sub.items, back.items):
        assert x.spec == y.spec
        assert np.max(np.abs(x.degraded.pixels - y.degraded.pixels)) <= 0.5 / 65535 + 1e-12
    side = json.loads(next((d / "specs").glob("*.json")).read_text())
    assert side["spec"]["gates"] == [True, True, True]
    next((d / "specs").glob("*.json")).unlink()
    with pytest.raises(FileNotFoundError):
        read_subset(d)


def test_identity_model_reports_degraded_scores(clean):
    sub = build_subset("hard", clean, 2)
    rep = evaluate_dataset(identity_model(), sub)
    for row, it in zip(rep.rows, sub.items):
        assert row.psnr == psnr(it.degraded, it.clean)
        assert row.ssim == ssim(it.degraded, it.clean)
    assert rep.mean_psnr() == degraded_report(sub).mean_psnr()


def test_report_aggregation_and_roundtrip(tmp_path):
    rows = [MetricResult(f"i{i}", "hard", 20.0 + i / 3, 0.5 + i / 10) for i in range(5)]
    rows += [MetricResult(f"i{i}", "normal", 25.0 - i / 7, 0.7) for i in range(3)]
    rep = EvalReport(rows, {"k": 1}, "ckpt")
    means = rep.means()
    assert abs(means["hard"]["psnr"] - sum(r.psnr for r in rows[:5]) / 5) < 1e-9
    assert means["normal"]["count"] == 3
    back = EvalReport.load(rep.save(tmp_path / "r.json"))
    assert back.rows == rep.rows and back.checkpoint_id == "ckpt"
    table = render_table(rep)
    assert "Average" in table.splitlines()[-1]
    assert len(table.splitlines()) == 2 + 5 + 2


def test_evaluation_deterministic(clean):
    sub = build_subset("normal", clean, 3)
    m = identity_model()
    assert evaluate_dataset(m, sub).rows == evaluate_dataset(m, sub, workers=2).rows


def test_iteration_analysis_contract(clean):
    item = build_subset("hard", clean, 4).items[0]
    outs = iteration_analysis(identity_model(), item)
    assert len(outs) == item.n_steps == 3
    assert [o.deg_prompt for o in outs] == ["noise", "blur", "contrast"]
    assert [o.k for o in outs] == [3, 2, 1]
    perfect = Image(item.clean.pixels)
    err = np.abs(perfect.pixels - item.clean.pixels)
    assert np.count_nonzero(err) == 0


def test_ablations_contract(clean):
    sub = build_subset("hard", clean, 6)
    m = identity_model()
    right, wrong = ablate_prompts(m, sub)
    assert [r.image_id for r in right.rows] == [r.image_id for r in wrong.rows]
    assert {r.setting for r in right.rows} == {"type=composite"}
    assert {r.setting for r in wrong.rows} == {"type=single"}
    orders = ablate_order(m, sub)
    assert len(orders) == math.factorial(3)
    assert ("noise", "blur", "contrast") in orders
    mixed = build_subset("single_noise", clean, 6)
    mixed.items = sub.items[:1] + mixed.items[:1]
    with pytest.raises(ValueError):
        ablate_order(m, mixed)


def test_default_plan():
    item = build_subset("hard", {"a": synthetic_thermal_scene(24, np.random.default_rng(1))}, 0).items[0]
    assert default_plan(item) == [("noise", "composite"), ("blur", "composite"), ("contrast", "composite")]
    assert default_plan(item, "single")[0] == ("noise", "single")


def test_error_map_and_grid(tmp_path, clean):
    rgb = error_map_rgb(np.array([[0.0, 0.25, 1.0]]))
    assert rgb.dtype == np.uint8 and rgb.shape == (1, 3, 3)
    assert np.array_equal(rgb[0, 1], rgb[0, 2])  # clipped at vmax
    item = build_subset("hard", clean, 4).items[0]
    outs = iteration_analysis(identity_model(), item)
    path = save_iteration_grid(outs, item, tmp_path / "g.png")
    im = PILImage.open(path)
    assert im.mode == "RGB" and im.size == (40 * 5, 80)
