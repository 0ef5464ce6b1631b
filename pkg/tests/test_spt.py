import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import NoStep, OneSiteNet, detached_sum_loss, randomize_heads, to_t, toy_sequence
from tirenhance.backbone import BackboneConfig
from tirenhance.io import synthetic_thermal_scene
from tirenhance.prompts import PromptConfig, wrap_backbone
from tirenhance.spt import (FORMAT_VERSION, CheckpointError, ModelSpec, SPTTrainer, TrainConfig, cosine_lr,
                            load_checkpoint, load_model, next_input, removal_passes, select_gt, spt_step)


def toy_model(seed=0):
    torch.manual_seed(seed)
    net = wrap_backbone(OneSiteNet(2), PromptConfig(prompt_dim=4, hidden_dim=8), seed=seed).double()
    randomize_heads(net, seed=seed)
    return net


def grads_of(model):
    return [torch.zeros_like(p) if p.grad is None else p.grad.clone() for p in model.parameters()]


# -- target and chaining rules --------------------------------------------------

def test_select_gt_rules():
    seq = toy_sequence(3, "composite")
    assert select_gt(1, "composite", seq.clean, seq) is seq.clean
    assert select_gt(2, "composite", seq.clean, seq) is seq.degraded[0]
    assert select_gt(3, "composite", seq.clean, seq) is seq.degraded[1]
    single = toy_sequence(3, "single")
    for k in (1, 2, 3):
        assert select_gt(k, "single", single.clean, single) is single.clean
    with pytest.raises(ValueError):
        select_gt(0, "single", single.clean, single)
    with pytest.raises(ValueError):
        select_gt(4, "single", single.clean, single)


def test_next_input_rules():
    single = toy_sequence(3, "single")
    assert next_input(3, "single", single, None) is single.degraded[1]
    out = torch.rand(1, 1, 4, 4, requires_grad=True)
    nxt = next_input(2, "composite", toy_sequence(2, "composite"), out)
    assert not nxt.requires_grad and torch.equal(nxt, out)
    with pytest.raises(ValueError):
        next_input(1, "composite", toy_sequence(2, "composite"), out)


def test_removal_passes_order_and_prompts():
    seq = toy_sequence(3, "composite")
    assert removal_passes(seq) == [(3, "noise", "composite"), (2, "blur", "composite"), (1, "contrast", "composite")]
    assert removal_passes(seq, progressive=False) == [(1, "noise", "composite")]
    single = toy_sequence(2, "single")
    assert [p[2] for p in removal_passes(single)] == ["single", "single"]


# -- equivalence oracle -----------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("scenario", ["single", "composite"])
def test_accumulated_gradient_matches_detached_sum(n, scenario):
    model = toy_model(n)
    batch = [toy_sequence(n, scenario, seed=s) for s in range(3)]
    opt = NoStep(model.parameters())
    spt_step(model, batch, opt)
    ours = grads_of(model)
    model.zero_grad(set_to_none=True)
    detached_sum_loss(model, batch).backward()
    ref = grads_of(model)
    diff = max((a - b).abs().max().item() for a, b in zip(ours, ref))
    assert diff < 1e-6


def test_mixed_sizes_and_lengths_match_detached_sum():
    model = toy_model(5)
    batch = [toy_sequence(3, "composite", size=16, seed=1), toy_sequence(1, "single", size=20, seed=2),
             toy_sequence(2, "single", size=16, seed=3), toy_sequence(2, "composite", size=12, seed=4)]
    res = spt_step(model, batch, NoStep(model.parameters()), ids=list("abcd"))
    assert [r.input_id for r in res.records] == list("aaabccdd")
    ours = grads_of(model)
    model.zero_grad(set_to_none=True)
    detached_sum_loss(model, batch).backward()
    assert max((a - b).abs().max().item() for a, b in zip(ours, grads_of(model))) < 1e-6


def test_non_progressive_matches_one_pass_oracle():
    model = toy_model(7)
    batch = [toy_sequence(3, "composite", seed=1), toy_sequence(2, "single", seed=2)]
    spt_step(model, batch, NoStep(model.parameters()), progressive=False)
    ours = grads_of(model)
    model.zero_grad(set_to_none=True)
    detached_sum_loss(model, batch, progressive=False).backward()
    assert max((a - b).abs().max().item() for a, b in zip(ours, grads_of(model))) < 1e-6


def test_gradient_isolation_between_iterations():
    model = toy_model(2)
    seq = toy_sequence(2, "composite")
    feats = []

    def keep(site, f):
        f.retain_grad()
        feats.append(f)
        return f

    out2 = model(to_t(seq.degraded[-1]), "blur", "composite", clamp=False, hook=keep)
    site_act = feats[-1]
    x1 = next_input(2, "composite", seq, out2)
    out1 = model(x1, "contrast", "composite", clamp=False)
    loss1 = torch.nn.functional.l1_loss(out1, to_t(seq.clean))
    g_out, g_feat = torch.autograd.grad(loss1, [out2, site_act], allow_unused=True)
    for g in (g_out, g_feat):
        assert g is None or torch.count_nonzero(g) == 0


def test_one_optimizer_step_per_batch():
    model = toy_model(3)
    opt = NoStep(model.parameters())
    batch = [toy_sequence(3, "composite", seed=s) for s in range(4)]
    res = spt_step(model, batch, opt)
    assert opt.calls == 1
    assert len(res.records) == 12 and res.updated
    gt_kinds = [r.gt_kind for r in res.records[:3]]
    assert gt_kinds == ["previous_degraded", "previous_degraded", "clean"]


def test_non_finite_loss_skips_update():
    model = toy_model(4)
    seq = toy_sequence(1, "single")
    with torch.no_grad():
        model.backbone.conv_out.bias.fill_(float("nan"))
    before = [p.clone() for p in model.parameters()]
    opt = torch.optim.Adam(model.parameters(), lr=0.1)
    res = spt_step(model, [seq], opt)
    assert not res.updated and res.error
    for a, b in zip(before, model.parameters()):
        assert torch.equal(a, b) or (torch.isnan(a).all() and torch.isnan(b).all())


# -- schedule -------------------------------------------------------------------

def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0, 101, 8e-5, 1e-6) == pytest.approx(8e-5, rel=1e-12)
    assert cosine_lr(100, 101, 8e-5, 1e-6) == pytest.approx(1e-6, rel=1e-12)
    assert cosine_lr(50, 101, 8e-5, 1e-6) == pytest.approx((8e-5 + 1e-6) / 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 500), st.floats(1e-6, 1e-2))
def test_cosine_monotone(total, lr0):
    lrs = [cosine_lr(s, total, lr0, lr0 / 10) for s in range(total)]
    assert all(a >= b - 1e-18 for a, b in zip(lrs, lrs[1:]))
    assert all(lr0 / 10 - 1e-18 <= v <= lr0 + 1e-18 for v in lrs)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-6, lr_final=1e-5)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig(epochs=3, batch_size=4).total_steps(10) == 9
    assert TrainConfig(steps=7).total_steps(10) == 7


# -- trainer and checkpoints ------------------------------------------------------

def tiny_setup(steps=6):
    rng = np.random.default_rng(0)
    images = {f"im{i}": synthetic_thermal_scene(24, rng) for i in range(5)}
    spec = ModelSpec("ppfn", BackboneConfig(levels=1, base_channels=4, blocks_per_level=1),
                     PromptConfig(prompt_dim=4, hidden_dim=8), seed=0)
    cfg = TrainConfig(batch_size=2, crop_size=16, steps=steps, lr_init=1e-3, lr_final=1e-4, seed=3)
    return spec, images, cfg


def test_trainer_deterministic():
    spec, images, cfg = tiny_setup()
    a = SPTTrainer(spec, images, cfg).run()
    b = SPTTrainer(spec, images, cfg).run()
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)
    assert a.history == b.history


def test_trainer_epoch_covers_every_image():
    spec, images, cfg = tiny_setup()
    tr = SPTTrainer(spec, images, cfg)
    seen = tr._next_ids() + tr._next_ids() + tr._next_ids()[:1]
    assert sorted(seen) == sorted(images)


def test_checkpoint_resume_equals_uninterrupted(tmp_path):
    spec, images, cfg = tiny_setup(6)
    full = SPTTrainer(spec, images, cfg).run()
    part = SPTTrainer(spec, images, cfg).run(3)
    man = part.save(tmp_path / "mid.pt")
    assert man.global_step == 3 and man.format_version == FORMAT_VERSION
    resumed = SPTTrainer.resume(tmp_path / "mid.pt", images).run()
    assert resumed.step == 6
    for pa, pb in zip(full.model.parameters(), resumed.model.parameters()):
        assert torch.equal(pa, pb)


def test_checkpoint_roundtrip_and_load_model(tmp_path):
    spec, images, cfg = tiny_setup(2)
    tr = SPTTrainer(spec, images, cfg).run()
    tr.save(tmp_path / "c.pt")
    model, manifest = load_model(tmp_path / "c.pt")
    assert not model.training
    assert manifest["global_step"] == 2 and manifest["model_spec"]["variant"] == "ppfn"
    for (na, pa), (nb, pb) in zip(tr.model.state_dict().items(), model.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_checkpoint_version_guard_and_corruption(tmp_path):
    spec, images, cfg = tiny_setup(1)
    tr = SPTTrainer(spec, images, cfg).run()
    path = tmp_path / "c.pt"
    tr.save(path)
    raw = torch.load(path, weights_only=True)
    man = json.loads(raw["manifest"])
    man["format_version"] = FORMAT_VERSION + 1
    raw["manifest"] = json.dumps(man)
    torch.save(raw, tmp_path / "future.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "future.pt")
    (tmp_path / "bad.pt").write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")


def test_resume_requires_images(tmp_path):
    spec, images, cfg = tiny_setup(1)
    SPTTrainer(spec, images, cfg).run().save(tmp_path / "c.pt")
    with pytest.raises(CheckpointError):
        SPTTrainer.resume(tmp_path / "c.pt", {"im0": images["im0"]})


def test_training_reduces_loss_on_fixed_batch():
    spec, images, cfg = tiny_setup()
    tr = SPTTrainer(spec, images, cfg)
    batch = [toy_sequence(2, "composite", size=16, seed=s) for s in range(2)]
    model = tr.model.double()
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    first = sum(spt_step(model, batch, opt).losses)
    for _ in range(30):
        last = sum(spt_step(model, batch, opt).losses)
    assert math.isfinite(last) and last < first
