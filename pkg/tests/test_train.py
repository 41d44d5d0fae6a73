import json
import math

import numpy as np
import pytest
import torch

from platediff.data import Ellipse, SyntheticClass, SyntheticSpec, generate_synthetic, render_scene
from platediff.domain import FoodItem, Sample, Stage, queries_for
from platediff.errors import CheckpointMismatch, DataError
from platediff.losses import LossWeights
from platediff.model import Checkpoint, FusionConfig
from platediff.train import FeatureBank, TrainConfig, cosine_lr, predict, train_stage1, train_stage2


def small_model(stub, **kw):
    return FusionConfig(image_dim=stub.info.D_I, text_dim=stub.info.D_T, d_k=16, ffn_hidden=32, pre_norm=True, **kw)


@pytest.fixture(scope="module")
def tiny(stub, small_samples):
    bank = FeatureBank(stub)
    q1 = queries_for(small_samples[:4], Stage.ABSOLUTE)
    q2 = queries_for(small_samples[:4], Stage.DIFFERENCE)
    bank.add_queries(q1).add_queries(q2)
    return bank, q1, q2


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-4, 0, 100) == 1e-4
    assert cosine_lr(1e-4, 50, 100) == pytest.approx(5e-5)
    assert cosine_lr(1e-4, 100, 100) == pytest.approx(0.0, abs=1e-20)


def test_stage1_log_schedule_and_frozen_encoder(tmp_path, stub, tiny):
    bank, q1, _ = tiny
    cfg = TrainConfig(epochs=3, batch_size=4, base_lr=1e-4, seed=1, log_path=tmp_path / "log.jsonl",
                      checkpoint_path=tmp_path / "s1.pt")
    ckpt, rep = train_stage1(q1, cfg, stub, small_model(stub), bank)
    T = rep.total_steps
    assert T == 3 * math.ceil(len(q1) / 4) == len(rep.steps)
    for t, rec in enumerate(rep.steps):
        assert rec["step"] == t
        assert rec["lr"] == pytest.approx(1e-4 * (1 + math.cos(math.pi * t / T)) / 2, rel=0, abs=1e-18)
        assert rec["total"] == pytest.approx(rec["reg"] + 0.2 * rec["cont"], abs=1e-6)
    assert rep.lr_trace[0] == 1e-4 and rep.final_lr == pytest.approx(0.0, abs=1e-20)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == rep.steps
    assert set(lines[0]) == {"stage", "epoch", "step", "reg", "cont", "total", "lr"}
    assert rep.encoder_digest_before == rep.encoder_digest_after == stub.parameter_digest()
    assert Checkpoint.load(tmp_path / "s1.pt").digest() == ckpt.digest()


def test_training_is_deterministic(stub, tiny):
    bank, q1, _ = tiny
    cfg = TrainConfig(epochs=2, batch_size=4, seed=7)
    a, _ = train_stage1(q1, cfg, stub, small_model(stub), bank)
    b, _ = train_stage1(q1, cfg, stub, small_model(stub), bank)
    assert a.digest() == b.digest()
    c, _ = train_stage1(q1, TrainConfig(epochs=2, batch_size=4, seed=8), stub, small_model(stub), bank)
    assert c.digest() != a.digest()


def test_single_sample_overfit_to_200g(stub):
    spec = SyntheticSpec(classes=(SyntheticClass("red_blob", (220, 40, 40), 0.1),), items_per_image=(1, 1))
    r = math.sqrt(2000 / math.pi)
    s = render_scene(spec, [Ellipse(0, 168, 168, r, r, 0.0)]).sample
    item = FoodItem("red_blob", 200.0)
    s = Sample("one", s.before_image, (item,))
    q = queries_for([s], Stage.ABSOLUTE)
    ckpt, rep = train_stage1(q, TrainConfig(epochs=500, batch_size=1, base_lr=1e-3), stub,
                             small_model(stub))
    pred = predict(ckpt.build_model(), q, stub)[0]
    assert abs(pred - 200.0) < 1.0


def test_stage2_from_stage1_keeps_stage1_file(tmp_path, stub, tiny):
    bank, q1, q2 = tiny
    s1 = tmp_path / "s1.pt"
    train_stage1(q1, TrainConfig(epochs=1, batch_size=4, checkpoint_path=s1), stub, small_model(stub), bank)
    raw = s1.read_bytes()
    ck2, rep = train_stage2(q2, TrainConfig(stage="difference", epochs=2, batch_size=4, init_from=s1,
                                            checkpoint_path=tmp_path / "s2.pt"), stub, small_model(stub), bank)
    assert s1.read_bytes() == raw
    assert ck2.stage == "difference"
    # every parameter carries over, including the output scale fitted in stage 1
    assert ck2.config == Checkpoint.load(s1).config
    assert rep.encoder_digest_before == rep.encoder_digest_after
    with pytest.raises(ValueError):
        train_stage2(q2, TrainConfig(stage="difference", epochs=1, init_from=s1, checkpoint_path=s1), stub, None, bank)


def test_stage2_rejects_mismatched_checkpoint(tmp_path, stub, tiny):
    bank, q1, q2 = tiny
    s1 = tmp_path / "s1.pt"
    train_stage1(q1, TrainConfig(epochs=1, batch_size=8, checkpoint_path=s1), stub, small_model(stub), bank)
    other = FusionConfig(image_dim=64, text_dim=64, d_k=32, ffn_hidden=32)
    with pytest.raises(CheckpointMismatch):
        train_stage2(q2, TrainConfig(stage="difference", epochs=1, init_from=s1), stub, other, bank)


def test_stage2_needs_init_unless_scratch(stub, tiny):
    bank, _, q2 = tiny
    with pytest.raises(ValueError):
        TrainConfig(stage="difference")
    ck, _ = train_stage2(q2, TrainConfig(stage="difference", epochs=1, allow_scratch=True), stub, small_model(stub), bank)
    assert ck.stage == "difference"


def test_reset_head_reinitialises_only_the_head(tmp_path, stub, tiny):
    bank, q1, q2 = tiny
    s1 = tmp_path / "s1.pt"
    ck1, _ = train_stage1(q1, TrainConfig(epochs=1, batch_size=8, checkpoint_path=s1), stub, small_model(stub), bank)
    from platediff.train import _model_from

    m = _model_from(s1, None, stub, reset_head=True)
    assert float(m.head.bias.detach()) == 0.0
    assert not torch.equal(m.head.weight, ck1.state["head.weight"])
    assert torch.equal(m.phi_img[0].weight, ck1.state["phi_img.0.weight"])


def test_stage_guards(stub, tiny):
    bank, q1, q2 = tiny
    with pytest.raises(DataError):
        train_stage1([], TrainConfig(), stub)
    with pytest.raises(DataError):
        train_stage1(q2, TrainConfig(), stub, None, bank)
    with pytest.raises(ValueError):
        train_stage1(q1, TrainConfig(stage="difference", allow_scratch=True), stub)


def test_zero_change_pair_has_zero_target(stub):
    s = generate_synthetic(SyntheticSpec(seed=4, consumed_fraction_range=(0.0, 0.0)), 1)[0]
    assert np.array_equal(s.before_image, s.after_image)
    assert all(q.target == 0.0 for q in queries_for([s], Stage.DIFFERENCE))


def test_predict_returns_attention(stub, tiny):
    bank, q1, _ = tiny
    ck, _ = train_stage1(q1, TrainConfig(epochs=1, batch_size=8), stub, small_model(stub), bank)
    p, a = predict(ck.build_model(), q1, bank=bank, return_attention=True)
    assert p.shape == (len(q1),) and p.dtype == np.float64
    assert a.shape == (len(q1), 2 * 576)
    assert np.allclose(a.sum(1), 1.0, atol=1e-6)
    assert np.allclose(a[:, :576], a[:, 576:], atol=1e-6)


def test_target_normalisation_sets_scale(stub, tiny):
    bank, q1, _ = tiny
    ck, _ = train_stage1(q1, TrainConfig(epochs=1), stub, small_model(stub), bank)
    assert ck.config.target_scale == pytest.approx(np.mean([abs(q.target) for q in q1]))
    ck0, _ = train_stage1(q1, TrainConfig(epochs=1, normalize_targets=False), stub, small_model(stub), bank)
    assert ck0.config.target_scale == 1.0


def test_loss_weights_flow_into_log(stub, tiny):
    bank, q1, _ = tiny
    _, rep = train_stage1(q1, TrainConfig(epochs=1, batch_size=8, loss_weights=LossWeights(lambda_cont=0.0)), stub,
                          small_model(stub), bank)
    assert all(r["cont"] == 0.0 and r["total"] == r["reg"] for r in rep.steps)
