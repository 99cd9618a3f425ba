import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imaformer.episode import sample_episode
from imaformer.train import (
    FineTunePolicy, OptState, TrainConfig, TrainingDiverged, adamw_step, cosine_lr, meta_train,
    overfit_episode, trainable_mask,
)
from imaformer.tensor import Tensor
from imaformer.vit import ModelConfig, init_params

from oracles import scalar_adamw

POLICIES = [
    FineTunePolicy.frozen(),
    FineTunePolicy(1, False, False, False),
    FineTunePolicy(1, True, False, False),
    FineTunePolicy(2, False, True, False),
    FineTunePolicy(0, True, False, True),
    FineTunePolicy.full(2),
]


def micro_train_config(**kw):
    base = dict(epochs=1, episodes_per_epoch=2, way=3, shot=1, query=2, val_episodes=2, val_query=2,
                lr_init=1e-3, lr_min=1e-4, policy=FineTunePolicy.full(2))
    base.update(kw)
    return TrainConfig(**base)


# -- masks ---------------------------------------------------------------------------
def test_mask_last_six_without_cls():
    params = init_params(ModelConfig(depth=12, dim=8, heads=2, image_size=8, patch_size=4), 0)
    names = list(trainable_mask(params, FineTunePolicy(6, False, False, False)))
    assert {n.split(".")[1] for n in names} == {str(i) for i in range(6, 12)}
    assert all(n.startswith("blocks.") for n in names)


def test_mask_last_two_plus_cls():
    params = init_params(ModelConfig(depth=12, dim=8, heads=2, image_size=8, patch_size=4), 0)
    names = list(trainable_mask(params, FineTunePolicy(2, True, False, False)))
    assert "cls_token" in names
    assert {n.split(".")[1] for n in names if n.startswith("blocks.")} == {"10", "11"}
    assert len(names) == 1 + 2 * 16


def test_mask_empty_and_bounds(micro_params):
    assert trainable_mask(micro_params, FineTunePolicy.frozen()) == {}
    with pytest.raises(ValueError):
        trainable_mask(micro_params, FineTunePolicy(3))


def test_mask_flags_select_embedding_tensors(micro_params):
    names = set(trainable_mask(micro_params, FineTunePolicy(0, False, True, True)))
    assert names == {"pos_embed", "patch_proj.weight", "patch_proj.bias"}


# -- optimiser -----------------------------------------------------------------------------
def test_zero_gradient_no_decay_is_noop(rng):
    theta = Tensor(rng.standard_normal((3, 2)))
    before = theta.data.copy()
    adamw_step({"w": theta}, {"w": np.zeros((3, 2))}, OptState(), lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(theta.data, before)


def test_first_step_without_momentum(rng):
    theta = Tensor(rng.standard_normal(5))
    g = rng.standard_normal(5)
    expected = theta.data - 0.01 * g / (np.abs(g) + 1e-8)
    adamw_step({"w": theta}, {"w": g}, OptState(), 0.01, 0.0, beta1=0.0, beta2=0.0)
    np.testing.assert_allclose(theta.data, expected, rtol=0, atol=1e-15)


def test_matches_scalar_oracle_over_100_steps(rng):
    theta0 = rng.standard_normal((2, 3))
    grads = [rng.standard_normal((2, 3)) for _ in range(100)]
    lrs = [cosine_lr(i, 100, 1e-2, 1e-4) for i in range(100)]
    w = Tensor(theta0.copy())
    opt = OptState()
    for g, lr in zip(grads, lrs):
        adamw_step({"w": w}, {"w": g}, opt, lr, 0.05)
    ref = scalar_adamw(theta0, grads, lrs, 0.05, 0.9, 0.999, 1e-8)
    np.testing.assert_allclose(w.data.ravel(), ref, rtol=0, atol=1e-12)
    assert opt.step == 100 and set(opt.m) == {"w"}


def test_nan_gradient_aborts_untouched(rng):
    a, b = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    before = a.data.copy(), b.data.copy()
    opt = OptState()
    with pytest.raises(TrainingDiverged, match="'b'"):
        adamw_step({"a": a, "b": b}, {"a": np.ones(3), "b": np.array([0.0, np.nan, 1.0])}, opt, 0.1)
    np.testing.assert_array_equal(a.data, before[0])
    np.testing.assert_array_equal(b.data, before[1])
    assert opt.step == 0 and not opt.m


def test_gradient_shape_checked():
    with pytest.raises(ValueError):
        adamw_step({"w": Tensor(np.zeros(3))}, {"w": np.zeros(4)}, OptState(), 0.1)


def test_cosine_schedule_values():
    assert cosine_lr(0, 100, 1e-5, 1e-6) == pytest.approx(1e-5, rel=1e-12)
    assert cosine_lr(100, 100, 1e-5, 1e-6) == pytest.approx(1e-6, rel=1e-12)
    assert cosine_lr(50, 100, 1e-5, 1e-6) == pytest.approx(5.5e-6, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-5, 1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.data())
def test_cosine_schedule_monotone_and_bounded(total, data):
    s = data.draw(st.integers(0, total - 1))
    hi, lo = cosine_lr(s, total, 1e-3, 1e-6), cosine_lr(s + 1, total, 1e-3, 1e-6)
    assert 1e-6 <= lo <= hi <= 1e-3


def test_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr_init=1e-6, lr_min=1e-5)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(variant="other")
    cfg = TrainConfig(policy=FineTunePolicy(1, False))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# -- meta-training ------------------------------------------------------------------------------
def test_smoke_single_episode_under_five_seconds(small_dataset, micro_config):
    t0 = time.perf_counter()
    res = meta_train(small_dataset, small_dataset, micro_config,
                     micro_train_config(episodes_per_epoch=1, way=5, query=5, val_episodes=1))
    assert time.perf_counter() - t0 < 5
    assert len(res.log) == 1 and set(res.log[0]) == {"epoch", "mean_loss", "train_acc", "val_acc", "lr"}


@pytest.mark.parametrize("policy", POLICIES, ids=lambda p: p.describe() + f"/{int(p.train_pos_embed)}{int(p.train_patch_proj)}")
def test_frozen_parameters_bitwise_stable(small_dataset, micro_config, micro_params, policy):
    before = {n: t.data.copy() for n, t in micro_params.named_parameters()}
    res = meta_train(small_dataset, None, micro_config, micro_train_config(policy=policy, augment=True),
                     params=micro_params)
    trained = trainable_mask(micro_params, policy)
    for name, t in res.params.named_parameters():
        if name in trained:
            assert not np.array_equal(t.data, before[name]), name
        else:
            assert t.data.tobytes() == before[name].tobytes(), name
    # the caller's object is left alone
    for name, t in micro_params.named_parameters():
        assert t.data.tobytes() == before[name].tobytes()


def test_training_is_deterministic(small_dataset, micro_config, tmp_path):
    cfg = micro_train_config(epochs=2, augment=True)
    a = meta_train(small_dataset, small_dataset, micro_config, cfg, log_path=tmp_path / "a.jsonl")
    b = meta_train(small_dataset, small_dataset, micro_config, cfg, log_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for (_, x), (_, y) in zip(a.params.named_parameters(), b.params.named_parameters()):
        assert x.data.tobytes() == y.data.tobytes()
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [0, 1]


def test_best_epoch_is_returned(small_dataset, micro_config):
    res = meta_train(small_dataset, small_dataset, micro_config, micro_train_config(epochs=3))
    best = max(range(3), key=lambda e: (res.log[e]["val_acc"], -e))
    assert res.best_epoch == best
    assert res.best_val_acc == res.log[best]["val_acc"]


def test_divergence_names_episode(small_dataset, micro_config):
    params = init_params(micro_config, 0)
    params.blocks[-1].w2.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="index 0"):
        meta_train(small_dataset, None, micro_config, micro_train_config(), params=params)


@pytest.mark.parametrize("variant", ["imaformer", "vanilla"])
def test_overfit_single_episode(small_dataset, micro_config, micro_params, variant):
    ep = sample_episode(small_dataset, 5, 1, 5, 0)
    _, losses, accs = overfit_episode(micro_params, micro_config, ep, 200, variant=variant)
    if variant == "imaformer":
        assert all(losses[i + 1] < losses[i] for i in range(49))
    assert losses[-1] < 0.1 * losses[0]
    assert max(accs) == 1.0
