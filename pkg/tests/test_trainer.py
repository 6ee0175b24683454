import numpy as np
import pytest

from dosegan import checkpoint, losses, trainer
from dosegan.losses import LossWeights, NonFiniteLossError
from dosegan.nets import ConfigError
from dosegan.optim import adam_step
from dosegan.tensor import NonFiniteError
from dosegan.trainer import (EpochLog, TrainConfig, TrainState, fit, run_ablation, select_pairs, stack_batch,
                             step_plan, train_step)


def _snapshot(module):
    return {k: v.copy() for k, v in module.state_arrays().items()}


def _same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture
def fresh_state(small_net):
    return TrainState.fresh(small_net, TrainConfig(max_epochs=2, seed=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_factor=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(variant="cg", stage_mode="two_stage").validate()
    with pytest.raises(ConfigError):
        TrainConfig(stage_mode="sideways").validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})
    cfg = TrainConfig(weights=LossWeights(1, 2, 3, 4))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("variant, expect", [
    ("baseline", (False, False, False)),
    ("cg", (True, False, False)),
    ("cg-gan", (True, False, True)),
    ("full", (True, True, True)),
])
def test_variant_plans(variant, expect):
    p = step_plan(TrainConfig(variant=variant))
    assert (p.use_class, p.use_refiner, p.use_disc) == expect


def test_rotating_selection_balances_drfs(tiny_dataset):
    pairs = select_pairs(tiny_dataset, "train", "rotate", 0)
    assert [p.drf_value for p in pairs] == [4, 10, 20, 50]
    assert [p.drf_value for p in select_pairs(tiny_dataset, "train", "rotate", 1)] == [10, 20, 50, 100]
    assert len(select_pairs(tiny_dataset, "train", "all")) == 20


def test_step_leaves_feature_extractor_unchanged(fresh_state, tiny_dataset):
    before = _snapshot(fresh_state.nets.features)
    bd = train_step(fresh_state, tiny_dataset.pairs("train")[:4], tiny_dataset.manifest.norm_max)
    assert _same(before, _snapshot(fresh_state.nets.features))
    assert bd.l_total == losses.weighted_total(LossWeights(), bd.l_re, bd.l_class, bd.l_refine, bd.l_dis_g)


def test_discriminator_and_generator_updates_are_isolated(fresh_state, tiny_dataset, monkeypatch):
    nets = fresh_state.nets
    calls = []

    def recording_step(params, state, lr):
        snap = {"g": _snapshot(nets.mlnet) | {"c/" + k: v for k, v in _snapshot(nets.contextual).items()},
                "d": {k: t.data.copy() for k, t in nets.discriminator.named_parameters().items()}}
        calls.append((params, snap))
        adam_step(params, state, lr)

    monkeypatch.setattr(trainer, "adam_step", recording_step)
    pairs = tiny_dataset.pairs("train")[:4]
    train_step(fresh_state, pairs, tiny_dataset.manifest.norm_max)
    (d_params, before_d), (g_params, before_g) = calls
    disc_ids = {id(t) for t in nets.discriminator.parameters()}
    assert {id(t) for t in d_params.values()} <= disc_ids
    assert not ({id(t) for t in g_params.values()} & disc_ids)
    # the D update touched no generator tensor (running stats included) ...
    gen_after_d = before_g["g"]
    for k, v in before_d["g"].items():
        if not k.endswith(("running_mean", "running_var")):
            assert np.array_equal(v, gen_after_d[k]), k
    # ... and the G update touched no critic parameter
    for k, t in nets.discriminator.named_parameters().items():
        assert np.array_equal(t.data, before_g["d"][k]), k


def _pure_l1_trajectory(state, dataset, steps):
    """Hand-written L1-only trainer: ML-Net reconstruction branch, 300 * L1, Adam."""
    from dosegan.optim import AdamState

    nets = state.nets
    adam = AdamState()
    names = nets.mlnet.reconstruction_names()
    params = {f"mlnet/{n}": nets.mlnet.p(n) for n in names}
    pairs = select_pairs(dataset, "train", "rotate", 0)
    order = state.rng.split(1).permutation(len(pairs))
    batch = [pairs[i] for i in order][:steps * 4]
    x, y, _ = stack_batch(batch, dataset.manifest.norm_max)
    coarse, _ = nets.mlnet(x, training=True)
    loss = losses.total_loss(LossWeights(), losses.reconstruction_loss(coarse, y))[0]
    nets.mlnet.zero_grad()
    loss.backward()
    adam_step(params, adam, 2e-4)
    return _snapshot(nets.mlnet)


def test_lambda_zeroing_matches_pure_l1_trainer(small_net, tiny_dataset):
    base = TrainState.fresh(small_net, TrainConfig(variant="baseline", max_epochs=1, seed=2, pair_selection="rotate"))
    fit(tiny_dataset, state=base)
    ref = TrainState.fresh(small_net, TrainConfig(variant="baseline", max_epochs=1, seed=2))
    want = _pure_l1_trajectory(ref, tiny_dataset, 1)
    assert _same(_snapshot(base.nets.mlnet), want)
    zeroed = TrainState.fresh(small_net, TrainConfig(weights=LossWeights(300, 0, 0, 0), max_epochs=1, seed=2))
    fit(tiny_dataset, state=zeroed)
    assert _same(_snapshot(zeroed.nets.mlnet), want)


def test_one_epoch_gives_one_log(small_net, tiny_dataset):
    state, logs = fit(tiny_dataset, small_net, TrainConfig(max_epochs=1))
    assert len(logs) == 1 and state.epoch == 1 and state.finished
    assert EpochLog.from_json(logs[0].to_json()) == logs[0]


def test_training_is_deterministic(small_net, tiny_dataset):
    cfg = TrainConfig(max_epochs=2, seed=9)
    s1, l1 = fit(tiny_dataset, small_net, cfg)
    s2, l2 = fit(tiny_dataset, small_net, cfg)
    assert [e.to_json() for e in l1] == [e.to_json() for e in l2]
    assert checkpoint.to_bytes(s1) == checkpoint.to_bytes(s2)


def test_resume_continues_bit_identically(small_net, tiny_dataset):
    cfg = TrainConfig(max_epochs=2, seed=4)
    straight, logs = fit(tiny_dataset, small_net, cfg)
    half = TrainState.fresh(small_net, cfg)
    fit(tiny_dataset, state=half, on_epoch=lambda e, s: setattr(s, "finished", True))
    half.finished = False
    resumed = checkpoint.from_bytes(checkpoint.to_bytes(half))
    _, more = fit(tiny_dataset, state=resumed)
    assert [e.to_json() for e in more] == [logs[1].to_json()]
    assert checkpoint.to_bytes(resumed) == checkpoint.to_bytes(straight)


def test_early_stop_ends_before_max_epochs(small_net, tiny_dataset):
    cfg = TrainConfig(max_epochs=5, lr_initial=1.5e-6)
    state, logs = fit(tiny_dataset, small_net, cfg)
    assert len(logs) < 5 and logs[-1].lr < 2e-6 and logs[-1].stopped


def test_lr_is_non_increasing_and_changes_by_factor(small_net, tiny_dataset):
    cfg = TrainConfig(max_epochs=4, lr_patience=1)
    _, logs = fit(tiny_dataset, small_net, cfg)
    lrs = [e.lr for e in logs]
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == pytest.approx(a * 0.1)


def test_two_stage_freezes_mlnet_in_stage_two(small_net, tiny_dataset):
    cfg = TrainConfig(max_epochs=3, stage_mode="two_stage", stage1_epochs=1)
    state = TrainState.fresh(small_net, cfg)
    snaps = []
    fit(tiny_dataset, state=state, on_epoch=lambda e, s: snaps.append((e.stage, _snapshot(s.nets.mlnet))))
    assert [s for s, _ in snaps] == [1, 2, 2]
    assert _same(snaps[1][1], snaps[2][1])
    p1 = step_plan(cfg, 1)
    assert not p1.use_refiner and not p1.use_disc


def test_nan_loss_aborts_naming_the_term(fresh_state, tiny_dataset, monkeypatch):
    def broken(extractor, pred, target):
        raise NonFiniteError("non-finite value produced by mean_sq")

    monkeypatch.setattr(losses, "perceptual_loss", broken)
    with pytest.raises(NonFiniteLossError, match="l_refine"):
        train_step(fresh_state, tiny_dataset.pairs("train")[:2], tiny_dataset.manifest.norm_max)


def test_ablation_runs_all_variants_and_marks_failures(small_net, tiny_dataset, monkeypatch):
    real = losses.generator_adversarial_loss

    def flaky(disc, x, fake, training=True):
        raise NonFiniteError("boom")

    monkeypatch.setattr(losses, "generator_adversarial_loss", flaky)
    results = run_ablation(tiny_dataset, small_net, TrainConfig(max_epochs=1))
    assert [r.variant for r in results] == ["baseline", "cg", "cg-gan", "full"]
    assert [r.error is None for r in results] == [True, True, False, False]
    assert "l_dis_g" in results[2].error
    monkeypatch.setattr(losses, "generator_adversarial_loss", real)


def test_fit_rejects_empty_split_and_wrong_extent(small_net, tiny_dataset):
    from dataclasses import replace

    from dosegan.dosesim import Dataset
    only_train = Dataset(replace(tiny_dataset.manifest,
                                 entries=[e for e in tiny_dataset.manifest.entries if e.split == "train"]),
                         tiny_dataset.volumes)
    with pytest.raises(ValueError, match="non-empty"):
        fit(only_train, small_net, TrainConfig(max_epochs=1))
    with pytest.raises(ConfigError, match="extent"):
        fit(tiny_dataset, replace(small_net, volume_extent=64), TrainConfig(max_epochs=1))
