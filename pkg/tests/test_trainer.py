import dataclasses

import numpy as np
import pytest

from matrain.cli import metric_record
from matrain.datasets import teacher_student
from matrain.errors import ConfigError, NumericError, ProtectionError
from matrain.mntk import SpectrumSnapshot
from matrain.modelzoo import BlockMLP, ModuleId, build_network
from matrain.policy import PolicyConfig
from matrain.trainer import (
    FlopsLedger,
    MultirateConfig,
    PolicyKind,
    ScriptedPolicy,
    TrainConfig,
    epoch_histogram,
    overfit_probe,
    prune_by_lambda,
    train,
)

ARCH = BlockMLP(d_input=4, width=8, layers=2, blocks_per_layer=2)


def data(seed=0):
    return teacher_student(n_train=32, n_val=16, d_in=4, noise=0.1, seed=seed)


def cfg(**kw):
    base = dict(
        lr=0.05,
        epochs=6,
        batch_size=8,
        seed=0,
        patience=None,
        policy=PolicyConfig(sample_count=8, warmup_epochs=1, episode_cadence=1),
    )
    base.update(kw)
    return TrainConfig(**base)


def run(kind, net_seed=0, **kw):
    net = build_network(ARCH, net_seed)
    return train(net, data(), cfg(policy_kind=kind, **kw))


def test_config_validation():
    for kw in ({"lr": 0.0}, {"epochs": 0}, {"rand_fraction": 0.0}, {"multirate": MultirateConfig(1.0, 5)}):
        with pytest.raises(ConfigError):
            cfg(**kw)
    assert cfg(policy_kind="rand").policy_kind is PolicyKind.RAND


def test_vanilla_global_rows_and_ledger():
    res = run("vanilla")
    globals_ = [r for r in res.rows if r.module is None]
    assert [r.epoch for r in globals_] == list(range(6))
    assert not [r for r in res.rows if r.module is not None]
    led = res.ledger
    assert led.backward_total == 2 * led.forward_total
    assert led.backward_modular == 2 * led.forward_modular
    assert led.ntk_overhead == 0
    assert globals_[-1].flops_backward == led.backward_total


def test_vanilla_histogram_counts_all_epochs():
    res = run("vanilla", epochs=10)
    assert set(epoch_histogram(res).values()) == {10}


def test_rand_full_fraction_equals_vanilla():
    a = run("vanilla")
    b = run("rand", rand_fraction=1.0)
    assert a.val_losses == b.val_losses
    np.testing.assert_array_equal(a.net.theta, b.net.theta)


def test_rand_resamples_with_one_per_layer():
    res = run("rand", epochs=12)
    sets = res.epoch_active
    assert len(set(sets)) > 1
    for s in sets:
        assert {m.layer_index for m in s} == {0, 1}
        assert len(s) == 2


def test_multirate_slow_group_steps_every_k():
    res = run("multirate", multirate=MultirateConfig(0.5, 5))
    # 4 steps per epoch; slow modules move at steps 4, 9, 14, 19 (epochs 1 to 4)
    hist = epoch_histogram(res)
    assert sorted(hist.values()) == [4, 4, 6, 6]
    assert res.ledger.backward_modular < run("vanilla").ledger.backward_modular


def test_multirate_slow_step_uses_k_lr():
    net = build_network(ARCH, 0)
    c = cfg(policy_kind="multirate", epochs=1, batch_size=32, multirate=MultirateConfig(0.5, 1))
    before = net.theta.copy()
    ref = build_network(ARCH, 0)
    res = train(net, data(), c)
    train(ref, data(), dataclasses.replace(c, policy_kind=PolicyKind.VANILLA))
    # k=1: slow modules step each batch with lr * 1, identical to vanilla
    np.testing.assert_array_equal(res.net.theta, ref.theta)
    assert not np.array_equal(before, net.theta)


def test_mat_module_rows_at_snapshots():
    res = run("mat", epochs=5)
    mods = [r for r in res.rows if r.module is not None]
    assert sorted({r.epoch for r in mods}) == [1, 2, 3, 4]
    assert len(mods) == 4 * 4
    assert all(r.in_information is not None for r in mods)
    assert res.ledger.ntk_overhead > 0


def test_mat_degenerate_equals_vanilla():
    a = run("vanilla")
    b = run("mat", policy=PolicyConfig(alpha=1e-12, temporal_enabled=False, sample_count=8, warmup_epochs=1, episode_cadence=1))
    assert a.train_losses == b.train_losses and a.val_losses == b.val_losses
    np.testing.assert_array_equal(a.net.theta, b.net.theta)


def test_dead_module_never_updated_and_half_flops():
    arch = BlockMLP(d_input=4, width=8, layers=1, blocks_per_layer=2)
    net = build_network(arch, 3)
    net.views()["w_out"][4:] = 0.0  # block (0, 1) is cut off from the output
    dead = net.partition[ModuleId(0, 1)]
    before = net.theta[dead].copy()
    c = cfg(policy_kind="mat", freeze_non_modular=True, policy=PolicyConfig(sample_count=8, warmup_epochs=0, episode_cadence=1))
    res = train(net, data(), c)
    np.testing.assert_array_equal(net.theta[dead], before)
    assert all(ModuleId(0, 1) not in s for s in res.epoch_active)
    ref = train(build_network(arch, 3), data(), dataclasses.replace(c, policy_kind=PolicyKind.VANILLA))
    assert res.ledger.backward_modular * 2 == ref.ledger.backward_modular


def test_scripted_policy_histogram():
    mods = build_network(ARCH, 0).modules
    schedule = {0: mods, 3: mods[:3], 6: mods[:1] + mods[2:3]}
    net = build_network(ARCH, 0)
    res = train(net, data(), cfg(epochs=10), policy=ScriptedPolicy(schedule))
    assert epoch_histogram(res) == {mods[0]: 10, mods[1]: 6, mods[2]: 10, mods[3]: 3}


def test_sticky_stop_at_episode_three_counts_three():
    mods = build_network(ARCH, 0).modules
    target = mods[0]

    # the target's drift is 5, 10, 10: it stalls at episode 3; the rest keep accelerating
    def spectrum(net, samples, episode):
        lam = {m: 10.0 + 5.0 * episode for m in mods}
        lam[target] = [10.0, 15.0, 20.0][min(episode, 2)]
        return SpectrumSnapshot.from_lambdas(lam, {m: 10.0 for m in mods}, episode)

    c = cfg(policy_kind="mat", epochs=10, policy=PolicyConfig(alpha=0.01, sample_count=8, warmup_epochs=0, episode_cadence=1))
    res = train(build_network(ARCH, 0), data(), c, spectrum_fn=spectrum)
    assert epoch_histogram(res)[target] == 3
    assert res.decisions[3].temporal == {target}
    assert all(target in res.decisions[e].nuisance for e in range(3, 10))


def test_halt_stops_updates():
    mods = build_network(ARCH, 0).modules

    def spectrum(net, samples, episode):
        return SpectrumSnapshot.from_lambdas({m: 1.0 for m in mods}, episode=episode)

    c = cfg(policy_kind="mat", epochs=8, policy=PolicyConfig(sample_count=8, warmup_epochs=0, episode_cadence=1, protect_per_layer=False))
    net = build_network(ARCH, 0)
    res = train(net, data(), c, spectrum_fn=spectrum)
    # constant spectrum: zero first drift trips the guard at episode 2
    assert res.halted and res.epochs_run == 2


def test_patience_stops_early():
    res = run("vanilla", epochs=200, patience=3, rel_tol=0.5)
    assert res.stopped_early and res.epochs_run < 200


def test_determinism_byte_for_byte():
    a, b = run("mat"), run("mat")
    assert [metric_record(r) for r in a.rows] == [metric_record(r) for r in b.rows]
    np.testing.assert_array_equal(a.net.theta, b.net.theta)


def test_numeric_error_carries_checkpoint():
    net = build_network(ARCH, 0)
    with pytest.raises(NumericError) as err:
        train(net, data(), cfg(policy_kind="vanilla", lr=1e6, epochs=20))
    assert err.value.checkpoint is not None and np.all(np.isfinite(err.value.checkpoint))
    assert err.value.epoch is not None


def test_mat_never_costs_more_backward_than_vanilla():
    for kind in ("mat", "rand", "multirate"):
        assert run(kind).ledger.backward_total <= run("vanilla").ledger.backward_total


def test_ledger_charge_step_formula():
    led = FlopsLedger()
    led.charge_step({ModuleId(0, 0): 100, ModuleId(0, 1): 100, None: 50}, 0.5, True)
    assert led.backward_modular == 200 and led.backward_always == 100
    led.charge_step({ModuleId(0, 0): 100, None: 50}, 1.0, False)
    assert led.backward_always == 100 and led.forward_total == 400


def test_prune_examples():
    arch = BlockMLP(d_input=2, width=8, layers=1, blocks_per_layer=4)
    net = build_network(arch, 0)
    mods = net.modules
    lam = dict(zip(mods, [9.0, 7.0, 5.0, 3.0]))
    pruned = prune_by_lambda(net, lam, 0.5)
    assert pruned.modules == mods[:2]
    same = prune_by_lambda(net, lam, 1.0)
    assert same.modules == mods
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(same.output(x), net.output(x))
    masked = net.copy()
    for m in mods[2:]:
        masked.theta[net.partition[m]] = 0.0
    np.testing.assert_allclose(pruned.output(x), masked.output(x), atol=1e-12)


def test_prune_ties_and_protection():
    net = build_network(ARCH, 0)
    mods = net.modules
    lam = dict(zip(mods, [5.0, 5.0, 1.0, 1.0]))
    with pytest.raises(ProtectionError):
        prune_by_lambda(net, lam, 0.5)
    assert prune_by_lambda(net, lam, 0.5, protect_per_layer=False).modules == mods[:2]
    assert prune_by_lambda(net, lam, 0.25, protect_per_layer=False).modules == mods[:1]
    with pytest.raises(ConfigError):
        prune_by_lambda(net, lam, 0.0)


def test_training_a_pruned_network():
    net = build_network(ARCH, 0)
    pruned = prune_by_lambda(net, dict(zip(net.modules, [4.0, 2.0, 3.0, 1.0])), 0.5)
    res = train(pruned, data(), cfg(policy_kind="mat"))
    assert set(epoch_histogram(res)) == set(pruned.modules)


@pytest.mark.parametrize("seed", range(3))
def test_overfit_probe_shows_validation_upturn(seed):
    c = TrainConfig(policy_kind=PolicyKind.VANILLA, lr=0.1, epochs=300, batch_size=16, seed=seed, patience=None)
    res = overfit_probe(c, noise=0.5)
    assert res.val_losses[-1] > min(res.val_losses)


def test_overfit_probe_realizable_task_keeps_improving():
    c = TrainConfig(policy_kind=PolicyKind.VANILLA, lr=0.05, epochs=60, batch_size=16, seed=0, patience=None)
    res = overfit_probe(c, noise=0.0, linear=True, n_train=64)
    assert res.val_losses[-1] <= min(res.val_losses) * 1.01


def test_overfit_probe_mat_matches_or_beats_vanilla_in_most_seeds():
    wins = 0
    for seed in range(5):
        final = {}
        for kind in ("vanilla", "mat"):
            c = TrainConfig(policy_kind=kind, lr=0.1, epochs=300, batch_size=16, seed=seed, patience=None,
                            policy=PolicyConfig(sample_count=16))
            final[kind] = overfit_probe(c, noise=0.5).final_val_loss
        wins += final["mat"] <= final["vanilla"]
    assert wins >= 3
