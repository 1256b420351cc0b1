"""Training loop with selective module updates.

The loop trains with minibatch SGD. At episode boundaries it takes an mNTK
snapshot on a sample of training inputs and asks the update policy which
modules stay active. Vanilla, Rand and Multirate are the reference
policies; MAT uses the modular and temporal rules in :mod:`matrain.policy`.

FLOPs are counted as multiply-accumulates of the dense products. A
backward pass costs twice its forward pass. Under selective updates the
modular part of the backward cost is scaled by the active fraction of
modular parameters. Parameters outside every module (embeddings, readout)
are always charged in full.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from matrain.datasets import Dataset, teacher_student
from matrain.errors import ConfigError, NumericError, ProtectionError, ShapeError
from matrain.mntk import SpectrumSnapshot, sample_indices, snapshot
from matrain.modelzoo import (
    Batch,
    BlockMLP,
    LossKind,
    ModularNetwork,
    ModuleId,
    Scalarization,
    apply_selective_step,
    build_network,
    evaluate_loss,
    loss_and_gradients,
)
from matrain.policy import ModuleSets, PolicyConfig, PolicyState, decide

log = logging.getLogger(__name__)


class PolicyKind(enum.Enum):
    VANILLA = "vanilla"
    RAND = "rand"
    MULTIRATE = "multirate"
    MAT = "mat"


@dataclass(frozen=True)
class MultirateConfig:
    fraction_slow: float = 0.5
    k: int = 5


@dataclass(frozen=True)
class TrainConfig:
    policy_kind: PolicyKind = PolicyKind.MAT
    lr: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    loss_kind: LossKind = LossKind.SQUARED_ERROR
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    rand_fraction: float = 0.5
    multirate: MultirateConfig = field(default_factory=MultirateConfig)
    patience: int | None = 10
    rel_tol: float = 1e-4
    freeze_non_modular: bool = False
    track_spectrum: bool = False
    scalarization: Scalarization = Scalarization.SUM_OF_LOGITS

    def __post_init__(self):
        if isinstance(self.policy_kind, str):
            object.__setattr__(self, "policy_kind", PolicyKind(self.policy_kind))
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0.0 < self.rand_fraction <= 1.0:
            raise ConfigError(f"rand_fraction must lie in (0, 1], got {self.rand_fraction}")
        if not 0.0 < self.multirate.fraction_slow < 1.0:
            raise ConfigError("multirate fraction_slow must lie in (0, 1)")
        if self.multirate.k < 1:
            raise ConfigError("multirate k must be at least 1")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be at least 1 or None")
        if not self.rel_tol >= 0:
            raise ConfigError("rel_tol must be non-negative")

    def is_snapshot_epoch(self, epoch: int) -> bool:
        p = self.policy
        return epoch >= p.warmup_epochs and (epoch - p.warmup_epochs) % p.episode_cadence == 0


@dataclass
class FlopsLedger:
    forward_total: int = 0
    backward_total: int = 0
    forward_modular: int = 0
    forward_always: int = 0
    backward_modular: int = 0
    backward_always: int = 0
    ntk_overhead: int = 0
    per_epoch: list[dict[str, int]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.forward_total + self.backward_total + self.ntk_overhead

    def charge_step(self, macs: Mapping[ModuleId | None, int], active_fraction: float, always_active: bool) -> None:
        fwd_mod = sum(v for k, v in macs.items() if k is not None)
        fwd_always = macs.get(None, 0)
        bwd_mod = int(round(2 * fwd_mod * active_fraction))
        bwd_always = 2 * fwd_always if always_active else 0
        self.forward_modular += fwd_mod
        self.forward_always += fwd_always
        self.forward_total += fwd_mod + fwd_always
        self.backward_modular += bwd_mod
        self.backward_always += bwd_always
        self.backward_total += bwd_mod + bwd_always

    def close_epoch(self, epoch: int) -> None:
        self.per_epoch.append(
            {
                "epoch": epoch,
                "forward_total": self.forward_total,
                "backward_total": self.backward_total,
                "backward_modular": self.backward_modular,
                "ntk_overhead": self.ntk_overhead,
            }
        )

    def as_dict(self) -> dict:
        return {
            "forward_total": self.forward_total,
            "backward_total": self.backward_total,
            "forward_modular": self.forward_modular,
            "forward_always": self.forward_always,
            "backward_modular": self.backward_modular,
            "backward_always": self.backward_always,
            "ntk_overhead": self.ntk_overhead,
            "total": self.total,
            "per_epoch": list(self.per_epoch),
        }


@dataclass(frozen=True)
class MetricRow:
    """One line of the metric stream; ``module is None`` marks the GLOBAL row."""

    epoch: int
    module: ModuleId | None
    lambda_max: float = math.nan
    lambda_min: float = math.nan
    effective_rank: float = math.nan
    condition_number: float = math.nan
    in_information: bool | None = None
    train_loss: float = math.nan
    val_loss: float = math.nan
    weight_distance: float = math.nan
    flops_forward: int | None = None
    flops_backward: int | None = None
    flops_ntk: int | None = None


@dataclass(eq=False)
class RunResult:
    rows: list[MetricRow]
    ledger: FlopsLedger
    net: ModularNetwork
    config: TrainConfig
    train_losses: list[float]
    val_losses: list[float]
    epoch_active: list[frozenset[ModuleId]]
    decisions: dict[int, ModuleSets]
    lambda_history: dict[int, dict[ModuleId, float]]
    halted: bool = False
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_losses)

    @property
    def final_val_loss(self) -> float:
        return self.val_losses[-1]

    @property
    def final_train_loss(self) -> float:
        return self.train_losses[-1]


# --- update policies ---------------------------------------------------------


Plan = list[tuple[frozenset[ModuleId], float]]


class UpdatePolicy:
    """Chooses the modules to update.

    ``begin_epoch`` may receive a spectrum snapshot and returns the decision
    it made from it (or None). ``step_plan`` lists groups of modules with a
    learning-rate multiplier for one optimisation step.
    """

    needs_spectrum = False

    def start(self, net: ModularNetwork, cfg: TrainConfig) -> None:
        self.modules = frozenset(net.modules)
        self.active = self.modules

    def begin_epoch(self, epoch: int, snap: SpectrumSnapshot | None) -> ModuleSets | None:
        return None

    def step_plan(self, step: int) -> Plan:
        return [(self.active, 1.0)]

    @property
    def halted(self) -> bool:
        return not self.active


class VanillaPolicy(UpdatePolicy):
    pass


class RandPolicy(UpdatePolicy):
    """Fresh random subset of each layer every epoch, at least one per layer."""

    def start(self, net, cfg):
        super().start(net, cfg)
        self.layers = net.layers
        self.fraction = cfg.rand_fraction
        self.seed = cfg.seed

    def begin_epoch(self, epoch, snap):
        rng = np.random.default_rng([self.seed, 3, epoch])
        chosen = []
        for layer in sorted(self.layers):
            members = self.layers[layer]
            k = max(1, math.ceil(self.fraction * len(members)))
            picks = rng.choice(len(members), size=k, replace=False)
            chosen.extend(members[i] for i in sorted(picks))
        self.active = frozenset(chosen)
        return None


class MultiratePolicy(UpdatePolicy):
    """Fixed seeded fast/slow split; slow modules step every ``k`` steps with ``k * lr``."""

    def start(self, net, cfg):
        super().start(net, cfg)
        rng = np.random.default_rng([cfg.seed, 4])
        slow = []
        for layer in sorted(net.layers):
            members = net.layers[layer]
            n_slow = min(len(members) - 1, int(round(cfg.multirate.fraction_slow * len(members))))
            perm = rng.permutation(len(members))
            slow.extend(members[i] for i in sorted(perm[:n_slow]))
        self.slow = frozenset(slow)
        self.fast = self.modules - self.slow
        self.k = cfg.multirate.k

    def step_plan(self, step):
        plan = [(self.fast, 1.0)]
        if self.slow and (step + 1) % self.k == 0:
            plan.append((self.slow, float(self.k)))
        return plan


class MatPolicy(UpdatePolicy):
    needs_spectrum = True

    def __init__(self, cfg: PolicyConfig | None = None):
        self.cfg = cfg

    def start(self, net, cfg):
        super().start(net, cfg)
        self.cfg = self.cfg or cfg.policy
        self.state = PolicyState()
        family = net.arch.family
        self.families = {m: family for m in net.modules}

    def begin_epoch(self, epoch, snap):
        if snap is None:
            return None
        sets = decide(snap, self.state, self.cfg, self.families)
        self.active = sets.information
        return sets


class ScriptedPolicy(UpdatePolicy):
    """Replays a fixed schedule ``{epoch: active modules}``; the set persists until changed."""

    def __init__(self, schedule: Mapping[int, Iterable[ModuleId]]):
        self.schedule = {e: frozenset(ms) for e, ms in schedule.items()}

    def begin_epoch(self, epoch, snap):
        if epoch in self.schedule:
            self.active = self.schedule[epoch]
            return ModuleSets(self.active, self.modules - self.active)
        return None


def make_policy(cfg: TrainConfig) -> UpdatePolicy:
    return {
        PolicyKind.VANILLA: VanillaPolicy,
        PolicyKind.RAND: RandPolicy,
        PolicyKind.MULTIRATE: MultiratePolicy,
        PolicyKind.MAT: MatPolicy,
    }[cfg.policy_kind]()


# --- training loop ------------------------------------------------------------


SpectrumFn = Callable[[ModularNetwork, np.ndarray, int], SpectrumSnapshot]


def _default_spectrum(cfg: TrainConfig) -> SpectrumFn:
    def fn(net, samples, episode):
        return snapshot(net, samples, cfg.scalarization, episode)

    return fn


def _module_fraction(net: ModularNetwork, active: frozenset[ModuleId]) -> float:
    total = sum(net.module_size(m) for m in net.modules)
    return sum(net.module_size(m) for m in active) / total


def _module_rows(epoch, snap: SpectrumSnapshot, info: frozenset | None, net: ModularNetwork) -> list[MetricRow]:
    rows = []
    for mid, s in sorted(snap.per_module.items()):
        sl = net.slice_of(mid)
        dist = float(np.linalg.norm(net.theta[sl] - net.theta0[sl]))
        rows.append(
            MetricRow(
                epoch=epoch,
                module=mid,
                lambda_max=s.lambda_max,
                lambda_min=s.lambda_min,
                effective_rank=s.effective_rank,
                condition_number=s.condition_number,
                in_information=None if info is None else mid in info,
                weight_distance=dist,
            )
        )
    return rows


def train(
    net: ModularNetwork,
    dataset: Dataset,
    cfg: TrainConfig,
    policy: UpdatePolicy | None = None,
    spectrum_fn: SpectrumFn | None = None,
) -> RunResult:
    """Train ``net`` in place under ``cfg`` and return the metric stream.

    Each epoch shuffles the training set with a generator seeded from
    ``cfg.seed``. At snapshot epochs (warmup end, then every cadence epochs)
    the policy receives a spectrum snapshot. Training ends when the epochs
    run out, when the policy's active set is empty, or when the validation
    loss has not improved by ``rel_tol`` for ``patience`` epochs.
    """
    x_tr, y_tr = dataset.train_inputs, dataset.train_targets
    if y_tr.shape[1] != net.arch.d_out or x_tr.shape[1] != net.arch.d_in:
        raise ShapeError("dataset widths do not match the network")
    policy = policy or make_policy(cfg)
    policy.start(net, cfg)
    spectrum_fn = spectrum_fn or _default_spectrum(cfg)
    want_spectrum = policy.needs_spectrum or cfg.track_spectrum
    n = x_tr.shape[0]
    batch_rng = np.random.default_rng([cfg.seed, 1])
    ledger = FlopsLedger()
    rows: list[MetricRow] = []
    train_losses: list[float] = []
    val_losses: list[float] = []
    epoch_active: list[frozenset[ModuleId]] = []
    decisions: dict[int, ModuleSets] = {}
    lambda_history: dict[int, dict[ModuleId, float]] = {}
    best_val, stale = math.inf, 0
    halted = stopped_early = False
    last_good = net.theta.copy()
    step = 0
    episode = 0

    for epoch in range(cfg.epochs):
        if epoch == cfg.policy.warmup_epochs:
            net.reset_reference()
        snap = None
        if want_spectrum and cfg.is_snapshot_epoch(epoch):
            idx = sample_indices(n, cfg.policy.sample_count, cfg.seed, episode)
            snap = spectrum_fn(net, x_tr[idx], episode)
            ledger.ntk_overhead += snap.overhead_flops
            lambda_history[epoch] = snap.lambda_max
            episode += 1
        sets = policy.begin_epoch(epoch, snap)
        if sets is not None:
            decisions[epoch] = sets
        if snap is not None:
            rows.extend(_module_rows(epoch, snap, sets.information if sets else None, net))
        if policy.halted:
            halted = True
            log.info("epoch %d: information set empty, stopping", epoch)
            break

        order = batch_rng.permutation(n)
        touched: set[ModuleId] = set()
        try:
            for start in range(0, n, cfg.batch_size):
                sel = order[start : start + cfg.batch_size]
                grads = loss_and_gradients(net, Batch(x_tr[sel], y_tr[sel]), cfg.loss_kind)
                plan = policy.step_plan(step)
                active = frozenset().union(*(mods for mods, _ in plan))
                ledger.charge_step(grads.macs_by_module, _module_fraction(net, active), not cfg.freeze_non_modular)
                nm = None if cfg.freeze_non_modular else grads.non_modular
                for mods, scale in plan:
                    apply_selective_step(net, grads.per_module, mods, cfg.lr * scale, nm)
                    nm = None
                touched |= active
                step += 1
            if not np.all(np.isfinite(net.theta)):
                raise NumericError("parameters became non-finite")
            train_loss = evaluate_loss(net, x_tr, y_tr, cfg.loss_kind)
            val_loss = evaluate_loss(net, dataset.val_inputs, dataset.val_targets, cfg.loss_kind)
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                raise NumericError("non-finite evaluation loss")
        except NumericError as exc:
            raise NumericError(
                f"epoch {epoch}: {exc}", sample=exc.sample, checkpoint=last_good, epoch=epoch
            ) from exc
        last_good = net.theta.copy()
        ledger.close_epoch(epoch)
        epoch_active.append(frozenset(touched))
        train_losses.append(train_loss)
        val_losses.append(val_loss)
        rows.append(
            MetricRow(
                epoch=epoch,
                module=None,
                train_loss=train_loss,
                val_loss=val_loss,
                weight_distance=float(np.linalg.norm(net.theta - net.theta0)),
                flops_forward=ledger.forward_total,
                flops_backward=ledger.backward_total,
                flops_ntk=ledger.ntk_overhead,
            )
        )
        log.debug("epoch %d train %.6g val %.6g active %d", epoch, train_loss, val_loss, len(touched))
        if cfg.patience is not None:
            if math.isinf(best_val) or val_loss < best_val - cfg.rel_tol * abs(best_val):
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    stopped_early = True
                    log.info("epoch %d: validation loss stalled for %d epochs", epoch, stale)
                    break

    return RunResult(
        rows=rows,
        ledger=ledger,
        net=net,
        config=cfg,
        train_losses=train_losses,
        val_losses=val_losses,
        epoch_active=epoch_active,
        decisions=decisions,
        lambda_history=lambda_history,
        halted=halted,
        stopped_early=stopped_early,
    )


def epoch_histogram(result: RunResult) -> dict[ModuleId, int]:
    """Number of epochs in which each module received at least one update."""
    counts = {m: 0 for m in result.net.all_modules if m in result.net.partition}
    for active in result.epoch_active:
        for m in active:
            counts[m] += 1
    return counts


def prune_by_lambda(
    net: ModularNetwork,
    snap: SpectrumSnapshot | Mapping[ModuleId, float],
    keep_fraction: float,
    protect_per_layer: bool = True,
) -> ModularNetwork:
    """New network keeping the top ``ceil(keep_fraction * L)`` modules by lambda_max.

    Ties are broken by module order. Pruned modules are removed from the
    partition and contribute zero to the forward pass.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    lam = snap.lambda_max if isinstance(snap, SpectrumSnapshot) else dict(snap)
    modules = net.modules
    missing = [m for m in modules if m not in lam]
    if missing:
        raise ConfigError(f"no lambda_max for {missing[0]}")
    keep = math.ceil(keep_fraction * len(modules) - 1e-12)
    ranked = sorted(modules, key=lambda m: (-lam[m], m))
    kept = set(ranked[:keep])
    if protect_per_layer:
        for layer, members in sorted(net.layers.items()):
            if not kept.intersection(members):
                raise ProtectionError(f"pruning would remove every module of layer {layer}")
    pruned = net.pruned | (set(modules) - kept)
    out = ModularNetwork(net.arch, net.theta, pruned=pruned)
    out.theta0 = net.theta0.copy()
    return out


def overfit_probe(
    cfg: TrainConfig,
    n_train: int = 16,
    n_val: int = 128,
    noise: float = 0.5,
    linear: bool = False,
    width: int = 16,
    blocks: int = 4,
    layers: int = 2,
    data_seed: int | None = None,
) -> RunResult:
    """Train a BlockMLP far larger than a tiny noisy teacher-student set."""
    seed = cfg.seed if data_seed is None else data_seed
    data = teacher_student(n_train=n_train, n_val=n_val, d_in=4, noise=noise, linear=linear, seed=seed)
    arch = BlockMLP(d_input=4, width=width, layers=layers, blocks_per_layer=blocks)
    net = build_network(arch, cfg.seed)
    return train(net, data, replace(cfg, loss_kind=LossKind.SQUARED_ERROR))
