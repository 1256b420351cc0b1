"""Module selection for modular adaptive training.

Two rules decide which modules receive gradient updates in an episode:

* modular: a module is an *information* module when its principal mNTK
  eigenvalue reaches ``lam_min + (lam_max - lam_min) * alpha`` over the
  pooled eigenvalues of all modules, otherwise a *nuisance* module;
* temporal: a module stops once the change of its eigenvalue drift
  ``delta_t = |lam_t - lam_0|`` between two episodes, relative to the first
  drift ``delta_1``, falls below ``beta``.

Episode 0 is the baseline recorded at the end of warmup, ``delta_1`` comes
from episode 1 and the temporal rule can fire from episode 2 on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from matrain.errors import ConfigError, OrderingError, StateError
from matrain.mntk import SpectrumSnapshot
from matrain.modelzoo import ModuleId

DELTA_GUARD = 1e-12


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 0.1
    beta: float = 1e-3
    sample_count: int = 64
    warmup_epochs: int = 5
    episode_cadence: int = 8
    sticky_temporal: bool = True
    protect_per_layer: bool = True
    temporal_enabled: bool = True
    # per module family (e.g. "head", "filter") overrides of (alpha, beta)
    family_params: tuple[tuple[str, float, float], ...] = ()

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.beta > 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.sample_count < 2:
            raise ConfigError("sample_count must be at least 2")
        if self.episode_cadence < 1:
            raise ConfigError("episode_cadence must be at least 1")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be non-negative")
        for family, a, b in self.family_params:
            if not 0.0 < a < 1.0 or not b > 0.0:
                raise ConfigError(f"invalid (alpha, beta) for family {family!r}")

    def params_for(self, family: str | None) -> tuple[float, float]:
        for name, a, b in self.family_params:
            if name == family:
                return a, b
        return self.alpha, self.beta


@dataclass
class PolicyState:
    lambda0: dict[ModuleId, float] = field(default_factory=dict)
    delta_prev: dict[ModuleId, float] = field(default_factory=dict)
    delta_first: dict[ModuleId, float] = field(default_factory=dict)
    stopped: set[ModuleId] = field(default_factory=set)
    episode: int = -1


@dataclass(frozen=True)
class ModuleSets:
    information: frozenset[ModuleId]
    nuisance: frozenset[ModuleId]
    lambda_alpha: Mapping[str | None, float] = field(default_factory=dict)
    temporal: frozenset[ModuleId] = frozenset()
    protected: frozenset[ModuleId] = frozenset()

    @property
    def halt(self) -> bool:
        return not self.information


def eigen_threshold(lambda_min: float, lambda_max: float, alpha: float) -> float:
    if lambda_max < lambda_min:
        raise OrderingError(f"pooled max {lambda_max} is below pooled min {lambda_min}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return lambda_min + (lambda_max - lambda_min) * alpha


def modular_split(lambda_max: Mapping[ModuleId, float] | SpectrumSnapshot, lambda_alpha: float) -> ModuleSets:
    """Information iff ``lambda_max >= lambda_alpha``."""
    if isinstance(lambda_max, SpectrumSnapshot):
        lambda_max = lambda_max.lambda_max
    info = frozenset(m for m, v in lambda_max.items() if v >= lambda_alpha)
    return ModuleSets(info, frozenset(lambda_max) - info)


def temporal_stop(module: ModuleId, lambda_now: float, state: PolicyState, beta: float) -> bool:
    """Relative drift-change test; updates ``state.delta_prev[module]``.

    A module whose first drift is below ``DELTA_GUARD`` never moved from its
    baseline and is reported as converged.
    """
    if module not in state.lambda0:
        raise StateError(f"no baseline eigenvalue for {module}")
    if module not in state.delta_first or module not in state.delta_prev:
        raise StateError(f"{module} needs two post-baseline episodes before the temporal test")
    delta = abs(lambda_now - state.lambda0[module])
    prev = state.delta_prev[module]
    first = state.delta_first[module]
    state.delta_prev[module] = delta
    if first <= DELTA_GUARD:
        return True
    return abs(delta - prev) / first < beta


def _group_by_family(modules, families):
    groups: dict[str | None, list[ModuleId]] = {}
    for m in modules:
        groups.setdefault(families.get(m) if families else None, []).append(m)
    return groups


def decide(
    snapshot: SpectrumSnapshot,
    state: PolicyState,
    cfg: PolicyConfig,
    families: Mapping[ModuleId, str] | None = None,
) -> ModuleSets:
    """One episode of module selection; mutates ``state``.

    The first call records the baseline eigenvalues. The information set is
    the complement of (modular nuisance | temporally stopped | sticky stopped
    set). Protection runs last: a layer left without information modules
    gets its largest-eigenvalue module back.
    """
    lam = snapshot.lambda_max
    modules = sorted(lam)
    if not modules:
        raise StateError("snapshot has no modules")
    if state.episode < 0:
        state.lambda0 = dict(lam)
        state.episode = 0
    else:
        missing = [m for m in modules if m not in state.lambda0]
        if missing:
            raise StateError(f"no baseline eigenvalue for {missing[0]}")
        state.episode += 1

    family_params = {name: (a, b) for name, a, b in cfg.family_params}
    use_families = bool(family_params) and families is not None
    groups = _group_by_family(modules, families if use_families else None)

    nuisance: set[ModuleId] = set()
    thresholds: dict[str | None, float] = {}
    for family, members in groups.items():
        alpha, _ = cfg.params_for(family)
        lo, hi = snapshot.pooled_extrema(members if use_families else None)
        thresholds[family] = eigen_threshold(lo, hi, alpha)
        nuisance |= modular_split({m: lam[m] for m in members}, thresholds[family]).nuisance

    temporal: set[ModuleId] = set()
    if state.episode == 1:
        for m in modules:
            delta = abs(lam[m] - state.lambda0[m])
            state.delta_first[m] = delta
            state.delta_prev[m] = delta
    elif state.episode >= 2:
        for m in modules:
            _, beta = cfg.params_for(families.get(m) if use_families else None)
            if temporal_stop(m, lam[m], state, beta) and cfg.temporal_enabled:
                temporal.add(m)
    if cfg.sticky_temporal:
        state.stopped |= temporal
        temporal |= state.stopped & set(modules)
    nuisance |= temporal

    info = set(modules) - nuisance
    protected: set[ModuleId] = set()
    if cfg.protect_per_layer:
        layers: dict[int, list[ModuleId]] = {}
        for m in modules:
            layers.setdefault(m.layer_index, []).append(m)
        for members in layers.values():
            if not info.intersection(members):
                best = min(members, key=lambda m: (-lam[m], m))
                protected.add(best)
                info.add(best)
    return ModuleSets(
        information=frozenset(info),
        nuisance=frozenset(modules) - frozenset(info),
        lambda_alpha=thresholds,
        temporal=frozenset(temporal),
        protected=frozenset(protected),
    )
