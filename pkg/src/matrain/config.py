"""INI run specifications.

A run spec has four sections::

    [architecture]   kind = BlockMLP | TinyAttention | TinyConv, plus its fields
    [dataset]        kind = TeacherStudent | SpiralClassify | TinyTokenMask, plus generator params
    [train]          optimiser, loss and baseline settings
    [policy]         MAT settings

Values are plain ``key = value`` strings. Booleans accept true/false,
on/off, yes/no and 1/0; ``none`` clears an optional integer. Unknown
sections or keys are rejected. ``RunSpec.echo()`` writes the resolved spec
with every default filled in.
"""

from __future__ import annotations

import configparser
import dataclasses
import inspect
import io
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from matrain.datasets import GENERATORS
from matrain.errors import ConfigError
from matrain.modelzoo import ARCHITECTURES, Architecture, LossKind, Scalarization
from matrain.policy import PolicyConfig
from matrain.trainer import MultirateConfig, PolicyKind, TrainConfig

SECTIONS = ("architecture", "dataset", "train", "policy")

_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(text: str, like: Any, key: str):
    try:
        if isinstance(like, bool):
            return parse_bool(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text.strip()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


# [train] keys and their defaults, flattened from TrainConfig
_TRAIN_DEFAULTS = {
    "policy": "mat",
    "lr": 0.05,
    "epochs": 20,
    "batch_size": 16,
    "seed": 0,
    "loss": "squared_error",
    "rand_fraction": 0.5,
    "multirate_fraction_slow": 0.5,
    "multirate_k": 5,
    "patience": 10,
    "rel_tol": 1e-4,
    "freeze_non_modular": False,
    "track_spectrum": False,
    "scalarization": "sum_of_logits",
}

_POLICY_DEFAULTS = {
    "alpha": 0.1,
    "beta": 1e-3,
    "samples": 64,
    "warmup": 5,
    "cadence": 8,
    "sticky": True,
    "protect_per_layer": True,
    "temporal": True,
}


def _arch_defaults(kind: str) -> dict[str, Any]:
    cls = ARCHITECTURES[kind]
    out = {}
    for f in dataclasses.fields(cls):
        out[f.name] = None if f.default is dataclasses.MISSING else f.default
    return out


def _dataset_defaults(kind: str) -> dict[str, Any]:
    sig = inspect.signature(GENERATORS[kind])
    return {n: p.default for n, p in sig.parameters.items() if n != "seed"}


@dataclass(frozen=True)
class RunSpec:
    architecture_kind: str
    architecture: dict[str, Any]
    dataset_kind: str
    dataset: dict[str, Any]
    train: dict[str, Any] = field(default_factory=lambda: dict(_TRAIN_DEFAULTS))
    policy: dict[str, Any] = field(default_factory=lambda: dict(_POLICY_DEFAULTS))

    def build_architecture(self) -> Architecture:
        arch = ARCHITECTURES[self.architecture_kind](**self.architecture)
        arch.validate()
        return arch

    def train_config(self) -> TrainConfig:
        t, p = self.train, self.policy
        try:
            policy_kind = PolicyKind(t["policy"])
            loss = LossKind(t["loss"])
            scal = Scalarization(t["scalarization"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        pcfg = PolicyConfig(
            alpha=p["alpha"],
            beta=p["beta"],
            sample_count=p["samples"],
            warmup_epochs=p["warmup"],
            episode_cadence=p["cadence"],
            sticky_temporal=p["sticky"],
            protect_per_layer=p["protect_per_layer"],
            temporal_enabled=p["temporal"],
        )
        return TrainConfig(
            policy_kind=policy_kind,
            lr=t["lr"],
            epochs=t["epochs"],
            batch_size=t["batch_size"],
            seed=t["seed"],
            loss_kind=loss,
            policy=pcfg,
            rand_fraction=t["rand_fraction"],
            multirate=MultirateConfig(t["multirate_fraction_slow"], t["multirate_k"]),
            patience=t["patience"],
            rel_tol=t["rel_tol"],
            freeze_non_modular=t["freeze_non_modular"],
            track_spectrum=t["track_spectrum"],
            scalarization=scal,
        )

    def with_overrides(self, **overrides) -> "RunSpec":
        """Apply CLI-style overrides; keys are ``train.<key>`` or ``policy.<key>`` names."""
        train, policy = dict(self.train), dict(self.policy)
        for key, value in overrides.items():
            if value is None:
                continue
            section, _, name = key.partition(".")
            target = {"train": train, "policy": policy}.get(section)
            if target is None or name not in target:
                raise ConfigError(f"unknown override {key}")
            target[name] = value
        return replace(self, train=train, policy=policy)

    def echo(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["architecture"] = {"kind": self.architecture_kind, **{k: _fmt(v) for k, v in self.architecture.items()}}
        cp["dataset"] = {"kind": self.dataset_kind, **{k: _fmt(v) for k, v in self.dataset.items()}}
        cp["train"] = {k: _fmt(v) for k, v in self.train.items()}
        cp["policy"] = {k: _fmt(v) for k, v in self.policy.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue().rstrip("\n") + "\n"

    def validate(self) -> None:
        self.build_architecture()
        self.train_config()


def _section(cp, name: str) -> dict[str, str]:
    return dict(cp[name]) if cp.has_section(name) else {}


def _resolve(raw: Mapping[str, str], defaults: Mapping[str, Any], where: str) -> dict[str, Any]:
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    out = dict(defaults)
    for key, text in raw.items():
        like = defaults[key]
        if like is None:
            # required or optional-int field without a typed default
            out[key] = None if text.strip().lower() == "none" else _coerce(text, 0, key)
        else:
            out[key] = _coerce(text, like, key)
    return out


def parse_spec(text: str) -> RunSpec:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed spec: {exc}") from None
    extra = sorted(set(cp.sections()) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")

    arch_raw = _section(cp, "architecture")
    arch_kind = arch_raw.pop("kind", None)
    if arch_kind not in ARCHITECTURES:
        raise ConfigError(f"[architecture] kind must be one of {sorted(ARCHITECTURES)}, got {arch_kind!r}")
    arch = _resolve(arch_raw, _arch_defaults(arch_kind), "architecture")
    missing = [k for k, v in arch.items() if v is None]
    if missing:
        raise ConfigError(f"[architecture] missing required key(s): {', '.join(missing)}")

    data_raw = _section(cp, "dataset")
    data_kind = data_raw.pop("kind", None)
    if data_kind not in GENERATORS:
        raise ConfigError(f"[dataset] kind must be one of {sorted(GENERATORS)}, got {data_kind!r}")
    data = _resolve(data_raw, _dataset_defaults(data_kind), "dataset")

    train_raw = _section(cp, "train")
    if train_raw.get("patience", "").strip().lower() == "none":
        train_raw.pop("patience")
        train = _resolve(train_raw, _TRAIN_DEFAULTS, "train")
        train["patience"] = None
    else:
        train = _resolve(train_raw, _TRAIN_DEFAULTS, "train")
    policy = _resolve(_section(cp, "policy"), _POLICY_DEFAULTS, "policy")

    spec = RunSpec(arch_kind, arch, data_kind, data, train, policy)
    spec.validate()
    return spec


def load_spec(path) -> RunSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from None
    return parse_spec(text)
