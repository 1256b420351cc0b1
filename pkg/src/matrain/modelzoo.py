"""Small modular networks with exact forward passes and per-module gradients.

Every architecture lays its parameters out in one flat vector ``theta``.
Parameters belonging to the same module (an MLP block, an attention head or
a convolutional filter group) are stored contiguously, so a module is just a
slice of ``theta``. Everything outside the modules (embeddings, readout) is
"non-modular" and is updated under a separate, configurable rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from matrain import autodiff as ad
from matrain.errors import ConfigError, NumericError, ShapeError, UnknownModuleError

MAX_FULL_OUTPUT_ROWS = 512


@dataclass(frozen=True, order=True)
class ModuleId:
    layer_index: int
    slot_index: int

    def __str__(self):
        return f"L{self.layer_index}S{self.slot_index}"


class Scalarization(enum.Enum):
    SUM_OF_LOGITS = "sum_of_logits"
    FULL_OUTPUT = "full_output"


class LossKind(enum.Enum):
    SQUARED_ERROR = "squared_error"
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    module: ModuleId | None
    init_std: float

    @property
    def size(self) -> int:
        return math.prod(self.shape)


_ACTIVATIONS: dict[str, Callable] = {
    "tanh": ad.tanh,
    "relu": ad.relu,
    "identity": ad.identity,
}


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


class Architecture:
    """Interface shared by the three network families."""

    family = "module"

    @property
    def d_in(self) -> int:
        raise NotImplementedError

    @property
    def d_out(self) -> int:
        raise NotImplementedError

    @property
    def output_group(self) -> int:
        """Width of one softmax group in the output row."""
        return self.d_out

    def validate(self) -> None:
        raise NotImplementedError

    def layout(self) -> list[ParamSpec]:
        raise NotImplementedError

    def forward(self, p: Mapping[str, ad.Tensor], x: np.ndarray, pruned: frozenset) -> ad.Tensor:
        raise NotImplementedError

    def macs(self, n: int, pruned: frozenset = frozenset()) -> dict[ModuleId | None, int]:
        raise NotImplementedError


@dataclass(frozen=True)
class BlockMLP(Architecture):
    """Fully connected net whose hidden units are split into blocks.

    Block ``(l, b)`` owns the incoming weights and biases of the ``b``-th
    group of units in hidden layer ``l``. The readout is non-modular; with
    ``readout=False`` the last hidden layer is the output (no activation).
    """

    d_input: int
    width: int
    layers: int
    blocks_per_layer: int
    d_output: int = 1
    activation: str = "tanh"
    bias: bool = True
    readout: bool = True

    family = "block"

    @property
    def d_in(self):
        return self.d_input

    @property
    def d_out(self):
        return self.d_output

    def validate(self):
        for name in ("d_input", "width", "layers", "blocks_per_layer", "d_output"):
            if getattr(self, name) < 1:
                raise ConfigError(f"BlockMLP.{name} must be positive")
        if self.width % self.blocks_per_layer:
            raise ConfigError("BlockMLP.width must be divisible by blocks_per_layer")
        if not self.readout and self.width != self.d_output:
            raise ConfigError("without a readout the last width must equal d_output")
        _activation(self.activation)

    @property
    def _units(self):
        return self.width // self.blocks_per_layer

    def layout(self):
        specs = []
        fan_in = self.d_input
        for l in range(self.layers):
            for b in range(self.blocks_per_layer):
                mid = ModuleId(l, b)
                specs.append(ParamSpec(f"w{l}.{b}", (fan_in, self._units), mid, fan_in**-0.5))
                if self.bias:
                    specs.append(ParamSpec(f"b{l}.{b}", (self._units,), mid, 0.0))
            fan_in = self.width
        if self.readout:
            specs.append(ParamSpec("w_out", (self.width, self.d_output), None, self.width**-0.5))
            if self.bias:
                specs.append(ParamSpec("b_out", (self.d_output,), None, 0.0))
        return specs

    def forward(self, p, x, pruned=frozenset()):
        act = _activation(self.activation)
        h = ad.constant(x)
        n = x.shape[0]
        for l in range(self.layers):
            last = not self.readout and l == self.layers - 1
            parts = []
            for b in range(self.blocks_per_layer):
                if ModuleId(l, b) in pruned:
                    parts.append(ad.constant(np.zeros((n, self._units))))
                    continue
                z = h @ p[f"w{l}.{b}"]
                if self.bias:
                    z = z + p[f"b{l}.{b}"]
                parts.append(z if last else act(z))
            h = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
        if self.readout:
            h = h @ p["w_out"]
            if self.bias:
                h = h + p["b_out"]
        return h

    def macs(self, n, pruned=frozenset()):
        out: dict[ModuleId | None, int] = {}
        fan_in = self.d_input
        for l in range(self.layers):
            for b in range(self.blocks_per_layer):
                mid = ModuleId(l, b)
                if mid not in pruned:
                    out[mid] = n * fan_in * self._units
            fan_in = self.width
        out[None] = n * self.width * self.d_output if self.readout else 0
        return out


@dataclass(frozen=True)
class TinyAttention(Architecture):
    """Attention-only encoder over token sequences; one module per head.

    Input rows hold ``seq_len`` token ids (stored as floats). The output row
    is the flattened ``seq_len x vocab`` logit grid. Each layer adds the sum
    of its heads to a residual stream after a parameter-free RMS norm.
    Embeddings and the readout are non-modular.
    """

    vocab: int = 16
    seq_len: int = 8
    d_model: int = 16
    heads: int = 4
    layers: int = 2

    family = "head"

    @property
    def d_head(self):
        return self.d_model // self.heads

    @property
    def d_in(self):
        return self.seq_len

    @property
    def d_out(self):
        return self.seq_len * self.vocab

    @property
    def output_group(self):
        return self.vocab

    def validate(self):
        for name in ("vocab", "seq_len", "d_model", "heads", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"TinyAttention.{name} must be positive")
        if self.d_model % self.heads:
            raise ConfigError("TinyAttention.d_model must be divisible by heads")

    def layout(self):
        d, dh = self.d_model, self.d_head
        specs = [
            ParamSpec("tok_emb", (self.vocab, d), None, 1.0),
            ParamSpec("pos_emb", (self.seq_len, d), None, 1.0),
        ]
        for l in range(self.layers):
            for h in range(self.heads):
                mid = ModuleId(l, h)
                for name in ("q", "k", "v"):
                    specs.append(ParamSpec(f"{name}{l}.{h}", (d, dh), mid, d**-0.5))
                specs.append(ParamSpec(f"o{l}.{h}", (dh, d), mid, dh**-0.5))
        specs.append(ParamSpec("w_out", (d, self.vocab), None, d**-0.5))
        specs.append(ParamSpec("b_out", (self.vocab,), None, 0.0))
        return specs

    def forward(self, p, x, pruned=frozenset()):
        n = x.shape[0]
        ids = np.asarray(np.rint(x), dtype=np.intp)
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise ShapeError("token id outside the vocabulary")
        h = ad.take_rows(p["tok_emb"], ids) + p["pos_emb"]
        scale = self.d_head**-0.5
        for l in range(self.layers):
            hn = ad.rms_normalize(h)
            acc = h
            for head in range(self.heads):
                if ModuleId(l, head) in pruned:
                    continue
                q = hn @ p[f"q{l}.{head}"]
                k = hn @ p[f"k{l}.{head}"]
                v = hn @ p[f"v{l}.{head}"]
                att = ad.softmax((q @ ad.swap_last(k)) * scale)
                acc = acc + (att @ v) @ p[f"o{l}.{head}"]
            h = acc
        logits = ad.rms_normalize(h) @ p["w_out"] + p["b_out"]
        return ad.reshape(logits, (n, self.d_out))

    def macs(self, n, pruned=frozenset()):
        t, d, dh = self.seq_len, self.d_model, self.d_head
        per_head = n * (4 * t * d * dh + 2 * t * t * dh)
        out: dict[ModuleId | None, int] = {
            ModuleId(l, h): per_head
            for l in range(self.layers)
            for h in range(self.heads)
            if ModuleId(l, h) not in pruned
        }
        out[None] = n * t * d * self.vocab
        return out


@dataclass(frozen=True)
class TinyConv(Architecture):
    """3x3 same-padding conv net on small images; one module per filter group.

    Input rows are ``height * width * in_channels`` values in channels-last
    order. Global average pooling feeds a non-modular linear readout.
    """

    height: int = 6
    width: int = 6
    in_channels: int = 1
    filters: int = 8
    groups_per_layer: int = 2
    layers: int = 2
    d_output: int = 1
    activation: str = "tanh"

    family = "filter"

    @property
    def d_in(self):
        return self.height * self.width * self.in_channels

    @property
    def d_out(self):
        return self.d_output

    @property
    def _group(self):
        return self.filters // self.groups_per_layer

    def validate(self):
        for name in ("height", "width", "in_channels", "filters", "groups_per_layer", "layers", "d_output"):
            if getattr(self, name) < 1:
                raise ConfigError(f"TinyConv.{name} must be positive")
        if self.filters % self.groups_per_layer:
            raise ConfigError("TinyConv.filters must be divisible by groups_per_layer")
        _activation(self.activation)

    def _patch_index(self) -> np.ndarray:
        hw = self.height * self.width
        idx = np.full((hw, 9), hw, dtype=np.intp)  # hw is the zero pad slot
        for r in range(self.height):
            for c in range(self.width):
                k = 0
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < self.height and 0 <= cc < self.width:
                            idx[r * self.width + c, k] = rr * self.width + cc
                        k += 1
        return idx

    def layout(self):
        specs = []
        channels = self.in_channels
        for l in range(self.layers):
            fan_in = 9 * channels
            for g in range(self.groups_per_layer):
                mid = ModuleId(l, g)
                specs.append(ParamSpec(f"w{l}.{g}", (fan_in, self._group), mid, fan_in**-0.5))
                specs.append(ParamSpec(f"b{l}.{g}", (self._group,), mid, 0.0))
            channels = self.filters
        specs.append(ParamSpec("w_out", (self.filters, self.d_output), None, self.filters**-0.5))
        specs.append(ParamSpec("b_out", (self.d_output,), None, 0.0))
        return specs

    def forward(self, p, x, pruned=frozenset()):
        act = _activation(self.activation)
        n = x.shape[0]
        hw = self.height * self.width
        idx = self._patch_index()
        h = ad.reshape(ad.constant(x), (n, hw, self.in_channels))
        channels = self.in_channels
        for l in range(self.layers):
            padded = ad.concat([h, np.zeros((n, 1, channels))], axis=1)
            patches = ad.reshape(ad.gather(padded, idx, axis=1), (n, hw, 9 * channels))
            parts = []
            for g in range(self.groups_per_layer):
                if ModuleId(l, g) in pruned:
                    parts.append(ad.constant(np.zeros((n, hw, self._group))))
                    continue
                parts.append(act(patches @ p[f"w{l}.{g}"] + p[f"b{l}.{g}"]))
            h = ad.concat(parts, axis=-1)
            channels = self.filters
        pooled = ad.mean(h, axis=1)
        return pooled @ p["w_out"] + p["b_out"]

    def macs(self, n, pruned=frozenset()):
        hw = self.height * self.width
        out: dict[ModuleId | None, int] = {}
        channels = self.in_channels
        for l in range(self.layers):
            for g in range(self.groups_per_layer):
                mid = ModuleId(l, g)
                if mid not in pruned:
                    out[mid] = n * hw * 9 * channels * self._group
            channels = self.filters
        out[None] = n * self.filters * self.d_output
        return out


ARCHITECTURES = {"BlockMLP": BlockMLP, "TinyAttention": TinyAttention, "TinyConv": TinyConv}


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise ShapeError(f"bad batch shapes {x.shape} / {y.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise NumericError("batch contains non-finite values")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]


class ModularNetwork:
    """Parameters ``theta`` of an architecture plus its module partition.

    ``partition`` maps each live module to its slice of ``theta``.
    ``theta0`` is the reference point for weight-distance tracking; it starts
    equal to ``theta`` and is reset by the trainer at the end of warmup.
    Pruned modules keep their bytes in ``theta`` but leave the partition and
    contribute nothing to the forward pass.
    """

    def __init__(self, arch: Architecture, theta, *, pruned: Iterable[ModuleId] = ()):
        arch.validate()
        self.arch = arch
        self.pruned = frozenset(pruned)
        self._specs: list[tuple[ParamSpec, slice]] = []
        module_ranges: dict[ModuleId, list[int]] = {}
        non_modular: list[slice] = []
        offset = 0
        for spec in arch.layout():
            sl = slice(offset, offset + spec.size)
            self._specs.append((spec, sl))
            if spec.module is None:
                non_modular.append(sl)
            else:
                module_ranges.setdefault(spec.module, [sl.start, sl.stop])[1] = sl.stop
            offset += spec.size
        theta = np.array(theta, dtype=np.float64)
        if theta.shape != (offset,):
            raise ShapeError(f"theta has shape {theta.shape}, layout needs ({offset},)")
        self.theta = theta
        self.theta0 = theta.copy()
        self.all_modules = tuple(sorted(module_ranges))
        self.partition: dict[ModuleId, slice] = {
            mid: slice(*module_ranges[mid]) for mid in self.all_modules if mid not in self.pruned
        }
        self.non_modular = tuple(non_modular)

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    @property
    def modules(self) -> list[ModuleId]:
        return list(self.partition)

    @property
    def layers(self) -> dict[int, list[ModuleId]]:
        out: dict[int, list[ModuleId]] = {}
        for mid in self.partition:
            out.setdefault(mid.layer_index, []).append(mid)
        return out

    @property
    def non_modular_size(self) -> int:
        return sum(sl.stop - sl.start for sl in self.non_modular)

    def module_size(self, module: ModuleId) -> int:
        sl = self.slice_of(module)
        return sl.stop - sl.start

    def slice_of(self, module: ModuleId) -> slice:
        try:
            return self.partition[module]
        except KeyError:
            raise UnknownModuleError(f"unknown module {module}") from None

    def copy(self) -> "ModularNetwork":
        other = ModularNetwork(self.arch, self.theta, pruned=self.pruned)
        other.theta0 = self.theta0.copy()
        return other

    def reset_reference(self) -> None:
        self.theta0 = self.theta.copy()

    def views(self, theta: np.ndarray | None = None) -> dict[str, np.ndarray]:
        theta = self.theta if theta is None else theta
        return {spec.name: theta[sl].reshape(spec.shape) for spec, sl in self._specs}

    def non_modular_values(self, vector: np.ndarray) -> np.ndarray:
        if not self.non_modular:
            return np.zeros(0)
        return np.concatenate([vector[sl] for sl in self.non_modular])

    def macs(self, n: int) -> dict[ModuleId | None, int]:
        return self.arch.macs(n, self.pruned)

    def _check_inputs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.arch.d_in:
            raise ShapeError(f"input shape {x.shape} does not match width {self.arch.d_in}")
        return x

    def output(self, x) -> np.ndarray:
        x = self._check_inputs(x)
        p = {k: ad.Tensor(v) for k, v in self.views().items()}
        return self.arch.forward(p, x, self.pruned).value

    def graph(self, x):
        """Forward pass with parameter leaves; returns ``(root, leaves)``."""
        x = self._check_inputs(x)
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in self.views().items()}
        return self.arch.forward(leaves, x, self.pruned), leaves

    def vjp(self, x):
        """Return ``(outputs, pullback)``; ``pullback(c)`` is ``J^T c`` over all of theta."""
        root, leaves = self.graph(x)

        def pullback(cotangent) -> np.ndarray:
            for leaf in leaves.values():
                leaf.grad = None
            ad.backward(root, cotangent)
            g = np.zeros(self.size)
            for spec, sl in self._specs:
                leaf = leaves[spec.name]
                if leaf.grad is not None:
                    g[sl] = leaf.grad.ravel()
            return g

        return root.value, pullback


def build_network(arch: Architecture, seed: int) -> ModularNetwork:
    """Seeded initialisation: Gaussian weights scaled by fan-in, zero biases."""
    arch.validate()
    layout = arch.layout()
    modules = {s.module for s in layout if s.module is not None}
    if len(modules) < 2:
        raise ConfigError(f"architecture has {len(modules)} module(s); need at least 2")
    rng = np.random.default_rng(seed)
    theta = np.concatenate(
        [rng.standard_normal(s.size) * s.init_std if s.init_std else np.zeros(s.size) for s in layout]
    )
    return ModularNetwork(arch, theta)


def forward(net: ModularNetwork, inputs) -> tuple[np.ndarray, int]:
    """Network outputs and the multiply-accumulate count of the pass."""
    out = net.output(inputs)
    return out, sum(net.macs(out.shape[0]).values())


@dataclass(frozen=True, eq=False)
class JacobianBlock:
    module: ModuleId
    values: np.ndarray
    scalarization: Scalarization

    @property
    def samples(self) -> int:
        return self.values.shape[0]


def jacobian(
    net: ModularNetwork, samples, scalarization: Scalarization = Scalarization.SUM_OF_LOGITS
) -> np.ndarray:
    """Jacobian of the scalarised output with respect to all of ``theta``.

    Sum-of-logits gives one row per sample. Full-output gives ``S * k`` rows
    ordered sample-major.
    """
    x = net._check_inputs(samples)
    k = net.arch.d_out
    if scalarization is Scalarization.FULL_OUTPUT and x.shape[0] * k > MAX_FULL_OUTPUT_ROWS:
        raise ConfigError(
            f"full-output Jacobian needs {x.shape[0] * k} rows, cap is {MAX_FULL_OUTPUT_ROWS}"
        )
    rows = []
    for i in range(x.shape[0]):
        _, pullback = net.vjp(x[i : i + 1])
        if scalarization is Scalarization.SUM_OF_LOGITS:
            rows.append(pullback(np.ones((1, k))))
        else:
            for j in range(k):
                e = np.zeros((1, k))
                e[0, j] = 1.0
                rows.append(pullback(e))
    return np.vstack(rows)


def module_jacobians(
    net: ModularNetwork, samples, scalarization: Scalarization = Scalarization.SUM_OF_LOGITS
) -> dict[ModuleId, JacobianBlock]:
    full = jacobian(net, samples, scalarization)
    return {
        mid: JacobianBlock(mid, np.ascontiguousarray(full[:, sl]), scalarization)
        for mid, sl in net.partition.items()
    }


def module_jacobian(
    net: ModularNetwork,
    samples,
    module: ModuleId,
    scalarization: Scalarization = Scalarization.SUM_OF_LOGITS,
) -> JacobianBlock:
    sl = net.slice_of(module)
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError("module_jacobian needs at least 2 samples")
    full = jacobian(net, x, scalarization)
    return JacobianBlock(module, np.ascontiguousarray(full[:, sl]), scalarization)


def per_sample_loss(outputs, targets, loss_kind: LossKind, group: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and d(sum of losses)/d(outputs)."""
    if loss_kind is LossKind.SQUARED_ERROR:
        r = outputs - targets
        with np.errstate(over="ignore"):
            return 0.5 * np.sum(r * r, axis=1), r
    n, k = outputs.shape
    if k % group:
        raise ShapeError(f"output width {k} is not a multiple of the softmax group {group}")
    z = outputs.reshape(n, k // group, group)
    y = targets.reshape(n, k // group, group)
    with np.errstate(over="ignore", invalid="ignore"):
        shifted = z - z.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        log_p = shifted - log_norm
        losses = -np.sum(y * log_p, axis=(1, 2))
        weight = y.sum(axis=-1, keepdims=True)
        grad = np.exp(log_p) * weight - y
    return losses, grad.reshape(n, k)


def evaluate_loss(net: ModularNetwork, inputs, targets, loss_kind: LossKind) -> float:
    out = net.output(inputs)
    losses, _ = per_sample_loss(out, np.asarray(targets, dtype=np.float64), loss_kind, net.arch.output_group)
    return float(np.mean(losses))


@dataclass(eq=False)
class LossGradients:
    loss: float
    per_module: dict[ModuleId, np.ndarray]
    non_modular: np.ndarray
    output_grad: np.ndarray
    full: np.ndarray
    flops_forward: int
    flops_backward: int
    macs_by_module: dict[ModuleId | None, int] = field(default_factory=dict)


def loss_and_gradients(net: ModularNetwork, batch: Batch, loss_kind: LossKind) -> LossGradients:
    """Mean loss over the batch and its gradient split by module.

    ``output_grad`` is the gradient of the mean loss with respect to the
    network outputs. Backward FLOPs follow the 2x-forward accounting model.
    """
    if batch.targets.shape[1] != net.arch.d_out:
        raise ShapeError(f"target width {batch.targets.shape[1]} != output width {net.arch.d_out}")
    outputs, pullback = net.vjp(batch.inputs)
    losses, grad_sum = per_sample_loss(outputs, batch.targets, loss_kind, net.arch.output_group)
    bad = ~np.isfinite(losses) | ~np.all(np.isfinite(grad_sum), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite loss at sample {i}", sample=i)
    n = len(batch)
    output_grad = grad_sum / n
    full = pullback(output_grad)
    macs = net.macs(n)
    fwd = sum(macs.values())
    return LossGradients(
        loss=float(np.mean(losses)),
        per_module={mid: full[sl].copy() for mid, sl in net.partition.items()},
        non_modular=net.non_modular_values(full),
        output_grad=output_grad,
        full=full,
        flops_forward=fwd,
        flops_backward=2 * fwd,
        macs_by_module=macs,
    )


def apply_selective_step(
    net: ModularNetwork,
    grads: Mapping[ModuleId, np.ndarray],
    active: Iterable[ModuleId],
    lr: float,
    non_modular_grad: np.ndarray | None = None,
) -> ModularNetwork:
    """SGD step on the active modules only, in place.

    Inactive modules are not touched. Non-modular parameters are updated
    iff ``non_modular_grad`` is given.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    active = sorted(set(active))
    for mid in active:
        sl = net.slice_of(mid)
        g = np.asarray(grads[mid])
        if g.shape != (sl.stop - sl.start,):
            raise ShapeError(f"gradient for {mid} has shape {g.shape}, expected ({sl.stop - sl.start},)")
    if non_modular_grad is not None and np.shape(non_modular_grad) != (net.non_modular_size,):
        raise ShapeError("non-modular gradient length mismatch")
    for mid in active:
        net.theta[net.partition[mid]] -= lr * grads[mid]
    if non_modular_grad is not None:
        offset = 0
        for sl in net.non_modular:
            size = sl.stop - sl.start
            net.theta[sl] -= lr * non_modular_grad[offset : offset + size]
            offset += size
    return net
