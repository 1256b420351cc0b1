"""Per-module NTK Gram matrices, their spectra and loss-reduction estimates."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from matrain.errors import AlignmentError, ConfigError, ShapeError
from matrain.modelzoo import (
    JacobianBlock,
    ModularNetwork,
    ModuleId,
    Scalarization,
    module_jacobians,
)
from matrain.numerics import PSD_CLAMP_TOL, Spectrum, eig_sym, effective_rank, matmul_transpose

DEFAULT_SAMPLES = 64


@dataclass(frozen=True, eq=False)
class Mntk:
    """Gram matrix ``J J^T`` of one module and its spectrum.

    ``lambda_min`` is the smallest (clamped) eigenvalue. The condition number
    uses only eigenvalues above ``1e-10 * lambda_max``; when any eigenvalue
    falls below that cut the Gram is rank deficient and ``condition_number``
    is the sentinel ``inf`` with ``rank_deficient`` set.
    """

    module: ModuleId
    gram: np.ndarray
    spectrum: Spectrum
    trace: float
    condition_number: float
    rank_deficient: bool

    @property
    def lambda_max(self) -> float:
        return float(self.spectrum.eigenvalues[0])

    @property
    def lambda_min(self) -> float:
        return float(self.spectrum.eigenvalues[-1])

    @property
    def principal_vector(self) -> np.ndarray:
        return self.spectrum.eigenvectors[:, 0]

    @property
    def effective_rank(self) -> float:
        if self.lambda_max == 0.0:
            return 0.0
        return effective_rank(self.spectrum.eigenvalues)

    @property
    def dominance_ratio(self) -> float:
        """lambda_1 / lambda_2; exported for observation only."""
        w = self.spectrum.eigenvalues
        if w.size < 2:
            return math.inf
        return math.inf if w[1] == 0.0 else float(w[0] / w[1])


def build_mntk(jac: JacobianBlock) -> Mntk:
    gram = matmul_transpose(jac.values)
    spectrum = eig_sym(gram, tol=PSD_CLAMP_TOL, psd=True)
    w = spectrum.eigenvalues
    lam_max = float(w[0])
    above = w[w > PSD_CLAMP_TOL * lam_max] if lam_max > 0 else w[:0]
    rank_deficient = above.size < w.size
    if rank_deficient:
        kappa = math.inf
    else:
        kappa = lam_max / float(above[-1])
    return Mntk(jac.module, gram, spectrum, float(np.trace(gram)), kappa, rank_deficient)


def integral_ntk(jacs: Iterable[JacobianBlock]) -> np.ndarray:
    """Sum of module Grams; requires blocks over the same samples."""
    jacs = list(jacs)
    if not jacs:
        raise AlignmentError("integral NTK of an empty module list")
    rows = {j.values.shape[0] for j in jacs}
    kinds = {j.scalarization for j in jacs}
    if len(rows) != 1 or len(kinds) != 1:
        raise AlignmentError(f"Jacobian blocks disagree on rows {rows} or scalarization {kinds}")
    total = np.zeros((rows.pop(),) * 2)
    for j in jacs:
        total += matmul_transpose(j.values)
    return total


class Mode(enum.Enum):
    EXACT = "exact"
    PRINCIPAL_ONLY = "principal_only"


def predicted_loss_reduction(mntks: Iterable[Mntk], g, mode: Mode = Mode.EXACT) -> float:
    """First-order loss decrease per unit step, ``sum_l sum_i lam_i (u_i . g)^2``.

    ``PRINCIPAL_ONLY`` keeps only the top eigenpair of each module. Each
    module's exact term is accumulated starting from its principal term so
    the exact value can never round below the principal-only one.
    """
    g = np.asarray(g, dtype=np.float64).ravel()
    per_module = []
    for m in mntks:
        if m.gram.shape[0] != g.shape[0]:
            raise ShapeError(f"vector of length {g.shape[0]} vs Gram of size {m.gram.shape[0]}")
        proj = m.spectrum.eigenvectors.T @ g
        terms = m.spectrum.eigenvalues * proj * proj
        if mode is Mode.PRINCIPAL_ONLY:
            per_module.append(float(terms[0]))
        else:
            per_module.append(float(terms[0]) + float(np.sum(terms[1:])))
    return math.fsum(per_module)


@dataclass(frozen=True)
class ModuleSummary:
    lambda_max: float
    lambda_min: float
    trace: float
    effective_rank: float
    condition_number: float
    dominance_ratio: float = math.inf


@dataclass(eq=False)
class SpectrumSnapshot:
    """Per-module spectral summaries at one policy episode.

    The pooled extrema run over every eigenvalue of every module. A snapshot
    can be built from summaries alone (``from_lambdas``) for scripted tests.
    """

    episode: int
    per_module: dict[ModuleId, ModuleSummary]
    global_lambda_min: float
    global_lambda_max: float
    mntks: dict[ModuleId, Mntk] = field(default_factory=dict)
    pooled: dict[ModuleId, np.ndarray] = field(default_factory=dict)
    overhead_flops: int = 0

    @property
    def lambda_max(self) -> dict[ModuleId, float]:
        return {mid: s.lambda_max for mid, s in self.per_module.items()}

    def pooled_extrema(self, modules: Iterable[ModuleId] | None = None) -> tuple[float, float]:
        if modules is None:
            return self.global_lambda_min, self.global_lambda_max
        modules = list(modules)
        lo = min(float(self.pooled[m].min()) if m in self.pooled else self.per_module[m].lambda_min for m in modules)
        hi = max(self.per_module[m].lambda_max for m in modules)
        return lo, hi

    @classmethod
    def from_lambdas(
        cls,
        lambda_max: Mapping[ModuleId, float],
        lambda_min: Mapping[ModuleId, float] | None = None,
        episode: int = 0,
    ) -> "SpectrumSnapshot":
        lambda_min = lambda_min or {m: 0.0 for m in lambda_max}
        per = {
            m: ModuleSummary(float(v), float(lambda_min[m]), float(v), 1.0, math.inf)
            for m, v in sorted(lambda_max.items())
        }
        return cls(
            episode=episode,
            per_module=per,
            global_lambda_min=min(s.lambda_min for s in per.values()),
            global_lambda_max=max(s.lambda_max for s in per.values()),
        )


def sample_indices(n: int, count: int, seed: int, episode: int) -> np.ndarray:
    """Uniform draw of ``count`` distinct rows, reseeded per (run seed, episode)."""
    if count < 2:
        raise ConfigError(f"sample count must be at least 2, got {count}")
    if count > n:
        raise ConfigError(f"sample count {count} exceeds the {n} available rows")
    rng = np.random.default_rng([seed, 2, episode])
    return rng.choice(n, size=count, replace=False)


def _eig_macs(spectrum: Spectrum) -> int:
    # two row rotations of the matrix plus one of the eigenvector basis per rotation
    return 12 * spectrum.size * spectrum.rotations


def snapshot(
    net: ModularNetwork,
    samples,
    scalarization: Scalarization = Scalarization.SUM_OF_LOGITS,
    episode: int = 0,
) -> SpectrumSnapshot:
    """Build every module's mNTK on ``samples`` and summarise the spectra.

    ``overhead_flops`` counts the per-sample forward and backward passes,
    the Gram products and the eigensolver rotations.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigError("a spectrum snapshot needs at least 2 samples")
    blocks = module_jacobians(net, x, scalarization)
    mntks = {mid: build_mntk(b) for mid, b in blocks.items()}
    per = {
        mid: ModuleSummary(
            m.lambda_max, m.lambda_min, m.trace, m.effective_rank, m.condition_number, m.dominance_ratio
        )
        for mid, m in mntks.items()
    }
    pooled = {mid: m.spectrum.eigenvalues for mid, m in mntks.items()}
    s = x.shape[0]
    rows = next(iter(blocks.values())).values.shape[0]
    fwd1 = sum(net.macs(1).values())
    overhead = s * fwd1 + rows * 2 * fwd1
    overhead += sum(rows * rows * b.values.shape[1] for b in blocks.values())
    overhead += sum(_eig_macs(m.spectrum) for m in mntks.values())
    return SpectrumSnapshot(
        episode=episode,
        per_module=per,
        global_lambda_min=min(float(w.min()) for w in pooled.values()),
        global_lambda_max=max(float(w.max()) for w in pooled.values()),
        mntks=mntks,
        pooled=pooled,
        overhead_flops=int(overhead),
    )
