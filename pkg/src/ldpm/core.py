"""Bit-indexed distributions, marginals and the Hadamard transform.

Indexing conventions used throughout the package:

* A record over ``d`` binary attributes is packed into an integer in
  ``[0, 2**d)`` with attribute 0 as the most significant bit.
* A marginal is identified by a ``d``-bit mask ``beta``. Its table has
  ``2**k`` cells (``k = popcount(beta)``); the compact cell index of a full
  index ``eta`` is obtained by extracting the bits of ``eta`` at the set
  positions of ``beta``, most significant attribute first.
* Hadamard coefficients use natural binary order with sign
  ``(-1) ** popcount(i & j)``. The normalized transform scales by
  ``2 ** (-d / 2)`` and is its own inverse.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

MAX_D = 24


def popcount(x):
    """Number of set bits; works on Python ints and integer arrays."""
    if isinstance(x, (int, np.integer)):
        return bin(int(x)).count("1")
    return np.bitwise_count(np.asarray(x)).astype(np.int64)


def parity_sign(x):
    """``(-1) ** popcount(x)`` as +1/-1 (int8 for arrays)."""
    if isinstance(x, (int, np.integer)):
        return -1 if popcount(x) & 1 else 1
    return (1 - 2 * (np.bitwise_count(np.asarray(x)) & 1)).astype(np.int8)


def _check_d(d: int) -> None:
    if not 1 <= d <= MAX_D:
        raise ValueError(f"d must be in [1, {MAX_D}], got {d}")


def mask_positions(beta: int, d: int) -> list[int]:
    """Bit positions set in ``beta``, most significant first."""
    return [b for b in range(d - 1, -1, -1) if (beta >> b) & 1]


def extract_bits(values, beta: int, d: int):
    """Compress ``values`` onto the bits selected by ``beta`` (pext)."""
    pos = mask_positions(beta, d)
    k = len(pos)
    if isinstance(values, (int, np.integer)):
        out = 0
        for i, b in enumerate(pos):
            out |= ((int(values) >> b) & 1) << (k - 1 - i)
        return out
    values = np.asarray(values, dtype=np.int64)
    out = np.zeros(values.shape, dtype=np.int64)
    for i, b in enumerate(pos):
        out |= ((values >> b) & 1) << (k - 1 - i)
    return out


def deposit_bits(compact, beta: int, d: int):
    """Inverse of :func:`extract_bits` (pdep): spread compact bits onto ``beta``."""
    pos = mask_positions(beta, d)
    k = len(pos)
    if isinstance(compact, (int, np.integer)):
        out = 0
        for i, b in enumerate(pos):
            out |= ((int(compact) >> (k - 1 - i)) & 1) << b
        return out
    compact = np.asarray(compact, dtype=np.int64)
    out = np.zeros(compact.shape, dtype=np.int64)
    for i, b in enumerate(pos):
        out |= ((compact >> (k - 1 - i)) & 1) << b
    return out


@dataclass(frozen=True)
class Distribution:
    """A (possibly estimated) histogram over ``{0,1}^d``.

    True population tables are nonnegative and sum to one; unbiased estimates
    need not be either, and are never clipped here.
    """

    d: int
    cells: np.ndarray

    def __post_init__(self):
        _check_d(self.d)
        cells = np.asarray(self.cells, dtype=np.float64)
        if cells.shape != (1 << self.d,):
            raise ValueError(f"expected {1 << self.d} cells, got shape {cells.shape}")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def uniform(cls, d: int) -> "Distribution":
        return cls(d, np.full(1 << d, 1.0 / (1 << d)))

    @classmethod
    def point_mass(cls, d: int, index: int) -> "Distribution":
        cells = np.zeros(1 << d)
        cells[index] = 1.0
        return cls(d, cells)

    @classmethod
    def from_records(cls, records, d: int) -> "Distribution":
        """Empirical distribution ``sum(t_i) / N`` of packed records."""
        records = np.asarray(records, dtype=np.int64)
        if records.size == 0:
            raise ValueError("no records")
        counts = np.bincount(records, minlength=1 << d)
        if counts.size != 1 << d:
            raise ValueError(f"record out of range for d={d}")
        return cls(d, counts / records.size)


@dataclass(frozen=True)
class MarginalSpec:
    """Mask ``beta`` over ``d`` attributes selecting a ``k``-way marginal."""

    d: int
    beta: int

    def __post_init__(self):
        _check_d(self.d)
        if not 0 < self.beta < (1 << self.d):
            raise ValueError(f"beta must be a nonzero {self.d}-bit mask, got {self.beta}")

    @property
    def k(self) -> int:
        return popcount(self.beta)

    @property
    def attributes(self) -> tuple[int, ...]:
        """Attribute indices (0 = most significant bit), in table order."""
        return tuple(self.d - 1 - b for b in mask_positions(self.beta, self.d))

    @classmethod
    def from_attributes(cls, d: int, attrs: Iterable[int]) -> "MarginalSpec":
        beta = 0
        for a in attrs:
            if not 0 <= a < d:
                raise ValueError(f"attribute {a} out of range for d={d}")
            beta |= 1 << (d - 1 - a)
        return cls(d, beta)

    def label(self) -> str:
        return format(self.beta, f"0{self.d}b")

    def compact(self, eta):
        return extract_bits(eta, self.beta, self.d)

    def expand(self, gamma):
        return deposit_bits(gamma, self.beta, self.d)


def k_way_specs(d: int, k: int) -> list[MarginalSpec]:
    """All ``C(d, k)`` k-way marginals in lexicographic attribute order.

    The position in this list is the marginal id used in reports.
    """
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    return [MarginalSpec.from_attributes(d, c) for c in itertools.combinations(range(d), k)]


@dataclass
class MarginalTable:
    """A ``2**k`` table for ``spec``; ``flags`` carries estimator diagnostics."""

    spec: MarginalSpec
    cells: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.float64)
        if self.cells.shape != (1 << self.spec.k,):
            raise ValueError(f"expected {1 << self.spec.k} cells, got shape {self.cells.shape}")

    def full_index(self, gamma: int) -> int:
        return self.spec.expand(gamma)

    def as_matrix(self) -> np.ndarray:
        """2x2 view (rows: first attribute) for 2-way tables."""
        if self.spec.k != 2:
            raise ValueError("as_matrix needs a 2-way table")
        return self.cells.reshape(2, 2)


@dataclass
class HadamardCoeffs:
    """Sparse set of Hadamard coefficients over ``{0,1}^d``.

    ``indices`` is sorted ascending. With ``normalized=True`` the values are
    ``theta = phi @ t`` (so ``theta_0 = 2**(-d/2)`` for a distribution);
    otherwise they are the unscaled signed sums ``2**(d/2) * theta``.
    ``missing`` marks coefficients that were never observed and hold 0.
    """

    d: int
    indices: np.ndarray
    values: np.ndarray
    normalized: bool = True
    missing: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values differ in shape")
        if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
            order = np.argsort(self.indices)
            self.indices = self.indices[order]
            self.values = self.values[order]
            if self.missing is not None:
                self.missing = np.asarray(self.missing)[order]
        if self.missing is None:
            self.missing = np.zeros(self.indices.shape, dtype=bool)

    @classmethod
    def from_dense(cls, theta: np.ndarray, indices=None, normalized: bool = True) -> "HadamardCoeffs":
        theta = np.asarray(theta, dtype=np.float64)
        d = int(theta.size).bit_length() - 1
        if indices is None:
            indices = np.arange(theta.size)
        indices = np.asarray(indices, dtype=np.int64)
        return cls(d, indices, theta[indices], normalized)

    def lookup(self, alphas) -> np.ndarray:
        """Values for the requested indices; KeyError if any is absent."""
        alphas = np.asarray(alphas, dtype=np.int64)
        pos = np.searchsorted(self.indices, alphas)
        pos_c = np.minimum(pos, self.indices.size - 1)
        found = (pos < self.indices.size) & (self.indices[pos_c] == alphas)
        if not np.all(found):
            raise KeyError(f"missing coefficients {alphas[~found].tolist()}")
        return self.values[pos_c]

    def coverage(self) -> float:
        """Fraction of stored coefficients that were actually observed."""
        if self.indices.size == 0:
            return 1.0
        return 1.0 - float(np.mean(self.missing))


def marginal_operator(t: Distribution, spec: MarginalSpec) -> MarginalTable:
    """Sum ``t`` over every index outside ``spec.beta``."""
    if spec.d != t.d:
        raise ValueError(f"dimension mismatch: table d={t.d}, marginal d={spec.d}")
    gamma = spec.compact(np.arange(1 << t.d))
    cells = np.bincount(gamma, weights=t.cells, minlength=1 << spec.k)
    return MarginalTable(spec, cells)


def marginalize(table: MarginalTable, sub: MarginalSpec) -> MarginalTable:
    """Marginalize a table onto a sub-mask of its own mask."""
    spec = table.spec
    if sub.d != spec.d or (sub.beta & ~spec.beta):
        raise ValueError(f"{sub.label()} is not contained in {spec.label()}")
    full = spec.expand(np.arange(1 << spec.k))
    cells = np.bincount(sub.compact(full), weights=table.cells, minlength=1 << sub.k)
    return MarginalTable(sub, cells)


def hadamard_transform(v, normalized: bool = True) -> np.ndarray:
    """Fast Walsh-Hadamard transform in natural order.

    O(n log n) butterfly over ``n = len(v)`` (a power of two). The normalized
    transform is orthonormal and self-inverse.
    """
    x = np.array(v, dtype=np.float64)
    n = x.size
    if x.ndim != 1 or n == 0 or n & (n - 1):
        raise ValueError(f"length must be a power of two, got {x.shape}")
    h = 1
    while h < n:
        x = x.reshape(-1, 2, h)
        a = x[:, 0, :]
        b = x[:, 1, :]
        x = np.stack((a + b, a - b), axis=1).reshape(n)
        h *= 2
    if normalized:
        x *= 1.0 / math.sqrt(n)
    return x


def required_coefficients(d: int, k: int) -> np.ndarray:
    """Coefficient indices with ``1 <= popcount <= k``, ascending.

    The constant coefficient 0 is excluded; it never needs to be collected.
    """
    _check_d(d)
    if not 1 <= k <= d:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    if k == d:
        return np.arange(1, 1 << d, dtype=np.int64)
    out = []
    for ell in range(1, k + 1):
        for c in itertools.combinations(range(d), ell):
            out.append(sum(1 << b for b in c))
    return np.array(sorted(out), dtype=np.int64)


def coefficient_count(d: int, k: int) -> int:
    return sum(math.comb(d, ell) for ell in range(1, k + 1))


def marginal_from_coefficients(coeffs: HadamardCoeffs, spec: MarginalSpec) -> MarginalTable:
    """Rebuild the ``spec`` marginal from coefficients ``alpha`` below ``beta``.

    For ``alpha`` a submask of ``beta`` the inner sum over
    ``{eta : eta & beta == gamma}`` collapses to
    ``2**(d-k) * 2**(-d/2) * (-1)**popcount(alpha & gamma)``, so the marginal
    is a size-``2**k`` unnormalized transform of the compacted coefficients.
    ``theta_0`` must be present (callers pin it to ``2**(-d/2)``).
    """
    if coeffs.d != spec.d:
        raise ValueError(f"dimension mismatch: coefficients d={coeffs.d}, marginal d={spec.d}")
    d, k = spec.d, spec.k
    alphas = spec.expand(np.arange(1 << k))
    theta = coeffs.lookup(alphas)
    if not coeffs.normalized:
        theta = theta * 2.0 ** (-d / 2)
    cells = hadamard_transform(theta, normalized=False) * 2.0 ** (d / 2 - k)
    table = MarginalTable(spec, cells)
    if coeffs.missing is not None and coeffs.missing.any():
        pos = np.searchsorted(coeffs.indices, alphas)
        n_missing = int(coeffs.missing[pos].sum())
        if n_missing:
            table.flags["missing_coefficients"] = n_missing
    return table


def total_variation(a: MarginalTable, b: MarginalTable) -> float:
    if a.spec != b.spec:
        raise ValueError(f"spec mismatch: {a.spec.label()} vs {b.spec.label()}")
    return 0.5 * float(np.abs(a.cells - b.cells).sum())


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (display only)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def clip_normalize(v) -> np.ndarray:
    """Clip to [0, 1] and rescale to sum one; uniform if nothing is left."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    s = v.sum()
    if s <= 0:
        return np.full(v.size, 1.0 / v.size)
    return v / s


def normalized_table(table: MarginalTable, method: str = "project") -> MarginalTable:
    """Post-process an estimated table into a distribution."""
    if method == "project":
        cells = project_simplex(table.cells)
    elif method == "clip":
        cells = clip_normalize(table.cells)
    else:
        raise ValueError(f"unknown normalization {method!r}")
    return MarginalTable(table.spec, cells, dict(table.flags, normalized=method))
