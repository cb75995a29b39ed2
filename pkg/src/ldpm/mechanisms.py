"""Client-side randomizers for the six marginal-release mechanisms and InpEM.

Each user holds a single signal index ``j`` in ``[0, 2**d)``. The scalar
entry point :func:`client_randomize` turns it into one :class:`Report`; the
vectorized :func:`randomize_batch` does the same for an array of users and
is what the simulation harness uses.

:func:`channel_matrix` enumerates exact output probabilities for small
parameters, and :func:`verify_ldp` reads the worst-case privacy loss off it.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ldpm.core import (
    MAX_D,
    coefficient_count,
    k_way_specs,
    parity_sign,
    popcount,
    required_coefficients,
)

INPRS_MAX_D = 16
CHANNEL_MAX_OUTPUTS = 1 << 16


class Mechanism(str, Enum):
    INP_RS = "InpRS"
    INP_PS = "InpPS"
    INP_HT = "InpHT"
    MARG_RS = "MargRS"
    MARG_PS = "MargPS"
    MARG_HT = "MargHT"
    INP_EM = "InpEM"

    def __str__(self) -> str:
        return self.value

    @property
    def is_marginal(self) -> bool:
        return self in (Mechanism.MARG_RS, Mechanism.MARG_PS, Mechanism.MARG_HT)


SIX_MECHANISMS = (
    Mechanism.INP_RS,
    Mechanism.INP_PS,
    Mechanism.INP_HT,
    Mechanism.MARG_RS,
    Mechanism.MARG_PS,
    Mechanism.MARG_HT,
)


def parse_mechanism(name) -> Mechanism:
    if isinstance(name, Mechanism):
        return name
    for m in Mechanism:
        if m.value.lower() == str(name).lower():
            return m
    raise ValueError(f"unknown mechanism {name!r}; choose from {[m.value for m in Mechanism]}")


def rr_probability(epsilon: float) -> float:
    """Truth probability ``e^eps / (1 + e^eps)`` of eps-randomized response."""
    return 1.0 / (1.0 + math.exp(-epsilon))


def ps_probability(epsilon: float, m: int) -> float:
    """Truth probability of preferential sampling over ``m`` cells."""
    return 1.0 / (1.0 + (m - 1) * math.exp(-epsilon))


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy budget plus the per-mechanism probabilities derived from it."""

    mechanism: Mechanism
    epsilon: float
    d: int
    k: int

    def __post_init__(self):
        object.__setattr__(self, "mechanism", parse_mechanism(self.mechanism))
        if not self.epsilon > 0 or not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not 1 <= self.d <= MAX_D:
            raise ValueError(f"d must be in [1, {MAX_D}], got {self.d}")
        if not 1 <= self.k <= self.d:
            raise ValueError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.mechanism is Mechanism.INP_RS and self.d > INPRS_MAX_D:
            raise ValueError(
                f"InpRS materializes 2**d bits per user; d={self.d} exceeds the limit of {INPRS_MAX_D}"
            )

    @property
    def per_bit_epsilon(self) -> float:
        if self.mechanism in (Mechanism.INP_RS, Mechanism.MARG_RS):
            return self.epsilon / 2
        if self.mechanism is Mechanism.INP_EM:
            return self.epsilon / self.d
        return self.epsilon

    @property
    def p_r(self) -> float:
        """Randomized-response truth probability at the per-bit budget."""
        return rr_probability(self.per_bit_epsilon)

    @property
    def p_h(self) -> float:
        """Randomized-response probability applied to a Hadamard sign."""
        return rr_probability(self.epsilon)

    @property
    def domain_size(self) -> int:
        """Cells in the table a user materializes (full input or one marginal)."""
        return 1 << (self.k if self.mechanism.is_marginal else self.d)

    @property
    def p_s(self) -> float:
        return ps_probability(self.epsilon, self.domain_size)

    @property
    def D(self) -> int:
        return self.domain_size - 1

    @property
    def T(self) -> int:
        """Number of coefficients a Hadamard mechanism samples from."""
        if self.mechanism is Mechanism.MARG_HT:
            return (1 << self.k) - 1
        return coefficient_count(self.d, self.k)

    @property
    def n_marginals(self) -> int:
        return math.comb(self.d, self.k)

    def with_mechanism(self, mechanism) -> "PrivacyParams":
        return PrivacyParams(mechanism, self.epsilon, self.d, self.k)


def rr_bit(b: int, p_r: float, rng: np.random.Generator) -> int:
    """Report ``b`` with probability ``p_r``, otherwise ``1 - b``."""
    if not 0.5 < p_r <= 1.0:
        raise ValueError(f"p_r must be in (1/2, 1], got {p_r}")
    return b if rng.random() < p_r else 1 - b


def rr_sign(s: int, p: float, rng: np.random.Generator) -> int:
    """Randomized response on a +1/-1 value."""
    return 1 - 2 * rr_bit((1 - s) // 2, p, rng)


def ps_index(j: int, m: int, p_s: float, rng: np.random.Generator) -> int:
    """Report ``j`` with probability ``p_s``, else a uniform index other than ``j``."""
    if m < 2:
        raise ValueError(f"preferential sampling needs m >= 2, got {m}")
    if not 0 <= j < m:
        raise ValueError(f"index {j} out of range [0, {m})")
    if rng.random() < p_s:
        return j
    r = int(rng.integers(0, m - 1))
    return r if r < j else r + 1


@dataclass(frozen=True)
class Report:
    """One user's privatized message. Unused payload fields stay ``None``.

    ==========  =========================================
    InpRS       ``bits`` (2**d)
    InpPS       ``index`` in [0, 2**d)
    InpHT       ``coef`` (popcount 1..k), ``sign``
    MargRS      ``marginal``, ``bits`` (2**k)
    MargPS      ``marginal``, ``index`` in [0, 2**k)
    MargHT      ``marginal``, ``coef`` in [1, 2**k), ``sign``
    InpEM       ``bits`` (d attribute bits, attribute 0 first)
    ==========  =========================================
    """

    mech: Mechanism
    user: int = 0
    marginal: int | None = None
    index: int | None = None
    coef: int | None = None
    sign: int | None = None
    bits: tuple[int, ...] | None = None

    def key(self) -> tuple:
        """Output identity, excluding the user id."""
        return (self.marginal, self.index, self.coef, self.sign, self.bits)

    def validate(self, params: PrivacyParams) -> None:
        mech = self.mech
        if mech is not params.mechanism:
            raise ValueError(f"report tag {mech} does not match {params.mechanism}")
        fields = {
            "marginal": self.marginal is not None,
            "index": self.index is not None,
            "coef": self.coef is not None,
            "sign": self.sign is not None,
            "bits": self.bits is not None,
        }
        expected = {
            Mechanism.INP_RS: {"bits"},
            Mechanism.INP_PS: {"index"},
            Mechanism.INP_HT: {"coef", "sign"},
            Mechanism.MARG_RS: {"marginal", "bits"},
            Mechanism.MARG_PS: {"marginal", "index"},
            Mechanism.MARG_HT: {"marginal", "coef", "sign"},
            Mechanism.INP_EM: {"bits"},
        }[mech]
        present = {name for name, ok in fields.items() if ok}
        if present != expected:
            raise ValueError(f"{mech} report carries {sorted(present)}, expected {sorted(expected)}")
        if self.marginal is not None and not 0 <= self.marginal < params.n_marginals:
            raise ValueError(f"marginal id {self.marginal} out of range")
        if self.index is not None and not 0 <= self.index < params.domain_size:
            raise ValueError(f"index {self.index} out of range")
        if self.sign is not None and self.sign not in (-1, 1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if self.coef is not None:
            if mech is Mechanism.MARG_HT:
                ok = 1 <= self.coef < (1 << params.k)
            else:
                ok = 0 < self.coef < (1 << params.d) and popcount(self.coef) <= params.k
            if not ok:
                raise ValueError(f"coefficient {self.coef} not collectable")
        if self.bits is not None:
            width = params.d if mech is Mechanism.INP_EM else params.domain_size
            if len(self.bits) != width or any(b not in (0, 1) for b in self.bits):
                raise ValueError(f"expected {width} bits")


def _check_signal(j: int, d: int) -> None:
    if not 0 <= j < (1 << d):
        raise ValueError(f"signal index {j} out of range for d={d}")


def _prr(hot: int, m: int, p: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Independent randomized response on every cell of a one-hot vector."""
    flips = rng.random(m) >= p
    bits = flips.astype(np.uint8)
    bits[hot] ^= 1
    return tuple(int(b) for b in bits)


def client_randomize(j: int, params: PrivacyParams, rng: np.random.Generator, user: int = 0) -> Report:
    """Privatize one user's signal index under ``params.mechanism``."""
    _check_signal(j, params.d)
    mech, d, k = params.mechanism, params.d, params.k
    if mech is Mechanism.INP_RS:
        return Report(mech, user, bits=_prr(j, 1 << d, params.p_r, rng))
    if mech is Mechanism.INP_PS:
        return Report(mech, user, index=ps_index(j, 1 << d, params.p_s, rng))
    if mech is Mechanism.INP_HT:
        coefs = required_coefficients(d, k)
        ell = int(coefs[rng.integers(0, coefs.size)])
        return Report(mech, user, coef=ell, sign=rr_sign(parity_sign(j & ell), params.p_h, rng))
    if mech is Mechanism.INP_EM:
        bits = tuple(rr_bit((j >> (d - 1 - a)) & 1, params.p_r, rng) for a in range(d))
        return Report(mech, user, bits=bits)

    specs = k_way_specs(d, k)
    mid = int(rng.integers(0, len(specs)))
    cell = specs[mid].compact(j)
    if mech is Mechanism.MARG_RS:
        return Report(mech, user, marginal=mid, bits=_prr(cell, 1 << k, params.p_r, rng))
    if mech is Mechanism.MARG_PS:
        return Report(mech, user, marginal=mid, index=ps_index(cell, 1 << k, params.p_s, rng))
    if mech is Mechanism.MARG_HT:
        c = int(rng.integers(1, 1 << k))
        return Report(mech, user, marginal=mid, coef=c, sign=rr_sign(parity_sign(cell & c), params.p_h, rng))
    raise AssertionError(mech)


@dataclass
class ReportBatch:
    """Column-oriented reports for many users (same layout as :class:`Report`)."""

    mech: Mechanism
    user: np.ndarray
    marginal: np.ndarray | None = None
    index: np.ndarray | None = None
    coef: np.ndarray | None = None
    sign: np.ndarray | None = None
    bits: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.user.size)

    def __iter__(self):
        cols = {
            name: getattr(self, name)
            for name in ("marginal", "index", "coef", "sign", "bits")
            if getattr(self, name) is not None
        }
        for i in range(len(self)):
            kw = {}
            for name, col in cols.items():
                kw[name] = tuple(int(b) for b in col[i]) if name == "bits" else int(col[i])
            yield Report(self.mech, int(self.user[i]), **kw)

    def __getitem__(self, sl: slice) -> "ReportBatch":
        def cut(a):
            return None if a is None else a[sl]

        return ReportBatch(
            self.mech, self.user[sl], cut(self.marginal), cut(self.index), cut(self.coef), cut(self.sign), cut(self.bits)
        )

    @classmethod
    def from_reports(cls, reports) -> "ReportBatch":
        reports = list(reports)
        if not reports:
            raise ValueError("no reports")
        mech = reports[0].mech
        if any(r.mech is not mech for r in reports):
            raise ValueError("mixed mechanism tags")
        out = {"user": np.array([r.user for r in reports], dtype=np.int64)}
        for name in ("marginal", "index", "coef", "sign"):
            vals = [getattr(r, name) for r in reports]
            if vals[0] is not None:
                out[name] = np.array(vals, dtype=np.int8 if name == "sign" else np.int64)
        if reports[0].bits is not None:
            out["bits"] = np.array([r.bits for r in reports], dtype=np.uint8)
        return cls(mech, **out)


def _ps_batch(cells: np.ndarray, m: int, p: float, rng: np.random.Generator) -> np.ndarray:
    n = cells.size
    keep = rng.random(n) < p
    decoy = rng.integers(0, m - 1, size=n)
    decoy += decoy >= cells
    return np.where(keep, cells, decoy)


def _prr_batch(cells: np.ndarray, m: int, p: float, rng: np.random.Generator) -> np.ndarray:
    bits = (rng.random((cells.size, m)) >= p).astype(np.uint8)
    bits[np.arange(cells.size), cells] ^= 1
    return bits


def _rr_sign_batch(signs: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    flip = rng.random(signs.size) >= p
    return np.where(flip, -signs, signs).astype(np.int8)


def marginal_positions(d: int, k: int) -> np.ndarray:
    """``(C(d,k), k)`` bit positions of every k-way mask, most significant first."""
    return np.array(
        [[d - 1 - a for a in combo] for combo in itertools.combinations(range(d), k)], dtype=np.int64
    )


def compact_cells(signals: np.ndarray, marginal_ids: np.ndarray, d: int, k: int) -> np.ndarray:
    """Each user's cell within their own sampled k-way marginal."""
    pos = marginal_positions(d, k)[marginal_ids]
    cell = np.zeros(signals.shape, dtype=np.int64)
    for i in range(k):
        cell |= ((signals >> pos[:, i]) & 1) << (k - 1 - i)
    return cell


def randomize_batch(
    signals, params: PrivacyParams, rng: np.random.Generator, users: np.ndarray | None = None
) -> ReportBatch:
    """Vectorized :func:`client_randomize` for an array of signal indices."""
    signals = np.asarray(signals, dtype=np.int64)
    if signals.size and (signals.min() < 0 or signals.max() >= (1 << params.d)):
        raise ValueError(f"signal index out of range for d={params.d}")
    n = signals.size
    if users is None:
        users = np.arange(n, dtype=np.int64)
    mech, d, k = params.mechanism, params.d, params.k
    if mech is Mechanism.INP_RS:
        return ReportBatch(mech, users, bits=_prr_batch(signals, 1 << d, params.p_r, rng))
    if mech is Mechanism.INP_PS:
        return ReportBatch(mech, users, index=_ps_batch(signals, 1 << d, params.p_s, rng))
    if mech is Mechanism.INP_HT:
        coefs = required_coefficients(d, k)
        ell = coefs[rng.integers(0, coefs.size, size=n)]
        sign = _rr_sign_batch(parity_sign(signals & ell), params.p_h, rng)
        return ReportBatch(mech, users, coef=ell, sign=sign)
    if mech is Mechanism.INP_EM:
        shifts = np.arange(d - 1, -1, -1, dtype=np.int64)
        true_bits = ((signals[:, None] >> shifts) & 1).astype(np.uint8)
        flips = (rng.random((n, d)) >= params.p_r).astype(np.uint8)
        return ReportBatch(mech, users, bits=true_bits ^ flips)

    mid = rng.integers(0, params.n_marginals, size=n)
    cell = compact_cells(signals, mid, d, k)
    if mech is Mechanism.MARG_RS:
        return ReportBatch(mech, users, marginal=mid, bits=_prr_batch(cell, 1 << k, params.p_r, rng))
    if mech is Mechanism.MARG_PS:
        return ReportBatch(mech, users, marginal=mid, index=_ps_batch(cell, 1 << k, params.p_s, rng))
    if mech is Mechanism.MARG_HT:
        c = rng.integers(1, 1 << k, size=n)
        sign = _rr_sign_batch(parity_sign(cell & c), params.p_h, rng)
        return ReportBatch(mech, users, marginal=mid, coef=c, sign=sign)
    raise AssertionError(mech)


def _bit_tuples(width: int):
    return list(itertools.product((0, 1), repeat=width))


def _prr_probs(hot: int, outputs: np.ndarray, p: float) -> np.ndarray:
    """P[output bit-vector | one-hot at ``hot``] for rows of ``outputs``."""
    target = np.zeros(outputs.shape[1], dtype=np.uint8)
    target[hot] = 1
    agree = (outputs == target).sum(axis=1)
    return p**agree * (1 - p) ** (outputs.shape[1] - agree)


def channel_matrix(params: PrivacyParams) -> tuple[np.ndarray, list[tuple]]:
    """Exact output distribution for every signal index.

    Returns ``(matrix, outputs)``: row ``j`` is the distribution of
    :meth:`Report.key` values listed in ``outputs`` for input ``j``.
    """
    mech, d, k = params.mechanism, params.d, params.k
    n_in = 1 << d
    rows = np.arange(n_in)
    if mech is Mechanism.INP_RS:
        if (1 << n_in) > CHANNEL_MAX_OUTPUTS:
            raise ValueError(f"InpRS output space 2**{n_in} is too large to enumerate")
        outs = np.array(_bit_tuples(n_in), dtype=np.uint8)
        matrix = np.array([_prr_probs(j, outs, params.p_r) for j in rows])
        keys = [(None, None, None, None, tuple(int(b) for b in o)) for o in outs]
        return matrix, keys
    if mech is Mechanism.INP_PS:
        m, p = n_in, params.p_s
        matrix = np.full((m, m), (1 - p) / (m - 1))
        np.fill_diagonal(matrix, p)
        return matrix, [(None, i, None, None, None) for i in range(m)]
    if mech is Mechanism.INP_HT:
        coefs = required_coefficients(d, k)
        T, p = coefs.size, params.p_h
        keys, cols = [], []
        for ell in coefs:
            true = parity_sign(rows & int(ell)).astype(np.int64)
            for s in (1, -1):
                keys.append((None, None, int(ell), s, None))
                cols.append(np.where(true == s, p, 1 - p) / T)
        return np.column_stack(cols), keys
    if mech is Mechanism.INP_EM:
        if n_in > CHANNEL_MAX_OUTPUTS:
            raise ValueError(f"InpEM output space 2**{d} is too large to enumerate")
        p = params.p_r
        h = popcount(rows[:, None] ^ rows[None, :])
        matrix = p ** (d - h) * (1 - p) ** h
        keys = [(None, None, None, None, tuple((y >> (d - 1 - a)) & 1 for a in range(d))) for y in rows]
        return matrix, keys

    specs = k_way_specs(d, k)
    C, m = len(specs), 1 << k
    keys, cols = [], []
    for mid, spec in enumerate(specs):
        cell = spec.compact(rows)
        if mech is Mechanism.MARG_RS:
            outs = np.array(_bit_tuples(m), dtype=np.uint8)
            probs = np.array([_prr_probs(c, outs, params.p_r) for c in range(m)])
            for o_i, o in enumerate(outs):
                keys.append((mid, None, None, None, tuple(int(b) for b in o)))
                cols.append(probs[cell, o_i] / C)
        elif mech is Mechanism.MARG_PS:
            p = params.p_s
            for i in range(m):
                keys.append((mid, i, None, None, None))
                cols.append(np.where(cell == i, p, (1 - p) / (m - 1)) / C)
        elif mech is Mechanism.MARG_HT:
            p = params.p_h
            for c in range(1, m):
                true = parity_sign(cell & c).astype(np.int64)
                for s in (1, -1):
                    keys.append((mid, None, c, s, None))
                    cols.append(np.where(true == s, p, 1 - p) / (C * (m - 1)))
    if len(keys) > CHANNEL_MAX_OUTPUTS:
        raise ValueError(f"{mech} output space is too large to enumerate")
    return np.column_stack(cols), keys


def rr_channel(p: float) -> np.ndarray:
    return np.array([[p, 1 - p], [1 - p, p]])


def ps_channel(m: int, p: float) -> np.ndarray:
    matrix = np.full((m, m), (1 - p) / (m - 1))
    np.fill_diagonal(matrix, p)
    return matrix


def max_log_ratio(matrix: np.ndarray) -> float:
    """Largest ``ln(P[R|a] / P[R|b])`` over row pairs and output columns."""
    matrix = np.asarray(matrix, dtype=np.float64)
    worst = 0.0
    for a in range(matrix.shape[0]):
        num = matrix[a][None, :]
        den = np.delete(matrix, a, axis=0)
        with np.errstate(divide="ignore"):
            ratio = np.where(num > 0, np.log(num) - np.log(den), -np.inf)
        worst = max(worst, float(ratio.max()))
    return worst


def _prr_factored_log_ratio(m: int, p: float) -> float:
    """Exact worst-case loss of PRR over ``m`` cells without enumerating 2**m outputs.

    The output distribution factors over cells, so the worst output maximizes
    every cell's ratio independently and the log-ratio is a sum of per-cell
    maxima. For two distinct one-hot inputs exactly two cells differ (one
    goes 1 -> 0, the other 0 -> 1); every other cell contributes 0.
    """
    if m < 2:
        return 0.0
    channel = rr_channel(p)

    def cell_loss(x: int, y: int) -> float:
        return float(np.max(np.log(channel[x]) - np.log(channel[y])))

    return cell_loss(1, 0) + cell_loss(0, 1)


def verify_ldp(params: PrivacyParams) -> float:
    """Worst-case privacy loss over adjacent inputs; should not exceed epsilon."""
    mech = params.mechanism
    if mech is Mechanism.INP_RS and (1 << (1 << params.d)) > CHANNEL_MAX_OUTPUTS:
        return _prr_factored_log_ratio(1 << params.d, params.p_r)
    matrix, _ = channel_matrix(params)
    return max_log_ratio(matrix)
