"""InpEM: per-attribute randomized response decoded by expectation-maximization.

Each user flips every one of their ``d`` attribute bits independently with
probability ``1 - p``. For a target marginal only the ``k`` selected bits of
each report matter, so the decoder works on the ``2**k`` histogram of those
bits with the product channel ``M[y|x] = p**(k - h) * (1 - p)**h`` where
``h`` is the Hamming distance between ``y`` and ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ldpm.core import MarginalSpec, MarginalTable, k_way_specs, popcount
from ldpm.mechanisms import Mechanism


@dataclass(frozen=True)
class EmConfig:
    omega: float = 1e-5
    max_iterations: int = 100_000
    metric: str = "max_abs"

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.metric not in ("max_abs", "l1"):
            raise ValueError(f"unknown convergence metric {self.metric!r}")


@dataclass
class EmResult:
    table: MarginalTable
    iterations: int
    converged: bool
    degenerate: bool
    log_likelihood: list[float] = field(default_factory=list)


def bit_channel(k: int, p: float) -> np.ndarray:
    """``M[y, x]``: probability of observing ``y`` when the true bits are ``x``."""
    cells = np.arange(1 << k)
    h = popcount(cells[:, None] ^ cells[None, :])
    return p ** (k - h) * (1.0 - p) ** h


def _change(new: np.ndarray, old: np.ndarray, metric: str) -> np.ndarray:
    diff = np.abs(new - old)
    return diff.max(axis=-1) if metric == "max_abs" else diff.sum(axis=-1)


def em_decode_many(counts, k: int, p: float, config: EmConfig | None = None, track_likelihood: bool = False):
    """Run EM independently on every row of ``counts`` (shape ``(R, 2**k)``).

    Rows are iterated together; a row stops updating once its change drops
    below ``omega``. Returns ``(estimates, iterations, converged, traces)``.
    """
    config = config or EmConfig()
    if not 0.5 < p <= 1.0:
        raise ValueError(f"per-bit truth probability must be in (1/2, 1], got {p}")
    counts = np.atleast_2d(np.asarray(counts, dtype=np.float64))
    R, m = counts.shape
    if m != 1 << k:
        raise ValueError(f"expected {1 << k} cells per row, got {m}")
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("every row needs at least one report")
    freq = counts / totals
    M = bit_channel(k, p)
    theta = np.full((R, m), 1.0 / m)
    iterations = np.zeros(R, dtype=np.int64)
    active = np.ones(R, dtype=bool)
    traces: list[list[float]] = [[] for _ in range(R)]

    def loglik(rows, th):
        pred = th @ M.T
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(counts[rows] > 0, counts[rows] * np.log(pred), 0.0)
        return terms.sum(axis=1)

    if track_likelihood:
        for r, v in zip(range(R), loglik(np.arange(R), theta)):
            traces[r].append(float(v))

    for _ in range(config.max_iterations):
        rows = np.nonzero(active)[0]
        if rows.size == 0:
            break
        th = theta[rows]
        pred = th @ M.T
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(freq[rows] > 0, freq[rows] / pred, 0.0)
        new = th * (w @ M)
        change = _change(new, th, config.metric)
        theta[rows] = new
        iterations[rows] += 1
        if track_likelihood:
            for r, v in zip(rows, loglik(rows, new)):
                traces[r].append(float(v))
        active[rows[change < config.omega]] = False
    return theta, iterations, ~active, traces


def em_decode(counts, spec: MarginalSpec, p: float, config: EmConfig | None = None, track_likelihood: bool = False) -> EmResult:
    """Decode one marginal from the histogram of its reported (noisy) bits.

    Starts from the uniform table; the result is flagged ``degenerate`` when
    EM stops after a single update (the uniform prior already looked
    converged).
    """
    theta, iters, conv, traces = em_decode_many(counts, spec.k, p, config, track_likelihood)
    it = int(iters[0])
    flags = {"iterations": it, "converged": bool(conv[0]), "degenerate": it <= 1}
    return EmResult(MarginalTable(spec, theta[0], flags), it, bool(conv[0]), it <= 1, traces[0])


def _projected_counts(acc, specs) -> np.ndarray:
    counts = acc.tallies["counts"]
    full = np.arange(counts.size)
    return np.array([np.bincount(s.compact(full), weights=counts, minlength=1 << s.k) for s in specs])


def decode_marginal(acc, spec: MarginalSpec, config: EmConfig | None = None) -> EmResult:
    if acc.mechanism is not Mechanism.INP_EM:
        raise ValueError(f"EM decoding needs InpEM reports, got {acc.mechanism}")
    return em_decode(_projected_counts(acc, [spec])[0], spec, acc.params.p_r, config)


def decode_all(acc, k: int | None = None, config: EmConfig | None = None) -> list[EmResult]:
    """Decode every k-way marginal at once (rows share the iteration loop)."""
    if acc.mechanism is not Mechanism.INP_EM:
        raise ValueError(f"EM decoding needs InpEM reports, got {acc.mechanism}")
    k = acc.params.k if k is None else k
    specs = k_way_specs(acc.params.d, k)
    theta, iters, conv, _ = em_decode_many(_projected_counts(acc, specs), k, acc.params.p_r, config)
    out = []
    for s, th, it, c in zip(specs, theta, iters, conv):
        it = int(it)
        flags = {"iterations": it, "converged": bool(c), "degenerate": it <= 1}
        out.append(EmResult(MarginalTable(s, th, flags), it, bool(c), it <= 1))
    return out


def failure_count(results) -> tuple[int, int]:
    """(degenerate, total) tally across decoded marginals."""
    results = list(results)
    return sum(r.degenerate for r in results), len(results)
