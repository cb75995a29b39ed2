"""Aggregator side: mergeable tallies and unbiased reconstruction.

All tallies are integer counts, so sharding reports and merging the
accumulators reproduces a single-pass accumulator exactly, and so does every
estimate computed from it.
"""
from __future__ import annotations

import csv
import json
import warnings
from typing import Iterable

import numpy as np

from ldpm.core import (
    Distribution,
    HadamardCoeffs,
    MarginalSpec,
    MarginalTable,
    hadamard_transform,
    k_way_specs,
    marginal_from_coefficients,
    marginal_operator,
    marginalize,
    normalized_table,
    required_coefficients,
)
from ldpm.mechanisms import Mechanism, PrivacyParams, Report, ReportBatch


class Accumulator:
    """Per-mechanism report tallies.

    ``tallies`` layout (all int64):

    * InpRS: ``cell_sums[2**d]``
    * InpPS: ``counts[2**d]``
    * InpHT: ``coef_sums[T]``, ``coef_counts[T]`` in ``required_coefficients`` order
    * MargRS: ``cell_sums[C, 2**k]``, ``marginal_counts[C]``
    * MargPS: ``counts[C, 2**k]``, ``marginal_counts[C]``
    * MargHT: ``coef_sums[C, 2**k]``, ``coef_counts[C, 2**k]``, ``marginal_counts[C]``
    * InpEM: ``counts[2**d]`` of reported (noisy) attribute vectors
    """

    def __init__(self, params: PrivacyParams):
        self.params = params
        self.n = 0
        d, k = params.d, params.k
        mech = params.mechanism
        full, cell = 1 << d, 1 << k
        C = params.n_marginals
        if mech is Mechanism.INP_RS:
            shapes = {"cell_sums": (full,)}
        elif mech in (Mechanism.INP_PS, Mechanism.INP_EM):
            shapes = {"counts": (full,)}
        elif mech is Mechanism.INP_HT:
            self._coefs = required_coefficients(d, k)
            shapes = {"coef_sums": (self._coefs.size,), "coef_counts": (self._coefs.size,)}
        elif mech is Mechanism.MARG_RS:
            shapes = {"cell_sums": (C, cell), "marginal_counts": (C,)}
        elif mech is Mechanism.MARG_PS:
            shapes = {"counts": (C, cell), "marginal_counts": (C,)}
        elif mech is Mechanism.MARG_HT:
            shapes = {"coef_sums": (C, cell), "coef_counts": (C, cell), "marginal_counts": (C,)}
        else:
            raise AssertionError(mech)
        self.tallies = {name: np.zeros(shape, dtype=np.int64) for name, shape in shapes.items()}

    @property
    def mechanism(self) -> Mechanism:
        return self.params.mechanism

    def _coef_rank(self, coef):
        rank = np.searchsorted(self._coefs, coef)
        if np.any(rank >= self._coefs.size) or np.any(self._coefs[np.minimum(rank, self._coefs.size - 1)] != coef):
            raise ValueError("coefficient outside the collected set")
        return rank

    def accumulate(self, report: Report) -> "Accumulator":
        report.validate(self.params)
        t = self.tallies
        mech = self.mechanism
        if mech is Mechanism.INP_RS:
            t["cell_sums"] += np.asarray(report.bits, dtype=np.int64)
        elif mech is Mechanism.INP_PS:
            t["counts"][report.index] += 1
        elif mech is Mechanism.INP_HT:
            r = self._coef_rank(report.coef)
            t["coef_sums"][r] += report.sign
            t["coef_counts"][r] += 1
        elif mech is Mechanism.INP_EM:
            d = self.params.d
            t["counts"][sum(b << (d - 1 - a) for a, b in enumerate(report.bits))] += 1
        else:
            mid = report.marginal
            t["marginal_counts"][mid] += 1
            if mech is Mechanism.MARG_RS:
                t["cell_sums"][mid] += np.asarray(report.bits, dtype=np.int64)
            elif mech is Mechanism.MARG_PS:
                t["counts"][mid, report.index] += 1
            else:
                t["coef_sums"][mid, report.coef] += report.sign
                t["coef_counts"][mid, report.coef] += 1
        self.n += 1
        return self

    def add_batch(self, batch: ReportBatch) -> "Accumulator":
        if batch.mech is not self.mechanism:
            raise ValueError(f"batch tag {batch.mech} does not match {self.mechanism}")
        t = self.tallies
        mech = self.mechanism
        n = len(batch)
        if mech is Mechanism.INP_RS:
            t["cell_sums"] += batch.bits.sum(axis=0, dtype=np.int64)
        elif mech is Mechanism.INP_PS:
            t["counts"] += np.bincount(batch.index, minlength=t["counts"].size)
        elif mech is Mechanism.INP_HT:
            r = self._coef_rank(batch.coef)
            size = self._coefs.size
            t["coef_sums"] += np.bincount(r, weights=batch.sign, minlength=size).astype(np.int64)
            t["coef_counts"] += np.bincount(r, minlength=size)
        elif mech is Mechanism.INP_EM:
            d = self.params.d
            weights = 1 << np.arange(d - 1, -1, -1, dtype=np.int64)
            packed = batch.bits.astype(np.int64) @ weights
            t["counts"] += np.bincount(packed, minlength=1 << d)
        else:
            C, cell = t["marginal_counts"].size, 1 << self.params.k
            mid = batch.marginal
            t["marginal_counts"] += np.bincount(mid, minlength=C)
            if mech is Mechanism.MARG_RS:
                np.add.at(t["cell_sums"], mid, batch.bits.astype(np.int64))
            elif mech is Mechanism.MARG_PS:
                flat = mid * cell + batch.index
                t["counts"] += np.bincount(flat, minlength=C * cell).reshape(C, cell)
            else:
                flat = mid * cell + batch.coef
                t["coef_sums"] += np.bincount(flat, weights=batch.sign, minlength=C * cell).astype(np.int64).reshape(C, cell)
                t["coef_counts"] += np.bincount(flat, minlength=C * cell).reshape(C, cell)
        self.n += n
        return self

    def merge(self, other: "Accumulator") -> "Accumulator":
        if other.params != self.params:
            raise ValueError(f"cannot merge {other.params} into {self.params}")
        out = Accumulator(self.params)
        out.n = self.n + other.n
        for name in self.tallies:
            out.tallies[name] = self.tallies[name] + other.tallies[name]
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Accumulator):
            return NotImplemented
        return (
            self.params == other.params
            and self.n == other.n
            and all(np.array_equal(self.tallies[k], other.tallies[k]) for k in self.tallies)
        )

    def __repr__(self) -> str:
        return f"Accumulator({self.params.mechanism}, n={self.n})"


def accumulate_all(reports: Iterable[Report], params: PrivacyParams) -> Accumulator:
    acc = Accumulator(params)
    for r in reports:
        acc.accumulate(r)
    return acc


def estimate_rr_fraction(F, p_r: float):
    """Unbiased fraction from the observed fraction of 1s under randomized response."""
    return (F + p_r - 1.0) / (2.0 * p_r - 1.0)


def estimate_ps_fraction(F, p_s: float, D: int):
    """Unbiased fraction from the observed report frequency under preferential sampling."""
    return (D * F + p_s - 1.0) / (D * p_s + p_s - 1.0)


def estimate_ht_coefficient(S, N, p_h: float, d: int):
    """Normalized Hadamard coefficient from a sum ``S`` of ``N`` perturbed signs.

    Unsampled coefficients (``N == 0``) come back as 0; callers record them
    as missing.
    """
    S = np.asarray(S, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(N > 0, S / N, 0.0)
    out = 2.0 ** (-d / 2) * mean / (2.0 * p_h - 1.0)
    return float(out) if out.ndim == 0 else out


def reconstruct_full(acc: Accumulator):
    """Estimated full table (InpRS, InpPS) or Hadamard coefficients (InpHT)."""
    p = acc.params
    mech = p.mechanism
    if acc.n == 0:
        raise ValueError("no reports accumulated")
    if mech is Mechanism.INP_RS:
        return Distribution(p.d, estimate_rr_fraction(acc.tallies["cell_sums"] / acc.n, p.p_r))
    if mech is Mechanism.INP_PS:
        return Distribution(p.d, estimate_ps_fraction(acc.tallies["counts"] / acc.n, p.p_s, p.D))
    if mech is Mechanism.INP_HT:
        counts = acc.tallies["coef_counts"]
        values = estimate_ht_coefficient(acc.tallies["coef_sums"], counts, p.p_h, p.d)
        indices = np.concatenate(([0], acc._coefs))
        values = np.concatenate(([2.0 ** (-p.d / 2)], values))
        missing = np.concatenate(([False], counts == 0))
        return HadamardCoeffs(p.d, indices, values, normalized=True, missing=missing)
    raise ValueError(f"{mech} does not reconstruct a full table")


def _marginal_id(params: PrivacyParams, spec: MarginalSpec) -> int:
    for i, s in enumerate(k_way_specs(params.d, params.k)):
        if s.beta == spec.beta:
            return i
    raise AssertionError(spec)


def _k_way_estimate(acc: Accumulator, spec: MarginalSpec) -> MarginalTable:
    p = acc.params
    mech = p.mechanism
    mid = _marginal_id(p, spec)
    n_beta = int(acc.tallies["marginal_counts"][mid])
    cell = 1 << p.k
    if n_beta == 0:
        return MarginalTable(spec, np.full(cell, 1.0 / cell), {"empty_marginal": True})
    flags = {"n_beta": n_beta}
    if mech is Mechanism.MARG_RS:
        cells = estimate_rr_fraction(acc.tallies["cell_sums"][mid] / n_beta, p.p_r)
    elif mech is Mechanism.MARG_PS:
        cells = estimate_ps_fraction(acc.tallies["counts"][mid] / n_beta, p.p_s, p.D)
    else:
        counts = acc.tallies["coef_counts"][mid]
        theta = estimate_ht_coefficient(acc.tallies["coef_sums"][mid], counts, p.p_h, p.k)
        theta[0] = 2.0 ** (-p.k / 2)
        n_missing = int(np.sum(counts[1:] == 0))
        if n_missing:
            flags["missing_coefficients"] = n_missing
        cells = hadamard_transform(theta, normalized=True)
    return MarginalTable(spec, cells, flags)


def reconstruct_marginal(acc: Accumulator, spec: MarginalSpec, normalize: str | None = None, em_config=None) -> MarginalTable:
    """Estimate the ``spec`` marginal from accumulated reports.

    Marginals of order below ``k`` collected by a Marg* mechanism are the
    uniform average of the marginalized estimates of every k-way marginal
    that contains them. Raw estimates are unbiased and unclipped unless
    ``normalize`` is ``"project"`` or ``"clip"``.
    """
    p = acc.params
    mech = p.mechanism
    if spec.d != p.d:
        raise ValueError(f"dimension mismatch: marginal d={spec.d}, reports d={p.d}")
    if spec.k > p.k:
        raise ValueError(f"reports were collected for {p.k}-way release only; cannot answer a {spec.k}-way marginal")
    if acc.n == 0:
        raise ValueError("no reports accumulated")

    if mech in (Mechanism.INP_RS, Mechanism.INP_PS):
        table = marginal_operator(reconstruct_full(acc), spec)
    elif mech is Mechanism.INP_HT:
        coeffs = reconstruct_full(acc)
        table = marginal_from_coefficients(coeffs, spec)
        table.flags["coverage"] = coeffs.coverage()
    elif mech is Mechanism.INP_EM:
        from ldpm.em import decode_marginal

        table = decode_marginal(acc, spec, em_config).table
    elif spec.k == p.k:
        table = _k_way_estimate(acc, spec)
    else:
        supersets = [s for s in k_way_specs(p.d, p.k) if (s.beta & spec.beta) == spec.beta]
        parts = [_k_way_estimate(acc, s) for s in supersets]
        cells = np.mean([marginalize(t, spec).cells for t in parts], axis=0)
        table = MarginalTable(spec, cells, {"averaged_over": len(parts)})
        if any(t.flags.get("empty_marginal") for t in parts):
            table.flags["empty_marginal"] = True
    if table.flags.get("empty_marginal"):
        warnings.warn(f"no reports for marginal {spec.label()}; returning uniform", RuntimeWarning, stacklevel=2)
    if normalize:
        table = normalized_table(table, normalize)
    return table


def reconstruct_all(acc: Accumulator, k: int | None = None, **kwargs) -> list[MarginalTable]:
    """Every ``k``-way marginal (``k`` defaults to the collected order), in id order."""
    k = acc.params.k if k is None else k
    return [reconstruct_marginal(acc, s, **kwargs) for s in k_way_specs(acc.params.d, k)]


def _json_safe(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def table_to_dict(table: MarginalTable, names=None) -> dict:
    attrs = table.spec.attributes
    return {
        "d": table.spec.d,
        "beta": table.spec.label(),
        "attributes": [names[a] for a in attrs] if names else list(attrs),
        "cells": [float(x) for x in table.cells],
        "flags": {k: _json_safe(v) for k, v in table.flags.items()},
    }


def write_tables_json(tables, fh, names=None) -> None:
    json.dump([table_to_dict(t, names) for t in tables], fh, indent=2)
    fh.write("\n")


def write_tables_csv(tables, fh, names=None) -> None:
    """One row per cell: mask, attribute names, the cell's bits, value."""
    tables = list(tables)
    width = max(t.spec.k for t in tables)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["marginal", "attributes", *[f"bit{i + 1}" for i in range(width)], "value"])
    for t in tables:
        k = t.spec.k
        attrs = ";".join(names[a] if names else str(a) for a in t.spec.attributes)
        for gamma, value in enumerate(t.cells):
            bits = [(gamma >> (k - 1 - i)) & 1 for i in range(k)] + [""] * (width - k)
            writer.writerow([t.spec.label(), attrs, *bits, repr(float(value))])


def read_tables_json(fh) -> list[MarginalTable]:
    out = []
    for rec in json.load(fh):
        spec = MarginalSpec(rec["d"], int(rec["beta"], 2))
        out.append(MarginalTable(spec, np.array(rec["cells"]), dict(rec.get("flags", {}))))
    return out

