"""Downstream statistics on 2-way marginals: chi-square and Chow-Liu trees.

Estimated tables may have negative or >1 cells; both statistics need valid
distributions, so tables are clipped to [0, 1] and renormalized first.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ldpm.core import MarginalTable, clip_normalize


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    critical_value: float
    dependent: bool
    n: int


def critical_value(alpha: float = 0.05, df: int = 1) -> float:
    return float(stats.chi2.ppf(1.0 - alpha, df))


def _as_2x2(table: MarginalTable) -> np.ndarray:
    if table.spec.k != 2:
        raise ValueError(f"need a 2-way table, got k={table.spec.k}")
    return clip_normalize(table.cells).reshape(2, 2)


def chi_square(table: MarginalTable, n: int, alpha: float = 0.05) -> ChiSquareResult:
    """Independence test on a 2-way table of ``n`` observations (df = 1)."""
    if n <= 0:
        raise ValueError("n must be positive")
    obs = _as_2x2(table)
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0))
    if np.any(expected == 0):
        raise ValueError("chi-square statistic undefined: an expected cell is zero")
    statistic = float(n * np.sum((obs - expected) ** 2 / expected))
    crit = critical_value(alpha, 1)
    return ChiSquareResult(statistic, crit, statistic > crit, n)


def mutual_information(table: MarginalTable) -> float:
    """Mutual information in nats between the two attributes of a 2-way table."""
    joint = _as_2x2(table)
    prod = np.outer(joint.sum(axis=1), joint.sum(axis=0))
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / prod[nz])))
    return max(mi, 0.0)


@dataclass(frozen=True)
class DependencyTree:
    d: int
    edges: tuple[tuple[int, int, float], ...]

    @property
    def total_mi(self) -> float:
        return float(sum(w for _, _, w in self.edges))

    def edge_set(self) -> frozenset[tuple[int, int]]:
        return frozenset((i, j) for i, j, _ in self.edges)


def max_spanning_tree(d: int, weights: dict[tuple[int, int], float]) -> DependencyTree:
    """Kruskal on descending weight; ties go to the lexicographically smaller edge."""
    parent = list(range(d))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = []
    for i, j in sorted(weights, key=lambda e: (-weights[e], min(e), max(e))):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            edges.append((min(i, j), max(i, j), float(weights[(i, j)])))
            if len(edges) == d - 1:
                break
    if len(edges) != d - 1:
        raise ValueError("weight graph is not connected")
    return DependencyTree(d, tuple(edges))


def pair_weights(tables: dict[tuple[int, int], MarginalTable], d: int) -> dict[tuple[int, int], float]:
    weights = {}
    for i, j in itertools.combinations(range(d), 2):
        table = tables.get((i, j))
        if table is None:
            raise ValueError(f"missing 2-way table for attribute pair ({i}, {j})")
        weights[(i, j)] = mutual_information(table)
    return weights


def chow_liu(tables: dict[tuple[int, int], MarginalTable], d: int) -> DependencyTree:
    """Maximum mutual-information spanning tree over all attribute pairs."""
    return max_spanning_tree(d, pair_weights(tables, d))


def score_tree(tree: DependencyTree, weights: dict[tuple[int, int], float]) -> float:
    """Total of ``weights`` over the tree's edges, e.g. true MI of a private tree."""
    return float(sum(weights[(i, j)] for i, j, _ in tree.edges))


def write_tree_csv(tree: DependencyTree, fh, names=None) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["source", "target", "mutual_information"])
    for i, j, w in tree.edges:
        writer.writerow([names[i] if names else i, names[j] if names else j, repr(w)])


def tree_to_dot(tree: DependencyTree, names=None) -> str:
    lines = ["graph chow_liu {"]
    for v in range(tree.d):
        lines.append(f'  n{v} [label="{names[v] if names else v}"];')
    for i, j, w in tree.edges:
        lines.append(f'  n{i} -- n{j} [label="{w:.4g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
