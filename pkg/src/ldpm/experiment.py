"""Simulation harness: populations through mechanisms, back to marginals.

Every random draw is derived from the single experiment seed through named
Philox streams (see :mod:`ldpm.rng`), so results do not depend on the number
of worker threads or the order in which grid points finish.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ldpm.aggregate import Accumulator, reconstruct_marginal
from ldpm.core import Distribution, k_way_specs, marginal_operator, total_variation
from ldpm.data import Dataset, load_csv, load_schema, random_tree_model, sample_population
from ldpm.em import EmConfig, decode_all
from ldpm.mechanisms import SIX_MECHANISMS, Mechanism, PrivacyParams, parse_mechanism, randomize_batch
from ldpm.rng import derive_rng

# users per randomization block are capped so a block holds at most this many report cells
BLOCK_CELLS = 1 << 22
MAX_BLOCK_USERS = 1 << 14


def block_size(params: PrivacyParams) -> int:
    mech = params.mechanism
    if mech is Mechanism.INP_RS:
        width = 1 << params.d
    elif mech is Mechanism.MARG_RS:
        width = 1 << params.k
    elif mech is Mechanism.INP_EM:
        width = params.d
    else:
        width = 1
    return max(1, min(MAX_BLOCK_USERS, BLOCK_CELLS // width))


def collect(signals, params: PrivacyParams, seed: int, *key) -> Accumulator:
    """Randomize every user and tally the reports.

    Users are processed in fixed-size blocks, each with its own stream
    ``(seed, *key, "block", b)``.
    """
    signals = np.asarray(signals, dtype=np.int64)
    acc = Accumulator(params)
    bs = block_size(params)
    for b, start in enumerate(range(0, signals.size, bs)):
        rng = derive_rng(seed, *key, "block", b)
        chunk = signals[start : start + bs]
        users = np.arange(start, start + chunk.size, dtype=np.int64)
        acc.add_batch(randomize_batch(chunk, params, rng, users))
    return acc


def marginal_errors(acc: Accumulator, truth: Distribution, k: int | None = None, em_config: EmConfig | None = None) -> list[dict]:
    """TV error of every k-way marginal against the exact population marginal."""
    p = acc.params
    k = p.k if k is None else k
    specs = k_way_specs(p.d, k)
    out = []
    if p.mechanism is Mechanism.INP_EM:
        for res in decode_all(acc, k, em_config):
            tv = total_variation(res.table, marginal_operator(truth, res.table.spec))
            out.append({"marginal": res.table.spec.label(), "tv": tv, "iterations": res.iterations, "degenerate": res.degenerate})
        return out
    for spec in specs:
        est = reconstruct_marginal(acc, spec)
        out.append({"marginal": spec.label(), "tv": total_variation(est, marginal_operator(truth, spec))})
    return out


@dataclass
class ExperimentConfig:
    mechanisms: list = field(default_factory=lambda: list(SIX_MECHANISMS))
    d: int = 8
    k: int = 2
    epsilons: list = field(default_factory=lambda: [1.1])
    ns: list = field(default_factory=lambda: [1 << 14])
    trials: int = 10
    seed: int = 0
    data: str | None = None
    schema: str | None = None
    out: str | None = None
    strength: float = 0.6
    em_omega: float = 1e-5
    em_max_iterations: int = 100_000

    def __post_init__(self):
        self.mechanisms = [parse_mechanism(m) for m in _as_list(self.mechanisms)]
        self.epsilons = [float(e) for e in _as_list(self.epsilons)]
        self.ns = [int(n) for n in _as_list(self.ns)]
        self.validate()

    def validate(self) -> None:
        if not self.mechanisms:
            raise ValueError("no mechanisms selected (--mech)")
        if not self.epsilons:
            raise ValueError("epsilon sweep is empty (--eps)")
        if not self.ns:
            raise ValueError("population sweep is empty (--n)")
        if any(not (e > 0 and math.isfinite(e)) for e in self.epsilons):
            raise ValueError(f"epsilons must be positive and finite, got {self.epsilons}")
        if any(n < 1 for n in self.ns):
            raise ValueError(f"population sizes must be >= 1, got {self.ns}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if not self.data and not 1 <= self.k <= self.d:
            raise ValueError(f"need 1 <= k <= d, got k={self.k}, d={self.d}")
        for m in self.mechanisms:
            # surfaces mechanism-specific limits (e.g. InpRS dimension cap) before any work
            if not self.data:
                PrivacyParams(m, self.epsilons[0], self.d, self.k)

    def em_config(self) -> EmConfig:
        return EmConfig(self.em_omega, self.em_max_iterations)


def _as_list(v):
    if isinstance(v, (list, tuple)):
        return list(v)
    if isinstance(v, str):
        return [s for s in v.replace(",", " ").split() if s]
    return [v]


def source_dataset(config: ExperimentConfig) -> Dataset | None:
    if not config.data:
        return None
    schema = load_schema(config.schema) if config.schema else None
    ds = load_csv(config.data, schema)
    config.d = ds.d
    if not 1 <= config.k <= ds.d:
        raise ValueError(f"need 1 <= k <= d={ds.d}, got k={config.k}")
    for m in config.mechanisms:
        PrivacyParams(m, config.epsilons[0], ds.d, config.k)
    return ds


def population(config: ExperimentConfig, ds: Dataset | None, n: int, trial: int) -> np.ndarray:
    """Signals of the ``trial``-th population of size ``n`` (shared by all mechanisms and epsilons)."""
    rng = derive_rng(config.seed, "population", n, trial)
    if ds is not None:
        return sample_population(ds, n, rng).records
    model = random_tree_model(config.d, derive_rng(config.seed, "model"), config.strength)
    return model.sample(n, rng)


def run_task(config: ExperimentConfig, ds: Dataset | None, mech: Mechanism, n: int, eps: float, trial: int) -> list[dict]:
    signals = population(config, ds, n, trial)
    truth = Distribution.from_records(signals, config.d)
    params = PrivacyParams(mech, eps, config.d, config.k)
    acc = collect(signals, params, config.seed, "reports", mech.value, n, eps, trial)
    rows = []
    for err in marginal_errors(acc, truth, em_config=config.em_config()):
        rows.append({"mechanism": mech.value, "d": config.d, "k": config.k, "epsilon": eps, "n": n, "trial": trial, **err})
    return rows


def thread_count() -> int:
    cap = os.environ.get("LDPM_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"LDPM_THREADS must be an integer, got {cap!r}") from None
    return n


def run_grid(config: ExperimentConfig, ds: Dataset | None = None) -> list[dict]:
    """One record per (mechanism, N, epsilon, trial, marginal), in grid order."""
    if ds is None:
        ds = source_dataset(config)
    tasks = [
        (mech, n, eps, trial)
        for mech in config.mechanisms
        for n in config.ns
        for eps in config.epsilons
        for trial in range(config.trials)
    ]
    workers = thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: run_task(config, ds, *t), tasks))
    else:
        results = [run_task(config, ds, *t) for t in tasks]
    return [row for rows in results for row in rows]


def summarize(records: list[dict]) -> list[dict]:
    """Per grid point: mean and stddev over trials of the per-trial mean TV."""
    groups: dict[tuple, dict[int, list[float]]] = {}
    degenerate: dict[tuple, int] = {}
    for r in records:
        key = (r["mechanism"], r["d"], r["k"], r["epsilon"], r["n"])
        groups.setdefault(key, {}).setdefault(r["trial"], []).append(r["tv"])
        if "degenerate" in r:
            degenerate[key] = degenerate.get(key, 0) + bool(r["degenerate"])
    out = []
    for (mech, d, k, eps, n), trials in groups.items():
        per_trial = np.array([np.mean(v) for _, v in sorted(trials.items())])
        row = {
            "mechanism": mech,
            "d": d,
            "k": k,
            "epsilon": eps,
            "n": n,
            "trials": per_trial.size,
            "marginals": len(next(iter(trials.values()))),
            "mean_tv": float(per_trial.mean()),
            "std_tv": float(per_trial.std(ddof=1)) if per_trial.size > 1 else 0.0,
        }
        if (mech, d, k, eps, n) in degenerate:
            row["degenerate"] = degenerate[(mech, d, k, eps, n)]
        out.append(row)
    return out


def write_records(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


SUMMARY_FIELDS = ["mechanism", "d", "k", "epsilon", "n", "trials", "marginals", "mean_tv", "std_tv", "degenerate"]


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n", restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
