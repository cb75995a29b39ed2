"""Command-line entry point: ``ldpm <subcommand> [options]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import contextlib
import itertools
import json
import os
import sys

import numpy as np

from ldpm import analysis, wire
from ldpm.aggregate import accumulate_all, reconstruct_all, reconstruct_marginal, write_tables_csv, write_tables_json
from ldpm.core import MarginalSpec, marginal_operator
from ldpm.data import Dataset, random_tree_model
from ldpm.experiment import (
    ExperimentConfig,
    collect,
    run_grid,
    source_dataset,
    summarize,
    write_records,
    write_summary,
)
from ldpm.mechanisms import Mechanism, PrivacyParams, parse_mechanism, randomize_batch, verify_ldp
from ldpm.rng import derive_rng

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ConfigError(Exception):
    """Invalid flags, config file or input files (exit code 1)."""


@contextlib.contextmanager
def config_stage():
    try:
        yield
    except ConfigError:
        raise
    except (ValueError, OSError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def parse_int(text) -> int:
    """Integer, also accepting powers written as ``2^14``."""
    s = str(text).strip()
    if "^" in s:
        base, exp = s.split("^", 1)
        return int(base) ** int(exp)
    return int(s)


def split_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        out = []
        for v in value:
            out.extend(split_list(v))
        return out
    if isinstance(value, str):
        return [s for s in value.replace(",", " ").split() if s]
    return [value]


def load_config_file(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".toml"):
        return tomllib.loads(raw.decode("utf-8"))
    return json.loads(raw)


def merged(args, keys) -> dict:
    """Config-file values overridden by every flag given on the command line."""
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(values) - set(keys)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


COMMON_KEYS = ("mech", "d", "k", "eps", "n", "trials", "seed", "data", "schema", "out", "strength")


def add_common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="JSON or TOML file with default values for these flags")
    p.add_argument("--mech", help="mechanism name(s), comma separated")
    p.add_argument("--d", type=int, help="number of binary attributes (synthetic data)")
    p.add_argument("--k", type=int, help="marginal width")
    p.add_argument("--eps", help="privacy budget(s), comma separated")
    p.add_argument("--n", help="population size(s), comma separated; 2^14 notation allowed")
    p.add_argument("--trials", type=int, help="repetitions per grid point")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--data", help="CSV dataset (header row, 0/1 or categorical columns)")
    p.add_argument("--schema", help="JSON schema for categorical CSV columns")
    p.add_argument("--strength", type=float, help="dependence strength of the synthetic tree model")
    p.add_argument("--out", help=out_help)


def experiment_config(args, defaults: dict) -> ExperimentConfig:
    values = {**defaults, **merged(args, COMMON_KEYS)}
    mechs = split_list(values.get("mech"))
    return ExperimentConfig(
        mechanisms=[parse_mechanism(m) for m in mechs],
        d=int(values.get("d", 8)),
        k=int(values.get("k", 2)),
        epsilons=[float(e) for e in split_list(values.get("eps", 1.1))],
        ns=[parse_int(n) for n in split_list(values.get("n", 1 << 14))],
        trials=int(values.get("trials", 10)),
        seed=int(values.get("seed", 0)),
        data=values.get("data"),
        schema=values.get("schema"),
        out=values.get("out"),
        strength=float(values.get("strength", 0.6)),
    )


def single(config: ExperimentConfig, what: str):
    """The single mechanism, epsilon and N a one-shot subcommand needs."""
    for name, vals in (("--mech", config.mechanisms), ("--eps", config.epsilons), ("--n", config.ns)):
        if len(vals) != 1:
            raise ConfigError(f"{what} takes a single {name} value, got {len(vals)}")
    return config.mechanisms[0], config.epsilons[0], config.ns[0]


def one_population(config: ExperimentConfig, ds: Dataset | None, n: int) -> np.ndarray:
    rng = derive_rng(config.seed, "population", n, 0)
    if ds is not None:
        return ds.records if n == len(ds) else ds.records[rng.integers(0, len(ds), size=n)]
    return random_tree_model(config.d, derive_rng(config.seed, "model"), config.strength).sample(n, rng)


def attribute_names(config: ExperimentConfig, ds: Dataset | None) -> list[str]:
    return list(ds.names) if ds is not None else [f"a{i}" for i in range(config.d)]


def cmd_simulate(args) -> int:
    with config_stage():
        config = experiment_config(args, {"mech": "InpRS,InpPS,InpHT,MargRS,MargPS,MargHT"})
        ds = source_dataset(config)
        out = config.out or "ldpm-out"
        os.makedirs(out, exist_ok=True)
    records = run_grid(config, ds)
    summary = summarize(records)
    write_records(records, os.path.join(out, "records.jsonl"))
    write_summary(summary, os.path.join(out, "summary.csv"))
    for row in summary:
        print(f"{row['mechanism']:>7} eps={row['epsilon']:<6g} N={row['n']:<8d} mean TV={row['mean_tv']:.5f} sd={row['std_tv']:.5f}")
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_em(args) -> int:
    with config_stage():
        config = experiment_config(args, {"mech": "InpEM", "eps": 0.2})
        ds = source_dataset(config)
        out = config.out or "ldpm-em"
        os.makedirs(out, exist_ok=True)
    records = run_grid(config, ds)
    summary = summarize(records)
    write_records(records, os.path.join(out, "records.jsonl"))
    write_summary(summary, os.path.join(out, "summary.csv"))
    for row in summary:
        line = f"{row['mechanism']:>7} eps={row['epsilon']:<6g} N={row['n']:<8d} mean TV={row['mean_tv']:.5f}"
        if "degenerate" in row:
            total = row["trials"] * row["marginals"]
            line += f" degenerate={row['degenerate']}/{total}"
        print(line)
    return 0


def cmd_randomize(args) -> int:
    with config_stage():
        config = experiment_config(args, {"mech": "InpHT", "trials": 1})
        mech, eps, n = single(config, "randomize")
        ds = source_dataset(config)
        if ds is not None and args.n is None:
            n = len(ds)
        params = PrivacyParams(mech, eps, config.d, config.k)
        out = config.out or "reports.jsonl"
        binary = args.format == "binary" or (args.format is None and out.endswith(".bin"))
    signals = one_population(config, ds, n)
    batch = randomize_batch(signals, params, derive_rng(config.seed, "reports", mech.value))
    with open(out, "wb" if binary else "w", **({} if binary else {"encoding": "utf-8"})) as fh:
        count = (wire.write_binary if binary else wire.write_jsonl)(iter(batch), fh)
    print(f"wrote {count} {mech} reports (d={config.d}, k={config.k}, eps={eps:g}) to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    with config_stage():
        if args.d is None or args.k is None or args.eps is None:
            raise ConfigError("reconstruct needs --d, --k and --eps to match the report file")
        path = args.reports
        binary = path.endswith(".bin")
        with open(path, "rb" if binary else "r", **({} if binary else {"encoding": "utf-8"})) as fh:
            reports = list(wire.read_binary(fh) if binary else wire.read_jsonl(fh))
        if not reports:
            raise ConfigError(f"{path}: no reports")
        params = PrivacyParams(reports[0].mech, float(args.eps), args.d, args.k)
        if args.mech and parse_mechanism(args.mech) is not params.mechanism:
            raise ConfigError(f"--mech {args.mech} does not match report tag {params.mechanism}")
        specs = None
        if args.attrs:
            specs = [MarginalSpec.from_attributes(args.d, [int(a) for a in split_list(args.attrs)])]
    acc = accumulate_all(reports, params)
    normalize = "project" if args.normalize else None
    tables = [reconstruct_marginal(acc, s, normalize=normalize) for s in specs] if specs else reconstruct_all(acc, normalize=normalize)
    out = args.out
    if out and out.endswith(".csv"):
        with open(out, "w", newline="", encoding="utf-8") as fh:
            write_tables_csv(tables, fh)
    elif out:
        with open(out, "w", encoding="utf-8") as fh:
            write_tables_json(tables, fh)
    else:
        write_tables_json(tables, sys.stdout)
    return 0


def _pairs(text, d: int) -> list[tuple[int, int]]:
    if not text:
        return list(itertools.combinations(range(d), 2))
    pairs = []
    for item in split_list(text):
        a, _, b = item.partition("-")
        i, j = int(a), int(b)
        if i == j or not (0 <= i < d and 0 <= j < d):
            raise ConfigError(f"bad attribute pair {item!r} for d={d}")
        pairs.append((min(i, j), max(i, j)))
    return pairs


def cmd_chi2(args) -> int:
    with config_stage():
        config = experiment_config(args, {"mech": "InpHT", "k": 2, "n": 1 << 16, "trials": 1})
        mech, eps, n = single(config, "chi2")
        ds = source_dataset(config)
        if config.k != 2:
            raise ConfigError("chi2 works on 2-way marginals; use --k 2")
        pairs = _pairs(args.pairs, config.d)
    signals = one_population(config, ds, n)
    truth = Dataset(config.d, signals, attribute_names(config, ds)).distribution()
    acc = collect(signals, PrivacyParams(mech, eps, config.d, 2), config.seed, "reports", mech.value)
    names = attribute_names(config, ds)
    rows = []
    for i, j in pairs:
        spec = MarginalSpec.from_attributes(config.d, (i, j))
        exact = analysis.chi_square(marginal_operator(truth, spec), n, args.alpha)
        private = analysis.chi_square(reconstruct_marginal(acc, spec), n, args.alpha)
        rows.append([names[i], names[j], exact.statistic, exact.dependent, private.statistic, private.dependent])
    header = ["attr_a", "attr_b", "exact_chi2", "exact_dependent", "private_chi2", "private_dependent"]
    lines = [",".join(header)] + [",".join(repr(v) if isinstance(v, float) else str(v) for v in r) for r in rows]
    text = "\n".join(lines) + "\n"
    if config.out:
        with open(config.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    sys.stdout.write(text)
    agree = sum(r[3] == r[5] for r in rows)
    print(f"# {mech} verdict agrees with exact on {agree}/{len(rows)} pairs (critical value {analysis.critical_value(args.alpha):.4f})")
    return 0


def cmd_chowliu(args) -> int:
    with config_stage():
        config = experiment_config(args, {"mech": "InpHT", "k": 2, "n": 1 << 16, "trials": 1})
        mech, eps, n = single(config, "chowliu")
        ds = source_dataset(config)
        if config.k != 2:
            raise ConfigError("chowliu works on 2-way marginals; use --k 2")
    signals = one_population(config, ds, n)
    truth = Dataset(config.d, signals, attribute_names(config, ds)).distribution()
    acc = collect(signals, PrivacyParams(mech, eps, config.d, 2), config.seed, "reports", mech.value)
    private_tables = {t.spec.attributes: t for t in reconstruct_all(acc, 2)}
    exact_tables = {a: marginal_operator(truth, t.spec) for a, t in private_tables.items()}
    exact_w = analysis.pair_weights(exact_tables, config.d)
    private_tree = analysis.chow_liu(private_tables, config.d)
    exact_tree = analysis.max_spanning_tree(config.d, exact_w)
    names = attribute_names(config, ds)
    out = config.out
    if out:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            analysis.write_tree_csv(private_tree, fh, names)
    else:
        analysis.write_tree_csv(private_tree, sys.stdout, names)
    if args.dot:
        with open(args.dot, "w", encoding="utf-8") as fh:
            fh.write(analysis.tree_to_dot(private_tree, names))
    print(f"# private tree: estimated MI {private_tree.total_mi:.5f}, true MI {analysis.score_tree(private_tree, exact_w):.5f}")
    print(f"# exact tree:   true MI {exact_tree.total_mi:.5f}; shared edges {len(private_tree.edge_set() & exact_tree.edge_set())}/{config.d - 1}")
    return 0


def cmd_verify(args) -> int:
    with config_stage():
        values = merged(args, ("mech", "d", "k", "eps"))
        mechs = split_list(values.get("mech", "all"))
        if [m.lower() for m in mechs] == ["all"]:
            mechs = list(Mechanism)
        params = [
            PrivacyParams(parse_mechanism(m), float(e), int(values.get("d", 5)), int(values.get("k", 2)))
            for m in mechs
            for e in split_list(values.get("eps", "0.2,1.1"))
        ]
    failed = 0
    for p in params:
        loss = verify_ldp(p)
        ok = loss <= p.epsilon + 1e-9
        failed += not ok
        print(f"{p.mechanism.value:>7} d={p.d} k={p.k} eps={p.epsilon:<6g} max log-ratio={loss:.12f} {'ok' if ok else 'VIOLATION'}")
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldpm", description="Locally private release of k-way marginals over binary attributes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="sweep mechanisms, N and epsilon; report TV error per marginal")
    add_common(p, "output directory (records.jsonl, summary.csv)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("em", help="run the InpEM baseline and count degenerate decodes")
    add_common(p, "output directory (records.jsonl, summary.csv)")
    p.set_defaults(func=cmd_em)

    p = sub.add_parser("randomize", help="privatize a population and write the reports")
    add_common(p, "report file (.jsonl or .bin)")
    p.add_argument("--format", choices=["jsonl", "binary"], help="report encoding (default: from extension)")
    p.set_defaults(func=cmd_randomize)

    p = sub.add_parser("reconstruct", help="estimate marginals from a report file")
    p.add_argument("reports", help="report file (.jsonl or .bin)")
    p.add_argument("--mech", help="expected mechanism (checked against the report tags)")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--eps")
    p.add_argument("--attrs", help="attribute indices of one marginal, e.g. 0,3 (default: every k-way marginal)")
    p.add_argument("--normalize", action="store_true", help="project estimates onto the probability simplex")
    p.add_argument("--out", help="output .json or .csv (default: JSON on stdout)")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("chi2", help="chi-square independence tests on private 2-way marginals")
    add_common(p, "CSV of exact and private statistics")
    p.add_argument("--pairs", help="attribute pairs such as 0-1,2-3 (default: all)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_chi2)

    p = sub.add_parser("chowliu", help="Chow-Liu dependency tree from private 2-way marginals")
    add_common(p, "CSV of tree edges")
    p.add_argument("--dot", help="also write the tree in Graphviz format")
    p.set_defaults(func=cmd_chowliu)

    p = sub.add_parser("verify", help="exact worst-case privacy loss of each mechanism")
    p.add_argument("--config")
    p.add_argument("--mech", help="mechanism name(s) or 'all'")
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--eps")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"ldpm: configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"ldpm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
