"""Datasets: CSV ingestion, categorical encoding and synthetic populations.

Records are packed into signal indices with the first attribute (first CSV
column) as the most significant bit. A categorical attribute with ``r``
values occupies ``ceil(log2 r)`` consecutive bits holding its value in
binary, most significant bit first.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ldpm.core import MAX_D, Distribution, MarginalTable, clip_normalize


@dataclass(frozen=True)
class CategoricalSchema:
    names: tuple[str, ...]
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "cardinalities", tuple(int(r) for r in self.cardinalities))
        if len(self.names) != len(self.cardinalities):
            raise ValueError("names and cardinalities differ in length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate attribute names")
        for name, r in zip(self.names, self.cardinalities):
            if r < 2:
                raise ValueError(f"attribute {name!r} needs cardinality >= 2, got {r}")
        if self.d2 > MAX_D:
            raise ValueError(f"encoded dimension {self.d2} exceeds {MAX_D}")

    @classmethod
    def binary(cls, names) -> "CategoricalSchema":
        names = tuple(names)
        return cls(names, (2,) * len(names))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(math.ceil(math.log2(r)) for r in self.cardinalities)

    @property
    def d2(self) -> int:
        """Binary dimension of the encoded records."""
        return sum(self.widths)

    def k2(self, attrs) -> int:
        """Binary dimension of the marginal over ``attrs``."""
        return sum(self.widths[a] for a in attrs)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Bit offset of each attribute counted from the most significant bit."""
        return tuple(itertools.accumulate((0,) + self.widths[:-1]))

    def bit_names(self) -> tuple[str, ...]:
        out = []
        for name, w in zip(self.names, self.widths):
            out.extend([name] if w == 1 else [f"{name}[{b}]" for b in range(w)])
        return tuple(out)

    def binary_mask(self, attrs) -> int:
        """Mask over the encoded bits covering the bit groups of ``attrs``."""
        d2, beta = self.d2, 0
        for a in attrs:
            for b in range(self.widths[a]):
                beta |= 1 << (d2 - 1 - (self.offsets[a] + b))
        return beta

    def to_json(self) -> list[dict]:
        return [{"name": n, "cardinality": r} for n, r in zip(self.names, self.cardinalities)]


def load_schema(path) -> CategoricalSchema:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return CategoricalSchema([a["name"] for a in doc], [a["cardinality"] for a in doc])
    except (TypeError, KeyError) as e:
        raise ValueError(f"schema must be a list of {{name, cardinality}} objects: {e}") from None


def encode_categorical(values, schema: CategoricalSchema) -> int:
    """Concatenate fixed-width binary codes of one record's values."""
    if len(values) != len(schema.cardinalities):
        raise ValueError(f"expected {len(schema.cardinalities)} values, got {len(values)}")
    code = 0
    for name, v, r, w in zip(schema.names, values, schema.cardinalities, schema.widths):
        v = int(v)
        if not 0 <= v < r:
            raise ValueError(f"attribute {name!r}: value {v} outside [0, {r})")
        code = (code << w) | v
    return code


def decode_categorical(code: int, schema: CategoricalSchema) -> tuple[int, ...] | None:
    """Inverse of :func:`encode_categorical`; ``None`` for unused codewords."""
    values = []
    for r, w in zip(reversed(schema.cardinalities), reversed(schema.widths)):
        v = code & ((1 << w) - 1)
        if v >= r:
            return None
        values.append(v)
        code >>= w
    return tuple(reversed(values))


def categorical_marginal(table: MarginalTable, schema: CategoricalSchema, attrs, renormalize: bool = False) -> np.ndarray:
    """Read a categorical marginal out of the binary marginal on its bit groups.

    ``attrs`` must be in ascending order (the order of the binary table);
    cells for unused codewords are dropped.
    """
    attrs = list(attrs)
    if attrs != sorted(attrs):
        raise ValueError("attrs must be ascending")
    if table.spec.beta != schema.binary_mask(attrs):
        raise ValueError("table does not cover exactly the bit groups of attrs")
    shape = tuple(schema.cardinalities[a] for a in attrs)
    out = np.zeros(shape)
    for combo in itertools.product(*(range(r) for r in shape)):
        gamma = 0
        for a, v in zip(attrs, combo):
            gamma = (gamma << schema.widths[a]) | v
        out[combo] = table.cells[gamma]
    if renormalize:
        out = clip_normalize(out.ravel()).reshape(shape)
    return out


@dataclass
class Dataset:
    d: int
    records: np.ndarray
    names: tuple[str, ...]
    provenance: str = ""
    schema: CategoricalSchema | None = field(default=None, compare=False)

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=np.int64)
        self.names = tuple(self.names)
        if len(self.names) != self.d:
            raise ValueError(f"{len(self.names)} attribute names for d={self.d}")
        if self.records.size and (self.records.min() < 0 or self.records.max() >= (1 << self.d)):
            raise ValueError(f"record out of range for d={self.d}")

    def __len__(self) -> int:
        return int(self.records.size)

    def distribution(self) -> Distribution:
        return Distribution.from_records(self.records, self.d)

    def select(self, attrs) -> "Dataset":
        """Keep only ``attrs`` (in the given order) as a new binary dataset."""
        attrs = list(attrs)
        out = np.zeros_like(self.records)
        for a in attrs:
            out = (out << 1) | ((self.records >> (self.d - 1 - a)) & 1)
        return Dataset(len(attrs), out, [self.names[a] for a in attrs], f"{self.provenance}[{attrs}]")


def load_csv(path, schema: CategoricalSchema | None = None) -> Dataset:
    """Read a headed CSV of 0/1 (or categorical) columns into packed records."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file, header row required") from None
        if schema is None:
            schema = CategoricalSchema.binary(header)
        elif tuple(header) != schema.names:
            raise ValueError(f"{path}: header {header} does not match schema {list(schema.names)}")
        records = []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_no} has {len(row)} fields, expected {len(header)}")
            try:
                values = [int(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}: row {row_no} holds a non-integer value") from None
            try:
                records.append(encode_categorical(values, schema))
            except ValueError as e:
                raise ValueError(f"{path}: row {row_no}: {e}") from None
    binary = all(r == 2 for r in schema.cardinalities)
    names = schema.names if binary else schema.bit_names()
    return Dataset(schema.d2, np.array(records, dtype=np.int64), names, f"file:{path}", None if binary else schema)


def write_csv(ds: Dataset, path, schema: CategoricalSchema | None = None) -> None:
    schema = schema or ds.schema or CategoricalSchema.binary(ds.names)
    if schema.d2 != ds.d:
        raise ValueError("schema does not match dataset dimension")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.names)
        for code in ds.records:
            values = decode_categorical(int(code), schema)
            if values is None:
                raise ValueError(f"record {code} is not a valid codeword")
            writer.writerow(values)


@dataclass(frozen=True)
class TreeModel:
    """Binary attributes generated along a tree of pairwise dependencies.

    ``parents[i]`` precedes ``i`` (``-1`` for the root). ``cond[i]`` holds
    ``P(x_i = 1 | x_parent = 0)`` and ``P(x_i = 1 | x_parent = 1)``; for the
    root both entries are its marginal probability.
    """

    parents: tuple[int, ...]
    cond: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.parents) != len(self.cond):
            raise ValueError("parents and cond differ in length")
        for i, par in enumerate(self.parents):
            if par >= i or (par < 0 and i != 0) or (i == 0 and par != -1):
                raise ValueError("parents must precede their children; attribute 0 is the root")
        for c in self.cond:
            if not all(0.0 <= q <= 1.0 for q in c):
                raise ValueError(f"conditional probabilities must lie in [0, 1], got {c}")

    @property
    def d(self) -> int:
        return len(self.parents)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        d = self.d
        bits = np.zeros((n, d), dtype=np.int64)
        for i, par in enumerate(self.parents):
            u = rng.random(n)
            if par < 0:
                bits[:, i] = u < self.cond[i][1]
            else:
                q = np.where(bits[:, par] == 1, self.cond[i][1], self.cond[i][0])
                bits[:, i] = u < q
        return bits @ (1 << np.arange(d - 1, -1, -1, dtype=np.int64))

    def to_distribution(self) -> Distribution:
        d = self.d
        if d > 16:
            raise ValueError("explicit joint only for d <= 16")
        idx = np.arange(1 << d)
        bits = (idx[:, None] >> np.arange(d - 1, -1, -1)) & 1
        prob = np.ones(1 << d)
        for i, par in enumerate(self.parents):
            q1 = self.cond[i][1] if par < 0 else np.where(bits[:, par] == 1, self.cond[i][1], self.cond[i][0])
            prob *= np.where(bits[:, i] == 1, q1, 1.0 - q1)
        return Distribution(d, prob)


def random_tree_model(d: int, rng: np.random.Generator, strength: float = 0.6, chain: bool = False) -> TreeModel:
    """Random tree model; ``strength`` in [0, 1) scales parent-child dependence."""
    parents = [-1] + [i - 1 if chain else int(rng.integers(0, i)) for i in range(1, d)]
    cond = []
    for i in range(d):
        base = float(rng.uniform(0.2, 0.8))
        if i == 0:
            cond.append((base, base))
            continue
        delta = strength * float(rng.uniform(0.5, 1.0)) * min(base, 1.0 - base)
        if rng.random() < 0.5:
            delta = -delta
        cond.append((base - delta, base + delta))
    return TreeModel(tuple(parents), tuple(cond))


def synth_generate(joint, n: int, seed: int, names=None) -> Dataset:
    """``n`` i.i.d. records from an explicit joint (d <= 16) or a :class:`TreeModel`."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if isinstance(joint, TreeModel):
        d = joint.d
        records = joint.sample(n, rng)
        kind = "tree"
    else:
        if not isinstance(joint, Distribution):
            joint = Distribution(int(np.asarray(joint).size).bit_length() - 1, joint)
        d = joint.d
        if d > 16:
            raise ValueError("explicit joint only for d <= 16; use a TreeModel")
        if np.any(joint.cells < 0):
            raise ValueError("joint distribution has negative mass")
        total = joint.cells.sum()
        if not np.isclose(total, 1.0):
            raise ValueError(f"joint distribution sums to {total}, not 1")
        records = rng.choice(1 << d, size=n, p=joint.cells / total)
        kind = "joint"
    names = tuple(names) if names else tuple(f"a{i}" for i in range(d))
    return Dataset(d, records, names, f"synthetic:{kind}:seed={seed}")


def sample_population(ds: Dataset, n: int, seed: int, with_replacement: bool = True) -> Dataset:
    if n <= 0:
        raise ValueError("n must be positive")
    if not with_replacement and n > len(ds):
        raise ValueError(f"cannot draw {n} records without replacement from {len(ds)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(ds), size=n, replace=with_replacement)
    return Dataset(ds.d, ds.records[idx], ds.names, f"{ds.provenance}|sample(n={n},seed={seed})", ds.schema)

