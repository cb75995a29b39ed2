import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldpm.core import Distribution, MarginalSpec, MarginalTable, marginal_operator, total_variation
from ldpm.data import (
    CategoricalSchema,
    Dataset,
    TreeModel,
    categorical_marginal,
    decode_categorical,
    encode_categorical,
    load_csv,
    load_schema,
    random_tree_model,
    sample_population,
    synth_generate,
    write_csv,
)


def write_text(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_binary_packing(tmp_path):
    ds = load_csv(write_text(tmp_path / "a.csv", "x,y\n1,0\n0,1\n"))
    assert ds.d == 2 and ds.names == ("x", "y")
    assert list(ds.records) == [2, 1]
    assert ds.provenance.startswith("file:")


def test_schema_widths():
    assert CategoricalSchema(("a", "b"), (2, 2)).d2 == 2
    s = CategoricalSchema(("a", "b"), (3, 5))
    assert s.widths == (2, 3) and s.d2 == 5
    assert s.offsets == (0, 2)
    assert s.k2([1]) == 3
    assert s.bit_names() == ("a[0]", "a[1]", "b[0]", "b[1]", "b[2]")
    assert format(encode_categorical((2, 0), CategoricalSchema(("a", "b"), (3, 2))), "03b") == "100"


@given(st.lists(st.integers(2, 9), min_size=1, max_size=5))
def test_widths_match_brute_force(cards):
    s = CategoricalSchema([f"c{i}" for i in range(len(cards))], cards)
    for r, w in zip(cards, s.widths):
        assert 2 ** (w - 1) < r <= 2**w
    assert s.d2 == sum(s.widths)
    for attrs in itertools.combinations(range(len(cards)), min(2, len(cards))):
        assert s.k2(attrs) == bin(s.binary_mask(attrs)).count("1")


@given(st.lists(st.integers(2, 9), min_size=1, max_size=5).flatmap(
    lambda cards: st.tuples(st.just(cards), st.tuples(*(st.integers(0, r - 1) for r in cards)))))
def test_encode_decode_identity(case):
    cards, values = case
    s = CategoricalSchema([f"c{i}" for i in range(len(cards))], cards)
    code = encode_categorical(values, s)
    assert 0 <= code < 2**s.d2
    assert decode_categorical(code, s) == tuple(values)


def test_unused_codewords_decode_to_none():
    s = CategoricalSchema(("a",), (3,))
    assert decode_categorical(3, s) is None
    with pytest.raises(ValueError):
        encode_categorical((3,), s)
    with pytest.raises(ValueError):
        encode_categorical((0, 1), s)


def test_schema_validation(tmp_path):
    with pytest.raises(ValueError):
        CategoricalSchema(("a",), (1,))
    with pytest.raises(ValueError):
        CategoricalSchema(("a", "a"), (2, 2))
    with pytest.raises(ValueError):
        CategoricalSchema(("a", "b"), (2,))
    p = write_text(tmp_path / "s.json", json.dumps([{"name": "a", "cardinality": 3}]))
    assert load_schema(p) == CategoricalSchema(("a",), (3,))
    with pytest.raises(ValueError):
        load_schema(write_text(tmp_path / "bad.json", json.dumps([{"name": "a"}])))


def test_categorical_marginal_matches_direct_tabulation():
    rng = np.random.default_rng(3)
    s = CategoricalSchema(("a", "b", "c"), (3, 2, 3))
    values = np.column_stack([rng.integers(0, r, 10_000) for r in s.cardinalities])
    codes = np.array([encode_categorical(v, s) for v in values])
    dist = Distribution.from_records(codes, s.d2)
    for attrs in [(0, 2), (0, 1), (1, 2)]:
        binary = marginal_operator(dist, MarginalSpec(s.d2, s.binary_mask(attrs)))
        got = categorical_marginal(binary, s, attrs)
        direct = np.zeros(tuple(s.cardinalities[a] for a in attrs))
        for v in values:
            direct[tuple(v[list(attrs)])] += 1
        np.testing.assert_allclose(got, direct / len(values), atol=1e-12)
    assert binary.spec.k == s.k2((1, 2))


def test_categorical_marginal_drops_invalid_cells():
    s = CategoricalSchema(("a",), (3,))
    t = MarginalTable(MarginalSpec(2, 0b11), np.array([0.3, 0.3, 0.3, 0.1]))
    np.testing.assert_allclose(categorical_marginal(t, s, [0]), [0.3, 0.3, 0.3])
    np.testing.assert_allclose(categorical_marginal(t, s, [0], renormalize=True), [1 / 3] * 3)
    with pytest.raises(ValueError):
        categorical_marginal(MarginalTable(MarginalSpec(2, 0b01), np.full(2, 0.5)), s, [0])


def test_csv_round_trip_binary(tmp_path):
    ds = synth_generate(np.full(16, 1 / 16), 200, 1, names="wxyz")
    path = tmp_path / "ds.csv"
    write_csv(ds, path)
    back = load_csv(path)
    assert back.d == ds.d and back.names == ds.names
    np.testing.assert_array_equal(back.records, ds.records)


def test_csv_round_trip_categorical(tmp_path):
    s = CategoricalSchema(("colour", "size"), (3, 5))
    rng = np.random.default_rng(4)
    rows = [(int(rng.integers(3)), int(rng.integers(5))) for _ in range(100)]
    path = write_text(tmp_path / "c.csv", "colour,size\n" + "".join(f"{a},{b}\n" for a, b in rows))
    ds = load_csv(path, s)
    assert ds.d == 5 and ds.schema == s
    assert [decode_categorical(int(c), s) for c in ds.records] == rows
    write_csv(ds, tmp_path / "out.csv")
    assert (tmp_path / "out.csv").read_text() == path.read_text()


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("", "empty file"),
        ("a,b\n1,0\n1\n", "row 3"),
        ("a,b\n1,x\n", "non-integer"),
        ("a,b\n1,2\n", "row 2"),
    ],
)
def test_csv_errors(tmp_path, text, fragment):
    with pytest.raises(ValueError, match=fragment):
        load_csv(write_text(tmp_path / "bad.csv", text))


def test_csv_header_must_match_schema(tmp_path):
    with pytest.raises(ValueError, match="header"):
        load_csv(write_text(tmp_path / "h.csv", "p,q\n0,0\n"), CategoricalSchema(("a", "b"), (2, 2)))


def test_dataset_validation_and_select():
    with pytest.raises(ValueError):
        Dataset(2, [4], ("a", "b"))
    with pytest.raises(ValueError):
        Dataset(2, [1], ("a",))
    ds = Dataset(3, [0b101, 0b011], ("a", "b", "c"))
    sub = ds.select([2, 0])
    assert sub.names == ("c", "a") and list(sub.records) == [0b11, 0b10]


def test_synth_point_mass():
    joint = np.zeros(8)
    joint[5] = 1.0
    ds = synth_generate(joint, 1000, 0)
    assert np.all(ds.records == 5)


def test_synth_converges_to_target():
    rng = np.random.default_rng(5)
    target = Distribution(4, rng.dirichlet(np.ones(16)))
    ds = synth_generate(target, 10**6, 9)
    full = MarginalSpec(4, 0b1111)
    assert total_variation(marginal_operator(ds.distribution(), full), marginal_operator(target, full)) < 0.01


def test_synth_deterministic_and_validated():
    joint = np.full(8, 1 / 8)
    np.testing.assert_array_equal(synth_generate(joint, 500, 3).records, synth_generate(joint, 500, 3).records)
    assert not np.array_equal(synth_generate(joint, 500, 3).records, synth_generate(joint, 500, 4).records)
    with pytest.raises(ValueError):
        synth_generate(np.array([0.5, 0.7, -0.2, 0.0]), 10, 0)
    with pytest.raises(ValueError):
        synth_generate(np.full(4, 0.3), 10, 0)
    with pytest.raises(ValueError):
        synth_generate(joint, 0, 0)


def test_tree_model_sampling_matches_its_joint():
    model = random_tree_model(5, np.random.default_rng(2), strength=0.8)
    ds = synth_generate(model, 200_000, 1)
    full = MarginalSpec(5, 0b11111)
    assert total_variation(marginal_operator(ds.distribution(), full), marginal_operator(model.to_distribution(), full)) < 0.01
    assert abs(model.to_distribution().cells.sum() - 1) < 1e-12


def test_tree_model_validation():
    with pytest.raises(ValueError):
        TreeModel((-1, 2, 0), ((0.5, 0.5),) * 3)
    with pytest.raises(ValueError):
        TreeModel((-1, 0), ((0.5, 0.5), (0.2, 1.2)))
    chain = random_tree_model(6, np.random.default_rng(0), chain=True)
    assert chain.parents == (-1, 0, 1, 2, 3, 4)


def test_sample_population():
    ds = synth_generate(np.random.default_rng(0).dirichlet(np.ones(16)), 5000, 2)
    perm = sample_population(ds, len(ds), 7, with_replacement=False)
    np.testing.assert_array_equal(np.sort(perm.records), np.sort(ds.records))
    a, b = sample_population(ds, 300, 8), sample_population(ds, 300, 8)
    np.testing.assert_array_equal(a.records, b.records)
    big = sample_population(ds, 10**5, 9)
    full = MarginalSpec(4, 0b1111)
    assert total_variation(marginal_operator(big.distribution(), full), marginal_operator(ds.distribution(), full)) < 0.02
    with pytest.raises(ValueError):
        sample_population(ds, 0, 1)
    with pytest.raises(ValueError):
        sample_population(ds, len(ds) + 1, 1, with_replacement=False)
