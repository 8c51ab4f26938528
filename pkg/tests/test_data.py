import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tabcascade.baselines import predict_baseline, train_baseline
from tabcascade.cascade import FHLabel
from tabcascade.data import (ColumnSpec, FeatureEncoder, RawTable, clean_table,
                             drop_incomplete_rows, dutch_score_to_label, filter_missing_columns,
                             load_csv, one_hot_encode, read_schema, schema_path, write_csv)
from tabcascade.errors import (ConfigError, DataError, EmptyTableError, ParseError, SchemaError,
                               SpecError)
from tabcascade.synthetic import (SyntheticSpec, generate_synthetic_cohort, informative_columns,
                                  quota_counts, separable_fixture)

CONT = ColumnSpec("a", "continuous")
CAT3 = ColumnSpec("c3", "categorical", ("x", "y", "z"))
CAT2 = ColumnSpec("c2", "categorical", ("no", "yes"))


def column_with_missing(n_missing, n=100):
    rows = [[None if i < n_missing else float(i), float(i)] for i in range(n)]
    return RawTable([ColumnSpec("m", "continuous"), CONT], rows)


# -- cleaning -----------------------------------------------------------------

@pytest.mark.parametrize("n_missing,kept", [(0, True), (4, True), (5, False), (6, False)])
def test_missing_fraction_threshold_is_strict(n_missing, kept):
    out, frag = filter_missing_columns(column_with_missing(n_missing))
    assert ("m" in out.column_names) is kept
    assert ("m" in frag["dropped_columns"]) is not kept
    if not kept:
        assert frag["dropped_columns"]["m"] == pytest.approx(n_missing / 100)


def test_filter_errors():
    t = RawTable([CONT], [[None], [1.0]])
    with pytest.raises(EmptyTableError):
        filter_missing_columns(t)
    with pytest.raises(ConfigError):
        filter_missing_columns(t, threshold=0.0)


def test_row_exclusion():
    complete = RawTable([CONT, CAT2], [[1.0, "no"], [2.0, "yes"]])
    out, frag = drop_incomplete_rows(complete)
    assert out.rows == complete.rows and frag["rows_dropped"] == 0
    toy = RawTable([CONT, CAT2, ColumnSpec("b", "continuous")],
                   [[1.0, "no", 2.0], [None, "yes", 2.0], [None, None, None]])
    out, frag = drop_incomplete_rows(toy)
    assert out.rows == [[1.0, "no", 2.0]] and frag["rows_dropped"] == 2
    with pytest.raises(EmptyTableError):
        drop_incomplete_rows(RawTable([CONT], [[None]]))


def test_rows_with_missing_score_are_dropped():
    t = RawTable([CONT], [[1.0], [2.0]], scores=[4.0, None])
    out, _ = drop_incomplete_rows(t)
    assert out.n_rows == 1 and out.scores == [4.0]


def test_clean_table_report():
    t = RawTable([ColumnSpec("m", "continuous"), CAT3],
                 [[None, "x"], [1.0, "y"], [2.0, None], [3.0, "z"]], scores=[9, 6, 4, 1])
    out, rep = clean_table(t, threshold=0.5)
    assert rep.dropped_columns == {}
    assert rep.rows_dropped == 2 and rep.n_rows == 2
    assert rep.n_features == 4
    assert rep.class_distribution == {"Definite": 0, "Probable": 1, "Possible": 0, "Unlikely": 1}


# -- encoding -----------------------------------------------------------------

def test_one_hot_levels_and_width():
    t = RawTable([CAT3, CAT2, CONT], [["y", "no", 1.0], ["z", "yes", 3.0]])
    fm = one_hot_encode(t)
    assert fm.values.shape == (2, 6)
    np.testing.assert_array_equal(fm.values[0, :3], [0, 1, 0])
    np.testing.assert_array_equal(fm.values[:, 5], [-1.0, 1.0])
    assert fm.columns == ["c3=x", "c3=y", "c3=z", "c2=no", "c2=yes", "a"]


def test_unknown_level_at_transform_is_all_zero():
    enc = FeatureEncoder.fit(RawTable([CAT3], [["x"], ["y"]]))
    wider = RawTable([ColumnSpec("c3", "categorical", ("x", "y", "z", "w"))], [["w"]])
    np.testing.assert_array_equal(enc.transform(wider).values, [[0.0, 0.0, 0.0]])


def test_undeclared_level_is_rejected():
    with pytest.raises(DataError):
        RawTable([CAT3], [["q"]])


def test_constant_column_and_missing_cells():
    enc = FeatureEncoder.fit(RawTable([CONT], [[2.0], [2.0]]))
    assert enc.stats["a"] == (2.0, 1.0)
    with pytest.raises(DataError):
        FeatureEncoder.fit(RawTable([CONT], [[None], [2.0]]))
    with pytest.raises(SchemaError):
        enc.transform(RawTable([ColumnSpec("b", "continuous")], [[1.0]]))


def test_encoder_round_trips_exactly():
    t = generate_synthetic_cohort(SyntheticSpec(n_samples=60, n_features=8, seed=4))
    enc = FeatureEncoder.fit(t)
    again = FeatureEncoder.from_dict(json.loads(json.dumps(enc.to_dict())))
    np.testing.assert_array_equal(enc.transform(t).values, again.transform(t).values)


def test_statistics_ignore_rows_outside_the_fit_set():
    t = generate_synthetic_cohort(SyntheticSpec(n_samples=80, n_features=8, seed=2))
    train, held = np.arange(60), np.arange(60, 80)
    base = FeatureEncoder.fit(t.take(train))
    rows = [list(r) for r in t.rows]
    for i in held:
        rows[i] = [v * 1000.0 if isinstance(v, float) else v for v in rows[i]]
    perturbed = RawTable(t.columns, rows, t.scores)
    moved = FeatureEncoder.fit(perturbed.take(train))
    assert moved.stats == base.stats
    np.testing.assert_array_equal(moved.transform(perturbed.take(train)).values,
                                  base.transform(t.take(train)).values)


# -- score bands --------------------------------------------------------------

@pytest.mark.parametrize("score,label", [
    (9, FHLabel.DEFINITE), (8.01, FHLabel.DEFINITE), (8, FHLabel.PROBABLE), (6, FHLabel.PROBABLE),
    (5, FHLabel.PROBABLE), (4.99, FHLabel.POSSIBLE), (3, FHLabel.POSSIBLE), (2.99, FHLabel.UNLIKELY),
    (2, FHLabel.UNLIKELY), (0, FHLabel.UNLIKELY)])
def test_score_bands(score, label):
    assert dutch_score_to_label(score) is label


@pytest.mark.parametrize("bad", [-0.5, float("nan"), None])
def test_score_domain(bad):
    with pytest.raises(DataError):
        dutch_score_to_label(bad)


# -- CSV ----------------------------------------------------------------------

def mixed_table():
    cols = [CONT, CAT3, CAT2, ColumnSpec("b", "continuous")]
    rows = [[0.1, "x", "no", 1e-17], [None, "y", "yes", -2.5], [3.0, None, "no", 0.3],
            [1 / 3, "z", "yes", 7.0], [2.0, "x", None, None]]
    return RawTable(cols, rows, scores=[1.0, 4.0, 6.5, 9.0, None])


def test_csv_round_trip(tmp_path):
    t = mixed_table()
    write_csv(t, tmp_path / "t.csv")
    back = load_csv(tmp_path / "t.csv")
    assert back.columns == t.columns and back.rows == t.rows and back.scores == t.scores
    assert read_schema(schema_path(tmp_path / "t.csv"))["score_column"] == "dutch_score"


def test_csv_labels_round_trip(tmp_path):
    t = RawTable([CONT], [[1.0], [2.0]], labels=[FHLabel.DEFINITE, FHLabel.UNLIKELY])
    write_csv(t, tmp_path / "l.csv")
    back = load_csv(tmp_path / "l.csv")
    assert back.labels == t.labels and back.class_labels().tolist() == [3, 0]


def test_empty_cell_reads_as_missing(tmp_path):
    write_csv(mixed_table(), tmp_path / "t.csv")
    assert load_csv(tmp_path / "t.csv").rows[1][0] is None


def _write_raw(tmp_path, text, schema):
    (tmp_path / "r.csv").write_text(text)
    (tmp_path / "r.schema.json").write_text(json.dumps(schema))
    return tmp_path / "r.csv"


SCHEMA = {"columns": [{"name": n, "kind": "continuous"} for n in "abcd"]}


def test_ragged_row_names_its_index(tmp_path):
    path = _write_raw(tmp_path, "a,b,c,d\n1,2,3,4\n1,2,3\n", SCHEMA)
    with pytest.raises(ParseError, match="row 1") as info:
        load_csv(path)
    assert info.value.row == 1


@pytest.mark.parametrize("text,where", [
    ("a,b,c,d,e\n1,2,3,4,5\n", "not declared"),
    ("a,b,c\n1,2,3\n", "missing from the header"),
    ("a,b,c,d\n1,oops,3,4\n", "column 'b'"),
    ("a,b,c,d\n1,inf,3,4\n", "not finite"),
    ("", "empty"),
])
def test_parse_errors(tmp_path, text, where):
    with pytest.raises(ParseError, match=where):
        load_csv(_write_raw(tmp_path, text, SCHEMA))


def test_missing_schema_sidecar(tmp_path):
    (tmp_path / "x.csv").write_text("a\n1\n")
    with pytest.raises(SchemaError):
        load_csv(tmp_path / "x.csv")


# -- synthetic cohorts --------------------------------------------------------

def test_default_quotas():
    t = generate_synthetic_cohort(SyntheticSpec())
    counts = np.bincount(t.class_labels(), minlength=4)
    assert dict(zip(["Unlikely", "Possible", "Probable", "Definite"], counts.tolist())) == \
        {"Unlikely": 803, "Possible": 640, "Probable": 102, "Definite": 46}
    assert len(t.columns) == 50 and t.n_rows == 1591


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 3000), st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4))
def test_quotas_within_one_of_target(n, raw):
    priors = np.array(raw) / sum(raw)
    counts = quota_counts(n, priors)
    assert sum(counts) == n
    assert np.all(np.abs(np.array(counts) - priors * n) < 1.0)


def test_same_seed_gives_identical_csv(tmp_path):
    spec = SyntheticSpec(n_samples=200, n_features=20, seed=9, missing_rates={"hdl_c": 0.1})
    write_csv(generate_synthetic_cohort(spec), tmp_path / "a.csv")
    write_csv(generate_synthetic_cohort(spec), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    write_csv(generate_synthetic_cohort(SyntheticSpec(n_samples=200, n_features=20, seed=10)),
              tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_missing_rates_are_injected_exactly():
    spec = SyntheticSpec(n_samples=300, n_features=12, default_missing_rate=0.02,
                         missing_rates={"ldl_c": 0.1})
    t = generate_synthetic_cohort(spec)
    miss = t.missing_mask().sum(axis=0)
    assert miss[t.column_names.index("ldl_c")] == 30
    assert (np.delete(miss, t.column_names.index("ldl_c")) == 6).all()
    clean, rep = clean_table(t)
    assert "ldl_c" in rep.dropped_columns and "ldl_c" not in clean.column_names


def test_scores_agree_with_quota_labels():
    t = generate_synthetic_cohort(SyntheticSpec(n_samples=400, n_features=10, seed=1))
    assert all(s is not None for s in t.scores)
    assert t.labels is None  # labels come from the score bands


def test_noise_free_cohort_is_linearly_separable():
    t = generate_synthetic_cohort(SyntheticSpec(noise=0.0, n_informative=50))
    fm = one_hot_encode(t.select_columns(informative_columns(SyntheticSpec(n_informative=50))))
    y = t.class_labels()
    b = train_baseline("LogisticRegression", fm.values, y, {"l2": 0.0, "steps": 10000, "lr": 1.0})
    assert (predict_baseline(b, fm.values)[0] == y).mean() >= 0.99


@pytest.mark.parametrize("kwargs", [
    dict(priors=(0.5, 0.5, 0.5, 0.5)), dict(priors=(1.0, 0.0, 0.0)), dict(n_informative=0),
    dict(n_informative=60), dict(noise=-1.0), dict(missing_rates={"nope": 0.1}),
    dict(missing_rates={"ldl_c": 1.0}), dict(n_samples=3)])
def test_spec_validation(kwargs):
    with pytest.raises(SpecError):
        generate_synthetic_cohort(SyntheticSpec(**kwargs))


def test_separable_fixture_shape():
    t = separable_fixture()
    assert t.n_rows == 64 and len(t.columns) == 10
    assert np.bincount(t.class_labels()).tolist() == [16, 16, 16, 16]
    with pytest.raises(SpecError):
        separable_fixture(n_rows=30)
