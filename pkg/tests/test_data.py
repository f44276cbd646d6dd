import numpy as np
import pytest
from conftest import ADULT_TEST, ADULT_TRAIN, needs_adult
from hypothesis import given, settings
from hypothesis import strategies as st

from tlleak.data import (
    ATTRIBUTES,
    AdultParseError,
    ConfigError,
    load_adult,
    load_dataset,
    make_batch_property_dataset,
    make_property_dataset,
    preprocess,
    row_has_property,
    save_dataset,
    shadow_split,
    split_domains,
    synth_gaussian,
)

ROW = "39, State-gov, 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, {race}, {sex}, 2174, 0, 40, {country}, {income}"


def _write_adult(tmp_path, train_rows, test_rows):
    tr, te = tmp_path / "adult.data", tmp_path / "adult.test"
    tr.write_text("\n".join(train_rows) + "\n")
    te.write_text("|1x3 Cross validator\n" + "\n".join(test_rows) + "\n")
    return tr, te


def _row(race="White", sex="Male", country="United-States", income="<=50K"):
    return ROW.format(race=race, sex=sex, country=country, income=income)


class TestLoadSynthetic:
    def test_label_normalisation(self, tmp_path):
        tr, te = _write_adult(tmp_path, [_row(income=">50K")], [_row(income=">50K.")])
        raw = load_adult(tr, te)
        assert list(raw.income) == [">50K", ">50K"]
        assert list(raw.source_file) == ["train", "test"]

    def test_wrong_field_count_names_line(self, tmp_path):
        bad = ", ".join(_row().split(", ")[:13])
        tr, te = _write_adult(tmp_path, [_row(), _row(), bad], [_row()])
        with pytest.raises(AdultParseError, match=r"adult\.data:3"):
            load_adult(tr, te)

    def test_missing_policy(self, tmp_path):
        tr, te = _write_adult(tmp_path, [_row(), _row(race="?")], [_row(country="?")])
        dropped = load_adult(tr, te)
        assert len(dropped) == 1 and dropped.n_dropped == 2
        kept = load_adult(tr, te, drop_missing=False)
        assert len(kept) == 3 and "?" in set(kept.columns["race"])

    def test_blank_lines_skipped(self, tmp_path):
        tr, te = _write_adult(tmp_path, [_row(), "", _row()], [_row(), ""])
        assert len(load_adult(tr, te)) == 3

    def test_provenance_lines(self, tmp_path):
        tr, te = _write_adult(tmp_path, [_row(), _row()], [_row()])
        raw = load_adult(tr, te)
        assert list(raw.row_ids) == ["train:1", "train:2", "test:2"]


@needs_adult
class TestAdultFiles:
    def test_complete_rows(self):
        raw = load_adult(ADULT_TRAIN, ADULT_TEST)
        assert len(raw) == 45_222
        assert len(raw) + raw.n_dropped == 32_561 + 16_281

    def test_labels_normalised(self, adult_raw):
        assert set(adult_raw.income) == {"<=50K", ">50K"}

    def test_domain_counts(self, adult_pair):
        got = [len(adult_pair.source.train), len(adult_pair.source.test), len(adult_pair.target.train), len(adult_pair.target.test)]
        for g, want in zip(got, [29_170, 14_662, 3_391, 1_619]):
            assert abs(g - want) <= 0.02 * want

    def test_domains_partition_rows(self, adult_raw, adult_pair):
        ids = [set(s.raw.row_ids) for d in (adult_pair.source, adult_pair.target) for s in (d.train, d.test)]
        assert sum(len(s) for s in ids) == len(adult_raw)
        assert set().union(*ids) == set(adult_raw.row_ids)
        assert not (ids[0] | ids[1]) & (ids[2] | ids[3])
        assert len(adult_pair.source.train) > len(adult_pair.target.train)

    def test_country_not_a_feature(self, adult_pair):
        assert "native-country" not in adult_pair.source.train.feature_sources
        assert adult_pair.source.train.feature_names == adult_pair.target.test.feature_names

    def test_drop_sex(self, adult_raw):
        ds = preprocess(adult_raw, drop_attrs=["sex"])
        assert "sex" not in ds.feature_sources
        assert not any(n.startswith("sex") for n in ds.feature_names)

    def test_onehot_groups_sum_to_one(self, adult_raw):
        ds = preprocess(adult_raw)
        src = np.array(ds.feature_sources)
        for attr in set(ds.feature_sources):
            cols = src == attr
            if cols.sum() > 1:
                np.testing.assert_array_equal(ds.X[:, cols].sum(axis=1), 1.0)

    def test_age_zscore(self, adult_raw):
        ds = preprocess(adult_raw)
        age = ds.X[:, ds.feature_names.index("age")]
        assert abs(age.mean()) < 1e-9
        assert abs(age.std() - 1) < 1e-9

    def test_label_convention(self, adult_raw):
        default = preprocess(adult_raw)
        literal = preprocess(adult_raw, positive_income=">50K")
        np.testing.assert_array_equal(default.y, 1 - literal.y)
        np.testing.assert_array_equal(literal.y, adult_raw.income == ">50K")

    def test_preprocess_idempotent(self, adult_raw):
        a, b = preprocess(adult_raw, drop_attrs=["race"]), preprocess(adult_raw, drop_attrs=["race"])
        np.testing.assert_array_equal(a.X, b.X)
        assert a.feature_names == b.feature_names

    def test_unknown_attribute(self, adult_raw):
        with pytest.raises(ConfigError):
            preprocess(adult_raw, drop_attrs=["shoe-size"])

    @pytest.mark.parametrize("attr,value", [("sex", "Male"), ("race", "White")])
    def test_property_dataset(self, adult_pair, attr, value):
        ds = adult_pair.source.train
        prop = make_property_dataset(ds, attr, value)
        np.testing.assert_array_equal(prop.prop, ds.attribute(attr) == value)
        width = ds.feature_sources.count(attr)
        assert prop.n_features == ds.n_features - width
        assert attr not in prop.feature_sources
        np.testing.assert_array_equal(prop.y, ds.y)

    def test_property_unknown_attribute(self, adult_pair):
        with pytest.raises(ConfigError):
            make_property_dataset(adult_pair.source.train, "eye-colour", "blue")

    def test_batches_recomputable(self, adult_pair):
        ds = adult_pair.source.train
        bd = make_batch_property_dataset(ds, 8, "any_female", seed=3)
        assert bd.batches.shape == (len(ds) // 8, 8)
        has = row_has_property(ds, "any_female")
        np.testing.assert_array_equal(bd.labels, has[bd.batches].any(axis=1))
        assert len(np.unique(bd.batches)) == bd.batches.size

    @pytest.mark.xfail(
        reason="Random batching of B=8 rows gives ~65% positive any-non-white batches; the published 38/528 split "
        "cannot arise from this rule, so the count is not reproducible",
        strict=True,
    )
    def test_bprop_race_published_counts(self, adult_pair):
        pos, neg = make_batch_property_dataset(adult_pair.source.train, 8, "any_non_white", seed=0).counts()
        assert abs(pos - 38) <= 0.2 * 38 and abs(neg - 528) <= 0.2 * 528


class TestBatchRules:
    def _ds(self, tmp_path, races, sexes):
        rows = [_row(race=r, sex=s) for r, s in zip(races, sexes)]
        tr, te = _write_adult(tmp_path, rows, [_row()])
        raw = load_adult(tr, te)
        return preprocess(raw.take(np.arange(len(rows))))

    def test_all_white_is_negative(self, tmp_path):
        ds = self._ds(tmp_path, ["White"] * 8, ["Male"] * 8)
        bd = make_batch_property_dataset(ds, 8, "any_non_white", seed=0)
        assert list(bd.labels) == [0]

    def test_one_female_is_positive(self, tmp_path):
        ds = self._ds(tmp_path, ["White"] * 8, ["Male"] * 7 + ["Female"])
        bd = make_batch_property_dataset(ds, 8, "any_female", seed=0)
        assert list(bd.labels) == [1]

    def test_partial_batch_dropped(self, tmp_path):
        ds = self._ds(tmp_path, ["White"] * 11, ["Male"] * 11)
        assert make_batch_property_dataset(ds, 4, "any_female", seed=0).batches.shape == (2, 4)

    def test_batch_too_large(self, tmp_path):
        ds = self._ds(tmp_path, ["White"] * 3, ["Male"] * 3)
        with pytest.raises(ValueError):
            make_batch_property_dataset(ds, 4, "any_female", seed=0)

    def test_unknown_rule(self, tmp_path):
        ds = self._ds(tmp_path, ["White"] * 3, ["Male"] * 3)
        with pytest.raises(ConfigError):
            make_batch_property_dataset(ds, 2, "any_tall", seed=0)


class TestShadowSplit:
    def test_even_disjoint(self):
        pool = synth_gaussian(10, 2, 1.0, 0)
        sh = shadow_split(pool, 3, seed=1)
        for tr, out in sh.partitions:
            assert len(tr) == 5 and len(out) == 5
            assert not set(tr) & set(out)

    @given(st.integers(2, 200), st.integers(1, 4), st.integers(0, 1000))
    @settings(max_examples=40)
    def test_halves(self, n, k, seed):
        sh = shadow_split(synth_gaussian(n, 2, 1.0, 0), k, seed)
        assert len(sh) == k
        for tr, out in sh.partitions:
            assert abs(len(tr) - len(out)) <= 1
            assert len(tr) + len(out) == n and not set(tr) & set(out)

    def test_shadows_differ(self):
        sh = shadow_split(synth_gaussian(100, 2, 1.0, 0), 3, seed=1)
        assert set(sh.partitions[0][0]) != set(sh.partitions[1][0])

    def test_invalid(self):
        with pytest.raises(ValueError):
            shadow_split(synth_gaussian(1, 2, 1.0, 0), 3, 0)
        with pytest.raises(ValueError):
            shadow_split(synth_gaussian(10, 2, 1.0, 0), 0, 0)


class TestSynth:
    def test_deterministic(self):
        a, b = synth_gaussian(50, 3, 2.0, 4), synth_gaussian(50, 3, 2.0, 4)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)

    def test_class_gap(self):
        ds = synth_gaussian(20_000, 2, 3.0, 0)
        gap = ds.X[ds.y == 1, 0].mean() - ds.X[ds.y == 0, 0].mean()
        assert gap == pytest.approx(3.0, abs=0.05)


def test_dataset_round_trip(tmp_path):
    ds = synth_gaussian(30, 4, 2.0, 1, prop_separation=1.0)
    save_dataset(ds, tmp_path / "d.txt")
    back = load_dataset(tmp_path / "d.txt")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.prop, ds.prop)
    assert back.feature_names == ds.feature_names


def test_attribute_names():
    assert len(ATTRIBUTES) == 14
