import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sclab.data import (UNLABELED, Dataset, ToyDatasetSpec, default_toy_gmm, isotropic_gmm,
                        load_dataset, make_toy_dataset, save_dataset)
from sclab.errors import ParseError


class TestToyDataset:
    def test_full_labels_leave_unlabeled_empty(self):
        lab, unl, test = make_toy_dataset(ToyDatasetSpec(default_toy_gmm(), 200, 100))
        assert len(lab) == 200 and len(unl) == 0 and len(test) == 100

    def test_labeled_count(self):
        lab, unl, _ = make_toy_dataset(ToyDatasetSpec(default_toy_gmm(), 1000, 10, 0.05))
        assert len(lab) == 50 and len(unl) == 950
        assert np.all(unl.labels == UNLABELED)
        assert np.all(lab.labels >= 0)

    def test_test_set_always_labeled(self):
        _, _, test = make_toy_dataset(ToyDatasetSpec(default_toy_gmm(), 100, 100, 0.2))
        assert np.all(test.labels >= 0)

    def test_class_frequencies_match_priors(self):
        spec = isotropic_gmm([[(0.0, 0.0)], [(3.0, 0.0)], [(0.0, 3.0)]], 0.5, [0.2, 0.3, 0.5])
        _, labels = spec.sample(10_000, np.random.default_rng(0))
        counts = np.bincount(labels, minlength=3)
        for c, p in zip(counts, spec.priors):
            assert abs(c - 10_000 * p) < 3 * np.sqrt(10_000 * p * (1 - p))

    def test_split_partitions_training_draw(self):
        spec = ToyDatasetSpec(default_toy_gmm(), 300, 10, 0.2, seed=4)
        lab, unl, _ = make_toy_dataset(spec)
        full = ToyDatasetSpec(default_toy_gmm(), 300, 10, 1.0, seed=4)
        all_lab, _, _ = make_toy_dataset(full)
        ours = np.sort(np.concatenate([lab.x, unl.x]), axis=0)
        assert np.array_equal(ours, np.sort(all_lab.x, axis=0))

    def test_seed_determinism(self):
        spec = ToyDatasetSpec(default_toy_gmm(), 100, 50, 0.2, seed=7)
        assert make_toy_dataset(spec) == make_toy_dataset(spec)

    def test_means_must_be_inside_grid_box(self):
        with pytest.raises(ValueError):
            ToyDatasetSpec(isotropic_gmm([[(20.0, 0.0)], [(0.0, 0.0)]], 1.0))

    def test_need_one_labeled_point(self):
        with pytest.raises(ValueError):
            ToyDatasetSpec(default_toy_gmm(), 10, 10, 0.01)


class TestPersistence:
    def test_three_point_round_trip(self, tmp_path):
        d = Dataset([[0.1, 0.2], [-1e-300, 3.5e10], [np.pi, -np.e]], [0, UNLABELED, 1])
        save_dataset(tmp_path / "d.csv", d)
        assert load_dataset(tmp_path / "d.csv") == d

    def test_unlabeled_rows_have_empty_field(self, tmp_path):
        save_dataset(tmp_path / "d.csv", Dataset([[1.0, 2.0]], [UNLABELED]))
        lines = open(tmp_path / "d.csv").read().splitlines()
        assert lines == ["x,y,label", "1.0,2.0,"]

    def test_large_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        d = Dataset(rng.standard_normal((10_000, 2)) * 7, rng.integers(-1, 2, size=10_000))
        save_dataset(tmp_path / "d.csv", d)
        back = load_dataset(tmp_path / "d.csv")
        h = lambda ds: hashlib.sha256(ds.x.tobytes() + ds.labels.tobytes()).hexdigest()
        assert h(back) == h(d)

    @pytest.mark.parametrize("body,line", [("x,y\n", 1), ("x,y,label\n1,2,0\n1,oops,0\n", 3),
                                           ("x,y,label\n1,2\n", 2), ("x,y,label\n1,2,-3\n", 2)])
    def test_parse_errors_report_line(self, tmp_path, body, line):
        (tmp_path / "bad.csv").write_text(body)
        with pytest.raises(ParseError) as info:
            load_dataset(tmp_path / "bad.csv")
        assert info.value.details["line"] == line

    def test_empty_file_body(self, tmp_path):
        (tmp_path / "e.csv").write_text("x,y,label\n")
        assert len(load_dataset(tmp_path / "e.csv")) == 0


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(allow_nan=False, allow_infinity=False, width=64),
                          st.floats(allow_nan=False, allow_infinity=False, width=64),
                          st.integers(-1, 5)), min_size=1, max_size=20))
def test_round_trip_property(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    d = Dataset([r[:2] for r in rows], [r[2] for r in rows])
    save_dataset(path, d)
    assert load_dataset(path) == d
