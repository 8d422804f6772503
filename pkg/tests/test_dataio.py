import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fatigue_sr.baselines import load_state, predict_dataset, solve_life, LoadState
from fatigue_sr.dataio import (DATASET_FIELDS, DatasetUnavailable, FatigueRecord, InvalidK, LengthMismatch,
                               SchemaMismatch, compute_metrics, design_matrix, kfold_split, load_conditions,
                               load_dataset, preprocess_dr, within_band, write_dataset)

# the phase blocks of the published GH4169 room-temperature table
PHASE_COUNTS = {0.0: 6, 45.0: 6, 90.0: 5}


class TestLoad:
    def test_first_row(self, data1):
        r = data1[0]
        assert (r.phase_deg, r.eps_a_pct, r.gamma_a_pct, r.sigma_a_mpa, r.tau_a_mpa, r.nf_cycles) == \
            (0.0, 1.221, 1.598, 937.7, 478.0, 901)

    def test_published_rows(self, data1):
        counts = {}
        for r in data1:
            counts[r.phase_deg] = counts.get(r.phase_deg, 0) + 1
        assert counts == PHASE_COUNTS

    def test_lives_in_range(self, data1):
        lives = [r.nf_cycles for r in data1]
        assert 5e2 <= min(lives) and max(lives) <= 4.5e4

    def test_misspelled_header(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("phase_deg,eps_pct,gamma_a_pct,sigma_a_mpa,tau_a_mpa,nf_cycles\n0,1,1,1,1,10\n")
        with pytest.raises(SchemaMismatch, match="eps_a_pct"):
            load_dataset(p)

    def test_bad_row_names_index(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(",".join(DATASET_FIELDS) + "\n0,1,1,1,1,10\n0,1,1,1,1,0\n")
        with pytest.raises(ValueError, match="row 1"):
            load_dataset(p)

    def test_non_integer_life(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text(",".join(DATASET_FIELDS) + "\n0,1,1,1,1,10.5\n")
        with pytest.raises(ValueError):
            load_dataset(p)

    @pytest.mark.parametrize("name", ["data2", "data3"])
    def test_unbundled_unavailable(self, name, monkeypatch):
        monkeypatch.delenv("RSL_DATA_DIR", raising=False)
        with pytest.raises(DatasetUnavailable):
            load_dataset(name)

    def test_data_dir_override(self, tmp_path, monkeypatch, data1):
        write_dataset(data1[:3], tmp_path / "data3.csv")
        monkeypatch.setenv("RSL_DATA_DIR", str(tmp_path))
        assert load_dataset("data3") == data1[:3]

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope.csv")

    def test_round_trip(self, tmp_path, data1):
        write_dataset(data1, tmp_path / "out.csv")
        assert load_dataset(tmp_path / "out.csv") == data1

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from([0.0, 45.0, 90.0]), st.floats(0, 5), st.floats(0, 5),
                              st.floats(0, 3000), st.floats(0, 3000), st.integers(1, 10**7)), min_size=1, max_size=20))
    def test_round_trip_property(self, tmp_path_factory, rows):
        recs = [FatigueRecord(*r) for r in rows]
        p = tmp_path_factory.mktemp("rt") / "d.csv"
        write_dataset(recs, p)
        assert load_dataset(p) == recs

    def test_conditions(self):
        conds = load_conditions()
        assert [c.condition for c in conds] == ["S1", "S2", "S3", "S4"]
        assert all(c.phase_deg == 0.0 for c in conds)
        assert conds[0].tau_a_mpa == 854.08


class TestPreprocess:
    def test_row1_features(self, data1, gh25):
        s = preprocess_dr(data1[:1], gh25)[0]
        assert s.features[3] == pytest.approx(0.71343, abs=5e-6)
        assert s.features[2] == pytest.approx(0.47239, abs=5e-6)
        assert s.features[:2] == (1.221, 1.598)
        assert s.target_log == pytest.approx(math.log(901), rel=1e-15)

    def test_zero_stress(self, gh25):
        s = preprocess_dr([FatigueRecord(0, 0.5, 0.7, 0.0, 0.0, 100)], gh25)[0]
        assert s.features == (0.5, 0.7, 0.0, 0.0)

    def test_fraction_units(self, data1, gh25):
        pct = design_matrix(preprocess_dr(data1, gh25))[0]
        frac = design_matrix(preprocess_dr(data1, gh25, units="fraction"))[0]
        np.testing.assert_allclose(frac, pct / 100, rtol=1e-15)

    def test_bad_units(self, data1, gh25):
        with pytest.raises(ValueError):
            preprocess_dr(data1, gh25, units="permille")

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 2000), st.floats(0, 2000), st.floats(0, 2000), st.floats(0, 2000), st.floats(0.1, 5))
    def test_linear_in_stress(self, gh25, s1, t1, s2, t2, a):
        def feats(s, t):
            return np.array(preprocess_dr([FatigueRecord(0, 1, 1, s, t, 10)], gh25)[0].features[2:])
        np.testing.assert_allclose(feats(a * s1 + s2, a * t1 + t2), a * feats(s1, t1) + feats(s2, t2),
                                   rtol=1e-12, atol=1e-12)

    def test_conditions_have_no_life(self, gh25):
        X, y = design_matrix(preprocess_dr(load_conditions(), gh25))
        assert X.shape == (4, 4) and np.isnan(y).all()

    def test_deterministic(self, data1, gh25):
        assert preprocess_dr(data1, gh25) == preprocess_dr(data1, gh25)


class TestUnitsAdapter:
    def test_percent_and_fraction_pipelines_agree(self, data1, gh25):
        via_records = predict_dataset("mwhs", data1, gh25).predicted
        direct = [solve_life("mwhs", LoadState(r.eps_a_pct / 100, r.gamma_a_pct / 100, r.sigma_a_mpa,
                                               r.tau_a_mpa, r.phase_deg), gh25)[0] for r in data1]
        np.testing.assert_array_equal(via_records, direct)

    def test_adapter_divides_strains_only(self, data1):
        st_ = load_state(data1[0])
        assert (st_.eps_a, st_.gamma_a, st_.sigma_a, st_.tau_a) == (0.01221, 0.01598, 937.7, 478.0)


class TestMetrics:
    def test_perfect(self):
        obs = np.array([100.0, 1000.0, 5000.0])
        m = compute_metrics(obs, obs)
        assert (m.rmse_cycles, m.r2, m.frac_within_2x, m.frac_within_3x, m.n_excluded) == (0.0, 1.0, 1.0, 1.0, 0)

    def test_mean_prediction(self):
        obs = np.array([100.0, 1000.0, 5000.0])
        assert compute_metrics(obs, np.full(3, obs.mean())).r2 == pytest.approx(0.0, abs=1e-15)

    def test_boundaries_inclusive(self):
        m = compute_metrics([1000.0], [2000.0])
        assert m.frac_within_2x == 1.0 and m.frac_within_3x == 1.0
        assert within_band([1000.0], [500.0], 2)[0]
        assert within_band([1000.0], [3000.0], 3)[0] and not within_band([1000.0], [3000.1], 3)[0]

    def test_known_values(self):
        m = compute_metrics([100.0, 200.0], [110.0, 180.0])
        assert m.rmse_cycles == pytest.approx(math.sqrt((100 + 400) / 2), rel=1e-15)
        assert m.r2 == pytest.approx(1 - 500 / 5000, rel=1e-15)

    def test_excluded(self):
        m = compute_metrics([100.0, 200.0, 300.0], [100.0, np.nan, np.inf])
        assert m.n_excluded == 2 and m.rmse_cycles == 0.0

    def test_all_excluded(self):
        m = compute_metrics([100.0], [np.nan])
        assert math.isnan(m.rmse_cycles) and m.n_excluded == 1 and m.frac_within_3x == 0.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            compute_metrics([1.0, 2.0], [1.0])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(1, 1e5), st.floats(1, 1e5)), min_size=2, max_size=30), st.integers(0, 1000))
    def test_invariants_and_permutation(self, pairs, seed):
        obs, pred = map(np.array, zip(*pairs))
        a = compute_metrics(obs, pred)
        perm = np.random.default_rng(seed).permutation(len(obs))
        b = compute_metrics(obs[perm], pred[perm])
        assert 0 <= a.frac_within_2x <= a.frac_within_3x <= 1
        assert a.rmse_cycles == pytest.approx(b.rmse_cycles, rel=1e-12)
        assert (a.frac_within_2x, a.frac_within_3x) == (b.frac_within_2x, b.frac_within_3x)
        if math.isfinite(a.r2):
            assert a.r2 == pytest.approx(b.r2, rel=1e-9, abs=1e-9)

    def test_report(self):
        text = compute_metrics([100.0], [150.0]).report()
        for key in ("rmse_cycles", "r2", "frac_within_2x", "frac_within_3x", "n_excluded"):
            assert key in text


class TestKFold:
    def test_eighteen_by_ten(self):
        sizes = sorted(len(v) for _, v in kfold_split(18, 10, seed=0))
        assert sizes == [1, 1] + [2] * 8

    def test_singletons(self):
        assert all(len(v) == 1 for _, v in kfold_split(10, 10, seed=3))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 60), st.data())
    def test_partition(self, n, data):
        k = data.draw(st.integers(2, n))
        seed = data.draw(st.integers(0, 2**32 - 1))
        folds = kfold_split(n, k, seed)
        vals = np.concatenate([v for _, v in folds])
        assert sorted(vals.tolist()) == list(range(n))
        sizes = [len(v) for _, v in folds]
        assert max(sizes) - min(sizes) <= 1
        for tr, v in folds:
            assert set(tr.tolist()) | set(v.tolist()) == set(range(n)) and not set(tr.tolist()) & set(v.tolist())

    def test_seeded(self):
        a = kfold_split(17, 10, seed=5)
        b = kfold_split(17, 10, seed=5)
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))

    @pytest.mark.parametrize("n,k", [(5, 6), (5, 1), (5, 0)])
    def test_invalid(self, n, k):
        with pytest.raises(InvalidK):
            kfold_split(n, k)
