import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from claimcomb import data, metrics
from claimcomb.data import ForecasterSpec, SimConfig, SplitSpec
from claimcomb.exceptions import InfeasibleConfigError, InvalidInputError, SchemaError

HEADER = ",".join(data.POLICY_COLUMNS)
ROWS = [
    "1.06,0.30,0,0,0.0,HBACK,3,F,C,2",
    "1.03,0.65,1,1,669.51,SEDAN,2,F,A,4",
    "3.26,0.57,0,0,0.0,UTE,2,M,E,2",
]


def write_csv(tmp_path, lines, name="policies.csv"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


@pytest.fixture(scope="module")
def sim50k():
    return data.simulate_claims(SimConfig(n=50000, seed=11))


class TestLoadPolicies:
    def test_three_rows(self, tmp_path):
        pol = data.load_policies(write_csv(tmp_path, [HEADER, *ROWS]))
        assert len(pol) == 3
        assert pol.veh_body.tolist() == ["HBACK", "SEDAN", "UTE"]
        assert pol.claimcst0.tolist() == [0.0, 669.51, 0.0]
        assert pol.record(1).numclaims == 1 and pol.issues == []

    def test_levels_interned(self, tmp_path):
        pol = data.load_policies(write_csv(tmp_path, [HEADER, *ROWS, ROWS[0]]))
        assert pol.veh_body[0] is pol.veh_body[3]

    def test_extra_columns_ignored(self, tmp_path):
        lines = [HEADER + ",note", *(r + ",x" for r in ROWS)]
        assert len(data.load_policies(write_csv(tmp_path, lines))) == 3

    def test_missing_column_named(self, tmp_path):
        cols = [c for c in data.POLICY_COLUMNS if c != "claimcst0"]
        idx = data.POLICY_COLUMNS.index("claimcst0")
        rows = [",".join(v for j, v in enumerate(r.split(",")) if j != idx) for r in ROWS]
        with pytest.raises(SchemaError, match="claimcst0"):
            data.load_policies(write_csv(tmp_path, [",".join(cols), *rows]))

    @pytest.mark.parametrize(
        "row, match",
        [
            ("abc,0.30,0,0,0.0,HBACK,3,F,C,2", "veh_value"),
            ("1.0,0.30,0,0,-5.0,HBACK,3,F,C,2", "negative claimcst0"),
            ("1.0,0.30,0,0,nan,HBACK,3,F,C,2", "non-finite"),
            ("1.0,0.30,0,1.5,0.0,HBACK,3,F,C,2", "integer"),
        ],
    )
    def test_bad_values(self, tmp_path, row, match):
        with pytest.raises(SchemaError, match=match):
            data.load_policies(write_csv(tmp_path, [HEADER, row]))

    def test_inconsistent_rows_warn_and_load(self, tmp_path):
        bad = [
            "1.0,0.5,1,0,0.0,HBACK,3,F,C,2",  # clm without a count
            "1.0,0.5,0,0,12.0,HBACK,3,F,C,2",  # cost without a claim
            "1.0,1.5,0,0,0.0,HBACK,3,F,C,2",  # exposure above one
        ]
        with pytest.warns(data.ConsistencyWarning, match="3 row"):
            pol = data.load_policies(write_csv(tmp_path, [HEADER, *ROWS, *bad]))
        assert len(pol) == 6
        assert [s.split(":")[0] for s in pol.issues] == ["row 4", "row 5", "row 6"]

    def test_round_trip(self, tmp_path):
        pol = data.simulate_claims(SimConfig(n=300, seed=3))
        p = tmp_path / "out.csv"
        data.write_policies(pol, p)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            back = data.load_policies(p)
        for c in data.POLICY_COLUMNS:
            assert getattr(back, c).tolist() == getattr(pol, c).tolist()

    def test_records_are_read_only(self, tmp_path):
        pol = data.load_policies(write_csv(tmp_path, [HEADER, *ROWS]))
        with pytest.raises(ValueError):
            pol.claimcst0[0] = 1.0


class TestPredictionsFile:
    def test_round_trip(self, tmp_path, rng):
        m = rng.gamma(1.0, 100.0, size=(7, 3))
        p = tmp_path / "pred.csv"
        data.write_predictions(p, ["A1", "A2", "A3"], m)
        names, ids, back = data.read_predictions(p)
        assert names == ["A1", "A2", "A3"] and ids.tolist() == list(range(7))
        assert np.array_equal(back, m)

    @pytest.mark.parametrize(
        "text, match",
        [("", "empty"), ("id,A1\n0,1\n", "row_id"), ("row_id,A1\n0,1,2\n", "fields"), ("row_id,A1\n0,x\n", "A1")],
    )
    def test_schema_errors(self, tmp_path, text, match):
        p = tmp_path / "pred.csv"
        p.write_text(text)
        with pytest.raises(SchemaError, match=match):
            data.read_predictions(p)


class TestSplit:
    def test_deterministic(self):
        spec = SplitSpec(7, 4, 3, 3, weight_subsample=2)
        first = data.split_indices(10, spec)
        for _ in range(3):
            again = data.split_indices(10, spec)
            assert all(np.array_equal(a, b) for a, b in zip(first, again))

    def test_reference_counts(self):
        spec = SplitSpec.reference(seed=1)
        assert (spec.n_train, spec.n_valid, spec.n_holdout) == (22610, 22629, 22617)
        tr, va, ho = data.split_indices(67856, spec)
        assert (tr.size, va.size, ho.size) == (22610, 22629, 22617)
        assert spec.weight_subsample == 5000

    def test_seeds_differ(self):
        a = data.split_indices(100, SplitSpec(0, 40, 30, 30, 10))
        b = data.split_indices(100, SplitSpec(1, 40, 30, 30, 10))
        assert not np.array_equal(a[0], b[0])

    @given(st.integers(0, 2**32 - 1), st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
    def test_partition(self, seed, a, b, c):
        parts = data.split_indices(a + b + c, SplitSpec(seed, a, b, c, 0))
        joined = np.concatenate(parts)
        assert sorted(joined.tolist()) == list(range(a + b + c))
        assert [p.size for p in parts] == [a, b, c]

    def test_counts_must_sum(self):
        with pytest.raises(InfeasibleConfigError, match="!= 10"):
            data.split_indices(10, SplitSpec(0, 4, 3, 4, 0))

    @pytest.mark.parametrize("counts", [(-1, 3, 3, 0), (4, 3, 3, 4), (4.5, 3, 3, 0)])
    def test_invalid_specs(self, counts):
        with pytest.raises(InfeasibleConfigError):
            SplitSpec(0, *counts)

    def test_split_policies(self):
        pol = data.simulate_claims(SimConfig(n=30, seed=2))
        tr, va, ho = data.split(pol, SplitSpec.thirds(30, seed=5))
        assert (len(tr), len(va), len(ho)) == (10, 10, 10)
        assert sorted(np.concatenate([tr.veh_value, va.veh_value, ho.veh_value]).tolist()) == sorted(
            pol.veh_value.tolist()
        )

    def test_thirds_remainder_goes_to_holdout(self):
        spec = SplitSpec.thirds(20000, seed=0)
        assert (spec.n_train, spec.n_valid, spec.n_holdout, spec.weight_subsample) == (6666, 6666, 6668, 5000)


class TestWeightSubsample:
    def test_deterministic_distinct_sorted(self):
        a = data.weight_training_subsample(100, 30, seed=9)
        assert np.array_equal(a, data.weight_training_subsample(100, 30, seed=9))
        assert np.unique(a).size == 30 and np.all(np.diff(a) > 0)
        assert a.min() >= 0 and a.max() < 100

    def test_accepts_collections(self):
        assert data.weight_training_subsample(list(range(12)), 12, 0).tolist() == list(range(12))

    def test_too_many(self):
        with pytest.raises(InfeasibleConfigError):
            data.weight_training_subsample(10, 11, 0)

    def test_uniform_inclusion_frequency(self):
        n, k, seeds = 40, 10, 1000
        counts = np.zeros(n)
        for s in range(seeds):
            counts[data.weight_training_subsample(n, k, s)] += 1
        p = k / n
        sigma = math.sqrt(seeds * p * (1 - p))
        assert np.all(np.abs(counts - seeds * p) <= 3 * sigma)
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_weight_rows_inside_valid(self):
        spec = SplitSpec.thirds(300, seed=4, weight_subsample=50)
        _, va, _ = data.split_indices(300, spec)
        rows = data.weight_rows(spec, va)
        assert rows.size == 50 and set(rows.tolist()) <= set(va.tolist())


class TestSimulator:
    def test_zero_rate_and_skewness(self, sim50k):
        y = sim50k.y
        assert 0.92 <= np.mean(y == 0) <= 0.96
        assert stats.skew(y[y > 0]) > 2

    def test_consistency_exact(self, sim50k):
        assert np.array_equal(sim50k.clm == 1, sim50k.numclaims >= 1)
        assert np.array_equal(sim50k.numclaims >= 1, sim50k.claimcst0 > 0)
        assert np.all((sim50k.exposure > 0) & (sim50k.exposure <= 1))

    def test_mean_cost_within_three_se(self, sim50k):
        cfg = SimConfig()
        expected = cfg.resolved_rate() * 0.5 * cfg.gamma_shape * cfg.gamma_scale
        y = sim50k.y
        assert abs(y.mean() - expected) <= 3 * y.std(ddof=1) / math.sqrt(y.size)

    def test_expected_cost_matches_realised_total(self, sim50k):
        mu = sim50k.expected_cost
        assert abs(sim50k.y.sum() / mu.sum() - 1) < 0.05

    def test_counts_poisson_given_rate(self, sim50k):
        lam = sim50k.claim_rate
        z = (sim50k.numclaims.sum() - lam.sum()) / math.sqrt(lam.sum())
        assert abs(z) < 4

    def test_zero_rate_solver(self):
        for target in (0.5, 0.94, 0.99):
            r = data.rate_for_zero_rate(target)
            assert data.expected_zero_rate(r) == pytest.approx(target, abs=1e-10)

    def test_multiplier_grid_normalised(self):
        m, w = data._multiplier_grid()
        assert w.sum() == pytest.approx(1.0) and (w @ m) == pytest.approx(1.0, rel=1e-10)
        assert data.expected_zero_rate(1e-9) == pytest.approx(1.0)

    def test_zero_rate_matches_monte_carlo(self):
        # Independent estimate: draw the multiplier by simulation, integrate
        # exposure in closed form.
        rate = data.rate_for_zero_rate(0.9)
        pol = data.simulate_claims(SimConfig(n=200000, zero_rate_target=0.9, seed=1))
        x = pol.claim_rate / pol.exposure
        est = np.mean(-np.expm1(-x) / x)
        assert est == pytest.approx(0.9, abs=3e-3)
        assert np.mean(pol.y == 0) == pytest.approx(data.expected_zero_rate(rate), abs=4e-3)

    def test_rate_zero_gives_no_claims(self):
        pol = data.simulate_claims(SimConfig(n=1000, zero_rate_target=None, poisson_rate=0.0))
        assert not pol.y.any() and not pol.clm.any()

    def test_bit_identical(self):
        a = data.simulate_claims(SimConfig(n=500, seed=8))
        b = data.simulate_claims(SimConfig(n=500, seed=8))
        for c in data.POLICY_COLUMNS:
            assert getattr(a, c).tobytes() == getattr(b, c).tobytes()

    @pytest.mark.parametrize(
        "kw",
        [
            {"zero_rate_target": 1.0},
            {"zero_rate_target": 0.0},
            {"gamma_shape": 0.0},
            {"n": 0},
            {"zero_rate_target": None, "poisson_rate": -1.0},
            {"zero_rate_target": None},
        ],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(InfeasibleConfigError):
            SimConfig(**kw).resolved_rate()

    def test_conflicting_rate_and_target(self):
        with pytest.raises(InfeasibleConfigError, match="implies zero rate"):
            SimConfig(zero_rate_target=0.94, poisson_rate=5.0).resolved_rate()

    def test_unknown_config_key(self):
        with pytest.raises(InfeasibleConfigError, match="bogus"):
            SimConfig.from_dict({"bogus": 1})


@pytest.fixture(scope="module")
def pol():
    return data.simulate_claims(SimConfig(n=40000, seed=21))


class TestForecasters:
    def test_noisy_null_without_noise_is_constant(self, pol):
        _, m = data.synthesize_forecasters(pol, [ForecasterSpec("noisy-null", 0.0, 0.8)])
        assert np.unique(m[:, 0]).size == 1

    def test_rank_oracle_sum_error(self, pol):
        _, m = data.synthesize_forecasters(pol, [ForecasterSpec("rank-oracle-misscaled", 0.0, 1.27)])
        assert metrics.sum_error(pol.expected_cost, m[:, 0]) == pytest.approx(0.27, abs=1e-9)
        assert metrics.sum_error(pol.y, m[:, 0]) == pytest.approx(0.27, abs=0.06)

    def test_rank_oracle_is_monotone_in_mean(self, pol):
        _, m = data.synthesize_forecasters(pol, [ForecasterSpec("rank-oracle-misscaled", 0.0, 1.3, power=1.4)])
        order = np.argsort(pol.expected_cost, kind="stable")
        assert np.all(np.diff(m[order, 0]) >= 0)

    def test_two_stage_exact_zeros(self, pol):
        _, m = data.synthesize_forecasters(pol, [ForecasterSpec("two-stage", 0.5, 1.0, zero_fraction=0.3)])
        assert np.mean(m[:, 0] == 0) == pytest.approx(0.3, abs=1e-4)

    def test_direct_many_small_positive(self, pol):
        _, m = data.synthesize_forecasters(pol, [ForecasterSpec("direct-severity", 0.5, 1.0)])
        col = m[:, 0]
        assert np.all(col > 0) and np.median(col) < col.mean()

    @pytest.mark.parametrize("power", [0.2, 0.7, 1.0, 1.4])
    def test_power_transform_preserves_mean_and_order(self, rng, power):
        v = rng.gamma(0.5, 2.0, 500)
        g = data._power_transform(v, power)
        assert g.mean() == pytest.approx(v.mean(), rel=1e-12)
        assert np.array_equal(np.argsort(g, kind="stable"), np.argsort(v, kind="stable"))

    def test_default_lineup(self, pol):
        specs = data.default_forecasters(seed=3)
        names, m = data.synthesize_forecasters(pol, specs)
        assert names == [f"A{j}" for j in range(1, 13)] and m.shape == (len(pol), 12)
        ginis = [metrics.gini(pol.y, m[:, j]) for j in range(12)]
        rmses = [metrics.rmse(pol.y, m[:, j]) for j in range(12)]
        assert int(np.argmax(ginis)) == 4 and int(np.argmax(rmses)) == 4

    def test_reproducible(self, pol):
        specs = data.default_forecasters(seed=1)
        _, a = data.synthesize_forecasters(pol, specs)
        _, b = data.synthesize_forecasters(pol, specs)
        assert a.tobytes() == b.tobytes()

    def test_errors(self, pol, tmp_path):
        with pytest.raises(InvalidInputError):
            data.synthesize_forecasters(pol, [])
        with pytest.raises(InvalidInputError, match="duplicate"):
            data.synthesize_forecasters(pol, [ForecasterSpec("noisy-null", name="X")] * 2)
        loaded_path = tmp_path / "p.csv"
        data.write_policies(pol.subset(np.arange(5)), loaded_path)
        with pytest.raises(InvalidInputError, match="simulated"):
            data.synthesize_forecasters(data.load_policies(loaded_path), [ForecasterSpec("noisy-null")])

    @pytest.mark.parametrize(
        "kw",
        [
            {"kind": "oracle"},
            {"kind": "noisy-null", "noise_level": -1},
            {"kind": "noisy-null", "scale_bias": 0},
            {"kind": "two-stage", "zero_fraction": 1.0},
            {"kind": "direct-severity", "power": 0},
        ],
    )
    def test_spec_validation(self, kw):
        with pytest.raises(InvalidInputError):
            ForecasterSpec(**kw)

    def test_kind_spelling_normalised(self):
        assert ForecasterSpec("Two_Stage").kind == "two-stage"


class TestPerturb:
    def test_noise_variance_is_fraction_of_mse(self, rng):
        n = 200000
        y = rng.gamma(0.5, 100.0, n)
        P = np.column_stack([y + rng.normal(0, 30, n), y + rng.normal(0, 10, n)])
        Q = data.perturb_predictions(P, y, [0], level=0.2, seed=5)
        assert np.array_equal(Q[:, 1], P[:, 1])
        added = Q[:, 0] - P[:, 0]
        mse = np.mean((y - P[:, 0]) ** 2)
        assert added.var() == pytest.approx(0.2 * mse, rel=0.02)

    def test_does_not_mutate_input(self, rng):
        P = rng.random((10, 2))
        before = P.copy()
        data.perturb_predictions(P, rng.random(10), [0, 1])
        assert np.array_equal(P, before)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            data.perturb_predictions(np.ones((3, 2)), np.ones(4), [0])
