import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsel.model import ClientUpdate, ModelParams
from fedsel.strategies import (
    InfeasibleForN,
    MissingParameter,
    OutOfDomain,
    StrategyConfig,
    UnknownParameter,
    UnknownStrategy,
    UnparseableConfig,
    aggregate,
    client_proximal_mu,
    default_schema,
    krum_scores,
    parse_config_text,
    resolve_bound,
    validate_config,
)
from oracles import krum_oracle, median_oracle, trimmed_mean_oracle, weighted_mean_oracle

SCHEMA = default_schema()


def _updates(rows, weights=None):
    rows = np.asarray(rows, dtype=float)
    d = rows.shape[1]
    weights = weights or [1] * len(rows)
    return [
        ClientUpdate(i, ModelParams.from_flat([d - 1, 1], r.copy()), int(w), 0.0)
        for i, (r, w) in enumerate(zip(rows, weights))
    ]


def _global(d):
    return ModelParams.from_flat([d - 1, 1], np.zeros(d))


def _agg(name, rows, weights=None, **params):
    rows = np.asarray(rows, dtype=float)
    return aggregate(StrategyConfig(name, params), _updates(rows, weights), _global(rows.shape[1])).flat()


class TestSpecExamples:
    def test_fed_avg_equal_weights(self):
        assert _agg("fed_avg", [[1, 3], [3, 5]]).tolist() == [2, 4]

    def test_fed_avg_weighted(self):
        assert _agg("fed_avg", [[0, 0], [4, 8]], [3, 1]).tolist() == [1, 2]

    def test_median_odd(self):
        assert _agg("fed_median", [[1, 0], [2, 0], [9, 0]])[0] == 2

    def test_median_even_averages_middle(self):
        assert _agg("fed_median", [[1, 0], [2, 0], [4, 0], [9, 0]])[0] == 3

    def test_trimmed(self):
        assert _agg("fed_trimmed_avg", [[0, 0], [1, 0], [2, 0], [10, 0]], beta=0.25)[0] == 1.5

    def test_krum_scores_and_tie(self):
        mat = np.array([[0.0], [0.1], [0.2], [10.0]])
        s = krum_scores(mat, 1)
        assert np.allclose(s, [0.01, 0.01, 0.01, 96.04])
        rows = [[0, 0], [0.1, 0], [0.2, 0], [10, 0]]
        out = _agg("krum", rows, num_malicious_clients=1, num_clients_to_keep=1)
        assert out[0] == 0.0

    def test_fed_prox_aggregates_like_fed_avg(self):
        rows = [[1, 2], [5, 6], [0, 1]]
        assert np.array_equal(_agg("fed_prox", rows, [1, 2, 3], proximal_mu=0.3), _agg("fed_avg", rows, [1, 2, 3]))


class TestOracles:
    @pytest.mark.parametrize("n", [3, 4, 5])
    def test_against_brute_force(self, n):
        rng = np.random.default_rng(n)
        for _ in range(200):
            rows = rng.normal(size=(n, 8))
            weights = rng.integers(1, 50, size=n).tolist()
            lst = rows.tolist()
            assert _agg("fed_avg", rows, weights).tolist() == weighted_mean_oracle(lst, weights)
            assert _agg("fed_median", rows, weights).tolist() == median_oracle(lst)
            for beta in (0.0, 0.2, 0.25, 0.4):
                if n - 2 * int(np.floor(beta * n)) >= 1:
                    got = _agg("fed_trimmed_avg", rows, weights, beta=beta)
                    assert got.tolist() == trimmed_mean_oracle(lst, beta)
            for f in range(0, n - 2):
                for keep in range(1, n + 1):
                    got = _agg("krum", rows, weights, num_malicious_clients=f, num_clients_to_keep=keep)
                    assert got.tolist() == krum_oracle(lst, weights, f, keep)

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        rows = rng.normal(size=(5, 6))
        ups = _updates(rows, [3, 1, 4, 1, 5])
        cfg = StrategyConfig("krum", {"num_malicious_clients": 1, "num_clients_to_keep": 2})
        a = aggregate(cfg, ups, _global(6)).flat()
        b = aggregate(cfg, ups[::-1], _global(6)).flat()
        assert np.array_equal(a, b)

    def test_shape_mismatch(self):
        ups = _updates([[1.0, 2.0]])
        with pytest.raises(ValueError):
            aggregate(StrategyConfig("fed_avg"), ups, _global(3))


class TestRobustness:
    def test_single_outlier_neutralized(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(5, 9))
            honest = rng.uniform(-1, 1, size=(n, 6))
            bad = int(rng.integers(n))
            rows = honest.copy()
            rows[bad] = rng.choice([-1, 1], size=6) * rng.uniform(1e3, 1e6, size=6)
            lo, hi = honest.min(axis=0), honest.max(axis=0)
            med = _agg("fed_median", rows)
            assert np.all(med >= lo) and np.all(med <= hi)
            kr = _agg("krum", rows, num_malicious_clients=1, num_clients_to_keep=n - 1)
            assert np.all(kr >= lo - 1e-12) and np.all(kr <= hi + 1e-12)

    def test_fed_avg_is_not_robust(self):
        rows = np.zeros((5, 2))
        rows[4] = 1e6
        assert _agg("fed_avg", rows)[0] > 1e5


class TestParse:
    def test_literal_dict_forms(self):
        assert parse_config_text("{'strategy_name': 'fed_avg'}") == StrategyConfig("fed_avg", {})
        c = parse_config_text("{'strategy_name': 'fed_trimmed_avg', 'beta': 0.3}")
        assert c.strategy_name == "fed_trimmed_avg" and c.params == {"beta": 0.3}

    def test_json_and_fences(self):
        text = "Here it is:\n```python\n{\"strategy_name\": \"fed_prox\", \"proximal_mu\": 0.7}\n```"
        assert parse_config_text(text).params == {"proximal_mu": 0.7}

    def test_smart_quotes(self):
        assert parse_config_text("{‘strategy_name’: ‘fed_median’}").strategy_name == "fed_median"

    def test_no_literal(self):
        with pytest.raises(UnparseableConfig):
            parse_config_text("sure, here you go")

    def test_missing_name(self):
        with pytest.raises(UnparseableConfig):
            parse_config_text("{'beta': 0.1}")


class TestValidate:
    def test_krum_example(self):
        text = "{'strategy_name': 'krum', 'num_malicious_clients': 1, 'num_clients_to_keep': 3}"
        cfg = validate_config(text, SCHEMA, 4)
        assert cfg.params == {"num_clients_to_keep": 3, "num_malicious_clients": 1}
        with pytest.raises(InfeasibleForN):
            validate_config(text, SCHEMA, 3)

    def test_domains(self):
        validate_config({"strategy_name": "fed_prox", "proximal_mu": 0.7}, SCHEMA, 4)
        validate_config({"strategy_name": "fed_trimmed_avg", "beta": 0.3}, SCHEMA, 4)
        with pytest.raises(OutOfDomain):
            validate_config({"strategy_name": "fed_trimmed_avg", "beta": 0.5}, SCHEMA, 4)
        with pytest.raises(OutOfDomain):
            validate_config({"strategy_name": "fed_prox", "proximal_mu": -0.1}, SCHEMA, 4)

    def test_errors(self):
        with pytest.raises(UnknownStrategy):
            validate_config({"strategy_name": "fed_nova"}, SCHEMA, 4)
        with pytest.raises(UnknownParameter):
            validate_config({"strategy_name": "fed_avg", "beta": 0.1}, SCHEMA, 4)
        with pytest.raises(MissingParameter):
            validate_config({"strategy_name": "fed_prox"}, SCHEMA, 4)
        with pytest.raises(OutOfDomain):
            validate_config({"strategy_name": "krum", "num_malicious_clients": 0.5, "num_clients_to_keep": 2}, SCHEMA, 5)
        with pytest.raises(OutOfDomain):
            validate_config({"strategy_name": "fed_prox", "proximal_mu": True}, SCHEMA, 4)

    def test_integral_float_accepted_and_rounding(self):
        cfg = validate_config(
            {"strategy_name": "krum", "num_malicious_clients": 1.0, "num_clients_to_keep": 2}, SCHEMA, 5
        )
        assert cfg.params["num_malicious_clients"] == 1 and isinstance(cfg.params["num_malicious_clients"], int)
        assert validate_config({"strategy_name": "fed_prox", "proximal_mu": 0.123456}, SCHEMA, 4).params == {
            "proximal_mu": 0.1235
        }

    def test_trimmed_infeasible_small_n(self):
        # n = 2, beta = 0.49 floors to 0 trims and is fine
        validate_config({"strategy_name": "fed_trimmed_avg", "beta": 0.49}, SCHEMA, 2)

    def test_bounds(self):
        assert resolve_bound("n-3", 10) == 7 and resolve_bound("n", 4) == 4 and resolve_bound(0.5, 4) == 0.5
        with pytest.raises(ValueError):
            resolve_bound("2n", 4)

    def test_defaults_are_valid(self):
        for n in (3, 4, 10):
            for name in SCHEMA.strategies:
                if SCHEMA.feasible(name, n):
                    validate_config(SCHEMA.defaults(name, n), SCHEMA, n)

    def test_proximal_mu_only_for_fed_prox(self):
        assert client_proximal_mu(StrategyConfig("fed_prox", {"proximal_mu": 0.4})) == 0.4
        assert client_proximal_mu(StrategyConfig("fed_avg")) == 0.0

    def test_text_round_trip(self):
        cfg = StrategyConfig("krum", {"num_malicious_clients": 1, "num_clients_to_keep": 3})
        assert parse_config_text(cfg.to_text()) == cfg
        assert cfg.to_text().startswith("{'strategy_name': 'krum'")

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(3, 60), mu=st.floats(0, 1), beta=st.floats(0, 0.49), data=st.data())
    def test_in_domain_always_valid(self, n, mu, beta, data):
        f = data.draw(st.integers(0, n - 3))
        keep = data.draw(st.integers(1, n))
        for cfg in (
            {"strategy_name": "fed_prox", "proximal_mu": mu},
            {"strategy_name": "fed_trimmed_avg", "beta": beta},
            {"strategy_name": "krum", "num_malicious_clients": f, "num_clients_to_keep": keep},
        ):
            out = validate_config(cfg, SCHEMA, n)
            assert validate_config(out, SCHEMA, n) == out
