import time
from collections import Counter

import numpy as np
import pytest

from fedsel.search import (
    Archive,
    FitnessRecord,
    SearchSpaceExhausted,
    genetic_search,
    hash_config,
    mutate,
    reference_search,
    sample_uniform,
)
from fedsel.strategies import ParamSpec, StrategyConfig, StrategySchema, default_schema, validate_config
from oracles import landscape_seeds, mutation_neighbourhood, prox_landscape

SCHEMA = default_schema()


def _counted(fn=prox_landscape):
    calls = []

    def evaluate(cfg):
        calls.append(cfg)
        return fn(cfg)

    return evaluate, calls


class TestHash:
    def test_canonical_rounding(self):
        a = StrategyConfig("fed_prox", {"proximal_mu": 0.1})
        assert hash_config(a) == hash_config(StrategyConfig("fed_prox", {"proximal_mu": 0.10001}))
        assert hash_config(a) != hash_config(StrategyConfig("fed_prox", {"proximal_mu": 0.1001}))

    def test_key_order_irrelevant(self):
        a = StrategyConfig("krum", {"num_malicious_clients": 1, "num_clients_to_keep": 2})
        b = StrategyConfig("krum", {"num_clients_to_keep": 2, "num_malicious_clients": 1})
        assert hash_config(a) == hash_config(b)

    def test_no_collisions_on_distinct_configs(self):
        rng = np.random.default_rng(0)
        by_hash = {}
        for _ in range(10000):
            cfg = sample_uniform(SCHEMA, 10, rng).canonical()
            assert by_hash.setdefault(hash_config(cfg), cfg) == cfg


class TestOperators:
    def test_strategy_frequencies_uniform(self):
        rng = np.random.default_rng(1)
        counts = Counter(sample_uniform(SCHEMA, 10, rng).strategy_name for _ in range(5000))
        assert set(counts) == set(SCHEMA.strategies)
        assert all(abs(c / 5000 - 0.2) < 0.03 for c in counts.values())

    def test_samples_in_domain(self):
        rng = np.random.default_rng(2)
        for n in (3, 4, 10):
            for _ in range(300):
                cfg = sample_uniform(SCHEMA, n, rng)
                assert validate_config(cfg, SCHEMA, n) == cfg

    def test_infeasible_strategy_never_sampled(self):
        rng = np.random.default_rng(0)
        assert all(sample_uniform(SCHEMA, 2, rng).strategy_name != "krum" for _ in range(200))

    def test_real_mutation_within_step(self):
        rng = np.random.default_rng(3)
        parent = StrategyConfig("fed_prox", {"proximal_mu": 0.5})
        reach = set(mutation_neighbourhood(0.5))
        for _ in range(500):
            mu = mutate(parent, SCHEMA, rng, 4).params["proximal_mu"]
            assert 0.4 <= mu <= 0.6 and min(reach, key=lambda v: abs(v - mu)) == pytest.approx(mu, abs=1e-4)

    def test_clipped_at_edges(self):
        rng = np.random.default_rng(4)
        lo = StrategyConfig("fed_prox", {"proximal_mu": 0.0})
        hi = StrategyConfig("fed_trimmed_avg", {"beta": 0.49})
        for _ in range(200):
            assert 0.0 <= mutate(lo, SCHEMA, rng, 4).params["proximal_mu"] <= 0.1
            assert 0.39 <= mutate(hi, SCHEMA, rng, 4).params["beta"] <= 0.49

    def test_integer_steps(self):
        rng = np.random.default_rng(5)
        parent = StrategyConfig("krum", {"num_malicious_clients": 1, "num_clients_to_keep": 4})
        seen = Counter()
        for _ in range(600):
            child = mutate(parent, SCHEMA, rng, 4)
            assert child.params["num_malicious_clients"] in (0, 1)
            assert child.params["num_clients_to_keep"] in (3, 4)
            seen[child.params["num_clients_to_keep"]] += 1
        # +1 is clipped back onto n, so 4 collects two thirds of the draws
        assert 0.6 < seen[4] / 600 < 0.73

    def test_parameterless_is_fixed_point(self):
        rng = np.random.default_rng(0)
        assert mutate(StrategyConfig("fed_avg"), SCHEMA, rng, 4) == StrategyConfig("fed_avg", {})


class TestArchive:
    def test_rejects_duplicates(self):
        a = Archive()
        a.add(FitnessRecord(StrategyConfig("fed_prox", {"proximal_mu": 0.2}), 0.5))
        with pytest.raises(ValueError):
            a.add(FitnessRecord(StrategyConfig("fed_prox", {"proximal_mu": 0.20001}), 0.7))

    def test_top_breaks_ties_by_order(self):
        a = Archive()
        for i, name in enumerate(["fed_avg", "fed_median", "fed_prox"]):
            params = {"proximal_mu": 0.3} if name == "fed_prox" else {}
            a.add(FitnessRecord(StrategyConfig(name, params), 0.8 if i else 0.6))
        assert [r.config.strategy_name for r in a.top(2)] == ["fed_median", "fed_prox"]
        assert a.worst().config.strategy_name == "fed_avg"

    def test_file_round_trip(self, tmp_path):
        a = Archive(path=tmp_path / "a.jsonl")
        a.add(FitnessRecord(StrategyConfig("krum", {"num_malicious_clients": 1, "num_clients_to_keep": 3}), 0.4, "r1", 2))
        (back,) = Archive.load(tmp_path / "a.jsonl")
        assert back.config == a.records[0].config and back.run_ref == "r1" and back.generation == 2
        assert Archive.load(tmp_path / "missing.jsonl") == []


class TestGenetic:
    def test_exactly_eight_evaluations(self):
        for seed in range(10):
            ev, calls = _counted()
            res = genetic_search(SCHEMA, 4, ev, seed)
            assert res.evaluations == 8 == len(calls) == len(res.archive)

    def test_archive_unique(self):
        for seed in range(20):
            res = genetic_search(SCHEMA, 4, prox_landscape, seed)
            assert len({hash_config(r.config) for r in res.archive.records}) == 8

    def test_generation_two_preserves_strategies(self):
        # Without stalls, every child shares its strategy with a generation-1 elite.
        for seed in range(20):
            res = genetic_search(SCHEMA, 10, prox_landscape, seed)
            gen1 = [r for r in res.archive.records if r.generation == 1]
            elites = {r.config.strategy_name for r in sorted(gen1, key=lambda r: -r.fitness)[:2]}
            gen2 = [r.config for r in res.archive.records if r.generation == 2]
            if all(SCHEMA.params_for(e) for e in elites):
                assert {c.strategy_name for c in gen2} <= elites

    def test_stalled_elite_falls_back_to_sampling(self):
        def favour_avg(cfg):
            return 1.0 if cfg.strategy_name in ("fed_avg", "fed_median") else 0.0

        for seed in range(30):
            res = genetic_search(SCHEMA, 4, favour_avg, seed)
            assert res.evaluations == 8

    def test_deterministic(self):
        a = genetic_search(SCHEMA, 4, prox_landscape, 11)
        b = genetic_search(SCHEMA, 4, prox_landscape, 11)
        assert [r.config for r in a.archive.records] == [r.config for r in b.archive.records]

    def test_parallel_matches_sequential(self):
        def slow(cfg):
            time.sleep(0.01 * (hash_config(cfg)[0] in "0123"))
            return prox_landscape(cfg)

        a = genetic_search(SCHEMA, 4, slow, 3, jobs=1)
        b = genetic_search(SCHEMA, 4, slow, 3, jobs=4)
        assert [(r.config, r.fitness) for r in a.archive.records] == [(r.config, r.fitness) for r in b.archive.records]

    def test_failures_score_zero(self):
        def boom(cfg):
            if cfg.strategy_name == "fed_prox":
                raise RuntimeError("diverged")
            return float("nan") if cfg.strategy_name == "krum" else 0.4

        res = genetic_search(SCHEMA, 4, boom, 0)
        assert all(r.fitness in (0.0, 0.4) for r in res.archive.records)

    def test_resume_replays(self, tmp_path):
        path = tmp_path / "archive.jsonl"
        full = genetic_search(SCHEMA, 4, prox_landscape, 5, archive_path=path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:5]) + "\n")
        ev, calls = _counted()
        resumed = genetic_search(SCHEMA, 4, ev, 5, archive_path=path)
        assert len(calls) == 3 and resumed.evaluations == 3
        assert [r.config for r in resumed.archive.records] == [r.config for r in full.archive.records]
        assert len(path.read_text().splitlines()) == 8

    def test_tuple_return_keeps_ref(self):
        res = genetic_search(SCHEMA, 4, lambda c: (0.5, f"trials/{hash_config(c)[:12]}"), 0)
        assert all(r.run_ref.startswith("trials/") for r in res.archive.records)

    def test_exhausted_space(self):
        tiny = StrategySchema({"fed_avg": (), "fed_median": ()})
        with pytest.raises(SearchSpaceExhausted):
            genetic_search(tiny, 4, prox_landscape, 0)

    def test_landscape_reaches_peak(self):
        seeds = landscape_seeds(20, genetic_search, SCHEMA)
        hits = 0
        for s in seeds:
            res = genetic_search(SCHEMA, 4, prox_landscape, s)
            gen1 = [r for r in res.archive.records if r.generation == 1]
            # Nothing can beat the best point one mutation away from a generation-1 parent.
            bound = max(
                [r.fitness for r in gen1]
                + [1 - abs(m - 0.5) for r in gen1 if r.config.strategy_name == "fed_prox" for m in mutation_neighbourhood(r.config.params["proximal_mu"])]
            )
            assert res.best.fitness <= bound + 1e-12
            hits += res.best.fitness >= 0.9
        assert hits >= 18


class TestReference:
    def test_fifty_unique(self):
        ev, calls = _counted()
        res = reference_search(SCHEMA, 4, ev, 0)
        assert res.evaluations == 50 == len(calls) == len(res.archive)
        assert len({hash_config(r.config) for r in res.archive.records}) == 50
        assert res.worst.fitness <= res.best.fitness

    def test_small_space_exhausted(self):
        tiny = StrategySchema({"fed_avg": (), "krum": (ParamSpec("num_malicious_clients", "int", 0, "n-3", 0),)})
        with pytest.raises(SearchSpaceExhausted):
            reference_search(tiny, 4, prox_landscape, 0, trials=5)
