import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from legofl import aggregation as agg
from legofl.aggregation import AggPolicy
from legofl.config import FederationSpec, config_from_dict
from legofl.errors import InputError, NumericError
from legofl.evalio import EvalSuite
from legofl.federation import (
    RoundPlan,
    build_clients,
    check_sparsity,
    make_corpus,
    pretrain,
    run_experiment,
    run_round,
    select_clients,
)
from legofl.mathcore import Rng

from .conftest import small_config_dict


def test_select_examples():
    assert select_clients(0, 8, 0.1) == [0]
    assert select_clients(5, 8, 0.1) == [5]
    assert select_clients(1, 4, 0.5) == [2, 3]
    with pytest.raises(InputError):
        select_clients(0, 4, 0.0)


@given(st.integers(1, 20), st.floats(0.01, 1.0))
def test_cyclic_schedule_covers_uniformly(n, rate):
    m = max(1, int(np.floor(rate * n + 1e-9)))
    counts = np.zeros(n, int)
    for k in range(n):
        sel = select_clients(k, n, rate)
        assert len(sel) == m
        counts[sel] += 1
    assert np.all(counts == m)


def test_round_plan_validation():
    with pytest.raises(InputError):
        RoundPlan(0, (), 3)
    with pytest.raises(InputError):
        RoundPlan(3, (0,), 3)


@pytest.fixture(scope="module")
def fed():
    cfg = config_from_dict(small_config_dict())
    corpus = make_corpus(cfg)
    base, _ = pretrain(cfg, corpus, Rng(0, ("base",)))
    return cfg, corpus, base


def _state(fed, **over):
    cfg, corpus, base = fed
    cfg = config_from_dict(small_config_dict(**over)) if over else cfg
    return cfg, build_clients(cfg, base, corpus, Rng(cfg.seed, ("experiment",)))


def test_clients_match_declared_sparsity(fed):
    cfg, state = _state(fed)
    for c, spec in zip(state.clients, cfg.clients):
        total = sum(c.model.params[k].size for k in c.model.maskable_keys())
        assert abs(c.model.measured_sparsity() - spec.sparsity_level) <= 1 / total
        assert c.shard
    check_sparsity(state)


def test_single_dense_client_without_global(fed):
    cfg, state = _state(
        fed,
        clients=[{"strategy": "activation_norm", "sparsity_level": 0.0, "calibration_batches": 1}],
        federation={"rounds": 1, "participation_rate": 1.0},
        aggregation={"include_global": False},
    )
    spec = cfg.federation
    run_round(state, RoundPlan(0, (0,), 1), cfg.aggregation, spec, None, Rng(1))
    g, c = state.global_model.adapter, state.clients[0].model.adapter
    for k in g.keys():
        assert np.array_equal(g.A[k], c.A[k]) and np.array_equal(g.B[k], c.B[k])


def test_unselected_clients_change_only_on_their_masks(fed):
    cfg, state = _state(fed)
    before = [c.model.adapter.copy() for c in state.clients]
    run_round(state, RoundPlan(0, (0,), 3), cfg.aggregation, cfg.federation, None, Rng(1))
    for c, old in zip(state.clients[1:], before[1:]):
        ad = c.model.adapter
        for k in ad.keys():
            for cur, prev, m in ((ad.A[k], old.A[k], ad.mask_A[k]), (ad.B[k], old.B[k], ad.mask_B[k])):
                mask = np.ones(cur.shape, bool) if m is None else m
                assert np.array_equal(cur[~mask], prev[~mask])
                assert np.all(cur[~mask] == 0.0)
        assert any(not np.array_equal(ad.B[k], old.B[k]) for k in ad.keys())


def test_run_round_records_stages(fed):
    cfg, state = _state(fed)
    corpus = fed[1]
    suite = EvalSuite.from_corpus(corpus)
    recs = run_round(state, RoundPlan(0, (0, 1), 3), cfg.aggregation, cfg.federation, suite, Rng(1))
    stages = [(r.subject, r.stage) for r in recs]
    assert stages[:2] == [("0", "fine_tuned"), ("1", "fine_tuned")]
    assert ("global", "globally_updated") in stages
    assert sum(s == "globally_updated" for _, s in stages) == 1 + len(state.clients)
    assert all(r.round == 1 for r in recs)


def test_threads_do_not_change_results(fed):
    cfg, s1 = _state(fed)
    _, s2 = _state(fed)
    plan = RoundPlan(0, (0, 1, 2), 3)
    run_round(s1, plan, cfg.aggregation, cfg.federation, None, Rng(4), threads=1)
    run_round(s2, plan, cfg.aggregation, cfg.federation, None, Rng(4), threads=3)
    for a, b in zip(s1.clients, s2.clients):
        for k in a.model.adapter.keys():
            assert np.array_equal(a.model.adapter.B[k], b.model.adapter.B[k])


def test_divergence_aborts(fed):
    cfg, state = _state(fed)
    state.clients[0].model.adapter.B = {k: np.full_like(v, np.nan) for k, v in state.clients[0].model.adapter.B.items()}
    with pytest.raises(NumericError):
        run_round(state, RoundPlan(0, (0,), 1), AggPolicy(), cfg.federation, None, Rng(1))


def test_experiment_is_deterministic_and_keeps_sparsity(fed):
    cfg, _, base = fed
    a = run_experiment(cfg, base)
    b = run_experiment(cfg, base)
    assert [(r.round, r.subject, r.stage, r.values) for r in a.records] == [(r.round, r.subject, r.stage, r.values) for r in b.records]
    assert a.final_model.base_hash() == b.final_model.base_hash()
    assert len(a.round_globals) == cfg.federation.rounds
    per_update = [r for r in a.records if r.stage == "globally_updated"]
    assert len(per_update) == cfg.federation.rounds * (1 + cfg.n_clients)


def test_exclusion_changes_the_global(fed):
    cfg, _, base = fed
    full = run_experiment(cfg.replace(federation=FederationSpec(rounds=1, participation_rate=1.0, lr=0.01)), base)
    excl = run_experiment(
        cfg.replace(federation=FederationSpec(rounds=1, participation_rate=1.0, lr=0.01), exclude_clients=(2,)), base
    )
    assert full.records[-1 - cfg.n_clients].average != excl.records[-1 - cfg.n_clients].average


def test_layer_clients_skip_dropped_blocks(fed):
    cfg, state = _state(
        fed,
        clients=[
            {"strategy": "activation_norm", "sparsity_level": 0.0, "calibration_batches": 1},
            {"strategy": "layer", "keep_layers": [0], "sparsity_level": None},
        ],
    )
    layer_client = state.clients[1].model
    assert layer_client.layer_ids == [0]
    assert layer_client.adapter.keys() == ["layers.0.wq"]
    ps = agg.adapter_to_params(layer_client.adapter, state.keys)
    assert not ps.mask("layers.1.wq.B").any()
    run_round(state, RoundPlan(0, (0, 1), 1), cfg.aggregation, cfg.federation, None, Rng(2))
    check_sparsity(state)


def test_federation_never_calls_noise_free_path(fed, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("noise-free product path used during federation")

    monkeypatch.setattr(agg, "noise_free_aggregate", boom)
    cfg, _, base = fed
    run_experiment(cfg, base)
