import numpy as np
import pytest

from ml5g.association import (
    FEATURE_NAMES,
    AssociationState,
    ConstantPredictor,
    MlpPredictor,
    OraclePredictor,
    SignalPredictor,
    build_features,
    evaluate_fig5,
    nn_associate,
    place_one,
    summarize,
)
from ml5g.nn import MlpModel
from ml5g.pipeline import PolicyKind, PolicyRule
from ml5g.underlay import (
    AccessPoint,
    Deployment,
    DensityClass,
    LinkTable,
    Position,
    Station,
    compute_throughput,
    generate_deployment,
    ssf_associate,
    throughput_rows,
)

from oracles import best_assignment


def _dep(aps, stas, side=30.0):
    return Deployment(tuple(aps), tuple(stas), side, 0, DensityClass.SPARSE)


def _mean(table, assignment):
    return float(np.mean(list(table.report(assignment).per_sta.values())))


def test_empty_ap_features():
    dep = generate_deployment("sparse", 100, 0)
    state = AssociationState(LinkTable(dep))
    f = build_features(dep.stas[0], dep.aps[0].id, state)
    assert f.ap_load_mbps == 0 and f.ap_sta_count == 0
    assert f.sta_demand_mbps == dep.stas[0].demand_mbps


def test_load_grows_by_demand():
    aps = [AccessPoint(0, Position(0, 0), 1, 20.0), AccessPoint(1, Position(10, 0), 2, 20.0)]
    stas = [Station(5, Position(5, 1), 40.0), Station(6, Position(6, 2), 10.0)]
    state = AssociationState(LinkTable(_dep(aps, stas)))
    before = build_features(stas[1], 1, state).ap_load_mbps
    state.assign(5, 1)
    assert build_features(stas[1], 1, state).ap_load_mbps == before + 40


def test_features_match_recount():
    rng = np.random.default_rng(0)
    for seed in range(10):
        dep = generate_deployment("dense", 100, seed)
        table = LinkTable(dep)
        state = AssociationState(table)
        for sta in dep.stas:
            state.assign(sta.id, int(rng.choice(table.candidates[sta.id])))
            if rng.random() < 0.2:
                state.release(sta.id)
        for sta in dep.stas:
            for ap in table.candidates[sta.id]:
                f = build_features(sta, ap, state)
                others = [s for s, a in state.assignment.items() if a == ap and s != sta.id]
                assert f.ap_sta_count == len(others)
                assert f.ap_load_mbps == pytest.approx(sum(table.stas[s].demand_mbps for s in others), abs=1e-9)
                assert f.rssi_dbm == table.rssi(sta.id, ap)
                assert np.isfinite(f.as_list()).all()


def test_single_ap_equals_ssf_for_any_model():
    dep = generate_deployment("sparse", 30, 4)
    one = _dep(dep.aps[:1], dep.stas)
    ssf = ssf_associate(one).assignment
    net = MlpModel.initialize([5, 4, 1], np.random.default_rng(0), norm_schema=[(0, 1)] * 5)
    for model in (OraclePredictor(), ConstantPredictor(3.0), net):
        assert nn_associate(one, model).assignment == ssf


def test_signal_predictor_reproduces_ssf():
    for seed in range(10):
        dep = generate_deployment("dense", 100, seed)
        assert nn_associate(dep, SignalPredictor(), order_seed=seed).assignment == ssf_associate(dep).assignment


def test_ties_go_to_lowest_ap():
    dep = generate_deployment("medium", 100, 2)
    out = nn_associate(dep, ConstantPredictor(1.0))
    table = LinkTable(dep)
    assert all(ap == min(table.candidates[s]) for s, ap in out.assignment.items())


def test_cap_redirects_second_sta():
    aps = [AccessPoint(1, Position(0, 0), 1, 20.0), AccessPoint(2, Position(15, 0), 2, 20.0)]
    stas = [Station(10, Position(1, 0), 10.0), Station(11, Position(2, 0), 10.0)]
    out = nn_associate(_dep(aps, stas), SignalPredictor(), [PolicyRule(PolicyKind.MAX_STAS_PER_AP, 1)])
    assert sorted(out.assignment.values()) == [1, 2]


def test_policy_fallback_path_recorded():
    aps = [AccessPoint(1, Position(0, 0), 1, 20.0)]
    sta = Station(10, Position(30, 0), 10.0)  # audible but slow link
    state = AssociationState(LinkTable(_dep(aps, [sta], side=40)))
    out = place_one(state, sta, OraclePredictor(), [PolicyRule(PolicyKind.LEGACY_PROTECT, 10_000)])
    assert out.path == "ssf_fallback" and out.ap_id == 1


def _two_by_four():
    aps = [AccessPoint(0, Position(0, 0), 1, 20.0), AccessPoint(1, Position(20, 0), 2, 20.0)]
    stas = [
        Station(10, Position(2, 1), 45.0),
        Station(11, Position(4, 3), 40.0),
        Station(12, Position(7, 2), 30.0),
        Station(13, Position(12, 1), 20.0),
    ]
    return _dep(aps, stas)


def test_oracle_beats_ssf_on_small_instance():
    dep = _two_by_four()
    table = LinkTable(dep)
    ssf = _mean(table, ssf_associate(dep).assignment)
    greedy = _mean(table, nn_associate(dep, OraclePredictor()).assignment)
    best_map, best = best_assignment(dep, table)
    assert len(table.candidates[10]) == 2 and len(best_map) == 4
    assert ssf <= greedy <= best + 1e-12


@pytest.mark.xfail(strict=True, reason="myopic oracle greedy loses to SSF on many dense draws; see decisions ledger")
def test_oracle_dominates_ssf_on_every_dense_instance():
    for seed in range(60):
        dep = generate_deployment("dense", 100, seed)
        table = LinkTable(dep)
        nn = nn_associate(dep, OraclePredictor(), order_seed=seed, table=table)
        assert _mean(table, nn.assignment) >= _mean(table, ssf_associate(dep).assignment)


def test_caps_never_exceeded_on_grid():
    rules = [PolicyRule(PolicyKind.MAX_STAS_PER_AP, 13)]
    for density in ("sparse", "medium", "dense"):
        for seed in range(10):
            dep = generate_deployment(density, 100, seed)
            out = nn_associate(dep, OraclePredictor(), rules, order_seed=seed)
            counts = np.bincount(list(out.assignment.values()))
            assert counts.max() <= 13
            out.validate(dep, enforce_caps=True)


def test_order_seed_is_deterministic():
    dep = generate_deployment("dense", 100, 9)
    assert nn_associate(dep, OraclePredictor(), order_seed=3) == nn_associate(dep, OraclePredictor(), order_seed=3)


def test_mlp_predictor_clips_and_denormalizes():
    m = MlpModel([5, 1], [np.ones((1, 5))], [np.zeros(1)], norm_schema=[(0, 10)] * 5, target_range=(0, 50))
    p = MlpPredictor(m)
    assert p.schema.features == dict(zip(FEATURE_NAMES, [(0, 10)] * 5))
    X = p.normalize([type("F", (), {"as_list": lambda self: [5, 20, -3, 0, 0]})()])
    assert X.tolist() == [[0.5, 1.0, 0.0, 0.0, 0.0]]
    assert p.infer(X) == [75.0]


def test_evaluate_sparse_row_count():
    res = evaluate_fig5(["sparse"], [0], OraclePredictor())
    assert len(res.rows) == 2 * 10
    assert len(res.throughputs("ssf")) == len(res.throughputs("nn")) == 10


def test_evaluate_ssf_rows_match_direct_underlay():
    res = evaluate_fig5(["medium"], [1, 2], ConstantPredictor())
    direct = []
    for seed in (1, 2):
        dep = generate_deployment("medium", 100, seed)
        direct += throughput_rows(dep, compute_throughput(dep, ssf_associate(dep)), "ssf")
    assert [r for r in res.rows if r[5] == "ssf"] == direct


def test_evaluate_summary_means():
    res = evaluate_fig5(["sparse", "dense"], [0, 1], OraclePredictor())
    for s in res.summary:
        vals = res.throughputs(s.strategy, s.density)
        assert s.mean == pytest.approx(sum(vals) / len(vals), rel=1e-12)
        assert s.p10 <= s.p50 <= s.p90
    assert summarize([1.0, 2.0, 3.0], "x", "y").mean == 2.0
