import pytest

from ml5g.association import ConstantPredictor, OraclePredictor, SignalPredictor
from ml5g.mlfo import load_intent
from ml5g.pipeline import RecordKind
from ml5g.sandbox import (
    DATASET_HEADER,
    SandboxConfig,
    SandboxSource,
    ValidationThresholds,
    ValidationVerdict,
    dataset_from_csv,
    dataset_to_csv,
    generate_episodes,
    generate_training_data,
    validate_model,
)
from ml5g.underlay import DEFAULT_RADIO, LinkTable, compute_throughput, generate_deployment, AssociationMap

SPARSE = SandboxConfig(densities={"sparse": 1.0}, episodes=1, seed=3)


def test_config_invariants():
    with pytest.raises(ValueError):
        SandboxConfig(densities={"sparse": 0.5, "dense": 0.4})
    with pytest.raises(ValueError):
        SandboxConfig(densities={"sparse": 1.0}, episodes=0)
    with pytest.raises(ValueError):
        SandboxConfig(densities={"huge": 1.0})


def test_one_sparse_episode_has_ten_rows():
    ds = generate_training_data(SPARSE)
    assert len(ds) == 10
    assert ds.meta == {"episodes": 1, "skipped_infeasible": 0}


def test_same_config_same_dataset():
    cfg = SandboxConfig(densities={"sparse": 0.3, "dense": 0.7}, episodes=5, seed=9)
    assert generate_training_data(cfg).rows == generate_training_data(cfg).rows
    assert generate_training_data(cfg, stream=1).rows != generate_training_data(cfg).rows


def test_rows_replay_exactly():
    cfg = SandboxConfig(densities={"medium": 0.5, "dense": 0.5}, episodes=6, seed=2)
    episodes, _ = generate_episodes(cfg)
    for ep in episodes:
        assignment = dict(ep.initial)
        for d in ep.decisions:
            assignment[d.sta_id] = d.ap_id
            # full recomputation through the public underlay entry point
            report = compute_throughput(ep.deployment, AssociationMap(dict(assignment)))
            assert d.throughput == pytest.approx(report.per_sta[d.sta_id], rel=1e-12, abs=1e-12)
        assert {d.sta_id for d in ep.decisions} == {s.id for s in ep.deployment.stas}


def test_exploration_rate_roughly_epsilon():
    cfg = SandboxConfig(densities={"dense": 1.0}, episodes=40, seed=0)
    episodes, _ = generate_episodes(cfg)
    moved = total = 0
    for ep in episodes:
        table = LinkTable(ep.deployment)
        for d in ep.decisions:
            if len(table.candidates[d.sta_id]) > 1:
                total += 1
                moved += d.ap_id != ep.initial[d.sta_id]
    # exploring picks uniformly, so it sometimes lands back on the SSF AP
    assert 0.1 < moved / total < 0.3


def test_twin_matches_production_generator():
    cfg = SandboxConfig(densities={"dense": 1.0}, episodes=3, seed=4)
    episodes, _ = generate_episodes(cfg)
    for (_, density, scenario_seed), ep in zip(cfg.scenario_stream(0, 3), episodes):
        assert ep.deployment == generate_deployment(density, 100, scenario_seed, DEFAULT_RADIO)


def test_divergence_knobs_change_radio():
    cfg = SandboxConfig(densities={"sparse": 1.0}, divergence_knobs={"noise_floor_dbm": 6})
    assert cfg.effective_radio.noise_floor_dbm == DEFAULT_RADIO.noise_floor_dbm + 6


def test_dataset_csv_roundtrip():
    ds = generate_training_data(SPARSE)
    text = dataset_to_csv(ds)
    assert text.splitlines()[0] == ",".join(DATASET_HEADER) == "rssi,load,sta_count,demand,neighbors,throughput"
    assert dataset_from_csv(text).rows == ds.rows
    with pytest.raises(ValueError):
        dataset_from_csv("a,b\n1,2\n")


def test_source_emits_fresh_performance_records():
    src = SandboxSource(SPARSE)
    a = list(src.emit((0, 1)))
    b = list(src.emit((0, 1)))
    assert len(a) == 10 and all(r.kind is RecordKind.PERFORMANCE for r in a)
    assert [r.payload for r in a] != [r.payload for r in b]
    src.force_empty = True
    assert list(src.emit((0, 1))) == []


VAL = SandboxConfig(densities={"sparse": 0.2, "medium": 0.4, "dense": 0.4}, validation_episodes=40, seed=1)


def test_ssf_against_itself_zero_gain():
    v = validate_model(SignalPredictor(), VAL)
    assert v.mean_gain_vs_ssf == 0.0
    assert v.min_throughput_ratio == 1.0
    assert v.passed and v.episodes_evaluated == 40


def test_constant_zero_predictor_fails_dense():
    cfg = SandboxConfig(densities={"dense": 1.0}, validation_episodes=30, seed=0)
    v = validate_model(ConstantPredictor(0.0), cfg)
    assert v == validate_model(ConstantPredictor(0.0), cfg)
    assert not v.passed
    assert v.mean_gain_vs_ssf < 0


def test_verdict_follows_thresholds():
    lenient = ValidationThresholds(gain_floor=-1.0, min_throughput_ratio=0.0)
    v = validate_model(ConstantPredictor(0.0), VAL, lenient)
    assert v.passed
    assert v.to_dict()["pass"] is True


@pytest.mark.xfail(strict=True, reason="oracle greedy ignores harm to co-located STAs; see decisions ledger")
def test_oracle_predictor_passes_default_validation():
    intent = load_intent()
    v = validate_model(OraclePredictor(), intent.sandbox, intent.validation, intent.policies)
    assert v.passed and v.mean_gain_vs_ssf >= 0


def test_oracle_predictor_keeps_minimum_throughput():
    # the half of the criterion that does hold: low-percentile STAs gain
    v = validate_model(OraclePredictor(), VAL)
    assert v.min_throughput_ratio >= 1.0


def test_verdict_dict_keys():
    assert set(ValidationVerdict(True, 0.0, 1.0, 3).to_dict()) == {
        "pass",
        "mean_gain_vs_ssf",
        "min_throughput_ratio",
        "episodes_evaluated",
    }
