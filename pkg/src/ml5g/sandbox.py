"""Simulator-backed twin of the underlay.

The sandbox serves two purposes: producing labelled association data for
training, and checking a candidate model against SSF before it reaches
production.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ml5g.association import (
    FEATURE_NAMES,
    AssociationState,
    CandidateFeatures,
    as_predictor,
    build_features,
    nn_associate,
)
from ml5g.nn import Dataset
from ml5g.pipeline import DataRecord, PolicyRule, RecordKind
from ml5g.underlay import (
    DEFAULT_RADIO,
    DensityClass,
    Deployment,
    InfeasibleScenarioError,
    LinkTable,
    RadioConfig,
    generate_deployment,
    ssf_associate,
)

log = logging.getLogger(__name__)

# held-out scenario stream for validation, disjoint from the training streams
VALIDATION_STREAM = 1_000_000

DATASET_HEADER = ("rssi", "load", "sta_count", "demand", "neighbors", "throughput")


@dataclass(frozen=True)
class SandboxConfig:
    densities: Mapping[str, float] = field(
        default_factory=lambda: {"sparse": 0.2, "medium": 0.4, "dense": 0.4}
    )
    episodes: int = 300
    seed: int = 0
    side_m: float = 100.0
    epsilon: float = 0.3
    validation_episodes: int = 30
    radio: RadioConfig = DEFAULT_RADIO
    divergence_knobs: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.episodes < 1 or self.validation_episodes < 1:
            raise ValueError("episodes must be at least 1")
        if not self.densities:
            raise ValueError("at least one density class required")
        for name, w in self.densities.items():
            DensityClass(name)
            if w < 0:
                raise ValueError(f"negative weight for {name}")
        if abs(sum(self.densities.values()) - 1.0) > 1e-9:
            raise ValueError("density weights must sum to 1")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")

    @property
    def effective_radio(self) -> RadioConfig:
        return self.radio.perturbed(self.divergence_knobs)

    def scenario_stream(self, stream: int, count: int) -> Iterable[tuple[int, str, int]]:
        """Yield ``(index, density, scenario_seed)`` from an independent RNG stream."""
        rng = np.random.default_rng([self.seed, stream])
        names = sorted(self.densities)
        weights = np.array([self.densities[n] for n in names])
        for i in range(count):
            density = names[int(rng.choice(len(names), p=weights))]
            yield i, density, int(rng.integers(2**31 - 1))


@dataclass(frozen=True)
class DecisionRow:
    step: int
    sta_id: int
    ap_id: int
    features: CandidateFeatures
    throughput: float


@dataclass
class Episode:
    index: int
    deployment: Deployment
    initial: dict[int, int]
    decisions: list[DecisionRow]


def run_episode(deployment: Deployment, index: int, rng: np.random.Generator, epsilon: float, radio: RadioConfig) -> Episode:
    """Replay one round of (re)association requests over an SSF-associated network.

    Every STA, in random order, leaves its AP and rejoins either a uniformly
    random audible AP (probability ``epsilon``) or its SSF AP. The label is
    the STA's throughput in the state right after its decision.
    """
    table = LinkTable(deployment, radio)
    initial = dict(ssf_associate(deployment, radio).assignment)
    state = AssociationState(table, initial)
    decisions = []
    order = rng.permutation([s.id for s in deployment.stas])
    for step, sta_id in enumerate(int(s) for s in order):
        sta = table.stas[sta_id]
        candidates = table.candidates[sta_id]
        if rng.random() < epsilon:
            ap_id = candidates[int(rng.integers(len(candidates)))]
        else:
            ap_id = initial[sta_id]
        features = build_features(sta, ap_id, state)
        state.assign(sta_id, ap_id)
        tp = table.ap_throughputs(ap_id, state.members[ap_id])[sta_id]
        decisions.append(DecisionRow(step, sta_id, ap_id, features, tp))
    return Episode(index, deployment, initial, decisions)


def generate_episodes(config: SandboxConfig, stream: int = 0) -> tuple[list[Episode], int]:
    """Episodes for one collection window plus the number of infeasible draws skipped."""
    radio = config.effective_radio
    episodes, skipped = [], 0
    for i, density, scenario_seed in config.scenario_stream(stream, config.episodes):
        try:
            dep = generate_deployment(density, config.side_m, scenario_seed, radio)
        except InfeasibleScenarioError as exc:
            log.info("skipping infeasible scenario: %s", exc)
            skipped += 1
            continue
        rng = np.random.default_rng([config.seed, stream, i, 1])
        episodes.append(run_episode(dep, i, rng, config.epsilon, radio))
    return episodes, skipped


def generate_training_data(config: SandboxConfig, stream: int = 0) -> Dataset:
    """Raw-unit dataset, one row per STA decision; normalization happens later."""
    episodes, skipped = generate_episodes(config, stream)
    rows = [(d.features.as_list(), d.throughput) for ep in episodes for d in ep.decisions]
    ds = Dataset(rows, list(FEATURE_NAMES))
    ds.meta = {"episodes": len(episodes), "skipped_infeasible": skipped}
    return ds


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATASET_HEADER)
    for x, t in dataset.rows:
        w.writerow([repr(float(v)) for v in (*x, t)])
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != DATASET_HEADER:
        raise ValueError(f"unexpected dataset header {header}")
    rows = [([float(v) for v in r[:-1]], float(r[-1])) for r in reader if r]
    return Dataset(rows, list(header[:-1]))


class SandboxSource:
    """Pipeline source emitting synthetic performance records.

    Each call to :meth:`emit` uses the twin's current radio and a fresh RNG
    stream, so every collection window gets new data.
    """

    def __init__(self, config: SandboxConfig, source_id: str = "sandbox"):
        self.config = config
        self.source_id = source_id
        self.stream = 0
        self.force_empty = False

    def calibrate(self, radio: RadioConfig) -> None:
        self.config = _replace_radio(self.config, radio)

    def emit(self, window: tuple[int, int]) -> Iterable[DataRecord]:
        if self.force_empty:
            return
        self.stream += 1
        episodes, _ = generate_episodes(self.config, self.stream)
        for ep in episodes:
            for d in ep.decisions:
                payload = {
                    **d.features.as_payload(),
                    "throughput": d.throughput,
                    "sta_id": d.sta_id,
                    "ap_id": d.ap_id,
                    "episode": ep.index,
                    "step": d.step,
                }
                yield DataRecord(self.source_id, window[0], RecordKind.PERFORMANCE, payload)


def _replace_radio(config: SandboxConfig, radio: RadioConfig) -> SandboxConfig:
    from dataclasses import replace

    return replace(config, radio=radio)


# validation ------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationThresholds:
    gain_floor: float = 0.0
    min_throughput_ratio: float = 1.0


@dataclass(frozen=True)
class ValidationVerdict:
    passed: bool
    mean_gain_vs_ssf: float
    min_throughput_ratio: float
    episodes_evaluated: int

    def to_dict(self) -> dict:
        return {
            "pass": self.passed,
            "mean_gain_vs_ssf": self.mean_gain_vs_ssf,
            "min_throughput_ratio": self.min_throughput_ratio,
            "episodes_evaluated": self.episodes_evaluated,
        }


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


def validate_model(
    model,
    config: SandboxConfig,
    thresholds: ValidationThresholds = ValidationThresholds(),
    policies: Sequence[PolicyRule] = (),
    stream: int = VALIDATION_STREAM,
) -> ValidationVerdict:
    """Compare NN association against SSF on fresh sandbox episodes.

    Gain is the relative change of mean per-STA throughput; the
    minimum-throughput ratio compares 10th percentiles (NN over SSF).
    """
    predictor = as_predictor(model)
    radio = config.effective_radio
    nn_tp, ssf_tp = [], []
    evaluated = 0
    for _, density, scenario_seed in config.scenario_stream(stream, config.validation_episodes):
        try:
            dep = generate_deployment(density, config.side_m, scenario_seed, radio)
        except InfeasibleScenarioError:
            continue
        table = LinkTable(dep, radio)
        ssf = ssf_associate(dep, radio)
        nn = nn_associate(dep, predictor, policies, order_seed=scenario_seed, radio=radio, table=table)
        ssf_tp += list(table.report(ssf.assignment).per_sta.values())
        nn_tp += list(table.report(nn.assignment).per_sta.values())
        evaluated += 1
    if not evaluated:
        return ValidationVerdict(False, 0.0, 0.0, 0)
    gain = _ratio(float(np.mean(nn_tp)), float(np.mean(ssf_tp))) - 1.0
    ratio = _ratio(float(np.percentile(nn_tp, 10)), float(np.percentile(ssf_tp, 10)))
    passed = gain >= thresholds.gain_floor and ratio >= thresholds.min_throughput_ratio
    return ValidationVerdict(passed, gain, ratio, evaluated)
