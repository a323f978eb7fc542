"""AP association driven by a throughput predictor, and the SSF comparison harness."""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from ml5g.nn import MlpModel, forward_batch
from ml5g.pipeline import (
    NoFeasibleAssignment,
    NormSchema,
    PolicyContext,
    PolicyRule,
    Proposal,
    apply_policy,
    effective_cap,
)
from ml5g.underlay import (
    DEFAULT_RADIO,
    AssociationError,
    AssociationMap,
    Deployment,
    LinkTable,
    RadioConfig,
    Station,
    generate_deployment,
    ssf_associate,
    throughput_rows,
)

log = logging.getLogger(__name__)

FEATURE_NAMES = ("rssi", "load", "sta_count", "demand", "neighbors")
TARGET_NAME = "throughput"


@dataclass(frozen=True)
class CandidateFeatures:
    rssi_dbm: float
    ap_load_mbps: float
    ap_sta_count: int
    sta_demand_mbps: float
    ap_cochannel_neighbors: int

    def as_list(self) -> list[float]:
        return [
            self.rssi_dbm,
            self.ap_load_mbps,
            float(self.ap_sta_count),
            self.sta_demand_mbps,
            float(self.ap_cochannel_neighbors),
        ]

    def as_payload(self) -> dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.as_list()))


class AssociationState:
    """Running association table with per-AP load bookkeeping."""

    def __init__(self, table: LinkTable, assignment: Mapping[int, int] | None = None):
        self.table = table
        self.assignment: dict[int, int] = {}
        # member lists stay sorted so float sums do not depend on arrival order
        self.members: dict[int, list[int]] = {a: [] for a in sorted(table.aps)}
        for s, a in sorted((assignment or {}).items()):
            self.assign(s, a)

    def assign(self, sta_id: int, ap_id: int) -> None:
        if sta_id in self.assignment:
            self.release(sta_id)
        self.assignment[sta_id] = ap_id
        bisect.insort(self.members[ap_id], sta_id)

    def release(self, sta_id: int) -> None:
        ap_id = self.assignment.pop(sta_id)
        self.members[ap_id].remove(sta_id)

    def load(self, ap_id: int, exclude: int | None = None) -> float:
        return sum(self.table.stas[s].demand_mbps for s in self.members[ap_id] if s != exclude)

    def counts(self) -> dict[int, int]:
        return {a: len(m) for a, m in self.members.items()}

    def throughput_if_joined(self, sta_id: int, ap_id: int) -> float:
        others = [s for s in self.members[ap_id] if s != sta_id]
        return self.table.ap_throughputs(ap_id, sorted([*others, sta_id]))[sta_id]


def build_features(sta: Station, ap_id: int, partial_state: AssociationState) -> CandidateFeatures:
    """Features of placing ``sta`` on ``ap_id`` given every decision made so far.

    The STA itself is excluded from the AP's load and count.
    """
    table = partial_state.table
    others = [s for s in partial_state.members[ap_id] if s != sta.id]
    return CandidateFeatures(
        rssi_dbm=table.rssi(sta.id, ap_id),
        ap_load_mbps=partial_state.load(ap_id, exclude=sta.id),
        ap_sta_count=len(others),
        sta_demand_mbps=sta.demand_mbps,
        ap_cochannel_neighbors=table.neighbors[ap_id],
    )


class Predictor(Protocol):
    def predict(self, state: AssociationState, sta: Station, candidates: Sequence[int]) -> list[float]: ...


class MlpPredictor:
    """Wraps a trained MLP: normalize features, run the net, map back to Mbps."""

    def __init__(self, model: MlpModel, schema: NormSchema | None = None):
        self.model = model
        if schema is None:
            schema = NormSchema(
                dict(zip(model.feature_names or FEATURE_NAMES, model.norm_schema)),
                TARGET_NAME,
                model.target_range,
            )
        self.schema = schema
        lo = np.array([p[0] for p in schema.pairs()])
        hi = np.array([p[1] for p in schema.pairs()])
        self._lo, self._span = lo, hi - lo

    def normalize(self, feats: Sequence[CandidateFeatures]) -> np.ndarray:
        raw = np.array([f.as_list() for f in feats], dtype=float)
        return np.clip((raw - self._lo) / self._span, 0.0, 1.0)

    def infer(self, X: np.ndarray) -> list[float]:
        """Run the net on normalized rows and map outputs back to Mbps."""
        lo, hi = self.schema.target_range
        return [max(0.0, lo + float(v) * (hi - lo)) for v in forward_batch(self.model, X)]

    def predict_features(self, feats: Sequence[CandidateFeatures]) -> list[float]:
        return self.infer(self.normalize(feats))

    def predict(self, state, sta, candidates):
        return self.predict_features([build_features(sta, a, state) for a in candidates])


class OraclePredictor:
    """Predicts the exact throughput the STA would get right after joining."""

    def predict(self, state, sta, candidates):
        return [state.throughput_if_joined(sta.id, a) for a in candidates]


class SignalPredictor:
    """Scores candidates by RSSI, which turns ``nn_associate`` into SSF."""

    def predict(self, state, sta, candidates):
        return [state.table.rssi(sta.id, a) for a in candidates]


class ConstantPredictor:
    def __init__(self, value: float = 0.0):
        self.value = value

    def predict(self, state, sta, candidates):
        return [self.value] * len(candidates)


def as_predictor(model) -> Predictor:
    return MlpPredictor(model) if isinstance(model, MlpModel) else model


def policy_context(state: AssociationState, sta_id: int, candidates: Iterable[int]) -> PolicyContext:
    table = state.table
    counts = {a: len([s for s in m if s != sta_id]) for a, m in state.members.items()}
    return PolicyContext(
        ap_counts=counts,
        ap_caps={a: ap.max_stas for a, ap in table.aps.items()},
        ap_tx_power={a: ap.tx_power_dbm for a, ap in table.aps.items()},
        link_rates={a: table.rate(sta_id, a) for a in candidates},
    )


def ssf_fallback(state: AssociationState, sta_id: int, rules: Sequence[PolicyRule]) -> int:
    """Strongest audible AP that still has room under the caps."""
    ctx = policy_context(state, sta_id, state.table.candidates[sta_id])
    ranked = sorted(state.table.candidates[sta_id], key=lambda a: (-state.table.rssi(sta_id, a), a))
    for a in ranked:
        if ctx.ap_counts[a] < effective_cap(a, rules, ctx):
            return a
    raise AssociationError(f"STA {sta_id}: no AP with spare capacity, even for SSF fallback")


@dataclass
class PlacementOutcome:
    ap_id: int
    predicted: float
    path: str
    features: CandidateFeatures


def place_one(
    state: AssociationState,
    sta: Station,
    predictor: Predictor,
    rules: Sequence[PolicyRule],
) -> PlacementOutcome:
    """Decide one STA against ``state`` without committing it."""
    candidates = state.table.candidates[sta.id]
    if not candidates:
        raise AssociationError(f"STA {sta.id} hears no AP above sensitivity")
    scores = predictor.predict(state, sta, candidates)
    proposal = Proposal(sta.id, dict(zip(candidates, scores)))
    try:
        ap_id = apply_policy(proposal, rules, policy_context(state, sta.id, candidates))
        path = "nn"
    except NoFeasibleAssignment as exc:
        log.debug("policy fallback to SSF: %s", exc)
        ap_id = ssf_fallback(state, sta.id, rules)
        path = "ssf_fallback"
    return PlacementOutcome(ap_id, proposal.scores[ap_id], path, build_features(sta, ap_id, state))


def nn_associate(
    deployment: Deployment,
    model,
    policies: Sequence[PolicyRule] = (),
    order_seed: int = 0,
    radio: RadioConfig = DEFAULT_RADIO,
    table: LinkTable | None = None,
) -> AssociationMap:
    """Sequential greedy association: each STA, in seeded random order, takes
    the AP with the highest predicted throughput that the policy allows."""
    predictor = as_predictor(model)
    table = table or LinkTable(deployment, radio)
    state = AssociationState(table)
    order = np.random.default_rng(order_seed).permutation([s.id for s in deployment.stas])
    for sta_id in order:
        sta = table.stas[int(sta_id)]
        state.assign(sta.id, place_one(state, sta, predictor, policies).ap_id)
    return AssociationMap(dict(sorted(state.assignment.items())))


# evaluation harness ---------------------------------------------------------


@dataclass(frozen=True)
class StrategySummary:
    strategy: str
    density: str
    mean: float
    p10: float
    p50: float
    p90: float

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "density": self.density,
            "mean": self.mean,
            "p10": self.p10,
            "p50": self.p50,
            "p90": self.p90,
        }


@dataclass
class EvaluationResult:
    rows: list[tuple] = field(default_factory=list)
    summary: list[StrategySummary] = field(default_factory=list)

    def throughputs(self, strategy: str, density: str | None = None) -> list[float]:
        return [r[4] for r in self.rows if r[5] == strategy and (density is None or r[1] == density)]

    def get(self, strategy: str, density: str) -> StrategySummary:
        for s in self.summary:
            if s.strategy == strategy and s.density == density:
                return s
        raise KeyError((strategy, density))


def summarize(values: Sequence[float], strategy: str, density: str) -> StrategySummary:
    arr = np.asarray(values, dtype=float)
    p10, p50, p90 = np.percentile(arr, [10, 50, 90])
    return StrategySummary(strategy, density, float(arr.mean()), float(p10), float(p50), float(p90))


def evaluate_fig5(
    densities: Sequence[str],
    seeds: Sequence[int],
    model,
    policies: Sequence[PolicyRule] = (),
    side_m: float = 100.0,
    radio: RadioConfig = DEFAULT_RADIO,
) -> EvaluationResult:
    """Per-STA throughput of SSF and the NN strategy over a (density, seed) grid."""
    predictor = as_predictor(model)
    result = EvaluationResult()
    for density in densities:
        for seed in seeds:
            dep = generate_deployment(density, side_m, seed, radio)
            table = LinkTable(dep, radio)
            ssf = ssf_associate(dep, radio)
            nn = nn_associate(dep, predictor, policies, order_seed=seed, radio=radio, table=table)
            result.rows += throughput_rows(dep, table.report(ssf.assignment), "ssf")
            result.rows += throughput_rows(dep, table.report(nn.assignment), "nn")
    for density in densities:
        for strategy in ("ssf", "nn"):
            result.summary.append(summarize(result.throughputs(strategy, density), strategy, density))
    return result
