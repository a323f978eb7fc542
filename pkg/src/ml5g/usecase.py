"""AP association as an orchestrated use case: cloud training, edge placement.

``deploy`` binds concrete behaviour to the stages that :func:`instantiate`
placed. ``run_training_phase`` drives the cloud side and ``handle_request``
serves one (re)association request at an edge.
"""

from __future__ import annotations

import logging
import statistics
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ml5g.association import (
    AssociationState,
    MlpPredictor,
    build_features,
    policy_context,
    ssf_fallback,
)
from ml5g.mlfo import (
    FallbackToSSF,
    InstanceState,
    MLIntent,
    PipelineInstance,
    Retrain,
    Sample,
    TickReport,
    instantiate,
    monitor,
)
from ml5g.nn import Dataset, MlpModel, TrainingError, train
from ml5g.pipeline import (
    Ack,
    DataRecord,
    Decision,
    DecisionRejected,
    EdgeSink,
    Host,
    LiveNetwork,
    NoFeasibleAssignment,
    Proposal,
    RecordKind,
    StageKind,
    Transport,
    apply_policy,
    collect,
    distribute,
    preprocess,
    sha256_hex,
    sink_apply,
)
from ml5g.sandbox import SandboxConfig, SandboxSource, validate_model
from ml5g.underlay import DEFAULT_RADIO, RadioConfig, generate_deployment, ssf_associate

log = logging.getLogger(__name__)

# radio fields an AP can report about its own channel
CALIBRATED_FIELDS = ("noise_floor_dbm", "tx_power_dbm", "path_loss_exponent", "ref_loss_db")

PLACEMENT_STAGES = (
    StageKind.PREPROCESSOR,
    StageKind.MODEL,
    StageKind.POLICY,
    StageKind.DISTRIBUTOR,
    StageKind.SINK,
)


@dataclass(frozen=True)
class StaEvent:
    sta_id: int
    tick: int = 0


@dataclass(frozen=True)
class AppliedDecision:
    sta_id: int
    ap_id: int
    path: str
    predicted: float | None
    achieved: float
    ack: Ack


@dataclass
class EdgeServer:
    host_id: str
    sink: EdgeSink
    instance: PipelineInstance
    samples: list[Sample] = field(default_factory=list)
    _predictors: dict = field(default_factory=dict, repr=False)

    @property
    def network(self) -> LiveNetwork:
        return self.sink.network

    @property
    def stale(self) -> bool:
        return self.sink.active_hash is None or self.sink.active_hash != self.instance.active_model_hash

    def predictor(self) -> MlpPredictor:
        digest = self.sink.active_hash
        if digest not in self._predictors:
            self._predictors = {digest: MlpPredictor(MlpModel.from_bytes(self.sink.active_bytes))}
        return self._predictors[digest]

    def schema_bytes(self) -> bytes:
        return self.predictor().schema.to_bytes()


class UnderlaySource:
    """Production-side source: per-AP channel reports and placement outcomes."""

    source_id = "underlay"

    def __init__(self, network: LiveNetwork | None, edges: Sequence[EdgeServer] = ()):
        self.network = network
        self.edges = list(edges)

    def channel_reports(self, tick: int) -> list[DataRecord]:
        if self.network is None:
            return []
        radio = self.network.radio
        out = []
        for ap in self.network.deployment.aps:
            payload = {"ap_id": ap.id, **{f: getattr(radio, f) for f in CALIBRATED_FIELDS}}
            out.append(DataRecord(self.source_id, tick, RecordKind.CHANNEL_REPORT, payload))
        return out

    def emit(self, window: tuple[int, int]) -> Iterable[DataRecord]:
        yield from self.channel_reports(window[1])
        for edge in self.edges:
            for i, s in enumerate(edge.samples):
                if window[0] <= s.tick <= window[1] and getattr(s, "features", None) is not None:
                    payload = {
                        **s.features.as_payload(),
                        "throughput": s.achieved,
                        "sta_id": s.sta_id,
                        "ap_id": s.ap_id,
                        "edge": edge.host_id,
                        "seq": i,
                    }
                    yield DataRecord(self.source_id, s.tick, RecordKind.PERFORMANCE, payload)


@dataclass
class PlacementSample(Sample):
    sta_id: int = -1
    ap_id: int = -1
    features: object = None


def calibrate_radio(base: RadioConfig, records: Iterable[DataRecord]) -> RadioConfig:
    """Twin radio constants from the median of reported channel values."""
    reports = [r.payload for r in records if r.kind is RecordKind.CHANNEL_REPORT]
    if not reports:
        return base
    fields = {}
    for f in CALIBRATED_FIELDS:
        vals = [p[f] for p in reports if f in p]
        if vals:
            fields[f] = float(statistics.median(vals))
    return replace(base, **fields)


def production_network(seed: int = 0, density: str = "medium", side_m: float = 100.0, radio: RadioConfig = DEFAULT_RADIO) -> LiveNetwork:
    dep = generate_deployment(density, side_m, seed, radio)
    return LiveNetwork(dep, radio, ssf_associate(dep, radio).assignment)


# deployment -------------------------------------------------------------------


def deploy(
    intent: MLIntent,
    hosts: Sequence[Host],
    network: LiveNetwork | None = None,
    transport: Transport | None = None,
    event_log=None,
    sandbox_config: SandboxConfig | None = None,
) -> PipelineInstance:
    """Instantiate the pipeline and bind the association behaviour to its stages."""
    inst = instantiate(intent, hosts, event_log)
    sinks = {h: EdgeSink(h, network) for h in inst.placements[StageKind.SINK]}
    edges = {h: EdgeServer(h, sinks[h], inst) for h in sinks}
    sources = []
    sandbox_source = None
    if inst.sandbox_attached:
        sandbox_source = SandboxSource(sandbox_config or intent.sandbox, source_id="sandbox")
        sources.append(sandbox_source)
    underlay = UnderlaySource(network, list(edges.values()))
    sources.append(underlay)
    inst.runtime.update(
        network=network,
        sinks=sinks,
        edges=edges,
        sources=sources,
        sandbox=sandbox_source,
        underlay=underlay,
        transport=transport or Transport(),
        counters=Counter(),
        models={},
    )
    _bind_stages(inst)
    return inst


def _bind_stages(inst: PipelineInstance) -> None:
    for stage in inst.pipeline.stages.values():
        on_edge = stage.host in inst.runtime["edges"]
        if on_edge:
            stage.fn = {
                StageKind.PREPROCESSOR: _edge_preprocess,
                StageKind.MODEL: _edge_model,
                StageKind.POLICY: _edge_policy,
                StageKind.DISTRIBUTOR: _edge_distribute,
                StageKind.SINK: _edge_sink,
            }.get(stage.kind)


# placement phase (edge) ---------------------------------------------------------


@dataclass
class _Request:
    edge: EdgeServer
    state: AssociationState
    sta_id: int
    candidates: list[int]
    X: object = None
    scores: dict | None = None
    ap_id: int | None = None
    path: str = "nn"
    decision: Decision | None = None
    ack: Ack | None = None


def _edge_preprocess(req: _Request) -> _Request:
    sta = req.state.table.stas[req.sta_id]
    feats = [build_features(sta, a, req.state) for a in req.candidates]
    req.X = req.edge.predictor().normalize(feats)
    return req


def _edge_model(req: _Request) -> _Request:
    req.scores = dict(zip(req.candidates, req.edge.predictor().infer(req.X)))
    return req


def _edge_policy(req: _Request) -> _Request:
    rules = req.edge.instance.intent.policies
    try:
        req.ap_id = apply_policy(
            Proposal(req.sta_id, req.scores), rules, policy_context(req.state, req.sta_id, req.candidates)
        )
    except NoFeasibleAssignment as exc:
        log.debug("policy fallback to SSF: %s", exc)
        req.ap_id = ssf_fallback(req.state, req.sta_id, rules)
        req.path = "ssf_fallback"
    return req


def _edge_distribute(req: _Request) -> _Request:
    req.decision = Decision(req.sta_id, req.ap_id, req.path)
    return req


def _edge_sink(req: _Request) -> _Request:
    req.ack = sink_apply(req.edge.sink, req.decision)
    return req


def handle_request(edge: EdgeServer, sta_event: StaEvent) -> AppliedDecision:
    """Serve one (re)association request against the live network."""
    net = edge.network
    sta_id = sta_event.sta_id
    if net is None or sta_id not in net.table.stas:
        raise DecisionRejected(f"unknown STA {sta_id}")
    table = net.table
    others = {s: a for s, a in net.assignment.items() if s != sta_id}
    state = AssociationState(table, others)
    candidates = table.candidates[sta_id]
    if not candidates:
        raise DecisionRejected(f"STA {sta_id} hears no AP")
    rules = edge.instance.intent.policies

    if edge.stale:
        ap_id = ssf_fallback(state, sta_id, rules)
        ack = sink_apply(edge.sink, Decision(sta_id, ap_id, "ssf_stale"))
        state.assign(sta_id, ap_id)
        achieved = table.ap_throughputs(ap_id, state.members[ap_id])[sta_id]
        edge.instance.events.append("fallback_decision", edge=edge.host_id, sta_id=sta_id, ap_id=ap_id)
        return AppliedDecision(sta_id, ap_id, "ssf_stale", None, achieved, ack)

    req = _Request(edge, state, sta_id, candidates)
    req = edge.instance.pipeline.run_linear(req, PLACEMENT_STAGES, host=edge.host_id)
    features = build_features(table.stas[sta_id], req.ap_id, state)
    state.assign(sta_id, req.ap_id)
    achieved = table.ap_throughputs(req.ap_id, state.members[req.ap_id])[sta_id]
    predicted = req.scores[req.ap_id]
    edge.samples.append(
        PlacementSample(sta_event.tick, edge.host_id, predicted, achieved, sta_id, req.ap_id, features)
    )
    return AppliedDecision(sta_id, req.ap_id, req.path, predicted, achieved, req.ack)


def edge_for(instance: PipelineInstance, sta_id: int) -> EdgeServer:
    edges = instance.runtime["edges"]
    names = sorted(edges)
    return edges[names[sta_id % len(names)]]


# training phase (cloud) ---------------------------------------------------------


def _training_data(instance: PipelineInstance, window: tuple[int, int]) -> Dataset:
    rt = instance.runtime
    schema = instance.intent.norm_schema
    if rt["sandbox"] is not None:
        radio = calibrate_radio(rt["sandbox"].config.radio, rt["underlay"].channel_reports(window[1]))
        if radio != rt["sandbox"].config.radio:
            instance.events.append("twin_calibrated", **{f: getattr(radio, f) for f in CALIBRATED_FIELDS})
        rt["sandbox"].calibrate(radio)
    records = collect(rt["sources"], window)
    rows = preprocess(records, schema, rt["counters"])
    instance.events.append("collected", window=list(window), records=len(records), rows=len(rows))
    return Dataset([(list(fv.values), t) for fv, t in rows], list(schema.names))


def run_training_phase(instance: PipelineInstance) -> str:
    """Collect, preprocess, train, validate and distribute until a model serves.

    A failed validation loops back to training with a fresh collection
    window; after ``max_attempts`` the instance fails.
    """
    intent = instance.intent
    rt = instance.runtime
    if instance.state not in (InstanceState.INITIALIZING, InstanceState.RETRAINING):
        raise RuntimeError(f"training phase cannot start while {instance.state.value}")
    sandbox_cfg = rt["sandbox"].config if rt["sandbox"] is not None else (intent.sandbox or SandboxConfig())
    for attempt in range(1, intent.max_attempts + 1):
        window = instance.next_window()
        instance.transition(InstanceState.TRAINING, attempt=attempt, window=list(window))
        dataset = _training_data(instance, window)
        try:
            model = train(
                dataset,
                intent.layer_sizes,
                intent.training,
                norm_schema=intent.norm_schema.pairs(),
                target_range=intent.norm_schema.target_range,
            )
        except TrainingError as exc:
            instance.fail(str(exc))
            raise
        artifact = model.to_bytes()
        digest = sha256_hex(artifact)
        rt["models"][digest] = artifact
        instance.transition(InstanceState.VALIDATING, hash=digest)
        if rt["sandbox"] is not None:
            sandbox_cfg = rt["sandbox"].config
        verdict = validate_model(model, sandbox_cfg, intent.validation, intent.policies)
        instance.record_validation(digest, verdict)
        if verdict.passed:
            receipts = distribute(artifact, list(rt["sinks"].values()), rt["transport"])
            instance.activate(digest, artifact, receipts)
            return digest
        log.info("validation failed on attempt %d: %s", attempt, verdict)
    instance.transition(InstanceState.TRAINING, attempt=intent.max_attempts + 1)
    instance.fail(f"validation failed after {intent.max_attempts} attempts")
    raise TrainingError(instance.failure_cause)


def active_model(instance: PipelineInstance) -> MlpModel:
    if instance.active_artifact is None:
        raise RuntimeError("no active model")
    return MlpModel.from_bytes(instance.active_artifact)


# control loop -------------------------------------------------------------------


def serve_tick(instance: PipelineInstance, tick: int, sta_ids: Sequence[int]) -> tuple[list[AppliedDecision], list]:
    """Serve one tick of requests, feed the monitor and dispatch its actions."""
    decisions = []
    fresh: list[Sample] = []
    for sta_id in sta_ids:
        edge = edge_for(instance, sta_id)
        before = len(edge.samples)
        decisions.append(handle_request(edge, StaEvent(sta_id, tick)))
        fresh += edge.samples[before:]
    hashes = {h: s.active_hash for h, s in instance.runtime["sinks"].items()}
    actions = monitor(instance, TickReport(tick, fresh, hashes))
    for action in actions:
        if isinstance(action, Retrain):
            instance.jobs.submit(lambda: run_training_phase(instance))
        elif isinstance(action, FallbackToSSF):
            log.warning("edge %s holds a stale model; serving SSF", action.edge_id)
    for done in instance.jobs.drain():
        exc = done.exception()
        instance.events.append("job_done", ok=exc is None, error=None if exc is None else str(exc))
    return decisions, actions


def place_round(instance: PipelineInstance, order_seed: int) -> dict[int, int]:
    """Associate every STA from scratch through the edges, in seeded order."""
    net = instance.runtime["network"]
    net.assignment.clear()
    order = np.random.default_rng(order_seed).permutation([s.id for s in net.deployment.stas])
    for sta_id in order:
        handle_request(edge_for(instance, int(sta_id)), StaEvent(int(sta_id)))
    return dict(sorted(net.assignment.items()))

