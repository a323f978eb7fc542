"""Orchestration: intents in, wired pipeline instances out, plus runtime monitoring."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import jsonschema

from ml5g.nn import TrainingConfig
from ml5g.pipeline import (
    STAGE_ORDER,
    Host,
    HostRole,
    NormSchema,
    Pipeline,
    PolicyRule,
    Stage,
    StageKind,
)
from ml5g.sandbox import SandboxConfig, ValidationThresholds

log = logging.getLogger(__name__)

KNOWN_USE_CASES = frozenset({"ap_association"})


def _data_text(name: str) -> str:
    return resources.files("ml5g").joinpath("data", name).read_text()


def default_intent_text() -> str:
    return _data_text("ap_association.json")


def intent_schema() -> dict:
    return json.loads(_data_text("intent.schema.json"))


class IntentError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InstantiationError(RuntimeError):
    pass


class IllegalTransition(RuntimeError):
    pass


# intent ---------------------------------------------------------------------


@dataclass(frozen=True)
class StageSpec:
    kind: StageKind
    on: tuple[HostRole, ...]


@dataclass(frozen=True)
class MLIntent:
    use_case: str
    layer_sizes: tuple[int, ...]
    training: TrainingConfig
    host_counts: Mapping[str, int]
    stages: tuple[StageSpec, ...]
    policies: tuple[PolicyRule, ...]
    eval_window: int
    retrain_threshold: float
    norm_schema: NormSchema
    sandbox: SandboxConfig | None
    validation: ValidationThresholds
    max_attempts: int = 3

    @property
    def wants_sandbox(self) -> bool:
        return any(HostRole.SANDBOX in s.on for s in self.stages)

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "use_case": self.use_case,
            "model_spec": {
                "layer_sizes": list(self.layer_sizes),
                "training": {
                    "learning_rate": self.training.learning_rate,
                    "epochs": self.training.epochs,
                    "batch_size": self.training.batch_size,
                    "seed": self.training.seed,
                    "validation_fraction": self.training.validation_fraction,
                },
            },
            "pipeline_spec": {
                "hosts": dict(self.host_counts),
                "stages": [{"kind": s.kind.value, "on": [r.value for r in s.on]} for s in self.stages],
            },
            "policies": [p.to_dict() for p in self.policies],
            "monitoring": {
                "eval_window": self.eval_window,
                "retrain_rel_error_threshold": self.retrain_threshold,
            },
            "norm_schema": self.norm_schema.to_dict(),
            "validation": {
                "gain_floor": self.validation.gain_floor,
                "min_throughput_ratio": self.validation.min_throughput_ratio,
                "max_attempts": self.max_attempts,
            },
        }
        if self.sandbox is not None:
            sb = self.sandbox
            d["sandbox"] = {
                "densities": dict(sb.densities),
                "episodes": sb.episodes,
                "validation_episodes": sb.validation_episodes,
                "seed": sb.seed,
                "epsilon": sb.epsilon,
                "side_m": sb.side_m,
                "divergence_knobs": dict(sb.divergence_knobs),
            }
        return d

    def to_json(self) -> str:
        # feature order is meaningful, so keys keep insertion order here
        return json.dumps(self.to_dict(), indent=2)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _fmt_path(parts) -> str:
    return "/".join(str(p) for p in parts)


def _schema_errors(doc) -> list[str]:
    validator = jsonschema.Draft7Validator(intent_schema())
    out = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        path = _fmt_path(err.absolute_path)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            msg = f"missing {missing}"
        else:
            msg = err.message
        out.append(f"{path}: {msg}" if path else msg)
    return out


def _semantic_errors(doc: Mapping) -> list[str]:
    errors: list[str] = []

    def check(fn: Callable[[], None]):
        try:
            fn()
        except (KeyError, TypeError, AttributeError, IndexError):
            pass  # structural problems are already reported by the schema

    def use_case():
        if isinstance(doc["use_case"], str) and doc["use_case"] not in KNOWN_USE_CASES:
            errors.append(f"use_case: unknown use case {doc['use_case']!r}")

    def hosts():
        counts = doc["pipeline_spec"]["hosts"]
        if counts.get("cloud", 0) != 1:
            errors.append(f"pipeline_spec/hosts/cloud: exactly one cloud host required, got {counts.get('cloud', 0)}")
        if counts.get("edge", 0) < 1:
            errors.append("pipeline_spec/hosts/edge: at least one edge host required")

    def stages():
        counts = doc["pipeline_spec"]["hosts"]
        specs = doc["pipeline_spec"]["stages"]
        kinds = [s.get("kind") for s in specs]
        for k in STAGE_ORDER:
            n = kinds.count(k.value)
            if n != 1:
                errors.append(f"pipeline_spec/stages: stage {k.value} must appear exactly once, found {n}")
        for i, s in enumerate(specs):
            for j, role in enumerate(s.get("on", [])):
                if role in ("cloud", "edge", "sandbox") and counts.get(role, 0) < 1:
                    errors.append(f"pipeline_spec/stages/{i}/on/{j}: no {role} host declared")

    def threshold():
        t = doc["monitoring"]["retrain_rel_error_threshold"]
        if isinstance(t, (int, float)) and not 0 < t < 1:
            errors.append(f"monitoring/retrain_rel_error_threshold: {t} is outside (0, 1)")

    def layers():
        sizes = doc["model_spec"]["layer_sizes"]
        n_feat = len(doc["norm_schema"]["features"])
        if sizes[0] != n_feat:
            errors.append(f"model_spec/layer_sizes/0: input size {sizes[0]} != {n_feat} schema features")
        if sizes[-1] != 1:
            errors.append(f"model_spec/layer_sizes/{len(sizes) - 1}: output size must be 1")

    def norm():
        feats = doc["norm_schema"]["features"]
        for name, rng in [*feats.items(), ("target_range", doc["norm_schema"]["target_range"])]:
            lo, hi = rng
            if not lo < hi:
                path = "norm_schema/target_range" if name == "target_range" else f"norm_schema/features/{name}"
                errors.append(f"{path}: min must be below max, got [{lo}, {hi}]")
        if doc.get("use_case") == "ap_association":
            from ml5g.association import FEATURE_NAMES, TARGET_NAME

            if tuple(feats) != FEATURE_NAMES:
                errors.append(f"norm_schema/features: expected features {list(FEATURE_NAMES)} in order")
            if doc["norm_schema"]["target"] != TARGET_NAME:
                errors.append(f"norm_schema/target: expected {TARGET_NAME!r}")

    def sandbox():
        dens = doc["sandbox"]["densities"]
        if abs(sum(dens.values()) - 1.0) > 1e-9:
            errors.append("sandbox/densities: weights must sum to 1")

    for fn in (use_case, hosts, stages, threshold, layers, norm, sandbox):
        check(fn)
    return errors


def parse_intent(file_bytes: bytes | str) -> MLIntent:
    """Validate an intent document; raises :class:`IntentError` listing every problem."""
    text = file_bytes.decode() if isinstance(file_bytes, bytes) else file_bytes
    if not text.strip():
        doc: Any = {}
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise IntentError([f"invalid JSON: {exc}"]) from None
    errors = _schema_errors(doc)
    if isinstance(doc, dict):
        errors += _semantic_errors(doc)
    if errors:
        raise IntentError(errors)

    spec = doc["model_spec"]
    sb = doc.get("sandbox")
    val = doc.get("validation", {})
    return MLIntent(
        use_case=doc["use_case"],
        layer_sizes=tuple(spec["layer_sizes"]),
        training=TrainingConfig(**spec.get("training", {})),
        host_counts=dict(doc["pipeline_spec"]["hosts"]),
        stages=tuple(
            StageSpec(StageKind(s["kind"]), tuple(HostRole(r) for r in s["on"]))
            for s in doc["pipeline_spec"]["stages"]
        ),
        policies=tuple(PolicyRule.parse(p) for p in doc.get("policies", [])),
        eval_window=doc["monitoring"]["eval_window"],
        retrain_threshold=float(doc["monitoring"]["retrain_rel_error_threshold"]),
        norm_schema=NormSchema.from_dict(doc["norm_schema"]),
        sandbox=None if sb is None else SandboxConfig(
            densities=dict(sb.get("densities", {"sparse": 0.2, "medium": 0.4, "dense": 0.4})),
            episodes=sb.get("episodes", 300),
            validation_episodes=sb.get("validation_episodes", 30),
            seed=sb.get("seed", 0),
            epsilon=sb.get("epsilon", 0.3),
            side_m=float(sb.get("side_m", 100.0)),
            divergence_knobs=dict(sb.get("divergence_knobs", {})),
        ),
        validation=ValidationThresholds(
            float(val.get("gain_floor", 0.0)), float(val.get("min_throughput_ratio", 1.0))
        ),
        max_attempts=val.get("max_attempts", 3),
    )


def load_intent(path: str | Path | None = None) -> MLIntent:
    return parse_intent(default_intent_text() if path is None else Path(path).read_bytes())


# instance -------------------------------------------------------------------


class InstanceState(str, Enum):
    INITIALIZING = "initializing"
    TRAINING = "training"
    VALIDATING = "validating"
    SERVING = "serving"
    RETRAINING = "retraining"
    FAILED = "failed"


_TRANSITIONS = {
    InstanceState.INITIALIZING: {InstanceState.TRAINING},
    InstanceState.TRAINING: {InstanceState.VALIDATING},
    InstanceState.VALIDATING: {InstanceState.SERVING, InstanceState.TRAINING},
    InstanceState.SERVING: {InstanceState.RETRAINING},
    InstanceState.RETRAINING: {InstanceState.TRAINING},
    InstanceState.FAILED: set(),
}


class EventLog:
    """Append-only event list, mirrored to a JSONL file when a path is given."""

    def __init__(self, path: str | Path | None = None):
        self.events: list[dict] = []
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    def append(self, event: str, **fields) -> dict:
        with self._lock:
            rec = {"seq": len(self.events), "event": event, **fields}
            self.events.append(rec)
            if self.path:
                with self.path.open("a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def of(self, event: str) -> list[dict]:
        return [e for e in self.events if e["event"] == event]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def serving_preceded_by_validation(events: Sequence[Mapping]) -> bool:
    """True when every activated hash had a passing validation earlier in the log."""
    passed: set[str] = set()
    for e in events:
        if e["event"] == "validated" and e.get("passed"):
            passed.add(e["hash"])
        elif e["event"] == "activated" and e["hash"] not in passed:
            return False
    return True


class JobRunner:
    """Runs training/validation work off the control loop.

    ``threaded=False`` executes jobs on submit, which keeps tests simple and
    deterministic; the control loop sees the same completion events either way.
    """

    def __init__(self, threaded: bool = False):
        self._pool = ThreadPoolExecutor(max_workers=1) if threaded else None
        self.pending: list[Future] = []

    def submit(self, fn: Callable[[], Any]) -> Future:
        if self._pool is not None:
            fut = self._pool.submit(fn)
        else:
            fut = Future()
            try:
                fut.set_result(fn())
            except BaseException as exc:  # noqa: BLE001 - surfaced through the future
                fut.set_exception(exc)
        self.pending.append(fut)
        return fut

    def drain(self, wait: bool = False) -> list[Future]:
        """Remove and return finished jobs; with ``wait`` block until all finish."""
        if wait:
            for f in self.pending:
                f.exception()
        done = [f for f in self.pending if f.done()]
        self.pending = [f for f in self.pending if not f.done()]
        return done

    def shutdown(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)


@dataclass
class Sample:
    tick: int
    edge_id: str
    predicted: float
    achieved: float

    @property
    def rel_error(self) -> float:
        return rel_error(self.predicted, self.achieved)


def rel_error(predicted: float, achieved: float) -> float:
    return abs(predicted - achieved) / max(achieved, 1.0)


@dataclass
class MonitorState:
    window: deque = field(default_factory=deque)
    last_retrain_tick: int | None = None
    last_error: float | None = None
    serving_since: int = 0

    def reset(self, tick: int = 0):
        self.window.clear()
        self.last_error = None
        self.serving_since = tick


class PipelineInstance:
    def __init__(self, intent: MLIntent, hosts: Sequence[Host], pipeline: Pipeline, placements: Mapping[StageKind, list[str]], event_log: EventLog | None = None):
        self.intent = intent
        self.hosts = list(hosts)
        self.pipeline = pipeline
        self.placements = dict(placements)
        self.id = f"{intent.use_case}-{intent.digest()[:8]}"
        self.state = InstanceState.INITIALIZING
        self.active_model_hash: str | None = None
        self.active_artifact: bytes | None = None
        self.failure_cause: str | None = None
        self.events = event_log or EventLog()
        self.monitor_state = MonitorState()
        self.jobs = JobRunner()
        self.sandbox_attached = intent.wants_sandbox and intent.sandbox is not None
        self.window_index = 0
        self.tick = 0
        self.runtime: dict[str, Any] = {}  # use-case components bound after instantiation
        self._lock = threading.RLock()
        self.events.append("instantiated", instance=self.id, state=self.state.value)

    @property
    def cloud(self) -> Host:
        return next(h for h in self.hosts if h.role is HostRole.CLOUD)

    @property
    def edges(self) -> list[Host]:
        return [h for h in self.hosts if h.role is HostRole.EDGE]

    def transition(self, new: InstanceState | str, **info) -> None:
        new = InstanceState(new)
        with self._lock:
            if new is not InstanceState.FAILED and new not in _TRANSITIONS[self.state]:
                raise IllegalTransition(f"{self.state.value} -> {new.value}")
            old, self.state = self.state, new
            self.events.append("state", **{"from": old.value, "to": new.value}, **info)

    def fail(self, cause: str) -> None:
        with self._lock:
            self.failure_cause = cause
            self.transition(InstanceState.FAILED, cause=cause)

    def record_validation(self, digest: str, verdict) -> None:
        self.events.append("validated", hash=digest, passed=bool(verdict.passed), **_verdict_fields(verdict))

    def activate(self, digest: str, artifact: bytes, receipts) -> None:
        """Make ``digest`` the serving model; only legal right after a passing validation."""
        with self._lock:
            if self.state is not InstanceState.VALIDATING:
                raise IllegalTransition(f"cannot activate a model while {self.state.value}")
            last = self.events.of("validated")
            if not last or last[-1]["hash"] != digest or not last[-1]["passed"]:
                raise IllegalTransition(f"model {digest[:12]} has not passed validation")
            self.active_model_hash, self.active_artifact = digest, artifact
            self.monitor_state.reset(self.tick)
            self.events.append(
                "activated",
                hash=digest,
                delivered=[r.sink_id for r in receipts if r.ok],
                failed=[r.sink_id for r in receipts if not r.ok],
            )
            self.transition(InstanceState.SERVING, hash=digest)

    def next_window(self) -> tuple[int, int]:
        w = self.intent.eval_window
        self.window_index += 1
        return (max(0, self.tick - w + 1), self.tick)

    def dump(self) -> dict:
        return {
            "id": self.id,
            "use_case": self.intent.use_case,
            "state": self.state.value,
            "active_model_hash": self.active_model_hash,
            "failure_cause": self.failure_cause,
            "sandbox_attached": self.sandbox_attached,
            "hosts": [{"host_id": h.host_id, "role": h.role.value} for h in self.hosts],
            "placements": {k.value: v for k, v in self.placements.items()},
            "graph": self.pipeline.graph(),
            "edge_hashes": {
                sid: sink.active_hash for sid, sink in sorted(self.runtime.get("sinks", {}).items())
            },
        }


def _verdict_fields(verdict) -> dict:
    d = verdict.to_dict()
    d.pop("pass", None)
    return d


def default_hosts(edges: int = 1, sandbox: bool = True) -> list[Host]:
    hosts = [Host("cloud-0", HostRole.CLOUD)]
    hosts += [Host(f"edge-{i}", HostRole.EDGE) for i in range(edges)]
    if sandbox:
        hosts.append(Host("sandbox-0", HostRole.SANDBOX))
    return hosts


def instantiate(intent: MLIntent, host_registry: Sequence[Host], event_log: EventLog | None = None) -> PipelineInstance:
    """Place every stage on its hosts and wire the graph.

    A stage feeds the next stage in the intent's list on the same host when
    one exists there, otherwise every instance of that next stage. Policy also
    feeds its co-located Model (constraint path).
    """
    by_role: dict[HostRole, list[Host]] = {r: [] for r in HostRole}
    for h in sorted(host_registry, key=lambda h: h.host_id):
        by_role[h.role].append(h)
    if not by_role[HostRole.CLOUD]:
        raise InstantiationError("registry has no cloud host")
    if not by_role[HostRole.EDGE]:
        raise InstantiationError("registry has no edge hosts")
    for role in HostRole:
        need = intent.host_counts.get(role.value, 0)
        if len(by_role[role]) < need:
            raise InstantiationError(f"intent needs {need} {role.value} host(s), registry has {len(by_role[role])}")
    hosts = by_role[HostRole.CLOUD][:1] + by_role[HostRole.EDGE]
    if any(HostRole.SANDBOX in s.on for s in intent.stages):
        if not by_role[HostRole.SANDBOX]:
            raise InstantiationError("intent places stages on a sandbox but the registry has none")
        hosts += by_role[HostRole.SANDBOX][:1]

    placed: dict[StageKind, list[str]] = {}
    stages: list[Stage] = []
    for spec in intent.stages:
        ids = [h.host_id for h in hosts if h.role in spec.on]
        placed[spec.kind] = ids
        stages += [Stage(f"{spec.kind.value}@{hid}", spec.kind, hid) for hid in ids]

    edges = []
    for cur, nxt in zip(intent.stages, intent.stages[1:]):
        for u in placed[cur.kind]:
            targets = [u] if u in placed[nxt.kind] else placed[nxt.kind]
            edges += [(f"{cur.kind.value}@{u}", f"{nxt.kind.value}@{v}") for v in targets]
    for hid in placed.get(StageKind.POLICY, []):
        if hid in placed.get(StageKind.MODEL, []):
            edges.append((f"Policy@{hid}", f"Model@{hid}"))
    pipeline = Pipeline(stages, edges)
    return PipelineInstance(intent, hosts, pipeline, placed, event_log)


# monitoring -------------------------------------------------------------------


@dataclass(frozen=True)
class Retrain:
    tick: int
    rolling_error: float

    def to_dict(self):
        return {"action": "Retrain", "tick": self.tick, "rolling_error": self.rolling_error}


@dataclass(frozen=True)
class FallbackToSSF:
    tick: int
    edge_id: str

    def to_dict(self):
        return {"action": "FallbackToSSF", "tick": self.tick, "edge_id": self.edge_id}


@dataclass
class TickReport:
    tick: int
    samples: Sequence[Sample] = ()
    edge_hashes: Mapping[str, str | None] = field(default_factory=dict)


def rolling_error(samples: Sequence[Sample], tick: int, eval_window: int) -> float | None:
    """Mean relative error of the samples in the last ``eval_window`` ticks."""
    inside = [s.rel_error for s in samples if tick - eval_window < s.tick <= tick]
    return sum(inside) / len(inside) if inside else None


def monitor(instance: PipelineInstance, tick_report: TickReport) -> list:
    """Turn one tick of observations into actions. Never raises."""
    actions: list = []
    try:
        with instance._lock:
            instance.tick = max(instance.tick, tick_report.tick)
            for edge_id, digest in sorted(tick_report.edge_hashes.items()):
                if instance.active_model_hash is not None and digest != instance.active_model_hash:
                    actions.append(FallbackToSSF(tick_report.tick, edge_id))
            if instance.state is InstanceState.SERVING:
                m = instance.monitor_state
                w = instance.intent.eval_window
                m.window.extend(tick_report.samples)
                while m.window and m.window[0].tick <= tick_report.tick - w:
                    m.window.popleft()
                err = rolling_error(m.window, tick_report.tick, w)
                m.last_error = err
                # a model is judged only once it has served a full window
                warmed = tick_report.tick - m.serving_since >= w
                cooled = m.last_retrain_tick is None or tick_report.tick - m.last_retrain_tick >= w
                if err is not None and err > instance.intent.retrain_threshold and warmed and cooled:
                    actions.append(Retrain(tick_report.tick, err))
                    m.last_retrain_tick = tick_report.tick
                    instance.transition(InstanceState.RETRAINING, rolling_error=err)
            for a in actions:
                instance.events.append("action", **a.to_dict())
    except Exception as exc:  # noqa: BLE001 - monitoring must not take the pipeline down
        log.exception("monitor failed")
        instance.events.append("monitor_error", error=str(exc))
    return actions
