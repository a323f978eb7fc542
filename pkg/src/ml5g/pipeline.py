"""The seven logical entities of the ML pipeline and the glue between hosts.

Stages are pull-based: each consumes one input batch and yields one output
batch. Wiring is checked when a :class:`Pipeline` is built, so an illegal
stage order never reaches runtime.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from ml5g.underlay import AssociationMap, Deployment, LinkTable, RadioConfig, ThroughputReport

log = logging.getLogger(__name__)


class WiringError(ValueError):
    pass


class NoFeasibleAssignment(RuntimeError):
    """No AP satisfies the active policy rules for this STA."""


class DecisionRejected(ValueError):
    pass


class StageKind(str, Enum):
    SOURCE = "Source"
    COLLECTOR = "Collector"
    PREPROCESSOR = "PreProcessor"
    MODEL = "Model"
    POLICY = "Policy"
    DISTRIBUTOR = "Distributor"
    SINK = "Sink"


STAGE_ORDER: tuple[StageKind, ...] = tuple(StageKind)

LEGAL_NEXT: dict[StageKind, frozenset[StageKind]] = {
    StageKind.SOURCE: frozenset({StageKind.COLLECTOR}),
    StageKind.COLLECTOR: frozenset({StageKind.PREPROCESSOR}),
    StageKind.PREPROCESSOR: frozenset({StageKind.MODEL}),
    StageKind.MODEL: frozenset({StageKind.POLICY}),
    # Policy may also feed constraints back into the Model
    StageKind.POLICY: frozenset({StageKind.DISTRIBUTOR, StageKind.MODEL}),
    StageKind.DISTRIBUTOR: frozenset({StageKind.SINK}),
    StageKind.SINK: frozenset(),
}


class HostRole(str, Enum):
    CLOUD = "cloud"
    EDGE = "edge"
    SANDBOX = "sandbox"


@dataclass(frozen=True)
class Host:
    host_id: str
    role: HostRole


def check_hosts(hosts: Sequence[Host]) -> None:
    roles = Counter(h.role for h in hosts)
    if roles[HostRole.CLOUD] != 1:
        raise WiringError(f"exactly one cloud host required, got {roles[HostRole.CLOUD]}")
    if roles[HostRole.EDGE] < 1:
        raise WiringError("at least one edge host required")


@dataclass
class Stage:
    name: str
    kind: StageKind
    host: str
    fn: Callable[[Any], Any] | None = None

    def run(self, batch):
        return batch if self.fn is None else self.fn(batch)


class Pipeline:
    """A directed graph of stages whose every edge respects ``LEGAL_NEXT``."""

    def __init__(self, stages: Sequence[Stage], edges: Iterable[tuple[str, str]] | None = None):
        self.stages = {s.name: s for s in stages}
        if len(self.stages) != len(stages):
            raise WiringError("duplicate stage names")
        if edges is None:
            names = [s.name for s in stages]
            edges = list(zip(names, names[1:]))
        self.edges = sorted(set(edges))
        for u, v in self.edges:
            if u not in self.stages or v not in self.stages:
                raise WiringError(f"edge {u}->{v} references an unknown stage")
            ku, kv = self.stages[u].kind, self.stages[v].kind
            if kv not in LEGAL_NEXT[ku]:
                raise WiringError(f"illegal wiring {u} ({ku.value}) -> {v} ({kv.value})")
        present = {s.kind for s in stages}
        missing = [k.value for k in STAGE_ORDER if k not in present]
        if missing:
            raise WiringError(f"pipeline lacks stages: {missing}")

    def successors(self, name: str) -> list[str]:
        return [v for u, v in self.edges if u == name]

    def by_kind(self, kind: StageKind) -> list[Stage]:
        return [s for s in self.stages.values() if s.kind == kind]

    def graph(self) -> dict:
        return {
            "nodes": sorted(
                ({"name": s.name, "kind": s.kind.value, "host": s.host} for s in self.stages.values()),
                key=lambda n: n["name"],
            ),
            "edges": [list(e) for e in self.edges],
        }

    def run_linear(self, batch, kinds: Sequence[StageKind], host: str | None = None):
        """Push ``batch`` through one stage of each kind, in order."""
        for kind in kinds:
            stages = [s for s in self.by_kind(kind) if host is None or s.host == host]
            if not stages:
                raise WiringError(f"no {kind.value} stage on host {host}")
            batch = stages[0].run(batch)
        return batch


# records ------------------------------------------------------------------


class RecordKind(str, Enum):
    USER_INFO = "user_info"
    PERFORMANCE = "performance"
    APPLICATION = "application"
    CHANNEL_REPORT = "channel_report"


RECORD_SCHEMA: dict[RecordKind, frozenset[str]] = {
    RecordKind.USER_INFO: frozenset({"sta_id", "x", "y"}),
    RecordKind.PERFORMANCE: frozenset({"sta_id", "ap_id", "throughput"}),
    RecordKind.APPLICATION: frozenset({"sta_id", "demand"}),
    RecordKind.CHANNEL_REPORT: frozenset({"ap_id", "noise_floor_dbm"}),
}


@dataclass(frozen=True)
class DataRecord:
    source_id: str
    timestamp: int
    kind: RecordKind
    payload: Mapping[str, Any]

    def __post_init__(self):
        object.__setattr__(self, "kind", RecordKind(self.kind))
        missing = RECORD_SCHEMA[self.kind] - set(self.payload)
        if missing:
            raise ValueError(f"{self.kind.value} record lacks keys {sorted(missing)}")

    def key(self) -> tuple:
        return (self.source_id, self.timestamp, self.kind.value, json.dumps(self.payload, sort_keys=True))


class Source(Protocol):
    source_id: str

    def emit(self, window: tuple[int, int]) -> Iterable[DataRecord]: ...


def collect(sources: Sequence[Source], window: tuple[int, int]) -> list[DataRecord]:
    """Merge every source's records for ``window``, sorted and de-duplicated.

    A source that fails part-way contributes what it emitted before failing.
    """
    if not sources:
        raise ValueError("collect needs at least one source")
    gathered: list[DataRecord] = []
    for src in sources:
        try:
            for rec in src.emit(window):
                gathered.append(rec)
        except Exception as exc:  # noqa: BLE001 - a flaky source must not stop collection
            log.warning("source %s failed mid-window %s: %s", src.source_id, window, exc)
    gathered.sort(key=lambda r: (r.timestamp, r.source_id))
    seen = set()
    out = []
    for rec in gathered:
        k = rec.key()
        if k not in seen:
            seen.add(k)
            out.append(rec)
    return out


# normalization -------------------------------------------------------------


class NormSchema:
    """Ordered per-feature (min, max) ranges plus the target's range."""

    def __init__(self, features: Mapping[str, Sequence[float]], target: str, target_range: Sequence[float]):
        self.features = {k: (float(v[0]), float(v[1])) for k, v in features.items()}
        self.target = target
        self.target_range = (float(target_range[0]), float(target_range[1]))
        for name, (lo, hi) in [*self.features.items(), (target, self.target_range)]:
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"schema range for {name!r} must be finite")
            if lo == hi:
                raise ValueError(f"schema range for {name!r} has min == max ({lo})")
            if lo > hi:
                raise ValueError(f"schema range for {name!r} has min > max")

    @property
    def names(self) -> list[str]:
        return list(self.features)

    def to_dict(self) -> dict:
        return {
            "features": {k: list(v) for k, v in self.features.items()},
            "target": self.target,
            "target_range": list(self.target_range),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> NormSchema:
        return cls(d["features"], d["target"], d["target_range"])

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def __eq__(self, other):
        return isinstance(other, NormSchema) and self.to_dict() == other.to_dict()

    __hash__ = None

    def pairs(self) -> list[tuple[float, float]]:
        return list(self.features.values())

    def normalize_features(self, raw: Mapping[str, float] | Sequence[float]) -> FeatureVector:
        values = raw if not isinstance(raw, Mapping) else [raw[n] for n in self.features]
        return FeatureVector(
            tuple(minmax(v, lo, hi) for v, (lo, hi) in zip(values, self.features.values())),
            tuple(self.features),
        )

    def normalize_target(self, v: float) -> float:
        return minmax(v, *self.target_range)

    def denormalize_target(self, v: float) -> float:
        lo, hi = self.target_range
        return lo + v * (hi - lo)


def minmax(v: float, lo: float, hi: float) -> float:
    return min(1.0, max(0.0, (v - lo) / (hi - lo)))


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.values) != len(self.names):
            raise ValueError("values and names differ in length")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError(f"feature values outside [0, 1]: {self.values}")


def preprocess(
    records: Iterable[DataRecord],
    norm_schema: NormSchema,
    counters: Counter | None = None,
) -> list[tuple[FeatureVector, float]]:
    """Turn performance records into normalized (features, target) pairs.

    Records of other kinds are skipped; performance records missing a feature
    or the target are dropped. Both are tallied in ``counters``.
    """
    counters = counters if counters is not None else Counter()
    needed = [*norm_schema.names, norm_schema.target]
    out = []
    for rec in records:
        if rec.kind is not RecordKind.PERFORMANCE:
            counters["skipped"] += 1
            continue
        if any(k not in rec.payload for k in needed):
            counters["dropped"] += 1
            continue
        fv = norm_schema.normalize_features(rec.payload)
        out.append((fv, norm_schema.normalize_target(rec.payload[norm_schema.target])))
        counters["processed"] += 1
    return out


# policy -------------------------------------------------------------------


class PolicyKind(str, Enum):
    MAX_STAS_PER_AP = "max_stas_per_ap"
    MAX_TX_POWER_DBM = "max_tx_power_dbm"
    LEGACY_PROTECT = "legacy_protect"


@dataclass(frozen=True)
class PolicyRule:
    kind: PolicyKind
    value: float

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if not (isinstance(self.value, (int, float)) and math.isfinite(self.value) and self.value > 0):
            raise ValueError(f"policy {self.kind.value} needs a positive value, got {self.value!r}")

    @classmethod
    def parse(cls, d: Mapping) -> PolicyRule:
        try:
            kind = PolicyKind(d["kind"])
        except ValueError:
            raise ValueError(f"unknown policy kind {d['kind']!r}") from None
        return cls(kind, d["value"])

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "value": self.value}


@dataclass(frozen=True)
class Proposal:
    """Model output for one STA: predicted throughput per candidate AP."""

    sta_id: int
    scores: Mapping[int, float]

    def ranked(self) -> list[int]:
        return sorted(self.scores, key=lambda a: (-self.scores[a], a))


@dataclass
class PolicyContext:
    """The slice of network state the policy entity needs for one decision."""

    ap_counts: Mapping[int, int]
    ap_caps: Mapping[int, int | None] = field(default_factory=dict)
    ap_tx_power: Mapping[int, float] = field(default_factory=dict)
    link_rates: Mapping[int, float] = field(default_factory=dict)


def effective_cap(ap_id: int, rules: Sequence[PolicyRule], ctx: PolicyContext) -> float:
    caps = [r.value for r in rules if r.kind is PolicyKind.MAX_STAS_PER_AP]
    own = ctx.ap_caps.get(ap_id)
    if own is not None:
        caps.append(own)
    return min(caps) if caps else math.inf


def apply_policy(proposal: Proposal, rules: Sequence[PolicyRule], network_state: PolicyContext) -> int:
    """Pick the AP for ``proposal`` under ``rules``.

    Caps redirect to the next-best AP with room. Transmit-power and
    legacy-protection rules are checked on the AP that survives the caps; a
    violation (or no AP with room) raises :class:`NoFeasibleAssignment`.
    """
    ranked = proposal.ranked()
    if not ranked:
        raise NoFeasibleAssignment(f"STA {proposal.sta_id}: no candidate APs")
    if not rules:
        return ranked[0]
    chosen = None
    for ap in ranked:
        if network_state.ap_counts.get(ap, 0) < effective_cap(ap, rules, network_state):
            chosen = ap
            break
    if chosen is None:
        raise NoFeasibleAssignment(f"STA {proposal.sta_id}: every candidate AP is at its cap")
    for rule in rules:
        if rule.kind is PolicyKind.MAX_TX_POWER_DBM:
            power = network_state.ap_tx_power.get(chosen)
            if power is not None and power > rule.value:
                raise NoFeasibleAssignment(
                    f"STA {proposal.sta_id}: AP {chosen} transmits {power} dBm > {rule.value}"
                )
        elif rule.kind is PolicyKind.LEGACY_PROTECT:
            rate = network_state.link_rates.get(chosen)
            if rate is not None and rate < rule.value:
                raise NoFeasibleAssignment(
                    f"STA {proposal.sta_id}: link to AP {chosen} at {rate:.1f} Mbps "
                    f"is below the {rule.value} Mbps floor"
                )
    return chosen


# transport and distribution -----------------------------------------------


def encode_frame(message: Mapping) -> bytes:
    body = json.dumps(message, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(body)) + body


def decode_frame(frame: bytes) -> dict:
    if len(frame) < 4:
        raise ValueError("truncated frame header")
    (n,) = struct.unpack(">I", frame[:4])
    body = frame[4:]
    if len(body) != n:
        raise ValueError(f"frame length {len(body)} != declared {n}")
    return json.loads(body)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class TransportError(RuntimeError):
    pass


class Transport:
    """In-process stand-in for the inter-host network, with injectable faults.

    ``fail_hosts`` drop every chunk; ``fail_after`` maps a host to the number
    of chunks it receives before the link breaks.
    """

    def __init__(self, chunk_size: int = 4096):
        self.chunk_size = chunk_size
        self.fail_hosts: set[str] = set()
        self.fail_after: dict[str, int] = {}
        self.sent: list[tuple[str, int]] = []

    def chunks(self, host_id: str, frame: bytes) -> Iterable[bytes]:
        limit = self.fail_after.get(host_id)
        for i, start in enumerate(range(0, len(frame), self.chunk_size)):
            if host_id in self.fail_hosts or (limit is not None and i >= limit):
                raise TransportError(f"host {host_id} unreachable")
            chunk = frame[start : start + self.chunk_size]
            self.sent.append((host_id, len(chunk)))
            yield chunk


@dataclass(frozen=True)
class DeliveryReceipt:
    sink_id: str
    ok: bool
    sha256: str
    error: str = ""


@dataclass
class Decision:
    sta_id: int
    ap_id: int
    path: str = "nn"


@dataclass(frozen=True)
class Ack:
    sta_id: int
    ap_id: int
    changed: bool


class LiveNetwork:
    """The production underlay: a deployment plus its mutable association table."""

    def __init__(self, deployment: Deployment, radio: RadioConfig, assignment: Mapping[int, int]):
        self.deployment = deployment
        self.radio = radio
        self.assignment = dict(assignment)
        self._table = LinkTable(deployment, radio)

    @property
    def table(self) -> LinkTable:
        return self._table

    def inject_divergence(self, knobs: Mapping[str, float]) -> None:
        """Shift the real radio constants away from what the twin assumes."""
        self.radio = self.radio.perturbed(knobs)
        self._table = LinkTable(self.deployment, self.radio)

    def association(self) -> AssociationMap:
        return AssociationMap(dict(self.assignment))

    def report(self) -> ThroughputReport:
        return self._table.report(self.assignment)


class EdgeSink:
    """An edge server's sink: holds the active model and applies decisions.

    A model becomes active only once its whole frame has arrived; a broken
    transfer leaves the previous model in place.
    """

    def __init__(self, sink_id: str, network: LiveNetwork | None = None):
        self.sink_id = sink_id
        self.network = network
        self.active_bytes: bytes | None = None
        self.active_hash: str | None = None
        self.applied: list[Ack] = []

    def receive(self, chunks: Iterable[bytes]) -> str:
        staged = bytearray()
        for chunk in chunks:
            staged.extend(chunk)
        message = decode_frame(bytes(staged))
        artifact = base64.b64decode(message["artifact"])
        digest = sha256_hex(artifact)
        if digest != message["sha256"]:
            raise TransportError(f"hash mismatch at {self.sink_id}")
        self.active_bytes, self.active_hash = artifact, digest
        return digest

    def apply(self, decision: Decision) -> Ack:
        net = self.network
        if net is None:
            raise DecisionRejected(f"sink {self.sink_id} is not attached to a network")
        if decision.sta_id not in net.table.stas:
            raise DecisionRejected(f"unknown STA {decision.sta_id}")
        if decision.ap_id not in net.table.aps:
            raise DecisionRejected(f"unknown AP {decision.ap_id}")
        changed = net.assignment.get(decision.sta_id) != decision.ap_id
        net.assignment[decision.sta_id] = decision.ap_id
        ack = Ack(decision.sta_id, decision.ap_id, changed)
        self.applied.append(ack)
        return ack


def distribute(model_artifact: bytes, sinks: Sequence[EdgeSink], transport: Transport | None = None) -> list[DeliveryReceipt]:
    """Ship the serialized model to every sink; one receipt per sink."""
    if not sinks:
        raise ValueError("distribute needs at least one sink")
    transport = transport or Transport()
    digest = sha256_hex(model_artifact)
    frame = encode_frame({"artifact": base64.b64encode(model_artifact).decode(), "sha256": digest})
    receipts = []
    for sink in sinks:
        try:
            got = sink.receive(transport.chunks(sink.sink_id, frame))
            receipts.append(DeliveryReceipt(sink.sink_id, True, got))
        except (TransportError, ValueError) as exc:
            log.warning("delivery to %s failed: %s", sink.sink_id, exc)
            receipts.append(DeliveryReceipt(sink.sink_id, False, digest, str(exc)))
    return receipts


def sink_apply(sink: EdgeSink, decision: Decision) -> Ack:
    return sink.apply(decision)
