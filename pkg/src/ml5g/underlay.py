"""WLAN underlay: scenario generation, radio model and airtime-fair throughput.

Everything here is a pure function of its inputs. The generator threads an
explicit ``numpy.random.Generator`` built from the seed, so a given
``(density_class, side_m, seed, radio)`` always yields the same deployment.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np


class InfeasibleScenarioError(RuntimeError):
    """Raised when the generator cannot place every STA within AP coverage."""


class AssociationError(ValueError):
    pass


class DensityClass(str, Enum):
    SPARSE = "sparse"
    MEDIUM = "medium"
    DENSE = "dense"


# (APs, STAs) per 100 m x 100 m
DENSITY_TABLE: dict[DensityClass, tuple[int, int]] = {
    DensityClass.SPARSE: (2, 10),
    DensityClass.MEDIUM: (4, 25),
    DensityClass.DENSE: (8, 50),
}

MAX_PLACEMENT_RETRIES = 1000


@dataclass(frozen=True)
class RadioConfig:
    tx_power_dbm: float = 20.0
    max_tx_power_dbm: float = 20.0
    noise_floor_dbm: float = -95.0
    sensitivity_dbm: float = -82.0
    bandwidth_mhz: float = 20.0
    efficiency: float = 0.8
    rate_cap_mbps: float = 1024.0
    ref_loss_db: float = 40.0
    path_loss_exponent: float = 4.0
    n_channels: int = 3
    demand_min_mbps: float = 5.0
    demand_max_mbps: float = 50.0

    def perturbed(self, knobs: Mapping[str, float] | None) -> RadioConfig:
        """Return a copy with each knob added to the matching constant.

        >>> RadioConfig().perturbed({"noise_floor_dbm": 5.0}).noise_floor_dbm
        -90.0
        """
        if not knobs:
            return self
        known = {f for f in self.__dataclass_fields__}
        changes = {}
        for name, delta in knobs.items():
            if name not in known or name == "n_channels":
                raise ValueError(f"unknown radio knob: {name!r}")
            changes[name] = getattr(self, name) + float(delta)
        return replace(self, **changes)


DEFAULT_RADIO = RadioConfig()


@dataclass(frozen=True)
class Position:
    x: float
    y: float

    def distance(self, other: Position) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class AccessPoint:
    id: int
    pos: Position
    channel: int
    tx_power_dbm: float
    max_stas: int | None = None


@dataclass(frozen=True)
class Station:
    id: int
    pos: Position
    demand_mbps: float


@dataclass(frozen=True)
class Deployment:
    aps: tuple[AccessPoint, ...]
    stas: tuple[Station, ...]
    side: float
    seed: int
    density_class: DensityClass

    def ap(self, ap_id: int) -> AccessPoint:
        for ap in self.aps:
            if ap.id == ap_id:
                return ap
        raise KeyError(ap_id)

    def sta(self, sta_id: int) -> Station:
        for sta in self.stas:
            if sta.id == sta_id:
                return sta
        raise KeyError(sta_id)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["density_class"] = self.density_class.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> Deployment:
        aps = tuple(
            AccessPoint(
                id=a["id"],
                pos=Position(**a["pos"]),
                channel=a["channel"],
                tx_power_dbm=a["tx_power_dbm"],
                max_stas=a.get("max_stas"),
            )
            for a in d["aps"]
        )
        stas = tuple(
            Station(id=s["id"], pos=Position(**s["pos"]), demand_mbps=s["demand_mbps"])
            for s in d["stas"]
        )
        return cls(aps, stas, d["side"], d["seed"], DensityClass(d["density_class"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Deployment:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LinkMeasurement:
    sta_id: int
    ap_id: int
    rssi_dbm: float
    snr_db: float
    link_rate_mbps: float


@dataclass(frozen=True)
class AssociationMap:
    assignment: Mapping[int, int]

    def stas_of(self, ap_id: int) -> list[int]:
        return sorted(s for s, a in self.assignment.items() if a == ap_id)

    def validate(self, deployment: Deployment, *, enforce_caps: bool = False) -> None:
        sta_ids = {s.id for s in deployment.stas}
        ap_ids = {a.id for a in deployment.aps}
        if set(self.assignment) != sta_ids:
            missing = sorted(sta_ids - set(self.assignment))
            extra = sorted(set(self.assignment) - sta_ids)
            raise AssociationError(f"association not total: missing={missing} extra={extra}")
        bad = {s: a for s, a in self.assignment.items() if a not in ap_ids}
        if bad:
            raise AssociationError(f"unknown APs in association: {bad}")
        if enforce_caps:
            for ap in deployment.aps:
                if ap.max_stas is not None and len(self.stas_of(ap.id)) > ap.max_stas:
                    raise AssociationError(f"AP {ap.id} exceeds max_stas={ap.max_stas}")


@dataclass(frozen=True)
class ThroughputReport:
    per_sta: Mapping[int, float]
    per_ap_airtime: Mapping[int, float]
    per_ap_available: Mapping[int, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_sta": {str(k): v for k, v in sorted(self.per_sta.items())},
                "per_ap_airtime": {str(k): v for k, v in sorted(self.per_ap_airtime.items())},
                "per_ap_available": {str(k): v for k, v in sorted(self.per_ap_available.items())},
            },
            sort_keys=True,
        )


def scaled_counts(density_class: DensityClass, side_m: float) -> tuple[int, int]:
    n_ap, n_sta = DENSITY_TABLE[DensityClass(density_class)]
    scale = (side_m / 100.0) ** 2
    return max(1, round(n_ap * scale)), max(1, round(n_sta * scale))


def generate_deployment(
    density_class: DensityClass | str,
    side_m: float,
    seed: int,
    radio: RadioConfig = DEFAULT_RADIO,
) -> Deployment:
    """Draw a reproducible scenario for one density class.

    AP positions are uniform over the box and channels are assigned
    round-robin. Each STA position is redrawn until some AP is heard above
    sensitivity; after ``MAX_PLACEMENT_RETRIES`` failed redraws of a single
    STA the scenario is declared infeasible.
    """
    if not side_m > 0:
        raise ValueError(f"side_m must be positive, got {side_m}")
    density_class = DensityClass(density_class)
    n_ap, n_sta = scaled_counts(density_class, side_m)
    rng = np.random.default_rng(seed)

    aps = []
    for i in range(n_ap):
        x, y = rng.uniform(0.0, side_m, size=2)
        aps.append(
            AccessPoint(
                id=i,
                pos=Position(float(x), float(y)),
                channel=i % radio.n_channels + 1,
                tx_power_dbm=min(radio.tx_power_dbm, radio.max_tx_power_dbm),
            )
        )

    stas = []
    for j in range(n_sta):
        for _ in range(MAX_PLACEMENT_RETRIES):
            x, y = rng.uniform(0.0, side_m, size=2)
            pos = Position(float(x), float(y))
            if any(rssi_dbm(ap, pos, radio) >= radio.sensitivity_dbm for ap in aps):
                break
        else:
            raise InfeasibleScenarioError(
                f"infeasible scenario: STA {n_ap + j} hears no AP after "
                f"{MAX_PLACEMENT_RETRIES} draws (density={density_class.value}, "
                f"side={side_m}, seed={seed})"
            )
        demand = rng.uniform(radio.demand_min_mbps, radio.demand_max_mbps)
        stas.append(Station(id=n_ap + j, pos=pos, demand_mbps=float(demand)))

    return Deployment(tuple(aps), tuple(stas), float(side_m), int(seed), density_class)


def path_loss_db(distance_m: float, radio: RadioConfig = DEFAULT_RADIO) -> float:
    if distance_m < 0:
        raise ValueError("distance must be non-negative")
    d = max(distance_m, 1.0)
    return radio.ref_loss_db + 10.0 * radio.path_loss_exponent * math.log10(d)


def rssi_dbm(ap: AccessPoint, pos: Position, radio: RadioConfig = DEFAULT_RADIO) -> float:
    return ap.tx_power_dbm - path_loss_db(ap.pos.distance(pos), radio)


def shannon_rate_mbps(snr_db: float, radio: RadioConfig = DEFAULT_RADIO) -> float:
    rate = radio.bandwidth_mhz * math.log2(1.0 + 10.0 ** (snr_db / 10.0)) * radio.efficiency
    return min(rate, radio.rate_cap_mbps)


def measure_link(
    ap: AccessPoint,
    sta: Station,
    noise_floor_dbm: float | None = None,
    radio: RadioConfig = DEFAULT_RADIO,
) -> LinkMeasurement:
    noise = radio.noise_floor_dbm if noise_floor_dbm is None else noise_floor_dbm
    rssi = rssi_dbm(ap, sta.pos, radio)
    snr = rssi - noise
    rate = 0.0 if rssi < radio.sensitivity_dbm else shannon_rate_mbps(snr, radio)
    return LinkMeasurement(sta.id, ap.id, rssi, snr, rate)


def audible_aps(deployment: Deployment, sta: Station, radio: RadioConfig = DEFAULT_RADIO) -> list[int]:
    """AP ids heard above sensitivity, in ascending id order."""
    return sorted(
        ap.id for ap in deployment.aps if rssi_dbm(ap, sta.pos, radio) >= radio.sensitivity_dbm
    )


def ssf_associate(deployment: Deployment, radio: RadioConfig = DEFAULT_RADIO) -> AssociationMap:
    """Strongest Signal First: every STA joins its max-RSSI AP, lowest id on ties.

    Load and caps are deliberately ignored.
    """
    aps = sorted(deployment.aps, key=lambda a: a.id)
    assignment = {}
    for sta in deployment.stas:
        best_id, best_rssi = None, -math.inf
        for ap in aps:
            r = rssi_dbm(ap, sta.pos, radio)
            if r >= radio.sensitivity_dbm and r > best_rssi:
                best_id, best_rssi = ap.id, r
        if best_id is None:
            raise AssociationError(f"STA {sta.id} hears no AP above sensitivity")
        assignment[sta.id] = best_id
    return AssociationMap(assignment)


def cochannel_neighbors(
    deployment: Deployment, ap: AccessPoint, radio: RadioConfig = DEFAULT_RADIO
) -> int:
    """Number of other co-channel APs whose signal ``ap`` senses above sensitivity."""
    return sum(
        1
        for other in deployment.aps
        if other.id != ap.id
        and other.channel == ap.channel
        and rssi_dbm(other, ap.pos, radio) >= radio.sensitivity_dbm
    )


def available_airtime(deployment: Deployment, ap: AccessPoint, radio: RadioConfig = DEFAULT_RADIO) -> float:
    return 1.0 / (1.0 + cochannel_neighbors(deployment, ap, radio))


def waterfill(rates: Sequence[float], demands: Sequence[float], airtime: float) -> list[float]:
    """Max-min fair throughputs under an airtime budget.

    Every STA gets ``min(demand, t)`` for the largest common level ``t`` whose
    airtime ``sum(min(demand, t) / rate)`` fits the budget. Zero-rate STAs get
    nothing. Solved exactly by walking the sorted demand breakpoints.
    """
    n = len(rates)
    out = [0.0] * n
    active = [i for i in range(n) if rates[i] > 0]
    if not active or airtime <= 0:
        return out
    active.sort(key=lambda i: demands[i])
    used = 0.0
    inv_rest = sum(1.0 / rates[i] for i in active)
    for k, i in enumerate(active):
        if used + demands[i] * inv_rest <= airtime:
            out[i] = demands[i]
            used += demands[i] / rates[i]
            inv_rest -= 1.0 / rates[i]
            continue
        level = (airtime - used) / inv_rest
        for j in active[k:]:
            out[j] = level
        break
    return out


class LinkTable:
    """Per-deployment cache of every (STA, AP) link and every AP's airtime.

    Built from the scalar radio functions so values match
    :func:`measure_link` bit for bit.
    """

    def __init__(self, deployment: Deployment, radio: RadioConfig = DEFAULT_RADIO):
        self.deployment = deployment
        self.radio = radio
        self.aps = {ap.id: ap for ap in deployment.aps}
        self.stas = {sta.id: sta for sta in deployment.stas}
        self.links: dict[tuple[int, int], LinkMeasurement] = {
            (sta.id, ap.id): measure_link(ap, sta, radio=radio)
            for sta in deployment.stas
            for ap in deployment.aps
        }
        self.neighbors = {ap.id: cochannel_neighbors(deployment, ap, radio) for ap in deployment.aps}
        self.airtime = {a: 1.0 / (1.0 + n) for a, n in self.neighbors.items()}
        self.candidates = {
            sta.id: sorted(
                ap_id
                for ap_id in self.aps
                if self.links[(sta.id, ap_id)].rssi_dbm >= radio.sensitivity_dbm
            )
            for sta in deployment.stas
        }

    def rate(self, sta_id: int, ap_id: int) -> float:
        return self.links[(sta_id, ap_id)].link_rate_mbps

    def rssi(self, sta_id: int, ap_id: int) -> float:
        return self.links[(sta_id, ap_id)].rssi_dbm

    def ap_throughputs(self, ap_id: int, sta_ids: Sequence[int]) -> dict[int, float]:
        rates = [self.rate(s, ap_id) for s in sta_ids]
        demands = [self.stas[s].demand_mbps for s in sta_ids]
        return dict(zip(sta_ids, waterfill(rates, demands, self.airtime[ap_id])))

    def report(self, assignment: Mapping[int, int]) -> ThroughputReport:
        members: dict[int, list[int]] = {a: [] for a in sorted(self.aps)}
        for s in sorted(assignment):
            members[assignment[s]].append(s)
        per_sta: dict[int, float] = {}
        used: dict[int, float] = {}
        for ap_id, stas in members.items():
            tp = self.ap_throughputs(ap_id, stas)
            per_sta.update(tp)
            used[ap_id] = sum(t / self.rate(s, ap_id) for s, t in tp.items() if self.rate(s, ap_id) > 0)
        return ThroughputReport(dict(sorted(per_sta.items())), used, dict(self.airtime))


def ap_throughputs(
    deployment: Deployment,
    ap: AccessPoint,
    sta_ids: Iterable[int],
    radio: RadioConfig = DEFAULT_RADIO,
) -> dict[int, float]:
    """Per-STA throughput of the STAs ``sta_ids`` sharing ``ap``."""
    sta_ids = list(sta_ids)
    stas = [deployment.sta(s) for s in sta_ids]
    rates = [measure_link(ap, s, radio=radio).link_rate_mbps for s in stas]
    demands = [s.demand_mbps for s in stas]
    return dict(zip(sta_ids, waterfill(rates, demands, available_airtime(deployment, ap, radio))))


def throughput_for(
    deployment: Deployment,
    assignment: Mapping[int, int],
    radio: RadioConfig = DEFAULT_RADIO,
) -> ThroughputReport:
    """Like :func:`compute_throughput` but accepts a partial assignment."""
    return LinkTable(deployment, radio).report(assignment)


def compute_throughput(
    deployment: Deployment,
    association: AssociationMap,
    radio: RadioConfig = DEFAULT_RADIO,
) -> ThroughputReport:
    association.validate(deployment)
    return throughput_for(deployment, association.assignment, radio)


CSV_HEADER = ("seed", "density", "sta_id", "demand_mbps", "throughput_mbps", "strategy")


def throughput_rows(
    deployment: Deployment, report: ThroughputReport, strategy: str
) -> list[tuple]:
    return [
        (
            deployment.seed,
            deployment.density_class.value,
            sta.id,
            sta.demand_mbps,
            report.per_sta[sta.id],
            strategy,
        )
        for sta in deployment.stas
    ]


def rows_to_csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()
