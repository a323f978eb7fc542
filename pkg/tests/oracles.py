"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way so it shares no code path with the
implementation it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def waterfill_bisection(rates, demands, airtime, tol=1e-9):
    """Common level t found by bisection; each STA gets min(demand, t)."""
    live = [i for i, r in enumerate(rates) if r > 0]
    out = [0.0] * len(rates)
    if not live or airtime <= 0:
        return out

    def used(t):
        return sum(min(demands[i], t) / rates[i] for i in live)

    hi = max(demands[i] for i in live)
    if used(hi) <= airtime:
        for i in live:
            out[i] = demands[i]
        return out
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if used(mid) <= airtime:
            lo = mid
        else:
            hi = mid
    for i in live:
        out[i] = min(demands[i], lo)
    return out


def ssf_exhaustive(deployment, radio):
    """Scan every (sta, ap) pair and keep the strict maximum RSSI."""
    out = {}
    for sta in deployment.stas:
        pairs = []
        for ap in deployment.aps:
            d = math.sqrt((ap.pos.x - sta.pos.x) ** 2 + (ap.pos.y - sta.pos.y) ** 2)
            loss = radio.ref_loss_db + 10 * radio.path_loss_exponent * math.log10(max(d, 1.0))
            rssi = ap.tx_power_dbm - loss
            if rssi >= radio.sensitivity_dbm:
                pairs.append((-rssi, ap.id))
        out[sta.id] = min(pairs)[1]
    return out


def forward_loops(model, x):
    """Plain-Python forward pass, one multiply-add at a time."""
    a = [float(v) for v in x]
    n_layers = len(model.weights)
    for li in range(n_layers):
        W, b = model.weights[li], model.biases[li]
        z = []
        for j in range(W.shape[0]):
            s = float(b[j])
            for k in range(W.shape[1]):
                s += float(W[j, k]) * a[k]
            z.append(s)
        a = z if li == n_layers - 1 else [max(0.0, v) for v in z]
    return a[0]


def merge_records(emissions):
    """Reference merge of per-source emissions: k-way merge then dedup."""
    flat = []
    for recs in emissions:
        flat.extend(recs)
    # insertion sort keeps equal keys in arrival order, like a stable sort
    ordered = []
    for r in flat:
        k = (r.timestamp, r.source_id)
        pos = len(ordered)
        while pos > 0 and (ordered[pos - 1].timestamp, ordered[pos - 1].source_id) > k:
            pos -= 1
        ordered.insert(pos, r)
    seen, out = [], []
    for r in ordered:
        ident = (r.source_id, r.timestamp, r.kind, sorted(r.payload.items()))
        if ident not in seen:
            seen.append(ident)
            out.append(r)
    return out


def policy_argmax(scores, counts, caps):
    """Best-scoring AP whose count is below its cap, lowest id on ties; None if none."""
    feasible = [a for a in scores if counts.get(a, 0) < caps.get(a, math.inf)]
    if not feasible:
        return None
    best = max(scores[a] for a in feasible)
    return min(a for a in feasible if scores[a] == best)


def best_assignment(deployment, table):
    """Exhaustive search over all total assignments; returns (assignment, mean)."""
    stas = [s.id for s in deployment.stas]
    options = [table.candidates[s] for s in stas]
    best = None
    for combo in itertools.product(*options):
        a = dict(zip(stas, combo))
        m = float(np.mean(list(table.report(a).per_sta.values())))
        if best is None or m > best[1]:
            best = (a, m)
    return best
