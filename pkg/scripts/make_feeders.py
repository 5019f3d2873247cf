"""Regenerate the bundled feeder files in src/gcdt/data/.

feeder13 and feeder34 follow the IEEE 13/34-bus topologies (bus names, line
lengths, phasing, device placement) with simplified per-unit data.  feeder123
is a seeded synthetic radial tree of the same size and device count.  In each
case a single impedance scale is fitted so that, at peak load with every
device neutral, the lowest voltage sits at ``TARGET_VMIN``.

    python scripts/make_feeders.py
"""

import json
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from gcdt.feeder import DeviceState, parse_feeder, solve_power_flow

OUT = Path(__file__).resolve().parents[1] / "src" / "gcdt" / "data"
TARGET_VMIN = {"feeder13": 0.925, "feeder34": 0.92, "feeder123": 0.92}
X_OVER_R = 2.0


def feeder13():
    # (from, to, length kft, phases of `to`)
    lines = [
        ("650", "632", 2.0, [1, 2, 3]),
        ("632", "633", 0.5, [1, 2, 3]),
        ("633", "634", 0.3, [1, 2, 3]),
        ("632", "645", 0.5, [2, 3]),
        ("645", "646", 0.3, [2, 3]),
        ("632", "671", 2.0, [1, 2, 3]),
        ("671", "680", 1.0, [1, 2, 3]),
        ("671", "684", 0.3, [1, 3]),
        ("684", "611", 0.3, [3]),
        ("684", "652", 0.8, [1]),
        ("671", "692", 0.05, [1, 2, 3]),
        ("692", "675", 0.5, [1, 2, 3]),
    ]
    # per-phase kW / kvar
    loads = {
        "634": (133, 97), "645": (170, 125), "646": (230, 132), "652": (128, 86),
        "671": (385, 220), "611": (170, 80), "692": (170, 151), "675": (281, 154),
        "632": (22, 12), "633": (0, 0),
    }
    return dict(
        name="feeder13",
        source="650",
        lines=lines,
        loads=loads,
        capacitors=[("675", 200), ("611", 100)],
        regulators=["632"],
        batteries=[("680", 1200, 250)],
    )


def feeder34():
    spec = [
        ("800", "802", 2.58, [1, 2, 3]), ("802", "806", 1.73, [1, 2, 3]),
        ("806", "808", 32.23, [1, 2, 3]), ("808", "810", 5.80, [2]),
        ("808", "812", 37.5, [1, 2, 3]), ("812", "814", 29.73, [1, 2, 3]),
        ("814", "850", 0.01, [1, 2, 3]), ("850", "816", 0.31, [1, 2, 3]),
        ("816", "818", 1.71, [1]), ("816", "824", 10.21, [1, 2, 3]),
        ("818", "820", 48.15, [1]), ("820", "822", 13.74, [1]),
        ("824", "826", 3.03, [2]), ("824", "828", 0.84, [1, 2, 3]),
        ("828", "830", 20.44, [1, 2, 3]), ("830", "854", 0.52, [1, 2, 3]),
        ("854", "856", 23.33, [2]), ("854", "852", 36.83, [1, 2, 3]),
        ("852", "832", 0.01, [1, 2, 3]), ("832", "858", 4.90, [1, 2, 3]),
        ("832", "888", 0.5, [1, 2, 3]), ("888", "890", 10.56, [1, 2, 3]),
        ("858", "864", 1.62, [1]), ("858", "834", 5.83, [1, 2, 3]),
        ("834", "842", 0.28, [1, 2, 3]), ("834", "860", 2.02, [1, 2, 3]),
        ("842", "844", 1.35, [1, 2, 3]), ("844", "846", 3.64, [1, 2, 3]),
        ("846", "848", 0.53, [1, 2, 3]), ("860", "836", 2.68, [1, 2, 3]),
        ("836", "840", 0.86, [1, 2, 3]), ("836", "862", 0.28, [1, 2, 3]),
        ("862", "838", 4.86, [2]),
    ]
    loads = {
        "802": (18, 9), "806": (18, 10), "808": (16, 8), "810": (16, 8), "816": (5, 2),
        "818": (34, 17), "820": (34, 17), "822": (135, 70), "824": (13, 6), "826": (40, 20),
        "828": (4, 2), "830": (15, 7), "832": (5, 2), "834": (11, 6), "836": (27, 14),
        "838": (28, 14), "840": (18, 11), "842": (9, 5), "844": (135, 105), "846": (25, 12),
        "848": (20, 16), "856": (4, 2), "858": (5, 3), "860": (40, 24), "862": (28, 14),
        "864": (2, 1), "890": (150, 75),
    }
    return dict(
        name="feeder34",
        source="800",
        lines=spec,
        loads=loads,
        capacitors=[("844", 100), ("848", 150)],
        regulators=["850", "832"],
        batteries=[("860", 800, 150)],
    )


def feeder123(seed=123):
    rng = np.random.default_rng(seed)
    names = ["150"] + [str(i) for i in range(1, 123)]
    # backbone of 40 buses, remaining 82 buses hang off as laterals
    lines = []
    phases = {"150": [1, 2, 3]}
    for i in range(1, 41):
        parent = names[i - 1]
        lines.append((parent, names[i], float(rng.uniform(0.3, 0.8)), [1, 2, 3]))
        phases[names[i]] = [1, 2, 3]
    for i in range(41, 123):
        parent = names[int(rng.integers(max(1, i - 30), i))]
        pp = phases[parent]
        if len(pp) == 3 and rng.random() < 0.6:
            ph = [1, 2, 3]
        else:
            ph = [int(rng.choice(pp))]
        lines.append((parent, names[i], float(rng.uniform(0.2, 0.6)), ph))
        phases[names[i]] = ph
    loads = {}
    for name in names[1:]:
        if rng.random() < 0.7:
            p = float(rng.uniform(10, 45))
            loads[name] = (p, p * float(rng.uniform(0.4, 0.6)))
    return dict(
        name="feeder123",
        source="150",
        lines=lines,
        loads=loads,
        capacitors=[("83", 200), ("88", 50), ("90", 50), ("92", 50)],
        regulators=["1", "10", "25", "41"],
        batteries=[("35", 1000, 200)],
    )


def build_doc(raw, scale, base_kva=1000.0):
    phases = {raw["source"]: [1, 2, 3]}
    for _, to, _, ph in raw["lines"]:
        phases[to] = ph
    buses = [{"id": raw["source"], "phases": [1, 2, 3]}]
    buses += [{"id": to, "phases": ph} for _, to, _, ph in raw["lines"]]
    doc = {
        "name": raw["name"],
        "source": raw["source"],
        "buses": buses,
        "lines": [
            {
                "from": a,
                "to": b,
                "resistance_pu": round(scale * length, 8),
                "reactance_pu": round(X_OVER_R * scale * length, 8),
            }
            for a, b, length, _ in raw["lines"]
        ],
        "capacitors": [
            {"bus": bus, "q_injection_pu": kvar / base_kva} for bus, kvar in raw["capacitors"]
        ],
        "regulators": [
            {"bus": bus, "tap_count": 33, "ratio_min": 0.9, "ratio_max": 1.1}
            for bus in raw["regulators"]
        ],
        "batteries": [
            {"bus": bus, "capacity_puh": kwh / base_kva, "max_discharge_pu": kw / base_kva}
            for bus, kwh, kw in raw["batteries"]
        ],
        "loads": [
            {"bus": bus, "base_p_pu": p / base_kva, "base_q_pu": q / base_kva}
            for bus, (p, q) in raw["loads"].items()
            if p > 0 or q > 0
        ],
    }
    return doc


def vmin(raw, scale):
    spec = parse_feeder(build_doc(raw, scale))
    sol = solve_power_flow(spec, DeviceState.neutral(spec))
    assert sol.converged
    return float(np.nanmin(sol.voltage))


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for raw in (feeder13(), feeder34(), feeder123()):
        target = TARGET_VMIN[raw["name"]]
        hi = 1e-4
        while vmin(raw, hi) > target:
            hi *= 2
        scale = brentq(lambda s: vmin(raw, s) - target, 0.0, hi, xtol=1e-12)
        doc = build_doc(raw, scale)
        path = OUT / f"{raw['name']}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        print(f"{path.name}: {len(doc['buses'])} buses, scale={scale:.3e}, vmin={vmin(raw, scale):.4f}")


if __name__ == "__main__":
    main()
