import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcdt.feeder import (
    DeviceState,
    FeederError,
    bundled_feeder,
    load_feeder,
    solve_power_flow,
)

FEEDERS = ("feeder13", "feeder34", "feeder123")


def two_bus(cap=0.05, p=0.1, q=0.05):
    return {
        "buses": [{"id": "s"}, {"id": "b"}],
        "lines": [{"from": "s", "to": "b", "resistance_pu": 0.01, "reactance_pu": 0.02}],
        "source": "s",
        "capacitors": [{"bus": "b", "q_injection_pu": cap}],
        "loads": [{"bus": "b", "base_p_pu": p, "base_q_pu": q}],
    }


def spec_of(doc):
    return load_feeder(json.dumps(doc))


def random_state(spec, rng):
    return DeviceState(
        cap_on=tuple(bool(x) for x in rng.integers(0, 2, spec.n_cap)),
        tap=tuple(int(x) for x in rng.integers(0, 33, spec.n_reg)),
        soc=tuple(float(x) for x in rng.uniform(0, 1, spec.n_batt)),
        discharge=tuple(float(x) for x in rng.uniform(-1, 1, spec.n_batt)),
    )


def net_demand(spec, dev, scale):
    """Real power drawn by loads minus battery discharge, summed over present phases."""
    nph = {b.id: len(b.phases) for b in spec.buses}
    p = sum(s * ld.base_p_pu * nph[ld.bus] for ld, s in zip(spec.load_buses, scale))
    p -= sum(d * bt.max_discharge_pu * nph[bt.bus] for bt, d in zip(spec.batt_buses, dev.discharge))
    return p


def loop_sweep(spec, dev, scale, tol=1e-12, max_iter=500):
    """Textbook per-phase backward/forward sweep written with explicit loops.

    Regulators are ideal transformers at the receiving end of the line into
    their bus: V_bus = a * (V_parent - z * I_primary), I_primary = a * I_secondary.
    """
    ids = [b.id for b in spec.buses]
    children = {i: [] for i in ids}
    parent, zline = {}, {}
    # orient the tree from the source
    adj = {i: [] for i in ids}
    for ln in spec.lines:
        z = complex(ln.resistance_pu, ln.reactance_pu)
        adj[ln.from_bus].append((ln.to_bus, z))
        adj[ln.to_bus].append((ln.from_bus, z))
    order, stack = [spec.source_bus], [spec.source_bus]
    seen = {spec.source_bus}
    while stack:
        u = stack.pop()
        for v, z in adj[u]:
            if v not in seen:
                seen.add(v)
                parent[v], zline[v] = u, z
                children[u].append(v)
                order.append(v)
                stack.append(v)
    ratio = {i: 1.0 for i in ids}
    for reg, tap in zip(spec.reg_buses, dev.tap):
        ratio[reg.bus] = reg.ratio(tap)
    phases = {b.id: b.phases for b in spec.buses}

    volt = np.full((len(ids), 3), np.nan)
    loss = total = 0.0
    for ph in (1, 2, 3):
        load = {i: 0j for i in ids}
        for ld, s in zip(spec.load_buses, scale):
            load[ld.bus] += s * complex(ld.base_p_pu, ld.base_q_pu)
        for cap, on in zip(spec.cap_buses, dev.cap_on):
            if on:
                load[cap.bus] -= 1j * cap.q_injection_pu
        for bt, d in zip(spec.batt_buses, dev.discharge):
            load[bt.bus] -= d * bt.max_discharge_pu
        active = [i for i in order if ph in phases[i]]
        v = {i: 1.0 + 0j for i in active}
        for _ in range(max_iter):
            sec = {}
            for i in reversed(active):
                cur = np.conj(load[i] / v[i]) if i != spec.source_bus else 0j
                for c in children[i]:
                    if c in sec:
                        cur += ratio[c] * sec[c]
                sec[i] = cur
            new = {spec.source_bus: 1.0 + 0j}
            for i in active[1:]:
                new[i] = ratio[i] * (new[parent[i]] - zline[i] * ratio[i] * sec[i])
            change = max(abs(new[i] - v[i]) for i in active)
            v = new
            if change < tol:
                break
        for i in active[1:]:
            loss += abs(ratio[i] * sec[i]) ** 2 * zline[i].real
        src = spec.source_bus
        total += (np.conj(load[src]) + sum(ratio[c] * sec[c] for c in children[src] if c in sec)).real
        for i in active:
            volt[ids.index(i), ph - 1] = abs(v[i])
    return volt, loss, total


class TestLoading:
    def test_two_bus(self):
        spec = spec_of(two_bus())
        assert spec.n_buses == 2 and len(spec.lines) == 1

    def test_cycle_rejected(self):
        doc = {
            "buses": [{"id": "a"}, {"id": "b"}, {"id": "c"}],
            "lines": [
                {"from": "a", "to": "b", "resistance_pu": 0.1, "reactance_pu": 0.1},
                {"from": "b", "to": "c", "resistance_pu": 0.1, "reactance_pu": 0.1},
                {"from": "c", "to": "a", "resistance_pu": 0.1, "reactance_pu": 0.1},
            ],
            "source": "a",
        }
        with pytest.raises(FeederError, match="not radial"):
            spec_of(doc)

    def test_disconnected_rejected(self):
        doc = {
            "buses": [{"id": "a"}, {"id": "b"}, {"id": "c"}, {"id": "d"}],
            "lines": [
                {"from": "a", "to": "b", "resistance_pu": 0.1, "reactance_pu": 0.1},
                {"from": "c", "to": "d", "resistance_pu": 0.1, "reactance_pu": 0.1},
                {"from": "d", "to": "c", "resistance_pu": 0.1, "reactance_pu": 0.1},
            ],
            "source": "a",
        }
        with pytest.raises(FeederError, match="not radial"):
            spec_of(doc)

    def test_duplicate_bus(self):
        doc = two_bus()
        doc["buses"].append({"id": "b"})
        with pytest.raises(FeederError, match="duplicate"):
            spec_of(doc)

    def test_parse_error_has_location(self):
        with pytest.raises(FeederError, match="line 1"):
            load_feeder('{"buses": [')

    def test_missing_field_named(self):
        doc = two_bus()
        del doc["lines"][0]["reactance_pu"]
        with pytest.raises(FeederError, match=r"lines\[0\].*reactance_pu"):
            spec_of(doc)

    def test_negative_impedance(self):
        doc = two_bus()
        doc["lines"][0]["resistance_pu"] = -0.1
        with pytest.raises(FeederError):
            spec_of(doc)

    def test_bad_regulator_ratio(self):
        doc = two_bus()
        doc["regulators"] = [{"bus": "b", "ratio_min": 1.1, "ratio_max": 0.9}]
        with pytest.raises(FeederError):
            spec_of(doc)

    def test_phase_subset(self):
        doc = two_bus()
        doc["buses"][0]["phases"] = [1]
        with pytest.raises(FeederError):
            spec_of(doc)

    @pytest.mark.parametrize(
        "name,counts", [("feeder13", (13, 2, 1, 1)), ("feeder34", (34, 2, 2, 1)), ("feeder123", (123, 4, 4, 1))]
    )
    def test_bundled_counts(self, name, counts):
        spec = bundled_feeder(name)
        assert (spec.n_buses, spec.n_cap, spec.n_reg, spec.n_batt) == counts


class TestPowerFlow:
    def test_no_flow(self):
        spec = bundled_feeder("feeder13")
        sol = solve_power_flow(spec, DeviceState.neutral(spec), np.zeros(len(spec.load_buses)))
        assert sol.converged
        np.testing.assert_allclose(sol.voltage[~np.isnan(sol.voltage)], 1.0)
        assert sol.power_loss_pu == 0.0 and sol.total_power_pu == 0.0

    def test_two_bus_reference_value(self):
        spec = spec_of(two_bus())
        sol = solve_power_flow(spec, DeviceState.neutral(spec))
        assert sol.voltage[1, 0] == pytest.approx(0.99795, abs=1e-4)
        # closed form for the constant-power two-bus case: |V|^4 + (2(rP + xQ) - 1)|V|^2 + |z|^2|S|^2 = 0
        r, x, p, q = 0.01, 0.02, 0.1, 0.05
        b = 2 * (r * p + x * q) - 1
        v2 = (-b + np.sqrt(b * b - 4 * (r * r + x * x) * (p * p + q * q))) / 2
        assert sol.voltage[1, 0] == pytest.approx(np.sqrt(v2), abs=1e-8)

    def test_capacitor_raises_voltage(self):
        spec = spec_of(two_bus())
        off = solve_power_flow(spec, DeviceState.neutral(spec))
        on = solve_power_flow(spec, DeviceState((True,), (), (), ()))
        assert on.voltage[1, 0] > off.voltage[1, 0]

    def test_loss_term_oracle_two_bus(self):
        spec = spec_of(two_bus())
        sol = solve_power_flow(spec, DeviceState.neutral(spec))
        v = sol.voltage[1, 0]
        current_sq = (0.1**2 + 0.05**2) / v**2
        assert sol.power_loss_pu == pytest.approx(3 * current_sq * 0.01, rel=1e-8)

    @pytest.mark.parametrize("name", FEEDERS)
    def test_matches_loop_oracle(self, name):
        spec = bundled_feeder(name)
        rng = np.random.default_rng(42)
        for _ in range(3):
            dev = random_state(spec, rng)
            scale = rng.uniform(0.3, 1.1, len(spec.load_buses))
            sol = solve_power_flow(spec, dev, scale)
            volt, loss, total = loop_sweep(spec, dev, scale)
            assert sol.converged
            np.testing.assert_allclose(sol.voltage, volt, atol=1e-7)
            assert sol.power_loss_pu == pytest.approx(loss, rel=1e-6, abs=1e-9)
            assert sol.total_power_pu == pytest.approx(total, rel=1e-6, abs=1e-9)

    @pytest.mark.parametrize("name", FEEDERS)
    def test_power_balance(self, name):
        spec = bundled_feeder(name)
        rng = np.random.default_rng(0)
        for _ in range(20):
            dev = random_state(spec, rng)
            scale = rng.uniform(0.0, 1.1, len(spec.load_buses))
            sol = solve_power_flow(spec, dev, scale)
            assert sol.converged
            gap = sol.total_power_pu - net_demand(spec, dev, scale) - sol.power_loss_pu
            assert abs(gap) <= 1e-6
            assert np.all(sol.voltage[~np.isnan(sol.voltage)] > 0)

    def test_regulator_scales_subtree(self):
        spec = bundled_feeder("feeder13")
        zero = np.zeros(len(spec.load_buses))
        dev = DeviceState((False, False), (32,), (0.5,), (0.0,))
        sol = solve_power_flow(spec, dev, zero)
        reg = spec.reg_buses[0].bus
        below = [spec.bus_index(b) for b in spec.downstream(reg)] + [spec.bus_index(reg)]
        v = sol.voltage[below]
        np.testing.assert_allclose(v[~np.isnan(v)], 1.1)

    def test_deterministic(self):
        spec = bundled_feeder("feeder34")
        rng = np.random.default_rng(1)
        dev = random_state(spec, rng)
        a = solve_power_flow(spec, dev)
        b = solve_power_flow(spec, dev)
        np.testing.assert_array_equal(a.voltage, b.voltage)
        assert a.power_loss_pu == b.power_loss_pu

    def test_dimension_mismatch(self):
        spec = bundled_feeder("feeder13")
        with pytest.raises(ValueError):
            solve_power_flow(spec, DeviceState((False,), (16,), (0.5,), (0.0,)))
        with pytest.raises(ValueError):
            solve_power_flow(spec, DeviceState.neutral(spec), np.ones(2))

    def test_nonconvergence_reported(self):
        spec = spec_of(two_bus(p=30.0, q=30.0))
        sol = solve_power_flow(spec, DeviceState.neutral(spec))
        assert not sol.converged


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(FEEDERS), st.integers(0, 2**31 - 1))
def test_monotonicity_properties(name, seed):
    spec = bundled_feeder(name)
    rng = np.random.default_rng(seed)
    dev = random_state(spec, rng)
    scale = rng.uniform(0.0, 1.1, len(spec.load_buses))
    base = solve_power_flow(spec, dev, scale)
    for i, cap in enumerate(spec.cap_buses):
        if dev.cap_on[i]:
            continue
        on = list(dev.cap_on)
        on[i] = True
        sol = solve_power_flow(spec, DeviceState(tuple(on), dev.tap, dev.soc, dev.discharge), scale)
        j = spec.bus_index(cap.bus)
        assert np.all(np.nan_to_num(sol.voltage[j] - base.voltage[j]) >= -1e-12)
    for i, reg in enumerate(spec.reg_buses):
        if dev.tap[i] == 32:
            continue
        taps = list(dev.tap)
        taps[i] += 1
        sol = solve_power_flow(spec, DeviceState(dev.cap_on, tuple(taps), dev.soc, dev.discharge), scale)
        idx = [spec.bus_index(b) for b in spec.downstream(reg.bus)]
        assert np.all(np.nan_to_num(sol.voltage[idx] - base.voltage[idx]) >= -1e-12)
