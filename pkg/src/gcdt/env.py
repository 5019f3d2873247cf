"""Finite-horizon volt-var control environment over a :class:`FeederSpec`.

One episode is a day of ``horizon`` hourly steps.  The agent picks one joint
discrete action per step (capacitor switches, regulator taps, battery
discharge levels), the feeder is re-solved under the next hour's loads, and
the reward penalises losses, voltage violations and device wear.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .feeder import DeviceState, FeederSpec, PowerFlowSolution, solve_power_flow

logger = logging.getLogger(__name__)

TRAJECTORY_HEADER = (
    "t", "action", "reward", "power_loss_term", "volt_penalty_term", "ctrl_error_term", "v_min", "v_max",
)
DEFAULT_CHOICES = (0, 8, 16, 24, 32)
PHASES_PER_REGULATOR = 3


class ConfigError(ValueError):
    """Inconsistent environment configuration."""


@dataclass(frozen=True)
class RewardWeights:
    w_power: float = 10.0
    w_cap: float = 0.1
    w_reg: float = 0.01
    w_dis: float = 0.1
    w_soc: float = 2.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"reward weight {name} must be non-negative")


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 24
    v_lower: float = 0.95
    v_upper: float = 1.05
    weights: RewardWeights = field(default_factory=RewardWeights)
    tap_choices: tuple[int, ...] = DEFAULT_CHOICES
    discharge_choices: tuple[int, ...] = DEFAULT_CHOICES
    load_profile_seed: int = 0
    obs_stack_depth: int = 2
    action_space_cap: int = 4096
    failure_penalty: float = 10.0
    load_noise: float = 0.05

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not self.v_lower < self.v_upper:
            raise ConfigError("v_lower must be below v_upper")
        if self.obs_stack_depth < 1:
            raise ConfigError("obs_stack_depth must be >= 1")
        for name in ("tap_choices", "discharge_choices"):
            choices = tuple(int(c) for c in getattr(self, name))
            object.__setattr__(self, name, choices)
            if not choices or list(choices) != sorted(set(choices)):
                raise ConfigError(f"{name} must be non-empty, sorted and without repeats")
            if choices[0] < 0 or choices[-1] > 32:
                raise ConfigError(f"{name} must lie in 0..32")
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", RewardWeights(**self.weights))

    @classmethod
    def from_dict(cls, data: dict) -> EnvConfig:
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown env config keys: {sorted(unknown)}")
        if "weights" in data and isinstance(data["weights"], dict):
            data["weights"] = RewardWeights(**data["weights"])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, text: str) -> EnvConfig:
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeviceActions:
    cap_on: tuple[bool, ...]
    tap: tuple[int, ...]
    discharge_choice: tuple[int, ...]

    def discharge(self) -> tuple[float, ...]:
        """Normalised discharge in [-1, 1]: choice c maps to c/16 - 1."""
        return tuple(c / 16.0 - 1.0 for c in self.discharge_choice)


def action_radices(spec: FeederSpec, cfg: EnvConfig) -> list[int]:
    return [2] * spec.n_cap + [len(cfg.tap_choices)] * spec.n_reg + [len(cfg.discharge_choices)] * spec.n_batt


def action_space_size(spec: FeederSpec, cfg: EnvConfig) -> int:
    return math.prod(action_radices(spec, cfg))


def check_action_space(spec: FeederSpec, cfg: EnvConfig) -> int:
    size = action_space_size(spec, cfg)
    if size > cfg.action_space_cap:
        raise ConfigError(
            f"action space too large for {spec.name}: 2^{spec.n_cap} caps x "
            f"{len(cfg.tap_choices)}^{spec.n_reg} taps x {len(cfg.discharge_choices)}^{spec.n_batt} "
            f"discharge = {size} > cap {cfg.action_space_cap}"
        )
    return size


def decode_action(idx: int, spec: FeederSpec, cfg: EnvConfig) -> DeviceActions:
    """Mixed-radix decode; the first capacitor is the most significant digit."""
    radices = action_radices(spec, cfg)
    size = math.prod(radices)
    if not 0 <= idx < size:
        raise ValueError(f"action index {idx} outside [0, {size})")
    digits = []
    for r in reversed(radices):
        idx, d = divmod(idx, r)
        digits.append(d)
    digits.reverse()
    nc, nr = spec.n_cap, spec.n_reg
    return DeviceActions(
        cap_on=tuple(bool(d) for d in digits[:nc]),
        tap=tuple(cfg.tap_choices[d] for d in digits[nc : nc + nr]),
        discharge_choice=tuple(cfg.discharge_choices[d] for d in digits[nc + nr :]),
    )


def encode_action(actions: DeviceActions, spec: FeederSpec, cfg: EnvConfig) -> int:
    digits = (
        [int(c) for c in actions.cap_on]
        + [cfg.tap_choices.index(t) for t in actions.tap]
        + [cfg.discharge_choices.index(c) for c in actions.discharge_choice]
    )
    idx = 0
    for d, r in zip(digits, action_radices(spec, cfg)):
        idx = idx * r + d
    return idx


# ---------------------------------------------------------------------------
# reward terms
# ---------------------------------------------------------------------------


def power_loss_term(sol: PowerFlowSolution, w: RewardWeights) -> float:
    if not sol.converged or sol.total_power_pu <= 0:
        return 0.0
    return w.w_power * sol.power_loss_pu / sol.total_power_pu


def voltage_penalty_term(sol: PowerFlowSolution, cfg: EnvConfig) -> float:
    over = np.maximum(sol.bus_max() - cfg.v_upper, 0.0)
    under = np.maximum(cfg.v_lower - sol.bus_min(), 0.0)
    return float(np.sum(over) + np.sum(under))


def control_error_term(prev: DeviceState, next: DeviceState, t: int, cfg: EnvConfig, soc0) -> float:
    """Device-wear penalty for the transition into step ``t``.

    ``next.discharge`` is already normalised by the battery rating, so the
    discharge term is simply ``w_dis * max(discharge, 0)``.
    """
    w = cfg.weights
    cost = w.w_cap * sum(abs(int(a) - int(b)) for a, b in zip(prev.cap_on, next.cap_on))
    cost += w.w_reg * PHASES_PER_REGULATOR * sum(abs(a - b) for a, b in zip(prev.tap, next.tap))
    cost += w.w_dis * sum(max(d, 0.0) for d in next.discharge)
    if t == cfg.horizon:
        cost += w.w_soc * sum(abs(s - s0) for s, s0 in zip(next.soc, soc0))
    return float(cost)


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------


def diurnal(t, horizon=24):
    """Daily load shape in [0, 1]: trough in the early morning, peak mid-afternoon."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * (np.asarray(t, dtype=float) - 3.0) / horizon)


def load_profile(spec: FeederSpec, cfg: EnvConfig, seed: int) -> np.ndarray:
    """Per-load multipliers for t = 0..H, shape ``(H + 1, n_loads)``."""
    rng = np.random.default_rng([cfg.load_profile_seed, seed])
    t = np.arange(cfg.horizon + 1)
    base = 0.6 + 0.4 * diurnal(t, cfg.horizon)
    noise = rng.uniform(-cfg.load_noise, cfg.load_noise, size=(cfg.horizon + 1, len(spec.load_buses)))
    return base[:, None] + noise


@dataclass(frozen=True)
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    info: tuple[float, float, float]  # (power_loss_term, volt_penalty_term, ctrl_error_term)
    solution: PowerFlowSolution | None = None


class VoltVarEnv:
    """Stateful episode driver.  Use :meth:`reset` before :meth:`step`."""

    def __init__(self, spec: FeederSpec, cfg: EnvConfig | None = None):
        self.spec = spec
        self.cfg = cfg or EnvConfig()
        self.n_actions = check_action_space(spec, self.cfg)
        self._mid_tap = self.cfg.tap_choices[len(self.cfg.tap_choices) // 2]
        self.t = 0
        self.done = True

    # -- shapes -----------------------------------------------------------
    @property
    def n_voltages(self) -> int:
        return sum(len(b.phases) for b in self.spec.buses)

    @property
    def frame_size(self) -> int:
        s = self.spec
        return self.n_voltages + s.n_cap + s.n_reg + 2 * s.n_batt + 1

    @property
    def obs_size(self) -> int:
        return self.frame_size * self.cfg.obs_stack_depth

    # -- episode ----------------------------------------------------------
    def reset(self, seed: int = 0) -> np.ndarray:
        spec = self.spec
        self.seed = seed
        self.loads = load_profile(spec, self.cfg, seed)
        self.t = 0
        self.done = False
        self.devices = DeviceState(
            cap_on=(False,) * spec.n_cap,
            tap=(self._mid_tap,) * spec.n_reg,
            soc=(0.5,) * spec.n_batt,
            discharge=(0.0,) * spec.n_batt,
        )
        self.soc0 = self.devices.soc
        self.solution = solve_power_flow(spec, self.devices, self.loads[0])
        frame = self._frame()
        self._frames = deque([frame] * self.cfg.obs_stack_depth, maxlen=self.cfg.obs_stack_depth)
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.concatenate(self._frames)

    def _frame(self) -> np.ndarray:
        sol, dev, spec = self.solution, self.devices, self.spec
        mask = spec.topology.phase_mask.T
        volts = np.clip(np.nan_to_num(sol.voltage[mask], nan=0.8), 0.8, 1.2)
        taps = [t / (r.tap_count - 1) for t, r in zip(dev.tap, spec.reg_buses)]
        return np.concatenate(
            [
                volts,
                np.asarray(dev.cap_on, dtype=float),
                np.asarray(taps, dtype=float),
                np.asarray(dev.soc, dtype=float),
                np.asarray(dev.discharge, dtype=float),
                [self.t / self.cfg.horizon],
            ]
        )

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise RuntimeError("episode is over; call reset()")
        spec, cfg = self.spec, self.cfg
        act = decode_action(int(action), spec, cfg)
        discharge = act.discharge()
        soc = tuple(
            float(np.clip(s - d * b.max_discharge_pu / b.capacity_puh, 0.0, 1.0))
            for s, d, b in zip(self.devices.soc, discharge, spec.batt_buses)
        )
        prev = self.devices
        nxt = DeviceState(cap_on=act.cap_on, tap=act.tap, soc=soc, discharge=discharge)
        self.t += 1
        self.devices = nxt
        sol = solve_power_flow(spec, nxt, self.loads[self.t])
        self.solution = sol
        ctrl = control_error_term(prev, nxt, self.t, cfg, self.soc0)
        if not sol.converged:
            logger.warning("power flow diverged at t=%d (action %d); ending episode", self.t, action)
            self.done = True
            info = (0.0, float(cfg.failure_penalty), ctrl)
        else:
            info = (power_loss_term(sol, cfg.weights), voltage_penalty_term(sol, cfg), ctrl)
            self.done = self.t >= cfg.horizon
        self._frames.append(self._frame())
        reward = -(info[0] + info[1] + info[2])
        return StepOutcome(self.observation(), reward, self.done, info, sol)


def env_reset(spec: FeederSpec, cfg: EnvConfig, seed: int):
    env = VoltVarEnv(spec, cfg)
    obs = env.reset(seed)
    return env, obs


def env_step(env: VoltVarEnv, action: int) -> StepOutcome:
    return env.step(action)


def neutral_action(env: VoltVarEnv) -> int:
    """Action that keeps caps off, taps at the middle choice and the battery idle (if possible)."""
    cfg = env.cfg
    mid_dis = min(cfg.discharge_choices, key=lambda c: abs(c - 16))
    acts = DeviceActions(
        cap_on=(False,) * env.spec.n_cap,
        tap=(env._mid_tap,) * env.spec.n_reg,
        discharge_choice=(mid_dis,) * env.spec.n_batt,
    )
    return encode_action(acts, env.spec, cfg)


def trajectory_row(t, action, outcome: StepOutcome) -> dict:
    sol = outcome.solution
    return {
        "t": t,
        "action": int(action),
        "reward": outcome.reward,
        "power_loss_term": outcome.info[0],
        "volt_penalty_term": outcome.info[1],
        "ctrl_error_term": outcome.info[2],
        "v_min": float(np.nanmin(sol.voltage)) if sol is not None else float("nan"),
        "v_max": float(np.nanmax(sol.voltage)) if sol is not None else float("nan"),
    }


def write_trajectory_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def with_bounds(cfg: EnvConfig, v_lower: float, v_upper: float) -> EnvConfig:
    return replace(cfg, v_lower=v_lower, v_upper=v_upper)


# feeder123 has 4 caps, 4 regulators and a battery: 2^4 * 5^4 * 5 = 50000 joint
# actions with the default alphabets, so it uses three choices per device
# (2^4 * 3^4 * 3 = 3888).
FEEDER_PRESETS = {
    "feeder123": {"tap_choices": (8, 16, 24), "discharge_choices": (8, 16, 24)},
}


def config_for_feeder(name: str, **overrides) -> EnvConfig:
    """Default :class:`EnvConfig` for a bundled feeder, with keyword overrides."""
    data = dict(FEEDER_PRESETS.get(name, {}))
    data.update(overrides)
    return EnvConfig.from_dict(data)
