"""Command-line experiment driver: ``gcdt train | ablate | bench | eval``.

Every subcommand reads an optional JSON run configuration (``--config``)
whose keys mirror :class:`RunConfig`; command-line flags override it.
Exit status is 0 on success, 2 for configuration errors and 3 for failures
while running.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import aggregate
from .env import TRAJECTORY_HEADER, ConfigError, EnvConfig, VoltVarEnv, config_for_feeder
from .feeder import FeederError, FeederSpec, bundled_feeder, load_feeder_file
from .planner import PlannerConfig
from .trainer import TrainerConfig, self_play_episode, train_loop
from .twin import load_model

logger = logging.getLogger("gcdt")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
PLANNER_ALIASES = {"gcdt": "gcdt", "dt": "dt", "dt-baseline": "dt"}
BENCH_HEADER = ("planner", "n_simulations", "ts_mean", "ts_std", "te_mean", "te_std", "episodes")


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    feeder: str = "feeder13"
    planner: str = "gcdt"
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    env: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)
    search: dict = field(default_factory=dict)
    twin: dict = field(default_factory=dict)
    budgets: tuple[int, ...] = (4, 16)  # ablation grid over n_simulations
    planners: tuple[str, ...] = ("gcdt", "dt")  # ablation / bench grid
    bench_episodes: int = 50
    bench_warmup: int = 5
    bench_sims: tuple[int, ...] = (4, 8, 16)
    eval_episodes: int = 10
    eval_seed_offset: int = 100_000
    checkpoint: str | None = None
    bin_width: int = 240
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise RunConfigError(f"unknown run config keys: {sorted(unknown)}")
        data = dict(data)
        for key in ("seeds", "budgets", "planners", "bench_sims"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# resolving configuration pieces
# ---------------------------------------------------------------------------


def resolve_feeder(name_or_path: str) -> FeederSpec:
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise RunConfigError(f"feeder file {path} does not exist")
        return load_feeder_file(path)
    try:
        return bundled_feeder(name_or_path)
    except FileNotFoundError:
        raise RunConfigError(f"unknown feeder {name_or_path!r}") from None


def planner_kind(name: str) -> str:
    try:
        return PLANNER_ALIASES[name]
    except KeyError:
        raise RunConfigError(f"planner must be one of {sorted(PLANNER_ALIASES)}, got {name!r}") from None


def env_config(run: RunConfig, spec: FeederSpec) -> EnvConfig:
    return config_for_feeder(spec.name, **run.env)


def trainer_config(run: RunConfig, spec: FeederSpec) -> TrainerConfig:
    data = dict(run.trainer)
    # desk-scale defaults: 20k env steps on the small feeder, 40k on the larger ones
    data.setdefault("env_steps", 20_000 if spec.n_buses <= 13 else 40_000)
    return TrainerConfig.from_dict(data)


def planner_config(run: RunConfig, n_simulations: int | None = None) -> PlannerConfig:
    data = dict(run.search)
    if n_simulations is not None:
        data["n_simulations"] = n_simulations
    return PlannerConfig(**data)


@dataclass(frozen=True)
class Resolved:
    run: RunConfig
    spec: FeederSpec
    env_cfg: EnvConfig
    trainer_cfg: TrainerConfig
    planner_cfg: PlannerConfig
    planner: str


def resolve(run: RunConfig) -> Resolved:
    """Build and cross-check every module config; raises on any inconsistency."""
    spec = resolve_feeder(run.feeder)
    env_cfg = env_config(run, spec)
    VoltVarEnv(spec, env_cfg)  # action-space check
    trainer_cfg = trainer_config(run, spec)
    planner_cfg = planner_config(run)
    kind = planner_kind(run.planner)
    for p in run.planners:
        planner_kind(p)
    if not run.seeds:
        raise RunConfigError("at least one seed is required")
    if any(n < 1 for n in (*run.budgets, *run.bench_sims)):
        raise RunConfigError("simulation budgets must be >= 1")
    if run.bench_episodes < 1 or run.bench_warmup < 0 or run.eval_episodes < 1:
        raise RunConfigError("episode counts must be positive")
    return Resolved(run, spec, env_cfg, trainer_cfg, planner_cfg, kind)


# ---------------------------------------------------------------------------
# train / ablate
# ---------------------------------------------------------------------------


def run_dir(out: Path, planner: str, n_sims: int) -> Path:
    return out / f"{planner}_n{n_sims}"


def _train_job(job):
    run_dict, planner, n_sims, seed, directory = job
    res = resolve(RunConfig.from_dict(run_dict))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    train_loop(
        res.spec,
        res.trainer_cfg,
        planner_config(res.run, n_sims),
        seed=seed,
        planner=planner,
        env_cfg=res.env_cfg,
        twin_kwargs=res.run.twin,
        out_dir=directory,
        metrics_path=directory / "metrics.csv",
    )
    logger.info("%s N=%d seed %d done in %.1fs", planner, n_sims, seed, time.perf_counter() - start)
    return directory / "metrics.csv"


def _run_jobs(jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(job) for job in jobs]


def train_grid(res: Resolved, planners, budgets) -> dict:
    """Train every (planner, N, seed) combination; return metrics paths keyed by (planner, N)."""
    out = Path(res.run.out)
    run_dict = res.run.to_dict()
    jobs = [
        (run_dict, p, n, seed, str(run_dir(out, p, n) / f"seed{seed}"))
        for p in planners
        for n in budgets
        for seed in res.run.seeds
    ]
    paths = _run_jobs(jobs, res.run.workers)
    grouped = {}
    for (_, p, n, _, _), path in zip(jobs, paths):
        grouped.setdefault((p, n), []).append(path)
    for (p, n), files in grouped.items():
        runs = [aggregate.read_returns(f) for f in files]
        aggregate.write_rows(
            run_dir(out, p, n) / "aggregate.csv",
            aggregate.CURVE_HEADER,
            aggregate.curve(runs, res.run.bin_width),
        )
    return grouped


def cmd_train(res: Resolved) -> int:
    n = res.planner_cfg.n_simulations
    grouped = train_grid(res, [res.planner], [n])
    agg = run_dir(Path(res.run.out), res.planner, n) / "aggregate.csv"
    rows = aggregate.read_rows(agg)
    print(f"trained {res.planner} N={n} on {res.spec.name} for seeds {list(res.run.seeds)}")
    print(f"per-seed metrics: {[str(p) for p in grouped[(res.planner, n)]]}")
    print(f"aggregate: {agg} (final median return {float(rows[-1]['median_return']):.3f})")
    return EXIT_OK


def cmd_ablate(res: Resolved) -> int:
    planners = [planner_kind(p) for p in res.run.planners]
    grouped = train_grid(res, planners, res.run.budgets)
    budget = res.trainer_cfg.env_steps
    rows = [
        aggregate.ablation_row(p, n, [aggregate.read_returns(f) for f in files], budget)
        for (p, n), files in grouped.items()
    ]
    path = Path(res.run.out) / "ablation.csv"
    aggregate.write_rows(path, aggregate.ABLATION_HEADER, rows)
    print(f"ablation table: {path}")
    for row in rows:
        print(f"  {row['planner']:>5} N={row['n_simulations']:<3} final median return {row['final']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench / eval
# ---------------------------------------------------------------------------


def load_checkpoint(res: Resolved):
    if not res.run.checkpoint:
        raise RunConfigError("a checkpoint is required (--checkpoint or config key 'checkpoint')")
    path = Path(res.run.checkpoint)
    if not path.exists():
        raise RunConfigError(f"checkpoint {path} does not exist")
    model, _, extra = load_model(path)
    env = VoltVarEnv(res.spec, res.env_cfg)
    if (model.config.obs_dim, model.config.n_actions) != (env.obs_size, env.n_actions):
        raise RunConfigError(
            f"checkpoint expects obs_dim={model.config.obs_dim}, n_actions={model.config.n_actions} but "
            f"{res.spec.name} gives obs_dim={env.obs_size}, n_actions={env.n_actions}"
        )
    return model, extra


def bench_planner(res: Resolved, model, planner: str, n_sims: int, seed: int = 0) -> dict:
    """TS (per env step, search included) and TE (per episode) wall-clock statistics."""
    env = VoltVarEnv(res.spec, res.env_cfg)
    cfg = planner_config(res.run, n_sims)
    rng = np.random.default_rng(seed)
    step_times, episode_times = [], []
    for i in range(res.run.bench_warmup + res.run.bench_episodes):
        timings = []
        start = time.perf_counter()
        self_play_episode(env, model, cfg, rng, planner=planner, seed=1000 + i, timings=timings)
        elapsed = time.perf_counter() - start
        if i >= res.run.bench_warmup:
            step_times.extend(timings)
            episode_times.append(elapsed)
    return {
        "planner": planner,
        "n_simulations": n_sims,
        "ts_mean": float(np.mean(step_times)),
        "ts_std": float(np.std(step_times)),
        "te_mean": float(np.mean(episode_times)),
        "te_std": float(np.std(episode_times)),
        "episodes": len(episode_times),
    }


def cmd_bench(res: Resolved) -> int:
    model, _ = load_checkpoint(res)
    rows = [
        bench_planner(res, model, planner_kind(p), n)
        for p in res.run.planners
        for n in res.run.bench_sims
    ]
    out = Path(res.run.out)
    out.mkdir(parents=True, exist_ok=True)
    aggregate.write_rows(out / "bench.csv", BENCH_HEADER, rows)
    print(f"timing table: {out / 'bench.csv'}")
    for r in rows:
        print(f"  {r['planner']:>5} N={r['n_simulations']:<3} TS {1e3 * r['ts_mean']:.3f} ms  "
              f"TE {1e3 * r['te_mean']:.1f} ms")
    return EXIT_OK


def evaluate(res: Resolved, model) -> tuple[dict, list[dict]]:
    """Greedy episodes on held-out load seeds; returns the report and the trajectory log rows."""
    env = VoltVarEnv(res.spec, res.env_cfg)
    cfg = res.planner_cfg
    returns, violations, loss_fracs, rows = [], [], [], []
    for i in range(res.run.eval_episodes):
        seed = res.run.eval_seed_offset + i
        ep_rows = []
        rng = np.random.default_rng(seed)
        traj = self_play_episode(env, model, cfg, rng, planner=res.planner, seed=seed, greedy=True,
                                 log_rows=ep_rows)
        returns.append(traj.episode_return)
        for row in ep_rows:
            row["episode"] = i
        rows.extend(ep_rows)
        # raw voltage violation and loss ratio recomputed from the solver outputs
        violations.append(float(np.mean(traj.reward_terms[:, 1])))
        w = res.env_cfg.weights.w_power
        loss_fracs.append(float(np.mean(traj.reward_terms[:, 0])) / w if w > 0 else float("nan"))
    report = {
        "feeder": res.spec.name,
        "planner": res.planner,
        "n_simulations": cfg.n_simulations,
        "episodes": res.run.eval_episodes,
        "mean_return": float(np.mean(returns)),
        "std_return": float(np.std(returns)),
        "mean_voltage_violation": float(np.mean(violations)),
        "mean_power_loss_fraction": float(np.mean(loss_fracs)),
        "returns": [float(r) for r in returns],
    }
    return report, rows


def cmd_eval(res: Resolved) -> int:
    model, _ = load_checkpoint(res)
    report, rows = evaluate(res, model)
    out = Path(res.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2))
    write_eval_log(out / "eval_trajectories.csv", rows)
    print(f"mean return {report['mean_return']:.4f} over {report['episodes']} episodes")
    print(f"mean voltage violation {report['mean_voltage_violation']:.6f} pu, "
          f"power-loss fraction {report['mean_power_loss_fraction']:.5f}")
    print(f"report: {out / 'eval_report.json'}")
    return EXIT_OK


def write_eval_log(path, rows):
    """Trajectory log with an extra leading ``episode`` column."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=("episode",) + TRAJECTORY_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


COMMANDS = {"train": cmd_train, "ablate": cmd_ablate, "bench": cmd_bench, "eval": cmd_eval}


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcdt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--feeder", help="bundled feeder name or path to a feeder JSON file")
        p.add_argument("--planner", help="gcdt or dt (baseline); a comma list for ablate/bench")
        p.add_argument("--sims", type=_int_list, help="simulations per step; a list for ablate/bench")
        p.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--steps", type=int, help="env-step budget per run")
        p.add_argument("--checkpoint", help="model checkpoint (bench, eval)")
        p.add_argument("--workers", type=int, help="parallel training processes")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run_config_from_args(args) -> RunConfig:
    run = RunConfig()
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise RunConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise RunConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise RunConfigError("run config must be a JSON object")
        run = RunConfig.from_dict(data)
    updates = {}
    for key in ("feeder", "out", "checkpoint", "workers"):
        value = getattr(args, key)
        if value is not None:
            updates[key] = value
    if args.seeds is not None:
        updates["seeds"] = args.seeds
    if args.sims is not None:
        if not args.sims:
            raise RunConfigError("--sims needs at least one value")
        if args.command == "ablate":
            updates["budgets"] = args.sims
        elif args.command == "bench":
            updates["bench_sims"] = args.sims
        else:
            if len(args.sims) != 1:
                raise RunConfigError(f"{args.command} takes a single --sims value")
            updates["search"] = {**run.search, "n_simulations": args.sims[0]}
    if args.planner is not None:
        planners = tuple(p.strip() for p in args.planner.split(",") if p.strip())
        if not planners:
            raise RunConfigError("--planner needs at least one value")
        if args.command in ("ablate", "bench"):
            updates["planners"] = planners
        elif len(planners) != 1:
            raise RunConfigError(f"{args.command} takes a single --planner value")
        else:
            updates["planner"] = planners[0]
    if args.steps is not None:
        updates["trainer"] = {**run.trainer, "env_steps": args.steps}
    return replace(run, **updates)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        res = resolve(run_config_from_args(args))
    except (RunConfigError, ConfigError, FeederError, ValueError, TypeError) as exc:
        print(f"gcdt {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(res.run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}_config.json").write_text(json.dumps(res.run.to_dict(), indent=2))
        return COMMANDS[args.command](res)
    except RunConfigError as exc:
        print(f"gcdt {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit code
        logger.exception("run failed")
        print(f"gcdt {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
