"""Tree search over the latent model.

Two planners share one interface (``run_search`` / ``run_puct_search``):

* the Gumbel planner samples ``m`` root candidates without replacement with
  the Gumbel-top trick, spends its simulation budget on them with
  sequential halving, picks interior actions deterministically from the
  improved policy, and returns that improved policy as the training target;
* the PUCT planner is the classic visit-everything upper-confidence search
  whose training target is the root visit distribution.

Backed-up values are min-max normalised over the whole tree before the
monotone ``sigma`` transform is applied.  Ties are always broken towards the
lowest action index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nncore import softmax


@dataclass(frozen=True)
class PlannerConfig:
    n_simulations: int = 16
    m_root_samples: int = 16
    c_visit: float = 50.0
    c_scale: float = 0.1
    discount: float = 0.99
    max_depth: int = 6
    seed: int = 0
    # PUCT baseline
    pb_c_base: float = 19652.0
    pb_c_init: float = 1.25
    dirichlet_alpha: float = 0.3
    exploration_fraction: float = 0.25

    def __post_init__(self):
        if self.n_simulations < 1 or self.m_root_samples < 1:
            raise ValueError("n_simulations and m_root_samples must be >= 1")
        if self.c_visit <= 0 or self.c_scale <= 0 or self.max_depth < 1:
            raise ValueError("c_visit, c_scale and max_depth must be positive")
        if not 0 <= self.discount <= 1:
            raise ValueError("discount must lie in [0, 1]")

    def root_samples(self, k: int) -> int:
        """Effective m: never more than the action count or the budget."""
        return max(1, min(self.m_root_samples, k, self.n_simulations))


# ---------------------------------------------------------------------------
# Gumbel primitives
# ---------------------------------------------------------------------------


def sample_gumbel(k: int, rng) -> np.ndarray:
    u = rng.uniform(np.finfo(float).tiny, 1.0, size=k)
    return -np.log(-np.log(u))


def _argsort_desc(scores):
    # stable on the negated scores: equal scores keep ascending index order
    return np.argsort(-np.asarray(scores), kind="stable")


def gumbel_top_m(logits, g, m: int) -> list[int]:
    logits, g = np.asarray(logits), np.asarray(g)
    if logits.shape != g.shape:
        raise ValueError("logits and gumbels must have the same length")
    if not 1 <= m <= len(logits):
        raise ValueError(f"m={m} must lie in [1, {len(logits)}]")
    return [int(a) for a in _argsort_desc(g + logits)[:m]]


def sigma_transform(q, max_visits, cfg: PlannerConfig):
    return (cfg.c_visit + max_visits) * cfg.c_scale * np.asarray(q, dtype=float)


def improved_policy(logits, completed, max_visits, cfg: PlannerConfig) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=float) + sigma_transform(completed, max_visits, cfg))


def sequential_halving_schedule(m: int, n: int) -> list[tuple[int, int]]:
    """Budget split ``[(candidate_count, visits_per_candidate), ...]`` summing to exactly ``n``.

    ``max(1, ceil(log2 m))`` phases; each phase gives every surviving
    candidate ``max(1, n // (phases * count))`` visits and keeps the top half.
    Leftover budget goes to the final phase; if it does not divide evenly the
    last entry grants one extra visit to the best few survivors.
    """
    if m < 1 or n < m:
        raise ValueError(f"need 1 <= m <= n, got m={m}, n={n}")
    phases = max(1, math.ceil(math.log2(m)))
    schedule = []
    used = 0
    count = m
    for p in range(phases):
        visits = max(1, n // (phases * count))
        if used + count * visits > n:
            visits = (n - used) // count
            if visits == 0:
                break
        schedule.append((count, visits))
        used += count * visits
        count = max(1, math.ceil(count / 2))
    remainder = n - used
    if remainder:
        last_count, last_visits = schedule[-1]
        schedule[-1] = (last_count, last_visits + remainder // last_count)
        if remainder % last_count:
            schedule.append((remainder % last_count, 1))
    return schedule


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------


class MinMax:
    """Running min/max of backed-up values used to rescale q into [0, 1]."""

    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf

    def update(self, value):
        value = float(value)
        if value < self.lo:
            self.lo = value
        if value > self.hi:
            self.hi = value

    def normalize(self, q):
        if self.hi > self.lo:
            return (np.asarray(q, dtype=float) - self.lo) / (self.hi - self.lo)
        return np.full_like(np.asarray(q, dtype=float), 0.5)


class SearchNode:
    __slots__ = ("hidden", "logits", "value", "depth", "terminal", "visits", "value_sum",
                 "rewards", "children", "gumbel", "candidates", "prior")

    def __init__(self, hidden, logits, value, depth=0, terminal=False):
        k = len(logits)
        self.hidden = hidden
        self.logits = np.asarray(logits, dtype=float)
        self.value = float(value)
        self.depth = depth
        self.terminal = terminal
        self.visits = np.zeros(k, dtype=np.int64)
        self.value_sum = np.zeros(k)
        self.rewards = np.zeros(k)
        self.children: dict[int, SearchNode] = {}
        self.gumbel = None
        self.candidates = None
        self.prior = None

    @property
    def is_root(self) -> bool:
        return self.gumbel is not None

    def q_hat(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.visits > 0, self.value_sum / np.maximum(self.visits, 1), np.nan)


def completed_q(node: SearchNode, value_estimate: float) -> np.ndarray:
    """Empirical mean q-hat where visited, ``value_estimate`` elsewhere."""
    return np.where(node.visits > 0, node.value_sum / np.maximum(node.visits, 1), value_estimate)


def _normalized_completed(node: SearchNode, stats: MinMax) -> np.ndarray:
    return stats.normalize(completed_q(node, node.value))


def root_scores(node: SearchNode, cfg: PlannerConfig, q=None, stats: MinMax | None = None):
    """``g + logits + sigma(q)`` for every action.

    ``q`` defaults to the node's normalised completed q-values.
    """
    if q is None:
        q = _normalized_completed(node, stats or MinMax())
    return node.gumbel + node.logits + sigma_transform(q, node.visits.max(), cfg)


def select_root_action(node: SearchNode, cfg: PlannerConfig, q=None, stats: MinMax | None = None,
                       candidates=None) -> int:
    if not node.is_root:
        raise ValueError("select_root_action needs a root node with gumbels")
    cands = sorted(node.candidates if candidates is None else candidates)
    scores = root_scores(node, cfg, q, stats)[cands]
    return int(cands[int(np.argmax(scores))])


def select_child_nonroot(node: SearchNode, cfg: PlannerConfig, stats: MinMax) -> int:
    pi = improved_policy(node.logits, _normalized_completed(node, stats), node.visits.max(), cfg)
    return int(np.argmax(pi - node.visits / (1.0 + node.visits.sum())))


# ---------------------------------------------------------------------------
# search driver
# ---------------------------------------------------------------------------


@dataclass
class SearchResult:
    chosen_action: int
    policy_target: np.ndarray
    root_value: float
    simulations_used: int
    root_visits: np.ndarray
    completed_q: np.ndarray
    candidates: list[int] = field(default_factory=list)
    trace: list[tuple[int, int, int, float]] | None = None  # (simulation, depth, action, q backup)


class _Tree:
    def __init__(self, model, cfg: PlannerConfig, depth_limit: int, trace: bool):
        self.model = model
        self.cfg = cfg
        self.depth_limit = depth_limit
        self.stats = MinMax()
        self.trace = [] if trace else None
        self.sim = 0

    def make_root(self, obs) -> SearchNode:
        h = self.model.represent(obs)
        logits, v = self.model.predict(h)
        root = SearchNode(h, logits, float(v), depth=0, terminal=self.depth_limit == 0)
        self.stats.update(root.value)
        return root

    def expand(self, parent: SearchNode, action: int) -> SearchNode:
        r, h = self.model.dynamics(parent.hidden, action)
        depth = parent.depth + 1
        terminal = depth >= self.depth_limit
        if terminal:
            logits, v = np.zeros(self.model.n_actions), 0.0
        else:
            logits, v = self.model.predict(h)
        child = SearchNode(h, logits, float(v), depth=depth, terminal=terminal)
        parent.rewards[action] = float(r)
        parent.children[action] = child
        if not terminal:
            self.stats.update(child.value)
        return child

    def simulate(self, root: SearchNode, first_action: int, select):
        path = []
        node, action = root, first_action
        while True:
            path.append((node, action))
            child = node.children.get(action)
            if child is None:
                child = self.expand(node, action)
                leaf_value = child.value
                break
            if child.terminal or child.depth >= self.cfg.max_depth:
                leaf_value = child.value
                break
            node = child
            action = select(node)
        self.backup(path, leaf_value)

    def backup(self, path, value):
        gamma = self.cfg.discount
        for node, action in reversed(path):
            value = node.rewards[action] + gamma * value
            node.visits[action] += 1
            node.value_sum[action] += value
            self.stats.update(value)
            if self.trace is not None:
                self.trace.append((self.sim, node.depth, action, float(value)))
        self.sim += 1


def _depth_limit(env_t, horizon):
    if horizon is None:
        return math.inf
    return max(0, horizon - env_t)


def _check_model(obs, model):
    n = model.n_actions
    if n < 1:
        raise ValueError("model has no actions")
    obs_dim = getattr(getattr(model, "config", None), "obs_dim", None)
    if obs_dim is not None and np.shape(obs)[-1] != obs_dim:
        raise ValueError(f"observation length {np.shape(obs)[-1]} does not match model input {obs_dim}")


def run_search(obs, model, env_t: int, cfg: PlannerConfig, rng=None, horizon=None,
               trace=False) -> SearchResult:
    """Gumbel sequential-halving search from observation ``obs``.

    ``model`` needs ``represent``, ``dynamics``, ``predict`` and
    ``n_actions``.  With ``horizon`` given, the tree never looks past the end
    of the episode (``horizon - env_t`` steps).
    """
    _check_model(obs, model)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tree = _Tree(model, cfg, _depth_limit(env_t, horizon), trace)
    root = tree.make_root(obs)
    k = model.n_actions
    m = cfg.root_samples(k)
    root.gumbel = sample_gumbel(k, rng)
    root.candidates = gumbel_top_m(root.logits, root.gumbel, m)

    def select(node):
        return select_child_nonroot(node, cfg, tree.stats)

    survivors = sorted(root.candidates)  # index order, so score ties go to the lowest action
    for count, visits in sequential_halving_schedule(m, cfg.n_simulations):
        if count < len(survivors):
            scores = root_scores(root, cfg, stats=tree.stats)[survivors]
            survivors = sorted(survivors[i] for i in _argsort_desc(scores)[:count])
        for _ in range(visits):
            for action in survivors:
                tree.simulate(root, action, select)

    chosen = select_root_action(root, cfg, stats=tree.stats, candidates=survivors)
    raw_q = completed_q(root, root.value)
    pi = improved_policy(root.logits, tree.stats.normalize(raw_q), root.visits.max(), cfg)
    return SearchResult(
        chosen_action=chosen,
        policy_target=pi,
        root_value=float(np.dot(pi, raw_q)),
        simulations_used=int(root.visits.sum()),
        root_visits=root.visits.copy(),
        completed_q=raw_q,
        candidates=list(root.candidates),
        trace=tree.trace,
    )


def _puct_select(node: SearchNode, cfg: PlannerConfig, stats: MinMax) -> int:
    # the node's own expansion counts as a visit, otherwise the first selection
    # has no exploration term and always falls back to action 0
    parent_visits = node.visits.sum() + 1
    prior = node.prior if node.prior is not None else softmax(node.logits)
    c = cfg.pb_c_init + math.log((parent_visits + cfg.pb_c_base + 1.0) / cfg.pb_c_base)
    u = c * prior * math.sqrt(parent_visits) / (1.0 + node.visits)
    q = np.where(node.visits > 0, stats.normalize(completed_q(node, 0.0)), 0.0)
    return int(np.argmax(q + u))


def run_puct_search(obs, model, env_t: int, cfg: PlannerConfig, rng=None, horizon=None,
                    explore=True, trace=False) -> SearchResult:
    """Baseline PUCT search over all root actions; target is the visit distribution.

    With ``explore`` the root prior gets Dirichlet noise and the played action
    is sampled in proportion to visits; otherwise the most visited action is
    played.
    """
    _check_model(obs, model)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tree = _Tree(model, cfg, _depth_limit(env_t, horizon), trace)
    root = tree.make_root(obs)
    k = model.n_actions
    prior = softmax(root.logits)
    if explore:
        noise = rng.dirichlet(np.full(k, cfg.dirichlet_alpha))
        prior = (1 - cfg.exploration_fraction) * prior + cfg.exploration_fraction * noise
    root.prior = prior

    def select(node):
        return _puct_select(node, cfg, tree.stats)

    for _ in range(cfg.n_simulations):
        tree.simulate(root, select(root), select)

    visits = root.visits
    pi = visits / visits.sum()
    if explore:
        chosen = int(rng.choice(k, p=pi))
    else:
        chosen = int(np.argmax(visits))
    raw_q = completed_q(root, root.value)
    return SearchResult(
        chosen_action=chosen,
        policy_target=pi,
        root_value=float(np.dot(pi, raw_q)),
        simulations_used=int(visits.sum()),
        root_visits=visits.copy(),
        completed_q=raw_q,
        candidates=[int(a) for a in np.flatnonzero(visits)],
        trace=tree.trace,
    )


PLANNERS = {"gcdt": run_search, "dt": run_puct_search}
