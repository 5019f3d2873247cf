"""Latent world model: representation, dynamics, prediction and projections.

The representation (transformation) net maps a stacked observation to a
latent state in (-1, 1).  The dynamics net takes a latent plus a one-hot
action and returns a reward and the next latent; the prediction net returns
policy logits and a value.  Two projection nets feed the consistency loss:
``proj1`` embeds the latent of the *observed* next state (target side, no
gradient), ``proj2`` embeds the latent produced by the dynamics net.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .nncore import (
    DenseNet,
    GradientTape,
    load_nets,
    loss_cross_entropy,
    loss_kl,
    save_nets,
    softmax,
)

NET_NAMES = (
    "transform",
    "dyn_trunk", "dyn_state", "dyn_reward",
    "pred_trunk", "pred_policy", "pred_value",
    "proj1", "proj2",
)
# proj1 only ever sees stop-gradient inputs and is not trained
TRAINABLE = tuple(n for n in NET_NAMES if n != "proj1")


@dataclass(frozen=True)
class TwinConfig:
    obs_dim: int
    n_actions: int
    hidden_dim: int = 64
    width: int = 64
    proj_dim: int = 32
    seed: int = 0

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class LossWeights:
    reward: float = 1.0  # lambda_1
    policy: float = 1.0  # lambda_2
    value: float = 0.25  # lambda_3
    consistency: float = 2.0  # lambda_4

    def __post_init__(self):
        if min(self.reward, self.policy, self.value, self.consistency) < 0:
            raise ValueError("loss weights must be non-negative")


class TwinModel:
    """All networks of the latent model.  Treat instances as values; use :meth:`copy` to snapshot."""

    def __init__(self, config: TwinConfig, nets: dict[str, DenseNet] | None = None):
        self.config = config
        if nets is None:
            nets = self._init_nets(config)
        missing = set(NET_NAMES) - set(nets)
        if missing:
            raise ValueError(f"missing networks: {sorted(missing)}")
        self.nets = nets
        self._check_dims()

    @staticmethod
    def _init_nets(c: TwinConfig) -> dict[str, DenseNet]:
        rng = np.random.default_rng(c.seed)
        h, w, a, p = c.hidden_dim, c.width, c.n_actions, c.proj_dim
        nets = {
            "transform": DenseNet.create([c.obs_dim, w, h], ["relu", "tanh"], rng),
            "dyn_trunk": DenseNet.create([h + a, w], ["relu"], rng),
            "dyn_state": DenseNet.create([w, h], ["tanh"], rng),
            "dyn_reward": DenseNet.create([w, 1], ["identity"], rng),
            "pred_trunk": DenseNet.create([h, w], ["relu"], rng),
            "pred_policy": DenseNet.create([w, a], ["identity"], rng),
            "pred_value": DenseNet.create([w, 1], ["identity"], rng),
            "proj1": DenseNet.create([h, p, p], ["relu", "identity"], rng),
        }
        # start the online projection at the target projection so the
        # consistency gradient initially pulls predicted latents towards observed ones
        nets["proj2"] = nets["proj1"].copy()
        # small output layers keep early policies near uniform and values near zero
        for name in ("pred_policy", "pred_value", "dyn_reward"):
            nets[name].weights[-1] *= 0.1
        return nets

    def _check_dims(self):
        c, n = self.config, self.nets
        if n["transform"].in_dim != c.obs_dim or n["transform"].out_dim != c.hidden_dim:
            raise ValueError("transform net does not map obs_dim -> hidden_dim")
        if n["dyn_trunk"].in_dim != c.hidden_dim + c.n_actions:
            raise ValueError("dynamics net input must be hidden_dim + n_actions")
        if n["pred_policy"].out_dim != c.n_actions:
            raise ValueError("policy head must output n_actions logits")
        for name in ("transform", "dyn_state"):
            if n[name].activations[-1] != "tanh":
                raise ValueError(f"{name} must end in tanh to bound the latent")

    @property
    def n_actions(self) -> int:
        return self.config.n_actions

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def copy(self) -> TwinModel:
        return TwinModel(self.config, {k: v.copy() for k, v in self.nets.items()})

    def trainable(self) -> list[DenseNet]:
        return [self.nets[n] for n in TRAINABLE]

    def l2(self) -> float:
        return float(sum(np.sum(p * p) for net in self.trainable() for p in net.parameters()))

    def represent(self, obs):
        return represent(self, obs)

    def dynamics(self, h, a):
        return dynamics(self, h, a)

    def predict(self, h):
        return predict(self, h)

    def one_hot(self, actions):
        actions = np.asarray(actions)
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ValueError(f"action outside [0, {self.n_actions})")
        out = np.zeros(actions.shape + (self.n_actions,))
        np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
        return out


def represent(model: TwinModel, obs):
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-1] != model.config.obs_dim:
        raise ValueError(f"observation length {obs.shape[-1]} != {model.config.obs_dim}")
    return model.nets["transform"](obs)


def dynamics(model: TwinModel, h, a):
    """Return ``(reward, next_latent)`` for latent(s) ``h`` and action index(es) ``a``."""
    n = model.nets
    x = np.concatenate([h, model.one_hot(a)], axis=-1)
    trunk = n["dyn_trunk"](x)
    return n["dyn_reward"](trunk)[..., 0], n["dyn_state"](trunk)


def predict(model: TwinModel, h):
    """Return ``(policy_logits, value)``."""
    n = model.nets
    trunk = n["pred_trunk"](h)
    return n["pred_policy"](trunk), n["pred_value"](trunk)[..., 0]


def consistency_loss(model: TwinModel, h_pred, h_true):
    """Cross-entropy of softmax(proj1(h_true)) against proj2(h_pred) logits.

    ``h_true`` is a constant target.  Returns ``(value, grads)`` where
    ``grads`` holds ``"h_pred"`` and a tape for ``"proj2"``.
    """
    target = softmax(model.nets["proj1"](h_true))
    logits, cache = model.nets["proj2"].forward_cached(h_pred)
    value, dlogits = loss_cross_entropy(logits, target)
    tape = GradientTape.zeros_like(model.nets["proj2"])
    dh = model.nets["proj2"].backprop(cache, dlogits, tape)
    return value, {"h_pred": dh, "proj2": tape}


# ---------------------------------------------------------------------------
# K-step unrolled loss
# ---------------------------------------------------------------------------


@dataclass
class UnrollBatch:
    """``B`` anchors with ``K``-step windows; arrays are indexed ``[b, k]``."""

    obs: np.ndarray  # (B, obs_dim)
    actions: np.ndarray  # (B, K) int
    rewards: np.ndarray  # (B, K)
    policies: np.ndarray  # (B, K, n_actions)
    values: np.ndarray  # (B, K)
    next_obs: np.ndarray  # (B, K, obs_dim)
    mask: np.ndarray  # (B, K) 1.0 where the step exists
    traj_ids: np.ndarray | None = None  # (B,) provenance for debugging
    positions: np.ndarray | None = None  # (B,) anchor t

    def __post_init__(self):
        B, K = self.actions.shape
        want = {
            "obs": (B,), "rewards": (B, K), "policies": (B, K), "values": (B, K),
            "next_obs": (B, K), "mask": (B, K),
        }
        for name, prefix in want.items():
            if getattr(self, name).shape[: len(prefix)] != prefix:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected leading {prefix}")

    @property
    def size(self) -> int:
        return self.actions.shape[0]

    @property
    def unroll(self) -> int:
        return self.actions.shape[1]


@dataclass
class LossResult:
    total: float
    components: dict[str, float]
    grads: dict[str, GradientTape] = field(repr=False)
    latent_error: float = 0.0


def unrolled_loss(
    model: TwinModel,
    batch: UnrollBatch,
    w: LossWeights,
    l2_coefficient: float = 0.0,
    latent_grad_scale: float = 0.5,
    target_model: TwinModel | None = None,
) -> LossResult:
    """Weighted sum of reward, policy (KL), value and consistency losses plus ``c ||theta||^2``.

    Per-sample terms are summed over the ``K`` unroll steps, masked past
    episode end and averaged over the batch.  Gradients (including the
    ``2 c theta`` weight-penalty part) are returned per trainable network.
    The gradient entering each dynamics step from the latent is multiplied by
    ``latent_grad_scale``; with 1.0 the gradients are exact.  The consistency
    target is computed with ``target_model`` (default: ``model``) and never
    receives gradient.
    """
    target_model = target_model or model
    n = model.nets
    B, K = batch.size, batch.unroll
    H = model.hidden_dim
    if batch.obs.shape[1] != model.config.obs_dim:
        raise ValueError("batch observation width does not match the model")
    if batch.policies.shape[2] != model.n_actions:
        raise ValueError("policy targets must cover every action")
    # step-major layout: row k * B + b
    m = np.asarray(batch.mask, dtype=float).T.reshape(-1)
    inv_b = 1.0 / B
    # targets past episode end may be all-zero; give them a harmless uniform row
    policies = np.where(batch.mask[..., None] > 0, batch.policies, 1.0 / model.n_actions)
    policies = policies.transpose(1, 0, 2).reshape(K * B, -1)
    values = batch.values.T.reshape(-1)
    rewards = batch.rewards.T.reshape(-1)
    onehots = model.one_hot(batch.actions.T)  # (K, B, A)

    # dynamics chain (sequential)
    h0, cache_repr = n["transform"].forward_cached(batch.obs)
    latents = [h0]
    dyn_caches = []
    r_all = np.empty((K, B))
    for k in range(K):
        x = np.concatenate([latents[-1], onehots[k]], axis=1)
        dt, c_dt = n["dyn_trunk"].forward_cached(x)
        r, c_dr = n["dyn_reward"].forward_cached(dt)
        h_next, c_ds = n["dyn_state"].forward_cached(dt)
        r_all[k] = r[:, 0]
        dyn_caches.append((c_dt, c_dr, c_ds))
        latents.append(h_next)
    h_pre = np.concatenate(latents[:-1])  # h_0 .. h_{K-1}
    h_post = np.concatenate(latents[1:])  # h_1 .. h_K

    # prediction heads on every h_k at once
    pt, c_pt = n["pred_trunk"].forward_cached(h_pre)
    logits, c_pp = n["pred_policy"].forward_cached(pt)
    v, c_pv = n["pred_value"].forward_cached(pt)
    kl, dlogits = loss_kl(policies, logits)
    diff_v = v[:, 0] - values
    diff_r = r_all.reshape(-1) - rewards

    # consistency against the observed next latents (constant targets)
    next_obs = batch.next_obs.transpose(1, 0, 2).reshape(K * B, -1)
    h_true = represent(target_model, next_obs)
    target = softmax(target_model.nets["proj1"](h_true))
    plog, c_p2 = n["proj2"].forward_cached(h_post)
    ce, dplog = loss_cross_entropy(plog, target)

    comp = {
        "reward": float(np.sum(m * diff_r * diff_r)) * inv_b,
        "policy": float(np.sum(m * kl)) * inv_b,
        "value": float(np.sum(m * diff_v * diff_v)) * inv_b,
        "consistency": float(np.sum(m * ce)) * inv_b,
    }
    latent_dist = np.linalg.norm(h_post - h_true, axis=1)

    tapes = {name: GradientTape.zeros_like(n[name]) for name in TRAINABLE}
    mb = m * inv_b
    d_pt = n["pred_policy"].backprop(c_pp, (w.policy * mb)[:, None] * dlogits, tapes["pred_policy"])
    d_pt += n["pred_value"].backprop(c_pv, (w.value * 2.0 * mb * diff_v)[:, None], tapes["pred_value"])
    dh_pred = n["pred_trunk"].backprop(c_pt, d_pt, tapes["pred_trunk"]).reshape(K, B, H)
    if w.consistency:
        dh_cons = n["proj2"].backprop(c_p2, (w.consistency * mb)[:, None] * dplog, tapes["proj2"])
        dh_cons = dh_cons.reshape(K, B, H)
    else:
        dh_cons = np.zeros((K, B, H))
    dr = (w.reward * 2.0 * mb * diff_r).reshape(K, B, 1)

    dh_carry = np.zeros((B, H))  # gradient w.r.t. h_{k+1} from later steps
    for k in reversed(range(K)):
        c_dt, c_dr, c_ds = dyn_caches[k]
        d_dt = n["dyn_state"].backprop(c_ds, dh_carry + dh_cons[k], tapes["dyn_state"])
        d_dt += n["dyn_reward"].backprop(c_dr, dr[k], tapes["dyn_reward"])
        dx = n["dyn_trunk"].backprop(c_dt, d_dt, tapes["dyn_trunk"])
        dh_carry = latent_grad_scale * dx[:, :H] + dh_pred[k]
    n["transform"].backprop(cache_repr, dh_carry, tapes["transform"])

    l2 = l2_coefficient * model.l2()
    if l2_coefficient:
        for name in TRAINABLE:
            for g, p in zip(tapes[name].parameters(), n[name].parameters()):
                g += 2.0 * l2_coefficient * p
    weighted = {
        "reward": w.reward * comp["reward"],
        "policy": w.policy * comp["policy"],
        "value": w.value * comp["value"],
        "consistency": w.consistency * comp["consistency"],
        "l2": l2,
    }
    total = float(sum(weighted.values()))
    n_valid = max(float(m.sum()), 1.0)
    return LossResult(total, weighted, tapes, latent_error=float(np.sum(m * latent_dist)) / n_valid)


def latent_prediction_error(model: TwinModel, batch: UnrollBatch) -> float:
    """Mean over valid (b, k) of ||h_{k+1} (dynamics) - represent(next_obs_k)||_2."""
    h = represent(model, batch.obs)
    total = 0.0
    for k in range(batch.unroll):
        _, h = dynamics(model, h, batch.actions[:, k])
        h_true = represent(model, batch.next_obs[:, k])
        total += float(np.sum(batch.mask[:, k] * np.linalg.norm(h - h_true, axis=1)))
    return total / max(float(np.sum(batch.mask)), 1.0)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(path, model: TwinModel, weights: LossWeights | None = None, **extra):
    cfg = asdict(model.config)
    payload = {
        "twin_config": json.dumps(cfg, sort_keys=True),
        "config_hash": model.config.digest(),
        "loss_weights": json.dumps(asdict(weights or LossWeights())),
    }
    payload.update({k: json.dumps(v) for k, v in extra.items()})
    save_nets(path, model.nets, **payload)


def load_model(path):
    """Return ``(model, loss_weights, extra)`` from a checkpoint written by :func:`save_model`."""
    nets, extra = load_nets(path)
    cfg = TwinConfig(**json.loads(str(extra.pop("twin_config"))))
    digest = str(extra.pop("config_hash"))
    if digest != cfg.digest():
        raise ValueError("checkpoint config hash mismatch")
    weights = LossWeights(**json.loads(str(extra.pop("loss_weights"))))
    rest = {k: json.loads(str(v)) for k, v in extra.items()}
    return TwinModel(cfg, nets), weights, rest
