import numpy as np
import pytest

from gcdt.nncore import entropy, loss_kl, softmax
from gcdt.twin import (
    TRAINABLE,
    LossWeights,
    TwinConfig,
    TwinModel,
    UnrollBatch,
    consistency_loss,
    dynamics,
    latent_prediction_error,
    load_model,
    predict,
    represent,
    save_model,
    unrolled_loss,
)

OBS, A, HID = 5, 4, 8


def tiny_model(seed=0):
    cfg = TwinConfig(obs_dim=OBS, n_actions=A, hidden_dim=HID, width=8, proj_dim=4, seed=seed)
    model = TwinModel(cfg)
    rng = np.random.default_rng(seed + 100)
    # non-trivial biases and output scales so no gradient path is accidentally flat
    for net in model.nets.values():
        for b in net.biases:
            b[:] = rng.normal(scale=0.1, size=b.shape)
    for name in ("pred_policy", "pred_value", "dyn_reward"):
        model.nets[name].weights[-1] *= 10.0
    model.nets["proj2"].weights[0] += rng.normal(scale=0.3, size=model.nets["proj2"].weights[0].shape)
    return model


def tiny_batch(seed=0, B=2, K=2, mask=None):
    rng = np.random.default_rng(seed)
    return UnrollBatch(
        obs=rng.normal(size=(B, OBS)),
        actions=rng.integers(0, A, size=(B, K)),
        rewards=rng.normal(size=(B, K)),
        policies=rng.dirichlet(np.ones(A), size=(B, K)),
        values=rng.normal(size=(B, K)),
        next_obs=rng.normal(size=(B, K, OBS)),
        mask=np.ones((B, K)) if mask is None else np.asarray(mask, dtype=float),
    )


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)


def fd_check(model, batch, w, l2=0.0, h=1e-5):
    """Largest relative error between analytic and central-difference gradients over trainable nets."""
    target = model.copy()  # frozen consistency target

    def loss():
        return unrolled_loss(model, batch, w, l2, latent_grad_scale=1.0, target_model=target).total

    res = unrolled_loss(model, batch, w, l2, latent_grad_scale=1.0, target_model=target)
    worst = 0.0
    for name in TRAINABLE:
        for p, g in zip(model.nets[name].parameters(), res.grads[name].parameters()):
            fd = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + h
                fp = loss()
                p[i] = old - h
                fm = loss()
                p[i] = old
                fd[i] = (fp - fm) / (2 * h)
            if np.max(np.abs(fd)) > 1e-7 or np.max(np.abs(g)) > 1e-7:
                worst = max(worst, rel_err(g, fd))
    return worst


LAMBDA_CONFIGS = {
    "reward": LossWeights(1, 0, 0, 0),
    "policy": LossWeights(0, 1, 0, 0),
    "value": LossWeights(0, 0, 1, 0),
    "consistency": LossWeights(0, 0, 0, 1),
    "all": LossWeights(1.0, 1.0, 0.25, 2.0),
}


class TestNetworks:
    def test_represent_deterministic_and_bounded(self):
        m = tiny_model()
        obs = np.random.default_rng(0).normal(size=OBS)
        np.testing.assert_array_equal(represent(m, obs), represent(tiny_model(), obs))
        h = represent(m, np.full(OBS, 1e6))
        assert np.all(np.abs(h) <= 1.0)

    def test_represent_distinguishes_observations(self):
        m = tiny_model()
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.normal(size=(2, OBS))
            assert np.max(np.abs(represent(m, a) - represent(m, b))) > 1e-9

    def test_represent_dimension_mismatch(self):
        with pytest.raises(ValueError):
            represent(tiny_model(), np.zeros(OBS + 1))

    def test_dynamics_shapes_and_bounds(self):
        m = tiny_model()
        h = represent(m, np.ones(OBS))
        r, h2 = dynamics(m, h, 2)
        assert np.ndim(r) == 0 and h2.shape == (HID,)
        assert np.all(np.abs(h2) < 1.0)
        assert m.one_hot(2).shape == (A,)
        r2, h3 = dynamics(m, h, 2)
        assert r == r2 and np.array_equal(h2, h3)

    def test_dynamics_invalid_action(self):
        m = tiny_model()
        with pytest.raises(ValueError):
            dynamics(m, np.zeros(HID), A)

    def test_reward_gradient_wrt_latent(self):
        m = tiny_model()
        h = np.random.default_rng(3).uniform(-0.5, 0.5, size=HID)
        n = m.nets
        x = np.concatenate([h, m.one_hot(1)])
        t, c_t = n["dyn_trunk"].forward_cached(x)
        _, c_r = n["dyn_reward"].forward_cached(t)
        dt = n["dyn_reward"].backprop(c_r, np.ones(1))
        dh = n["dyn_trunk"].backprop(c_t, dt)[:HID]
        fd = np.zeros(HID)
        for i in range(HID):
            e = np.zeros(HID)
            e[i] = 1e-5
            fd[i] = (dynamics(m, h + e, 1)[0] - dynamics(m, h - e, 1)[0]) / 2e-5
        assert rel_err(dh, fd) <= 1e-4

    def test_predict_shapes(self):
        m = tiny_model()
        logits, v = predict(m, np.zeros(HID))
        assert logits.shape == (A,)
        assert abs(softmax(logits).sum() - 1) < 1e-9
        assert np.isfinite(v)


class TestConsistency:
    def test_identical_inputs_give_entropy(self):
        m = tiny_model()
        m.nets["proj2"] = m.nets["proj1"].copy()
        h = represent(m, np.ones(OBS))
        value, grads = consistency_loss(m, h, h)
        assert value == pytest.approx(entropy(softmax(m.nets["proj1"](h))), abs=1e-12)
        assert set(grads) == {"h_pred", "proj2"}

    def test_descent_on_prediction_matches_target(self):
        m = tiny_model(seed=4)
        rng = np.random.default_rng(4)
        h_true = np.tanh(rng.normal(size=HID))
        h_pred = np.tanh(rng.normal(size=HID))
        target = softmax(m.nets["proj1"](h_true))
        for _ in range(200):
            _, g = consistency_loss(m, h_pred, h_true)
            p2 = m.nets["proj2"]
            for p, d in zip(p2.parameters(), g["proj2"].parameters()):
                p -= 0.5 * d
            h_pred = h_pred - 0.5 * g["h_pred"]
        kl = loss_kl(target, m.nets["proj2"](h_pred))[0]
        assert kl < 1e-3

    def test_zero_lambda4_means_no_projection_gradient(self):
        m = tiny_model()
        res = unrolled_loss(m, tiny_batch(), LossWeights(1, 1, 0.25, 0))
        assert all(np.all(g == 0) for g in res.grads["proj2"].parameters())
        assert "proj1" not in res.grads

    def test_stop_gradient_on_target_branch(self):
        """Perturbing the target-side transform changes the loss value, not the gradient."""
        m = tiny_model()
        batch = tiny_batch()
        w = LossWeights(0, 0, 0, 1)
        target = m.copy()
        base = unrolled_loss(m, batch, w, latent_grad_scale=1.0, target_model=target)
        target.nets["transform"].weights[0] += 0.5
        moved = unrolled_loss(m, batch, w, latent_grad_scale=1.0, target_model=target)
        assert moved.total != pytest.approx(base.total, abs=1e-9)
        # the default (shared) target yields exactly the frozen-target gradients
        shared = unrolled_loss(m, batch, w, latent_grad_scale=1.0)
        for name in TRAINABLE:
            for g0, g1 in zip(base.grads[name].parameters(), shared.grads[name].parameters()):
                np.testing.assert_array_equal(g0, g1)


class TestUnrolledLoss:
    def test_all_zero_weights_leave_only_l2(self):
        m = tiny_model()
        res = unrolled_loss(m, tiny_batch(), LossWeights(0, 0, 0, 0), l2_coefficient=1e-3)
        assert res.total == pytest.approx(1e-3 * m.l2(), rel=1e-12)

    def test_policy_term_zero_at_own_prediction(self):
        m = tiny_model()
        batch = tiny_batch(K=1)
        h = represent(m, batch.obs)
        logits, _ = predict(m, h)
        batch.policies[:, 0] = softmax(logits)
        res = unrolled_loss(m, batch, LossWeights(0, 1, 0, 0))
        assert res.total == pytest.approx(0.0, abs=1e-12)

    def test_components_sum_to_total(self):
        m = tiny_model()
        res = unrolled_loss(m, tiny_batch(B=6, K=3), LossWeights(), l2_coefficient=1e-4)
        assert abs(sum(res.components.values()) - res.total) <= 1e-9

    def test_mask_removes_padded_steps(self):
        m = tiny_model()
        full = tiny_batch(B=2, K=3, mask=[[1, 1, 0], [1, 0, 0]])
        garbage = tiny_batch(B=2, K=3, mask=[[1, 1, 0], [1, 0, 0]])
        garbage.rewards[0, 2] = 1e3
        garbage.values[1, 1:] = -1e3
        garbage.policies[1, 2] = 0.0
        a = unrolled_loss(m, full, LossWeights()).total
        b = unrolled_loss(m, garbage, LossWeights()).total
        assert a == pytest.approx(b, rel=1e-12)

    def test_batch_shape_validation(self):
        b = tiny_batch()
        with pytest.raises(ValueError):
            UnrollBatch(b.obs, b.actions, b.rewards[:, :1], b.policies, b.values, b.next_obs, b.mask)

    @pytest.mark.parametrize("name", list(LAMBDA_CONFIGS))
    def test_gradients_match_finite_differences(self, name):
        m = tiny_model(seed=2)
        assert fd_check(m, tiny_batch(seed=5), LAMBDA_CONFIGS[name], l2=1e-3) <= 1e-4

    def test_default_latent_scaling_damps_gradient(self):
        m = tiny_model()
        batch = tiny_batch(K=3)
        w = LossWeights(1, 0, 0, 0)
        exact = unrolled_loss(m, batch, w, latent_grad_scale=1.0).grads["transform"].weights[0]
        damped = unrolled_loss(m, batch, w).grads["transform"].weights[0]
        assert not np.allclose(exact, damped)

    def test_latent_error_matches_reference(self):
        m = tiny_model()
        batch = tiny_batch(B=3, K=2, mask=[[1, 1], [1, 0], [1, 1]])
        res = unrolled_loss(m, batch, LossWeights())
        assert res.latent_error == pytest.approx(latent_prediction_error(m, batch), rel=1e-10)


def test_model_checkpoint_roundtrip(tmp_path):
    m = tiny_model()
    w = LossWeights(1, 2, 3, 4)
    save_model(tmp_path / "m.bin", m, w, env_steps=96)
    m2, w2, extra = load_model(tmp_path / "m.bin")
    assert w2 == w and extra == {"env_steps": 96} and m2.config == m.config
    for name in m.nets:
        for p, q in zip(m.nets[name].parameters(), m2.nets[name].parameters()):
            np.testing.assert_array_equal(p, q)


def test_copy_is_independent_snapshot():
    m = tiny_model()
    snap = m.copy()
    m.nets["transform"].weights[0] += 1.0
    assert not np.array_equal(m.nets["transform"].weights[0], snap.nets["transform"].weights[0])
