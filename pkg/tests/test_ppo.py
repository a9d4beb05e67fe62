import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fiberloop.errors import NonFiniteLoss, ShapeMismatch
from fiberloop.policy import ENTROPY_CONST, ActorCritic, Adam, clip_grad_norm, gaussian_log_prob, ppo_loss
from fiberloop.ppo import PpoConfig, RolloutBuffer, compute_gae, lr_schedule, normalize_advantages, ppo_update
from fiberloop.preprocessing import ReturnScaler, RunningNorm


def brute_force_gae(rewards, values, dones, last_values, gamma, lam):
    """Sum over k of (gamma*lam)^k delta_{t+k}, cut at episode ends."""
    T = len(rewards)
    nxt = np.vstack([values[1:], last_values[None]])
    delta = rewards + gamma * nxt * (1 - dones) - values
    adv = np.zeros_like(rewards)
    for t in range(T):
        for e in range(rewards.shape[1]):
            total, w = 0.0, 1.0
            for k in range(t, T):
                total += w * delta[k, e]
                if dones[k, e]:
                    break
                w *= gamma * lam
            adv[t, e] = total
    return adv


def test_gae_telescoping():
    r = np.array([[1.0], [2.0], [3.0]])
    v = np.array([[0.5], [0.7], [0.9]])
    d = np.array([[0], [0], [1]], dtype=bool)
    adv, ret = compute_gae(r, v, d, np.array([100.0]), 1.0, 1.0)
    assert adv[0, 0] == pytest.approx(6.0 - 0.5, abs=1e-14)
    assert np.array_equal(ret, adv + v)


def test_gae_lambda_zero_is_td():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    d = rng.random((6, 2)) < 0.3
    last = rng.normal(size=2)
    adv, _ = compute_gae(r, v, d, last, 0.9, 0.0)
    nxt = np.vstack([v[1:], last[None]])
    assert np.array_equal(adv, r + 0.9 * nxt * (1 - d) - v)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), gamma=st.floats(0, 1), lam=st.floats(0, 1))
def test_gae_matches_brute_force(seed, gamma, lam):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    d = rng.random((5, 3)) < 0.3
    last = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, last, gamma, lam)
    assert np.max(np.abs(adv - brute_force_gae(r, v, d, last, gamma, lam))) < 1e-10


def test_lr_schedule_endpoints():
    assert lr_schedule(0, 1000) == 6e-4
    assert lr_schedule(1000, 1000) == 2e-4
    assert lr_schedule(500, 1000) == pytest.approx(4e-4, abs=1e-18)


def test_normalize_advantages():
    adv = normalize_advantages(np.random.default_rng(1).normal(3, 5, 1024))
    assert abs(adv.mean()) < 1e-12
    assert abs(adv.std() - 1) < 1e-9


def test_forward_zero_weights():
    m = ActorCritic()
    mean, log_std, value = m.forward(np.random.default_rng(0).normal(size=52))
    assert np.all(mean == 0) and value == 0 and np.all(log_std == 0)


def test_forward_zero_input_ignores_first_layer_weights():
    m = ActorCritic(seed=3)
    before = m.forward(np.zeros(52))
    m.actor.weights[0] *= 2
    m.critic.weights[0] *= 2
    after = m.forward(np.zeros(52))
    assert np.array_equal(before[0], after[0]) and before[2] == after[2]


def test_forward_shapes_and_errors():
    m = ActorCritic(seed=0)
    assert [w.shape for w in m.actor.weights] == [(52, 128), (128, 128), (128, 64), (64, 4)]
    assert [w.shape for w in m.critic.weights] == [(52, 128), (128, 128), (128, 64), (64, 1)]
    with pytest.raises(ShapeMismatch):
        m.forward(np.zeros(51))
    with pytest.raises(ShapeMismatch):
        m.set_params(m.params[:-1])


def test_forward_fuzz_finite():
    m = ActorCritic(seed=1)
    obs = np.random.default_rng(2).normal(0, 10, (10_000, 52))
    mean, log_std, value = m.forward(obs)
    assert np.all(np.isfinite(mean)) and np.all(np.isfinite(value)) and np.all(np.isfinite(log_std))


def test_entropy_closed_form():
    m = ActorCritic(log_std_init=-0.3)
    m.log_std[:] = [-0.3, 0.1, 0.5, -1.0]
    expected = float(np.sum(m.log_std + 0.5 * np.log(2 * np.pi * np.e)))
    assert abs(m.entropy() - expected) < 1e-12
    assert ENTROPY_CONST == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=1e-15)


def test_log_prob_batch_matches_rows():
    rng = np.random.default_rng(0)
    mean = rng.normal(size=(5, 4))
    log_std = np.array([-0.5, 0.0, 0.3, 0.1])
    a = rng.normal(size=(5, 4))
    batch = gaussian_log_prob(a, mean, np.broadcast_to(log_std, mean.shape))
    rows = [gaussian_log_prob(a[i], mean[i], log_std) for i in range(5)]
    from scipy.stats import norm
    ref = norm.logpdf(a, mean, np.exp(log_std)).sum(axis=1)
    assert np.allclose(batch, rows, atol=1e-14) and np.allclose(batch, ref, atol=1e-12)


def _toy_problem(seed=0, n=3):
    m = ActorCritic(52, 4, (8,), seed=seed)
    m.log_std[:] = [-0.2, 0.1, 0.0, 0.3]
    rng = np.random.default_rng(seed + 10)
    obs = rng.normal(size=(n, 52))
    mean, log_std, _ = m.forward(obs)
    actions = mean + np.exp(log_std) * rng.normal(size=mean.shape)
    # shift old log-probs so some samples are clipped and some are not
    old = gaussian_log_prob(actions, mean, log_std) + rng.normal(0, 0.05, n)
    adv = rng.normal(size=n)
    ret = rng.normal(size=n)
    return m, obs, actions, old, adv, ret


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    m, obs, actions, old, adv, ret = _toy_problem(seed)
    _, grads = ppo_loss(m, obs, actions, old, adv, ret, 0.2, 0.01, 0.5)
    h = 1e-6
    fd_all, an_all = [], []
    for p, g in zip(m.params, grads):
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = ppo_loss(m, obs, actions, old, adv, ret, 0.2, 0.01, 0.5, need_grad=False)[0]["loss"]
            p[idx] = keep - h
            down = ppo_loss(m, obs, actions, old, adv, ret, 0.2, 0.01, 0.5, need_grad=False)[0]["loss"]
            p[idx] = keep
            fd_all.append((up - down) / (2 * h))
            an_all.append(g[idx])
    fd, an = np.array(fd_all), np.array(an_all)
    # central differences at h=1e-6 carry ~1e-10 of rounding noise, so tiny
    # components are compared on the scale of the whole gradient
    assert np.linalg.norm(fd - an) / np.linalg.norm(an) < 1e-5
    big = np.abs(an) > 1e-3
    assert np.max(np.abs(fd - an)[big] / np.abs(an)[big]) < 1e-5


def test_first_minibatch_ratio_is_one():
    m, obs, actions, _, adv, ret = _toy_problem(1, n=16)
    mean, log_std, _ = m.forward(obs)
    old = gaussian_log_prob(actions, mean, log_std)
    report, _ = ppo_loss(m, obs, actions, old, adv, ret, 0.2, 0.0, 0.5)
    assert report["clip_fraction"] == 0.0
    assert report["policy_loss"] == pytest.approx(-adv.mean(), abs=1e-14)


def test_clip_grad_norm():
    grads = [np.full(3, 2.0), np.full(1, 2.0)]
    clipped, norm = clip_grad_norm(grads, 0.5)
    assert norm == pytest.approx(4.0)
    assert np.sqrt(sum(np.sum(g * g) for g in clipped)) == pytest.approx(0.5, rel=1e-9)


def test_adam_first_step_size():
    p = [np.array([1.0, -1.0])]
    opt = Adam(p, eps=0.0)
    opt.step(p, [np.array([0.3, -7.0])], lr=0.01)
    assert np.allclose(p[0], [0.99, -0.99], atol=1e-15)


def test_ppo_update_runs_and_reduces_value_loss():
    rng = np.random.default_rng(0)
    m = ActorCritic(seed=0)
    buf = RolloutBuffer(64, 2)
    buf.obs[:] = rng.normal(size=buf.obs.shape)
    mean, log_std, values = m.forward(buf.obs.reshape(-1, 52))
    buf.actions[:] = (mean + rng.normal(size=mean.shape)).reshape(buf.actions.shape)
    buf.log_probs[:] = gaussian_log_prob(buf.actions.reshape(-1, 4), mean, log_std).reshape(64, 2)
    buf.values[:] = values.reshape(64, 2)
    buf.rewards[:] = rng.normal(size=(64, 2))
    buf.finish(np.zeros(2), 0.99, 0.95)
    cfg = PpoConfig(batch=32, epochs_per_rollout=4)
    data = buf.flat()
    before = ppo_loss(m, data["obs"], data["actions"], data["log_probs"], data["advantages"],
                      data["returns"], need_grad=False)[0]["value_loss"]
    report = ppo_update(m, Adam(m.params), data, cfg, 1e-3, np.random.default_rng(1))
    after = ppo_loss(m, data["obs"], data["actions"], data["log_probs"], data["advantages"],
                     data["returns"], need_grad=False)[0]["value_loss"]
    assert after < before
    assert set(report) >= {"policy_loss", "value_loss", "entropy", "clip_fraction", "grad_norm"}


def test_entropy_alone_pushes_log_std_to_its_cap():
    m = ActorCritic(seed=0, log_std_init=-1.0)
    n = 16
    data = {"obs": np.zeros((n, 52)), "actions": np.zeros((n, 4)), "log_probs": np.zeros(n),
            "values": np.zeros(n), "advantages": np.zeros(n), "returns": np.zeros(n)}
    cfg = PpoConfig(batch=16, epochs_per_rollout=200, entropy_coef=1.0, log_std_init=-1.0, log_std_max=-0.5)
    ppo_update(m, Adam(m.params), data, cfg, 1e-2, np.random.default_rng(0))
    assert np.array_equal(m.log_std, np.full(4, -0.5))


def test_ppo_update_non_finite():
    m = ActorCritic(seed=0)
    n = 8
    data = {"obs": np.zeros((n, 52)), "actions": np.zeros((n, 4)), "log_probs": np.zeros(n),
            "values": np.zeros(n), "advantages": np.ones(n), "returns": np.full(n, np.nan)}
    with pytest.raises(NonFiniteLoss):
        ppo_update(m, Adam(m.params), data, PpoConfig(batch=8, epochs_per_rollout=1), 1e-3,
                   np.random.default_rng(0))


def test_buffer_flat_requires_finish():
    with pytest.raises(RuntimeError):
        RolloutBuffer(4, 2).flat()


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PpoConfig(batch=0)
    with pytest.raises(ValueError):
        PpoConfig(log_std_init=0.5)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), splits=st.lists(st.integers(1, 40), min_size=1, max_size=6))
def test_running_norm_equals_two_pass(seed, splits):
    rng = np.random.default_rng(seed)
    X = rng.normal(rng.uniform(-100, 100, 5), rng.uniform(0.01, 50, 5), (sum(splits), 5))
    norm = RunningNorm()
    start = 0
    for k in splits:
        norm.partial_fit(X[start:start + k])
        start += k
    assert norm.count_ == len(X)
    assert np.allclose(norm.mean_, X.mean(axis=0), rtol=1e-9, atol=0)
    assert np.allclose(norm.var_, X.var(axis=0), rtol=1e-9, atol=1e-12)


def test_running_norm_constant_stream():
    norm = RunningNorm().fit(np.full((20, 3), 4.2))
    assert np.all(norm.var_ >= 0)
    # the batch mean of a constant carries one rounding, scaled by 1/sqrt(eps)
    assert np.max(np.abs(norm.transform(np.full((2, 3), 4.2)))) < 1e-10


def test_running_norm_clip_and_state():
    norm = RunningNorm(clip=5.0).fit(np.random.default_rng(0).normal(size=(100, 2)))
    assert np.all(np.abs(norm.transform([[1e6, -1e6]])) == 5.0)
    c, m, v = norm.state_arrays()
    back = RunningNorm.from_state(c[0], m, v, clip=5.0)
    x = np.random.default_rng(1).normal(size=(4, 2))
    assert np.array_equal(back.transform(x), norm.transform(x))


def test_return_scaler_resets_on_done():
    s = ReturnScaler(2, 0.9)
    s(np.array([1.0, 2.0]), np.array([True, False]))
    assert s.returns.tolist() == [0.0, 2.0]
