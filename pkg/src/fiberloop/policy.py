"""Feed-forward Gaussian actor and value critic with hand-written backprop."""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch

LOG_2PI = float(np.log(2 * np.pi))
ENTROPY_CONST = 0.5 * (LOG_2PI + 1.0)


def orthogonal(shape, gain, rng):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Mlp:
    """ReLU trunk with a linear head; weights stored as (in, out) matrices."""

    def __init__(self, sizes, rng=None, head_gain=1.0, hidden_gain=np.sqrt(2.0)):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if rng is None:
                w = np.zeros((n_in, n_out))
            else:
                w = orthogonal((n_in, n_out), head_gain if last else hidden_gain, rng)
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def forward(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = g @ self.weights[i].T
        return grads


class ActorCritic:
    """Separate actor and critic trunks plus a state-independent log-std."""

    def __init__(self, obs_dim=52, act_dim=4, hidden=(128, 128, 64), seed=None, log_std_init=0.0):
        rng = None if seed is None else np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.hidden = tuple(hidden)
        self.actor = Mlp((obs_dim, *hidden, act_dim), rng, head_gain=0.01)
        self.critic = Mlp((obs_dim, *hidden, 1), rng, head_gain=1.0)
        self.log_std = np.full(act_dim, float(log_std_init))

    @property
    def params(self):
        return self.actor.params + self.critic.params + [self.log_std]

    def set_params(self, arrays):
        arrays = list(arrays)
        mine = self.params
        if len(arrays) != len(mine):
            raise ShapeMismatch(f"expected {len(mine)} parameter arrays, got {len(arrays)}")
        for dst, src in zip(mine, arrays):
            if dst.shape != np.shape(src):
                raise ShapeMismatch(f"parameter shape {np.shape(src)} != {dst.shape}")
            dst[...] = src

    def copy(self) -> "ActorCritic":
        other = ActorCritic(self.obs_dim, self.act_dim, self.hidden)
        other.set_params([p.copy() for p in self.params])
        return other

    def _check(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        single = obs.ndim == 1
        obs = np.atleast_2d(obs)
        if obs.shape[1] != self.obs_dim:
            raise ShapeMismatch(f"observation dimension {obs.shape[1]} != {self.obs_dim}")
        return obs, single

    def forward(self, obs):
        """Return (action mean, log-std, value) for normalized observations."""
        x, single = self._check(obs)
        mean, _ = self.actor.forward(x)
        value, _ = self.critic.forward(x)
        value = value[:, 0]
        if single:
            return mean[0], self.log_std.copy(), float(value[0])
        return mean, np.broadcast_to(self.log_std, mean.shape).copy(), value

    def value(self, obs):
        x, _ = self._check(obs)
        return self.critic.forward(x)[0][:, 0]

    def entropy(self) -> float:
        return float(np.sum(self.log_std) + self.act_dim * ENTROPY_CONST)


def gaussian_log_prob(actions, mean, log_std):
    log_std = np.broadcast_to(log_std, np.shape(mean))
    z = (actions - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std, axis=-1) - 0.5 * mean.shape[-1] * LOG_2PI


def ppo_loss(model: ActorCritic, obs, actions, old_log_prob, advantages, returns,
             clip_range=0.2, ent_coef=0.01, vf_coef=0.5, need_grad=True):
    """Clipped-surrogate PPO loss, its parts, and gradients for every parameter."""
    n = len(obs)
    mean, a_acts = model.actor.forward(obs)
    value, c_acts = model.critic.forward(obs)
    value = value[:, 0]
    log_std = model.log_std
    inv_std = np.exp(-log_std)
    z = (actions - mean) * inv_std
    log_prob = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * model.act_dim * LOG_2PI
    ratio = np.exp(log_prob - old_log_prob)
    surr1 = ratio * advantages
    clipped = np.clip(ratio, 1 - clip_range, 1 + clip_range)
    surr2 = clipped * advantages
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((returns - value) ** 2)
    entropy = model.entropy()
    loss = policy_loss + vf_coef * value_loss - ent_coef * entropy
    report = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > clip_range)),
        "approx_kl": float(np.mean((ratio - 1) - (log_prob - old_log_prob))),
    }
    if not need_grad:
        return report, None

    # d loss / d log_prob: the unclipped branch carries gradient when it is the minimum
    active = surr1 <= surr2
    d_logp = np.where(active, -surr1, 0.0) / n
    d_mean = d_logp[:, None] * z * inv_std
    d_log_std = np.sum(d_logp[:, None] * (z * z - 1.0), axis=0) - ent_coef
    d_value = (-2.0 * vf_coef / n) * (returns - value)

    grads = model.actor.backward(a_acts, d_mean)
    grads += model.critic.backward(c_acts, d_value[:, None])
    grads.append(d_log_std)
    return report, grads


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-5):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads, max_norm):
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total
