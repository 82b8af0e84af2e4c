"""Value-based learned policy: small dense actor/critic networks with a
self-contained reverse-mode gradient implementation, a FIFO replay buffer,
and deterministic-policy-gradient updates with target networks.

Networks are functional: architecture lives in Mlp, parameters travel as flat
float64 vectors, so soft updates and checkpoints are plain vector ops.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SpaceSpec


@dataclass(frozen=True)
class Mlp:
    """Dense tanh network; head is 'identity' or 'bounded' (scaled tanh)."""

    widths: tuple
    head: str = "identity"
    out_lo: float = -1.0
    out_hi: float = 1.0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least input and output widths")
        if self.head not in ("identity", "bounded"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths, self.widths[1:]))


def init_params(net: Mlp, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    chunks = []
    for a, b in zip(net.widths, net.widths[1:]):
        bound = np.sqrt(6.0 / (a + b))
        chunks.append(rng.uniform(-bound, bound, size=a * b))
        chunks.append(np.zeros(b))
    return np.concatenate(chunks)


def unpack(net: Mlp, params: np.ndarray):
    layers = []
    pos = 0
    for a, b in zip(net.widths, net.widths[1:]):
        W = params[pos:pos + a * b].reshape(a, b)
        pos += a * b
        bias = params[pos:pos + b]
        pos += b
        layers.append((W, bias))
    return layers


def forward(net: Mlp, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Deterministic batched evaluation; X is (batch, in) or (in,)."""
    Y, _ = forward_cache(net, params, X)
    return Y


def forward_cache(net: Mlp, params: np.ndarray, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != net.widths[0]:
        raise ValueError(f"input width {X.shape[1]} != expected {net.widths[0]}")
    layers = unpack(net, params)
    acts = [X]
    h = X
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        if k < len(layers) - 1:
            h = np.tanh(z)
        elif net.head == "bounded":
            h = net.out_lo + (net.out_hi - net.out_lo) * 0.5 * (np.tanh(z) + 1.0)
        else:
            h = z
        acts.append(h)
    return acts[-1], acts


def backward(net: Mlp, params: np.ndarray, cache, dY):
    """Reverse pass; returns (dparams, dX) for upstream gradient dY.

    Gradients are summed over the batch; callers divide for means.
    """
    layers = unpack(net, params)
    acts = cache
    dparams = np.zeros_like(params)
    grad = np.atleast_2d(np.asarray(dY, dtype=float))
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite upstream gradient")
    pos = net.n_params
    for k in range(len(layers) - 1, -1, -1):
        W, b = layers[k]
        h_out = acts[k + 1]
        h_in = acts[k]
        if k < len(layers) - 1:
            dz = grad * (1.0 - h_out * h_out)
        elif net.head == "bounded":
            span = net.out_hi - net.out_lo
            u = (h_out - net.out_lo) / (0.5 * span) - 1.0   # tanh(z)
            dz = grad * 0.5 * span * (1.0 - u * u)
        else:
            dz = grad
        if not np.all(np.isfinite(dz)):
            raise FloatingPointError(f"non-finite gradient at layer {k}")
        db = dz.sum(axis=0)
        dW = h_in.T @ dz
        pos -= len(b)
        dparams[pos:pos + len(b)] = db
        pos -= W.size
        dparams[pos:pos + W.size] = dW.ravel()
        grad = dz @ W.T
    return dparams, grad


def soft_update(target_params: np.ndarray, params: np.ndarray,
                tau_soft: float) -> np.ndarray:
    """Convex combination tau*params + (1-tau)*target, elementwise."""
    if target_params.shape != params.shape:
        raise ValueError("parameter vectors must have matching shapes")
    if not 0.0 <= tau_soft <= 1.0:
        raise ValueError("tau_soft must lie in [0, 1]")
    return tau_soft * params + (1.0 - tau_soft) * target_params


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO ring of (s, a, s', c, done) transitions."""

    def __init__(self, capacity: int, n: int, m: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, n))
        self.a = np.zeros((capacity, m))
        self.s2 = np.zeros((capacity, n))
        self.c = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def __len__(self):
        return self.size

    def push(self, s, a, s2, c, done):
        i = self._head
        self.s[i] = s
        self.a[i] = a
        self.s2[i] = s2
        self.c[i] = c
        self.done[i] = done
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        if batch > self.size:
            raise ValueError(f"batch {batch} exceeds buffer size {self.size}")
        idx = rng.choice(self.size, size=batch, replace=False)
        return (self.s[idx], self.a[idx], self.s2[idx], self.c[idx],
                self.done[idx])

    def snapshot(self):
        """Contents in insertion order, oldest first."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            order = np.concatenate([np.arange(self._head, self.capacity),
                                    np.arange(self._head)])
        return (self.s[order], self.a[order], self.s2[order], self.c[order],
                self.done[order])


# ---------------------------------------------------------------------------
# Learner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DdpgParams:
    """Update hyperparameters; the exploration sd decays linearly with the
    training progress handed in by the runner."""

    lr: float = 1e-3
    batch: int = 128
    tau_soft: float = 0.005
    noise_sd0: float | None = None     # default: 0.1 * action range
    noise_sd_final: float = 0.01
    cost_scale: float = 1e-3
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not 0.0 < self.tau_soft <= 1.0:
            raise ValueError("tau_soft must lie in (0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be positive")


class DdpgLearner:
    """Critic Q(s,a) trained on squared TD residuals (cost-to-go convention,
    lower is better) and an actor descending the critic, each with a slowly
    tracking target copy.

    Observations and costs are scaled internally before they reach the
    networks; q_value and scaled_cost expose the same scaling so the
    TD-error bookkeeping stays consistent with the critic's units.
    """

    def __init__(self, n: int, m: int, space: SpaceSpec, params: DdpgParams,
                 rng: np.random.Generator):
        self.n = n
        self.m = m
        self.space = space
        self.params = params
        self.critic_net = Mlp(widths=(n + m, *params.hidden, 1))
        self.actor_net = Mlp(widths=(n, *params.hidden, m), head="bounded",
                             out_lo=space.action_lo, out_hi=space.action_hi)
        self.phi = init_params(self.critic_net, rng)
        self.theta = init_params(self.actor_net, rng)
        self.phi_old = self.phi.copy()
        self.theta_old = self.theta.copy()
        self.buffer: ReplayBuffer | None = None
        if space.mode == "box" and np.all(np.isfinite(space.state_hi)):
            half = 0.5 * (space.state_hi - space.state_lo)
            self.obs_scale = 1.0 / np.where(half > 0, half, 1.0)
        else:
            self.obs_scale = np.ones(n)
        a_range = space.action_hi - space.action_lo
        self.noise_sd0 = (params.noise_sd0 if params.noise_sd0 is not None
                          else 0.1 * a_range)

    def attach_buffer(self, capacity: int):
        self.buffer = ReplayBuffer(capacity, self.n, self.m)
        return self.buffer

    # -- unit handling -----------------------------------------------------

    def scale_obs(self, s):
        return np.asarray(s, dtype=float) * self.obs_scale

    def scaled_cost(self, c: float) -> float:
        return float(c) * self.params.cost_scale

    # -- policy / value surfaces --------------------------------------------

    def actor_action(self, s_vec) -> np.ndarray:
        out = forward(self.actor_net, self.theta, self.scale_obs(s_vec))
        return out[0]

    def noisy_action(self, s_vec, rng: np.random.Generator,
                     progress: float) -> np.ndarray:
        """Exploration wrapper: Gaussian noise with linear decay, clipped to
        the action box so the advice stays feasible."""
        sd = self.noise_sd0 + (self.params.noise_sd_final - self.noise_sd0) \
            * min(max(progress, 0.0), 1.0)
        a = self.actor_action(s_vec) + rng.normal(0.0, sd, size=self.m)
        return np.clip(a, self.space.action_lo, self.space.action_hi)

    def q_value(self, s_vec, a) -> float:
        x = np.concatenate([self.scale_obs(s_vec), np.asarray(a, dtype=float)])
        return float(forward(self.critic_net, self.phi, x)[0, 0])

    # -- transitions ---------------------------------------------------------

    def store(self, s_vec, a, s2_vec, cost: float, done: bool):
        if self.buffer is None:
            raise RuntimeError("attach_buffer was never called")
        self.buffer.push(self.scale_obs(s_vec), a, self.scale_obs(s2_vec),
                         self.scaled_cost(cost), done)

    # -- updates --------------------------------------------------------------

    def critic_update(self, rng: np.random.Generator) -> float:
        """One gradient step on the mean squared TD residual
        (Q(s,a) - [c + Q_target(s', actor_target(s'))])^2; terminal
        transitions regress to the bare cost."""
        S, A, S2, C, done = self.buffer.sample(rng, self.params.batch)
        a2 = forward(self.actor_net, self.theta_old, S2)
        q2 = forward(self.critic_net, self.phi_old,
                     np.hstack([S2, a2]))[:, 0]
        target = C + np.where(done, 0.0, q2)
        pred, cache = forward_cache(self.critic_net, self.phi,
                                    np.hstack([S, A]))
        resid = pred[:, 0] - target
        loss = float(np.mean(resid ** 2))
        dpred = (2.0 / len(resid)) * resid[:, None]
        dphi, _ = backward(self.critic_net, self.phi, cache, dpred)
        self.phi = self.phi - self.params.lr * dphi
        self.phi_old = soft_update(self.phi_old, self.phi, self.params.tau_soft)
        return loss

    def actor_update(self, rng: np.random.Generator) -> float:
        """One descent step on mean_batch Q(s, actor(s)) through the critic."""
        S, *_ = self.buffer.sample(rng, self.params.batch)
        a, actor_cache = forward_cache(self.actor_net, self.theta, S)
        q, critic_cache = forward_cache(self.critic_net, self.phi,
                                        np.hstack([S, a]))
        objective = float(np.mean(q[:, 0]))
        dq = np.full((len(S), 1), 1.0 / len(S))
        _, dx = backward(self.critic_net, self.phi, critic_cache, dq)
        da = dx[:, self.n:]
        dtheta, _ = backward(self.actor_net, self.theta, actor_cache, da)
        self.theta = self.theta - self.params.lr * dtheta
        self.theta_old = soft_update(self.theta_old, self.theta,
                                     self.params.tau_soft)
        return objective

    def update(self, rng: np.random.Generator):
        """Critic step then actor step, with target tracking after each."""
        loss = self.critic_update(rng)
        obj = self.actor_update(rng)
        return loss, obj

    def ready(self) -> bool:
        return self.buffer is not None and len(self.buffer) >= self.params.batch

    # -- checkpointing ----------------------------------------------------------

    def save(self, path):
        np.savez(Path(path),
                 version=np.array([1]),
                 critic_widths=np.array(self.critic_net.widths),
                 actor_widths=np.array(self.actor_net.widths),
                 action_bounds=np.array([self.space.action_lo,
                                         self.space.action_hi]),
                 phi=self.phi, theta=self.theta,
                 phi_old=self.phi_old, theta_old=self.theta_old,
                 obs_scale=self.obs_scale)

    def load(self, path):
        data = np.load(Path(path))
        if tuple(data["critic_widths"]) != self.critic_net.widths or \
           tuple(data["actor_widths"]) != self.actor_net.widths:
            raise ValueError("checkpoint architecture does not match")
        self.phi = data["phi"].copy()
        self.theta = data["theta"].copy()
        self.phi_old = data["phi_old"].copy()
        self.theta_old = data["theta_old"].copy()
        self.obs_scale = data["obs_scale"].copy()
