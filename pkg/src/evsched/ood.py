"""The OOD-aware meta-policy: TD-error accumulation, awareness radius, and
projection of the learned action onto a ball around the baseline action.

Endpoints degenerate exactly: an infinite tuning parameter forces the pure
baseline action every step, zero keeps the learned action untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SpaceSpec
from .env import ChargingModel
from .mpc import MpcCore, StateEstimator
from .nn import DdpgLearner


@dataclass
class RadiusState:
    """Per-episode accumulator driving the awareness radius.

    The default accumulates |TD| so that error in either direction shrinks
    the radius; signed accumulation is available for ablation. decay = 1.0
    is a plain within-episode sum.
    """

    beta_ood: float
    cum_td: float = 0.0
    signed: bool = False
    decay: float = 1.0

    def __post_init__(self):
        if not (self.beta_ood >= 0 or math.isinf(self.beta_ood)):
            raise ValueError("beta_ood must be nonnegative or inf")

    def reset_episode(self):
        self.cum_td = 0.0

    def accumulate(self, td: float):
        inc = td if self.signed else abs(td)
        self.cum_td = self.decay * self.cum_td + inc


@dataclass(frozen=True)
class TrustRecord:
    t: int
    a_bar: np.ndarray
    a_tilde: np.ndarray
    radius: float
    lam: float
    td: float
    cum_td: float


def td_error(learner: DdpgLearner, s_now, s_prev, a_prev, cost_prev: float) -> float:
    """One-step value residual c + Q(s', actor(s')) - Q(s, a), in the
    learner's scaled units; the inner optimization over the next action is
    approximated by the deterministic actor output."""
    a_now = learner.actor_action(s_now)
    return (learner.scaled_cost(cost_prev)
            + learner.q_value(s_now, a_now)
            - learner.q_value(s_prev, a_prev))


def awareness_radius(state: RadiusState, a_bar, a_tilde) -> float:
    """Positive part of (action gap - beta * accumulated TD).

    beta = inf is the pure-baseline sentinel: the radius is zero regardless
    of the accumulator (including the 0 * inf corner).
    """
    if math.isinf(state.beta_ood):
        return 0.0
    gap = float(np.linalg.norm(np.asarray(a_tilde) - np.asarray(a_bar)))
    return max(0.0, gap - state.beta_ood * state.cum_td)


def project_to_ball(a_tilde, a_bar, radius: float, spec: SpaceSpec) -> np.ndarray:
    """Exact minimizer of ||a - a_tilde|| over the action box intersected
    with the ball of the given radius around a_bar (which must be feasible).

    Fast paths cover the common cases exactly: the box-clipped advice when it
    already satisfies the ball, else the radial ball projection when it lands
    inside the box. The general case runs Dykstra's alternating projections
    to a 1e-10 fixed point (both sets convex and both contain a_bar, so the
    intersection is nonempty).
    """
    at = np.asarray(a_tilde, dtype=float)
    ab = np.asarray(a_bar, dtype=float)
    if radius <= 0.0:
        return ab.copy()
    y = np.clip(at, spec.action_lo, spec.action_hi)
    # clip is nonexpansive and a_bar is feasible, so ||y - ab|| <= ||at - ab||;
    # when y is inside the ball it dominates every feasible point.
    if float(np.linalg.norm(y - ab)) <= radius:
        return y
    d = float(np.linalg.norm(at - ab))
    z = ab + (radius / d) * (at - ab)
    if np.all(z >= spec.action_lo) and np.all(z <= spec.action_hi):
        return z
    # Dykstra's algorithm between the ball and the box.
    x = at.copy()
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    for _ in range(10_000):
        v = x + p
        dv = float(np.linalg.norm(v - ab))
        yb = v if dv <= radius else ab + (radius / dv) * (v - ab)
        p = v - yb
        w = yb + q
        x_new = np.clip(w, spec.action_lo, spec.action_hi)
        q = w - x_new
        if float(np.max(np.abs(x_new - x))) <= 1e-10:
            x = x_new
            break
        x = x_new
    return x


def trust_coefficient(radius: float, gap: float) -> float:
    """min(1, radius/gap); defined as 1 when the actions already agree."""
    if gap == 0.0:
        return 1.0
    return min(1.0, radius / gap)


# ---------------------------------------------------------------------------
# Policy loops
# ---------------------------------------------------------------------------

class NnPolicy:
    """Pure learned policy: shared estimator recursion, exploration noise,
    and per-step learner updates once the buffer can fill a batch."""

    def __init__(self, model: ChargingModel, sessions, learner: DdpgLearner,
                 explore_rng, learner_rng, solar_forecast: float = 0.0,
                 progress: float = 0.0, learn_every: int = 1):
        self.model = model
        self.learner = learner
        self.estimator = StateEstimator(sessions, model.dyn, model.space,
                                        solar_forecast)
        self.explore_rng = explore_rng
        self.learner_rng = learner_rng
        self.progress = progress
        self.learn_every = max(1, learn_every)
        self._pending = None

    def reset(self, s0):
        self.estimator.reset(s0.vector)
        self._pending = None

    def act(self, t):
        if self.learner.ready() and t % self.learn_every == 0:
            self.learner.update(self.learner_rng)
        s_est = self.estimator.current.vector
        a = self.learner.noisy_action(s_est, self.explore_rng, self.progress)
        self._pending = (s_est.copy(), a)
        return a

    def observe(self, t, outcome):
        s_prev, a = self._pending
        est = self.estimator.advance(a, outcome.observed.departed)
        self.learner.store(s_prev, a, est.vector, outcome.cost, outcome.done)


class MetaPolicy:
    """One full iteration per step: refresh the baseline, refresh the
    learner, take both candidate actions at the shared estimated state,
    update the awareness radius from the accumulated TD-error, project, act,
    and store the transition keyed on estimated states."""

    def __init__(self, model: ChargingModel, sessions, mpc_core: MpcCore,
                 learner: DdpgLearner, beta_ood: float, explore_rng,
                 learner_rng, solar_forecast: float = 0.0,
                 progress: float = 0.0, learn_every: int = 1,
                 signed_td: bool = False, td_decay: float = 1.0,
                 collect_trust: bool = True):
        self.model = model
        self.mpc_core = mpc_core
        self.learner = learner
        self.estimator = StateEstimator(sessions, model.dyn, model.space,
                                        solar_forecast)
        self.radius_state = RadiusState(beta_ood=beta_ood, signed=signed_td,
                                        decay=td_decay)
        self.explore_rng = explore_rng
        self.learner_rng = learner_rng
        self.progress = progress
        self.learn_every = max(1, learn_every)
        self.collect_trust = collect_trust
        self.records: list[TrustRecord] = []
        self._pending = None
        self._last_transition = None   # (s_est, a, cost) from the previous step

    def reset(self, s0):
        self.estimator.reset(s0.vector)
        self.mpc_core.reset()
        self.radius_state.reset_episode()
        self.records = []
        self._pending = None
        self._last_transition = None

    def act(self, t):
        if self.learner.ready() and t % self.learn_every == 0:
            self.learner.update(self.learner_rng)
        s_est = self.estimator.current.vector
        a_bar = self.mpc_core.action(t, s_est)
        a_tilde = self.learner.noisy_action(s_est, self.explore_rng,
                                            self.progress)
        td = 0.0
        if self._last_transition is not None:
            s_prev, a_prev, cost_prev = self._last_transition
            td = td_error(self.learner, s_est, s_prev, a_prev, cost_prev)
            self.radius_state.accumulate(td)
        radius = awareness_radius(self.radius_state, a_bar, a_tilde)
        a = project_to_ball(a_tilde, a_bar, radius, self.model.space)
        if self.collect_trust:
            gap = float(np.linalg.norm(a_tilde - a_bar))
            self.records.append(TrustRecord(
                t=t, a_bar=a_bar, a_tilde=a_tilde, radius=radius,
                lam=trust_coefficient(radius, gap), td=td,
                cum_td=self.radius_state.cum_td))
        self._pending = (s_est.copy(), a)
        return a

    def observe(self, t, outcome):
        s_prev, a = self._pending
        est = self.estimator.advance(a, outcome.observed.departed)
        self.learner.store(s_prev, a, est.vector, outcome.cost, outcome.done)
        self._last_transition = (s_prev, a, outcome.cost)
