"""Charging-station MDP simulator.

Holds the ground-truth state (hidden from policies), applies the battery
dynamics with safety projections, injects arrival and solar perturbations,
and emits stage costs plus the observable signals. A second, reparameterized
stepper expresses every projection event as an additive state/action-dependent
perturbation; both steppers must produce identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (BOX, CostSpec, DynamicsSpec, SessionSet, SpaceSpec,
                   assemble_dynamics)


class EpisodeDoneError(RuntimeError):
    """step() was called after the episode ended."""


class PerturbationBoundError(ValueError):
    """A realized perturbation exceeded the configured uniform bound."""


@dataclass(frozen=True)
class StationState:
    """Remaining demand e (kWh, signed) and charging rates b, at step t."""

    e: np.ndarray
    b: np.ndarray
    t: int

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.e, self.b])


@dataclass(frozen=True)
class SolarModel:
    """Scalar Gaussian solar injection replicated across chargers."""

    mean: float
    sd: float

    def __post_init__(self):
        if self.sd < 0:
            raise ValueError("solar sd must be nonnegative")

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        return np.full(m, rng.normal(self.mean, self.sd))


@dataclass(frozen=True)
class SolarSchedule:
    """Episode-indexed solar regime: pre-shift model before shift_episode."""

    pre: SolarModel
    post: SolarModel
    shift_episode: int

    def at(self, episode: int) -> SolarModel:
        return self.pre if episode < self.shift_episode else self.post


@dataclass(frozen=True)
class Observation:
    """Signals visible to policies after a transition."""

    departed: np.ndarray       # bool per charger: e-coordinate was reset
    solar: np.ndarray          # realized injection used in the transition
    arrivals: np.ndarray       # energy injected per charger this transition


@dataclass(frozen=True)
class StepOutcome:
    observed: Observation
    cost: float
    true_state: StationState   # diagnostics only; policies must not read this
    done: bool


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def project_action(a, spec: SpaceSpec) -> np.ndarray:
    """Euclidean projection onto the action box (per-coordinate clamp)."""
    return np.clip(np.asarray(a, dtype=float), spec.action_lo, spec.action_hi)


def proj_capped_box(x, lo, hi, cap: float) -> np.ndarray:
    """Euclidean projection onto {lo <= v <= hi, sum(v) <= cap}.

    Bisection on the multiplier of the sum constraint; the clipped point is
    returned unchanged when it already satisfies the cap.
    """
    x = np.asarray(x, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), x.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), x.shape)
    clipped = np.clip(x, lo, hi)
    if clipped.sum() <= cap:
        return clipped
    if lo.sum() > cap:
        raise ValueError("capped box is empty: sum of lower bounds exceeds cap")
    theta_lo, theta_hi = 0.0, float(np.max(x - lo))
    for _ in range(200):
        theta = 0.5 * (theta_lo + theta_hi)
        total = np.clip(x - theta, lo, hi).sum()
        if total > cap:
            theta_lo = theta
        else:
            theta_hi = theta
        if theta_hi - theta_lo <= 1e-16 * max(1.0, theta_hi):
            break
    return np.clip(x - theta_hi, lo, hi)


def _project_space(x, spec: SpaceSpec) -> np.ndarray:
    if spec.mode == BOX:
        return np.clip(x, spec.state_lo, spec.state_hi)
    m = spec.m
    out = np.empty_like(x)
    out[:m] = np.maximum(x[:m], 0.0)
    out[m:] = proj_capped_box(x[m:], 0.0, spec.per_charger_limit, spec.line_limit)
    return out


def project_state(s, spec: SpaceSpec, departed) -> np.ndarray:
    """Departure-reset the flagged e-coordinates, then project onto the space.

    `departed` is a boolean mask over chargers, or an iterable of 0-based
    charger indices. Idempotent.
    """
    x = np.array(s, dtype=float)
    departed = np.asarray(list(departed) if not isinstance(departed, np.ndarray)
                          else departed)
    mask = np.zeros(spec.m, dtype=bool)
    if departed.size:
        if departed.dtype == bool:
            mask = departed.astype(bool)
        else:
            mask[departed.astype(int)] = True
    x[:spec.m][mask] = 0.0
    return _project_space(x, spec)


# ---------------------------------------------------------------------------
# Event tables
# ---------------------------------------------------------------------------

def build_event_tables(sessions: SessionSet, m: int, T: int):
    """Per-transition carry flags and arrival injections.

    For the transition t -> t+1: a charger carries its e-state when a session
    spans the whole interval (arrival <= t, departure > t+1); otherwise the
    e-coordinate is reset. Arrivals inside (t, t+1] whose session is still
    active at t+1 inject their true demand.
    """
    carry = np.zeros((T, m), dtype=bool)
    arrivals = np.zeros((T, m))
    for s in sessions.sessions:
        if not 1 <= s.charger <= m:
            raise ValueError(f"session {s.id!r} uses charger {s.charger}, "
                             f"but the station has {m}")
        if s.arrival <= 0:
            raise ValueError(f"session {s.id!r} arrives at {s.arrival}; the "
                             f"episode starts from an idle station, so "
                             f"arrivals must be strictly positive")
        i = s.charger - 1
        t_first = int(np.floor(s.arrival))        # arrival in (t_first, t_first+1]
        if s.arrival == t_first:
            t_first -= 1
        if 0 <= t_first < T and s.departure > t_first + 1:
            arrivals[t_first, i] += s.energy_kwh
        lo = int(np.ceil(s.arrival))              # first t with arrival <= t
        hi = int(np.ceil(s.departure - 1))        # last t with departure > t+1
        for t in range(max(lo, 0), min(hi, T)):
            carry[t, i] = True
    return carry, arrivals


# ---------------------------------------------------------------------------
# The simulator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChargingModel:
    """Immutable bundle of dynamics, costs, and feasible spaces."""

    dyn: DynamicsSpec
    cost: CostSpec
    space: SpaceSpec
    pert_bound: float | None = None   # uniform bound on ||l' - delta*h'||

    @property
    def m(self) -> int:
        return self.dyn.m

    @property
    def n(self) -> int:
        return self.dyn.n

    @property
    def T(self) -> int:
        return self.dyn.T


class ChargingEnv:
    """One episode of the charging MDP. Single-owner; not shared across cells."""

    def __init__(self, model: ChargingModel, sessions: SessionSet,
                 solar: SolarModel, rng: np.random.Generator):
        self.model = model
        self.sessions = sessions
        self.solar = solar
        self.rng = rng
        self.carry, self.arrivals = build_event_tables(sessions, model.m, model.T)
        self.state = StationState(e=np.zeros(model.m), b=np.zeros(model.m), t=0)
        self._done = model.T == 0

    def reset(self) -> StationState:
        self.state = StationState(e=np.zeros(self.model.m),
                                  b=np.zeros(self.model.m), t=0)
        self._done = self.model.T == 0
        return self.state

    def step(self, a) -> StepOutcome:
        """Apply one transition and return the observable outcome.

        The stage cost uses the pre-transition state and the applied
        (box-projected) action; the realized solar draw and arrival
        injections for this transition are exposed in `observed`.
        """
        if self._done:
            raise EpisodeDoneError("episode already finished")
        model = self.model
        t = self.state.t
        m = model.m
        s = self.state.vector
        ga = project_action(a, model.space)
        cost = model.cost.stage_cost(t, s, ga)

        h = self.solar.sample(self.rng, m)
        ell = self.arrivals[t]
        if model.pert_bound is not None:
            inj = np.concatenate([ell, -model.dyn.delta_hours * h])
            norm = float(np.linalg.norm(inj))
            if norm > model.pert_bound + 1e-9:
                raise PerturbationBoundError(
                    f"step {t}: perturbation norm {norm:.6f} exceeds "
                    f"bound {model.pert_bound}")

        A, B = assemble_dynamics(model.dyn, t)
        x = A @ s + B @ ga
        x[m:] = x[m:] - model.dyn.delta_hours * h
        reset_mask = ~self.carry[t]
        x[:m][reset_mask] = 0.0
        x[:m] = x[:m] + ell
        y = _project_space(x, model.space)

        nxt = StationState(e=y[:m].copy(), b=y[m:].copy(), t=t + 1)
        self.state = nxt
        self._done = nxt.t >= model.T
        return StepOutcome(
            observed=Observation(departed=reset_mask.copy(), solar=h,
                                 arrivals=ell.copy()),
            cost=cost,
            true_state=nxt,
            done=self._done,
        )


# ---------------------------------------------------------------------------
# Reparameterized stepper (additive perturbation form)
# ---------------------------------------------------------------------------

def reparam_step(model: ChargingModel, sessions: SessionSet, state: StationState,
                 a, h) -> tuple[StationState, np.ndarray]:
    """One transition in the form s' = A s + B a + w(s, a).

    The perturbation w collects, per coordinate, the arrival injection, the
    departure cancellation of the linear flow, the action-projection
    correction, the solar term, and the safety-projection correction. Event
    membership is derived directly from the session tuples here, independent
    of the simulator's precomputed tables; the two steppers must agree
    exactly on every trajectory.
    """
    model_m = model.m
    t = state.t
    s = state.vector
    ga = project_action(a, model.space)
    A, B = assemble_dynamics(model.dyn, t)
    lin_raw = A @ s + B @ np.asarray(a, dtype=float)

    # Session-label sets for this transition, straight from the tuples.
    arriving = {}
    active_through = set()
    for sess in sessions.sessions:
        i = sess.charger - 1
        if t < sess.arrival <= t + 1 and sess.departure > t + 1:
            arriving[i] = arriving.get(i, 0.0) + sess.energy_kwh
        if sess.arrival <= t and sess.departure > t + 1:
            active_through.add(i)

    # Candidate next state with the projected action and injections applied;
    # arithmetic mirrors the simulator exactly so the perturbation form is an
    # identity rewriting, not an approximation.
    x = A @ s + B @ ga
    x[model_m:] = x[model_m:] - model.dyn.delta_hours * np.asarray(h, dtype=float)
    for i in range(model_m):
        if i not in active_through:
            x[i] = 0.0
        if i in arriving:
            x[i] = x[i] + arriving[i]
    y = _project_space(x, model.space)

    w = y - lin_raw
    nxt = StationState(e=y[:model_m].copy(), b=y[model_m:].copy(), t=t + 1)
    return nxt, w


def simulate_reparameterized(model: ChargingModel, sessions: SessionSet,
                             actions, solar_draws) -> np.ndarray:
    """Roll a whole episode through the perturbation-form stepper.

    `solar_draws` are the realized injections of a reference episode (the
    simulator exposes them in each StepOutcome). Returns the (T+1, n) state
    trajectory.
    """
    state = StationState(e=np.zeros(model.m), b=np.zeros(model.m), t=0)
    traj = [state.vector]
    for t, (a, h) in enumerate(zip(actions, solar_draws)):
        state, _ = reparam_step(model, sessions, state, a, h)
        traj.append(state.vector)
    return np.asarray(traj)


# ---------------------------------------------------------------------------
# Episode driver
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    states: np.ndarray          # (T+1, n)
    actions: np.ndarray         # (T, m) as emitted by the policy
    costs: np.ndarray           # (T,)
    solar: np.ndarray           # (T, m) realized injections
    departed: np.ndarray        # (T, m) bool reset flags
    arrivals: np.ndarray        # (T, m)

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.costs))


def run_episode(env: ChargingEnv, policy) -> Trajectory:
    """Drive one episode: reset, then alternate policy.act / env.step.

    The policy protocol is reset(initial_state) -> None,
    act(t) -> action, observe(t, outcome) -> None. Deterministic given the
    policy and the environment's generator.
    """
    model = env.model
    T, m, n = model.T, model.m, model.n
    s0 = env.reset()
    policy.reset(s0)
    states = np.zeros((T + 1, n))
    actions = np.zeros((T, m))
    costs = np.zeros(T)
    solar = np.zeros((T, m))
    departed = np.zeros((T, m), dtype=bool)
    arrivals = np.zeros((T, m))
    states[0] = s0.vector
    for t in range(T):
        a = np.asarray(policy.act(t), dtype=float)
        outcome = env.step(a)
        policy.observe(t, outcome)
        actions[t] = a
        costs[t] = outcome.cost
        solar[t] = outcome.observed.solar
        departed[t] = outcome.observed.departed
        arrivals[t] = outcome.observed.arrivals
        states[t + 1] = outcome.true_state.vector
    return Trajectory(states=states, actions=actions, costs=costs, solar=solar,
                      departed=departed, arrivals=arrivals)


class ZeroPolicy:
    """Emits zero actions; handy as a no-op baseline in tests."""

    def __init__(self, m: int):
        self._zeros = np.zeros(m)

    def reset(self, s0):
        pass

    def act(self, t):
        return self._zeros

    def observe(self, t, outcome):
        pass


class FixedSequencePolicy:
    """Replays a precomputed action sequence."""

    def __init__(self, actions):
        self.actions = np.asarray(actions, dtype=float)

    def reset(self, s0):
        pass

    def act(self, t):
        return self.actions[t]

    def observe(self, t, outcome):
        pass
