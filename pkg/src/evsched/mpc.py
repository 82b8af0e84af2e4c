"""Scheduling baseline: state estimation from user inputs and per-step
receding-horizon optimization.

The estimator recursion is shared with the meta-policy: it is driven by the
actions actually applied, uses user-announced departure/demand data for the
predicted perturbations, and never reads the true state after the initial
one. The per-step optimizer solves a stacked QP over the prediction horizon
and commits the first action.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import qp as qpmod
from .core import CostSpec, DynamicsSpec, SessionSet, SpaceSpec, assemble_dynamics
from .env import ChargingModel, project_action, _project_space


class MpcSolveError(RuntimeError):
    """QP failure inside the receding-horizon loop, annotated with the step."""


@dataclass(frozen=True)
class EstimatedState:
    vector: np.ndarray
    t: int


@dataclass(frozen=True)
class PredictionSet:
    """Predicted perturbations and departure pins over [t, t'].

    w_pred[k] is the predicted perturbation for the transition t+k -> t+k+1;
    entries derive only from user inputs of sessions that have already
    arrived, so unannounced future arrivals contribute zero. pin_mask[k]
    flags the e-coordinates predicted inactive at step t+k+1.
    """

    t: int
    t_prime: int
    w_pred: np.ndarray      # (K, n)
    pin_mask: np.ndarray    # (K, m) bool

    @property
    def horizon(self) -> int:
        return self.t_prime - self.t


def predicted_arrivals(sessions: SessionSet, t: int, now: int, m: int) -> np.ndarray:
    """User-announced energy arriving in (t, t+1], known at time `now`.

    Only sessions with arrival <= now are announced; the announced demand and
    departure are the user values.
    """
    ell = np.zeros(m)
    for s in sessions.sessions:
        if s.arrival <= now and t < s.arrival <= t + 1 and s.user_departure > t + 1:
            ell[s.charger - 1] += s.user_energy_kwh
    return ell


def predicted_carry(sessions: SessionSet, t: int, now: int, m: int) -> np.ndarray:
    """Chargers predicted to hold a vehicle through (t, t+1], per user inputs."""
    carry = np.zeros(m, dtype=bool)
    for s in sessions.sessions:
        if s.arrival <= now and s.arrival <= t and s.user_departure > t + 1:
            carry[s.charger - 1] = True
    return carry


def build_predictions(sessions: SessionSet, dyn: DynamicsSpec, t: int,
                      t_prime: int, solar_forecast: float) -> PredictionSet:
    """Assemble w-hat and pin masks for the horizon [t, t']."""
    K = t_prime - t
    m, n = dyn.m, dyn.n
    w_pred = np.zeros((K, n))
    pin = np.zeros((K, m), dtype=bool)
    for k in range(K):
        tau = t + k
        w_pred[k, m:] = -dyn.delta_hours * solar_forecast
        # Future arrivals are unannounced at time t, so the l-hat block stays 0.
        pin[k] = ~predicted_carry(sessions, tau, t, m)
    return PredictionSet(t=t, t_prime=t_prime, w_pred=w_pred, pin_mask=pin)


def estimator_perturbation(sessions: SessionSet, dyn: DynamicsSpec, t: int,
                           solar_forecast: float) -> np.ndarray:
    """w-hat for the realized transition t -> t+1, built at time t+1.

    Sessions arriving inside (t, t+1] are announced by then, so their
    user-input demand enters here (this is where demand errors show up).
    """
    m = dyn.m
    w = np.zeros(dyn.n)
    w[:m] = predicted_arrivals(sessions, t, t + 1, m)
    w[m:] = -dyn.delta_hours * solar_forecast
    return w


def estimate_state(prev: EstimatedState, a_prev, w_pred_prev, departed,
                   dyn: DynamicsSpec, space: SpaceSpec) -> EstimatedState:
    """One estimator step: linear update with the predicted perturbation,
    then the estimated safety projection (departure resets + space projection).

    `departed` is the observed per-charger reset mask for the transition.
    Resets apply before the predicted arrival injections (depart-then-arrive,
    exactly like the simulator), so with exact predictions and no clipping the
    recursion reproduces the true state.
    """
    t_prev = prev.t
    m = dyn.m
    A, B = assemble_dynamics(dyn, t_prev)
    ga = project_action(a_prev, space)
    w = np.asarray(w_pred_prev, dtype=float)
    x = A @ prev.vector + B @ ga
    x[m:] = x[m:] + w[m:]
    mask = np.asarray(departed, dtype=bool)
    x[:m][mask] = 0.0
    x[:m] = x[:m] + w[:m]
    x = _project_space(x, space)
    return EstimatedState(vector=x, t=t_prev + 1)


class StateEstimator:
    """Stateful wrapper around the recursion; shared by baseline and meta."""

    def __init__(self, sessions: SessionSet, dyn: DynamicsSpec, space: SpaceSpec,
                 solar_forecast):
        self.sessions = sessions
        self.dyn = dyn
        self.space = space
        self.solar_forecast = solar_forecast
        self.est: EstimatedState | None = None

    def reset(self, s0_vector) -> EstimatedState:
        self.est = EstimatedState(vector=np.array(s0_vector, dtype=float), t=0)
        return self.est

    @property
    def current(self) -> EstimatedState:
        return self.est

    def advance(self, a_applied, departed) -> EstimatedState:
        t = self.est.t
        w = estimator_perturbation(self.sessions, self.dyn, t, self.solar_forecast)
        self.est = estimate_state(self.est, a_applied, w, departed,
                                  self.dyn, self.space)
        return self.est


# ---------------------------------------------------------------------------
# Horizon selection
# ---------------------------------------------------------------------------

def parse_horizon_mode(mode: str):
    """'fixed:K' or 'departure'; returns a callable (t, sessions, T) -> t'."""
    if mode == "departure":
        def pick(t, sessions, T):
            ends = [s.user_departure for s in sessions.sessions
                    if s.arrival <= t and s.user_departure > t]
            if not ends:
                return min(t + 1, T - 1)
            return min(int(math.ceil(max(ends))), T - 1)
        return pick
    if mode.startswith("fixed:"):
        k = int(mode.split(":", 1)[1])
        if k < 1:
            raise ValueError("fixed horizon must be >= 1")
        return lambda t, sessions, T: min(t + k, T - 1)
    raise ValueError(f"unknown horizon mode {mode!r}")


# ---------------------------------------------------------------------------
# Problem assembly and the receding-horizon core
# ---------------------------------------------------------------------------

def build_mpc_problem(est_vector, preds: PredictionSet, costs: CostSpec,
                      dyn: DynamicsSpec, space: SpaceSpec,
                      state_bounds: bool = False) -> qpmod.BoxQp:
    """Stacked QP over (s_t, a_t, ..., s_t'): stage costs plus terminal cost,
    dynamics equalities with predicted perturbations, departure pins, and the
    action box. Departure pins replace the matching dynamics rows, which keeps
    the system square and the problem convex.
    """
    t, t_prime = preds.t, preds.t_prime
    K = preds.horizon
    if K < 1:
        raise ValueError("horizon must span at least one transition")
    n, m = dyn.n, dyn.m
    s_off, a_off, width = qpmod.var_layout(K, n, m)

    H = np.zeros((width, width))
    terminal = costs.p_term if t_prime < costs.T - 1 else costs.q[t_prime]
    for k in range(K):
        tau = t + k
        H[s_off[k]:s_off[k] + n, s_off[k]:s_off[k] + n] = costs.q[tau]
        H[a_off[k]:a_off[k] + m, a_off[k]:a_off[k] + m] = costs.r_cost[tau]
    H[s_off[K]:s_off[K] + n, s_off[K]:s_off[K] + n] = terminal
    g = np.zeros(width)

    n_eq = n * (K + 1)
    Aeq = np.zeros((n_eq, width))
    beq = np.zeros(n_eq)
    Aeq[:n, :n] = np.eye(n)
    beq[:n] = np.asarray(est_vector, dtype=float)
    for k in range(K):
        tau = t + k
        A, B = assemble_dynamics(dyn, tau)
        rows = slice((k + 1) * n, (k + 2) * n)
        Aeq[rows, s_off[k]:s_off[k] + n] = -A
        Aeq[rows, a_off[k]:a_off[k] + m] = -B
        Aeq[rows, s_off[k + 1]:s_off[k + 1] + n] = np.eye(n)
        beq[rows] = preds.w_pred[k]
        for i in np.nonzero(preds.pin_mask[k])[0]:
            r = (k + 1) * n + i
            Aeq[r, :] = 0.0
            Aeq[r, s_off[k + 1] + i] = 1.0
            beq[r] = 0.0

    lb = np.full(width, -np.inf)
    ub = np.full(width, np.inf)
    for k in range(K):
        lb[a_off[k]:a_off[k] + m] = space.action_lo
        ub[a_off[k]:a_off[k] + m] = space.action_hi
    sum_rows = []
    if state_bounds:
        for k in range(1, K + 1):
            sl = slice(s_off[k], s_off[k] + n)
            if space.mode == "box":
                lb[sl] = space.state_lo
                ub[sl] = space.state_hi
            else:
                lb[sl] = 0.0
                ub[s_off[k]:s_off[k] + m] = np.inf
                ub[s_off[k] + m:s_off[k] + n] = space.per_charger_limit
                sum_rows.append((tuple(range(s_off[k] + m, s_off[k] + n)),
                                 space.line_limit))
    return qpmod.BoxQp(H=H, g=g, lb=lb, ub=ub, eq=(Aeq, beq),
                       sum_rows=tuple(sum_rows))


class MpcCore:
    """Per-step receding-horizon solver with a shifted warm start."""

    def __init__(self, model: ChargingModel, sessions: SessionSet,
                 horizon_mode: str = "fixed:12", solar_forecast: float = 0.0,
                 qp_tol: float = 1e-8, state_bounds: bool = False,
                 check_every: int = 10, polish: bool = True):
        self.model = model
        self.sessions = sessions
        self.pick_t_prime = parse_horizon_mode(horizon_mode)
        self.solar_forecast = solar_forecast
        self.qp_tol = qp_tol
        self.state_bounds = state_bounds
        self.check_every = check_every
        self.polish = polish
        self._warm = None          # (K, x, y) from the previous step
        self._fac_cache = {}       # problem shape digest -> factorization
        self.last_info = None
        self.last_objective = 0.0

    def reset(self):
        self._warm = None
        self.last_info = None
        self.last_objective = 0.0

    def action(self, t: int, est_vector) -> np.ndarray:
        """Solve the horizon problem at (t, s-hat) and commit the first action."""
        model = self.model
        T = model.T
        t_prime = self.pick_t_prime(t, self.sessions, T)
        if t_prime <= t:
            # Terminal step: only the immediate stage cost depends on a, and
            # its unconstrained minimizer is zero (R is PD).
            self.last_info = ("terminal", 0)
            return np.zeros(model.m)
        preds = build_predictions(self.sessions, model.dyn, t, t_prime,
                                  self.solar_forecast)
        problem = build_mpc_problem(est_vector, preds, model.cost, model.dyn,
                                    model.space, state_bounds=self.state_bounds)
        warm = self._shifted_warm_start(preds.horizon, model.n, model.m,
                                        problem.nvar)
        # The left-hand problem data repeats across steps and episodes (only
        # the rhs bands move), so KKT factorizations are cached by content.
        digest = hashlib.blake2b(problem.H.tobytes() + problem.eq[0].tobytes(),
                                 digest_size=16).digest()
        fac = self._fac_cache.get(digest)
        if fac is None:
            fac = qpmod.BoxQpFactorization(problem)
            self._fac_cache[digest] = fac
        try:
            res = qpmod.solve_box_qp(problem, tol=self.qp_tol,
                                     warm_start=warm, factorization=fac,
                                     check_every=self.check_every,
                                     polish=self.polish)
        except (qpmod.InfeasibleError, qpmod.SingularSystemError) as exc:
            raise MpcSolveError(f"MPC solve failed at step {t} "
                                f"(horizon [{t}, {t_prime}]): {exc}") from exc
        if res.status != "solved":
            raise MpcSolveError(f"MPC hit the iteration cap at step {t} "
                                f"(residuals {res.prim_res:.2e}/{res.dual_res:.2e})")
        self._warm = (preds.horizon, res.x.copy(), res.duals.copy())
        self.last_info = ("solved", res.iterations)
        self.last_objective = problem.objective(res.x)
        a = res.x[model.n:model.n + model.m]
        return project_action(a, model.space)

    def _shifted_warm_start(self, K: int, n: int, m: int, nvar: int):
        if self._warm is None:
            return None
        K_prev, x_prev, y_prev = self._warm
        stride = n + m
        if K_prev == K:
            x0 = np.empty(nvar)
            x0[:nvar - stride] = x_prev[stride:]
            x0[nvar - stride:nvar - m] = x_prev[-n:]  # repeat the tail state
            x0[nvar - m:] = 0.0
            # Dual layout: (K+1)*n equality rows then one box row per variable.
            n_eq = (K + 1) * n
            y0 = np.empty_like(y_prev)
            y0[:n_eq - n] = y_prev[n:n_eq]
            y0[n_eq - n:n_eq] = y_prev[n_eq - n:n_eq]
            y0[n_eq:n_eq + nvar - stride] = y_prev[n_eq + stride:n_eq + nvar]
            y0[n_eq + nvar - stride:] = 0.0
            if len(y_prev) > n_eq + nvar:             # sum rows, if any
                y0[n_eq + nvar:] = y_prev[n_eq + nvar:]
            return x0, y0
        if K_prev == K + 1:
            # The horizon only shrank: the previous solution truncates.
            n_eq_prev = (K_prev + 1) * n
            nvar_prev = len(x_prev)
            x0 = x_prev[stride:].copy()
            eq = y_prev[n:n_eq_prev]
            box = y_prev[n_eq_prev + stride:n_eq_prev + nvar_prev]
            rest = y_prev[n_eq_prev + nvar_prev + 1:] \
                if len(y_prev) > n_eq_prev + nvar_prev else np.zeros(0)
            y0 = np.concatenate([eq, box, rest])
            if len(x0) == nvar:
                return x0, y0
        return None


class MpcPolicy:
    """The standalone baseline: estimator + receding-horizon core.

    Data-independent by construction: it never reads the replay buffer or any
    learned parameter. With collect_log=True, per-step solver diagnostics
    (t, horizon, iterations, objective, action) accumulate in `log`.
    """

    def __init__(self, model: ChargingModel, sessions: SessionSet,
                 horizon_mode: str = "fixed:12", solar_forecast: float = 0.0,
                 qp_tol: float = 1e-8, state_bounds: bool = False,
                 collect_log: bool = False):
        self.model = model
        self.estimator = StateEstimator(sessions, model.dyn, model.space,
                                        solar_forecast)
        self.core = MpcCore(model, sessions, horizon_mode=horizon_mode,
                            solar_forecast=solar_forecast, qp_tol=qp_tol,
                            state_bounds=state_bounds)
        self.collect_log = collect_log
        self.log = []
        self._last_action = np.zeros(model.m)

    def reset(self, s0):
        self.estimator.reset(s0.vector)
        self.core.reset()
        self.log = []
        self._last_action = np.zeros(self.model.m)

    def act(self, t):
        a = self.core.action(t, self.estimator.current.vector)
        if self.collect_log:
            t_prime = self.core.pick_t_prime(t, self.core.sessions,
                                             self.model.T)
            self.log.append((t, max(t_prime - t, 0), self.core.last_info[1],
                             self.core.last_objective, a.copy()))
        self._last_action = a
        return a

    def observe(self, t, outcome):
        self.estimator.advance(self._last_action, outcome.observed.departed)


# ---------------------------------------------------------------------------
# Offline optimum (oracle for receding-horizon consistency)
# ---------------------------------------------------------------------------

def offline_optimal(model: ChargingModel, s0, w_seq):
    """One-shot KKT solve of the whole horizon with known perturbations.

    Returns (states, actions, cost). Terminal cost follows the same case
    split as the per-step problem at t' = T-1.
    """
    dyn, costs = model.dyn, model.cost
    T, n, m = model.T, model.n, model.m
    K = T - 1
    if K < 1:
        raise ValueError("need at least two steps for an offline solve")
    s_off, a_off, width = qpmod.var_layout(K, n, m)
    blocks = []
    for k in range(K):
        blocks.append(costs.q[k])
        blocks.append(costs.r_cost[k])
    blocks.append(costs.q[T - 1])
    A_seq, B_seq = [], []
    for k in range(K):
        A, B = assemble_dynamics(dyn, k)
        A_seq.append(A)
        B_seq.append(B)
    phi = qpmod.build_phi(A_seq, B_seq)
    rhs = np.concatenate([np.asarray(s0, dtype=float).ravel()]
                         + [np.asarray(w_seq[k], dtype=float) for k in range(K)])
    sys = qpmod.KktSystem(gamma_blocks=tuple(blocks), phi=phi, rhs=rhs)
    z, _ = qpmod.solve_kkt(sys)
    states = np.array([z[s_off[k]:s_off[k] + n] for k in range(K + 1)])
    actions = np.array([z[a_off[k]:a_off[k] + m] for k in range(K)])
    cost = sum(costs.stage_cost(k, states[k], actions[k]) for k in range(K))
    cost += 0.5 * float(states[K] @ costs.q[T - 1] @ states[K])
    return states, actions, cost
