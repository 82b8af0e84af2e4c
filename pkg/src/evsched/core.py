"""Shared domain types: charging sessions, model specs, experiment config, RNG streams.

Everything in this module is immutable after construction and safe to share
read-only across concurrently running experiment cells.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BOX = "box"
NONNEG_SIMPLEX = "nonneg-simplex"


class SessionFileError(ValueError):
    """A session file failed parsing or validation."""


class SpecError(ValueError):
    """A model spec violates one of its load-time invariants."""


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.blake2s(str(label).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def rng_stream(master_seed: int, *labels) -> np.random.Generator:
    """Derive an independent, reproducible generator from a master seed.

    Streams are keyed by (master seed, labels...); the same key always yields
    the same stream, and distinct keys yield statistically independent ones.
    Labels may be ints or strings (strings are hashed to ints).
    """
    entropy = [int(master_seed) & 0xFFFFFFFF] + [_label_to_int(x) for x in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# ---------------------------------------------------------------------------
# Charging sessions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChargingSession:
    """One EV visit at a charger.

    Times are fractional step indices; `energy_kwh` is the true demand.
    `user_departure` and `user_energy_kwh` are the driver-supplied values and
    may differ from the ground truth.
    """

    id: str
    arrival: float
    departure: float
    energy_kwh: float
    charger: int
    user_departure: float
    user_energy_kwh: float

    def __post_init__(self):
        if not self.arrival < self.departure:
            raise SessionFileError(
                f"session {self.id!r}: arrival {self.arrival} must precede "
                f"departure {self.departure}")
        if self.energy_kwh <= 0:
            raise SessionFileError(
                f"session {self.id!r}: demand must be positive, got {self.energy_kwh}")
        if self.charger < 1:
            raise SessionFileError(
                f"session {self.id!r}: charger index must be >= 1, got {self.charger}")
        if self.user_departure <= self.arrival:
            raise SessionFileError(
                f"session {self.id!r}: user departure {self.user_departure} must "
                f"come after arrival {self.arrival}")

    def active_at(self, t: float) -> bool:
        """True if the vehicle occupies the charger at time t (true timing)."""
        return self.arrival <= t < self.departure

    def user_active_at(self, t: float) -> bool:
        """Same as active_at but with the user-announced departure time."""
        return self.arrival <= t < self.user_departure


@dataclass(frozen=True)
class SessionSet:
    """Validated collection of sessions over a horizon of T steps."""

    sessions: tuple
    T: int

    def __post_init__(self):
        by_charger: dict[int, list[ChargingSession]] = {}
        for s in self.sessions:
            by_charger.setdefault(s.charger, []).append(s)
        for charger, group in by_charger.items():
            group = sorted(group, key=lambda s: s.arrival)
            for prev, cur in zip(group, group[1:]):
                if cur.arrival < prev.departure:
                    raise SessionFileError(
                        f"sessions {prev.id!r} and {cur.id!r} overlap on "
                        f"charger {charger} ([{prev.arrival}, {prev.departure}) vs "
                        f"[{cur.arrival}, {cur.departure}))")

    def __len__(self):
        return len(self.sessions)

    @property
    def max_charger(self) -> int:
        return max((s.charger for s in self.sessions), default=0)

    def arrivals_in(self, t: int) -> list[ChargingSession]:
        """Sessions arriving during the transition interval (t, t+1]."""
        return [s for s in self.sessions if t < s.arrival <= t + 1]

    def departures_in(self, t: int) -> set[int]:
        """Chargers whose session ends during (t, t+1] (true departure times)."""
        return {s.charger for s in self.sessions if t < s.departure <= t + 1}

    def active_chargers_at(self, t: float) -> set[int]:
        return {s.charger for s in self.sessions if s.active_at(t)}

    def to_rows(self) -> list[list]:
        rows = []
        for s in self.sessions:
            rows.append([s.id, s.arrival, s.departure, s.energy_kwh, s.charger,
                         s.user_departure, s.user_energy_kwh])
        return rows


SESSION_HEADER = ["id", "arrival", "departure", "energy_kwh", "charger",
                  "user_departure", "user_energy_kwh"]


def load_sessions(path, T: int) -> SessionSet:
    """Load and validate a session CSV (schema: SESSION_HEADER).

    Rows that fail field validation or per-charger exclusivity are reported
    with their row numbers.
    """
    path = Path(path)
    if not path.exists():
        raise SessionFileError(f"session file not found: {path}")
    sessions = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SESSION_HEADER:
            raise SessionFileError(
                f"{path}: expected header {','.join(SESSION_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(SESSION_HEADER):
                raise SessionFileError(f"{path}:{lineno}: expected "
                                       f"{len(SESSION_HEADER)} fields, got {len(row)}")
            try:
                sessions.append(ChargingSession(
                    id=row[0],
                    arrival=float(row[1]),
                    departure=float(row[2]),
                    energy_kwh=float(row[3]),
                    charger=int(row[4]),
                    user_departure=float(row[5]),
                    user_energy_kwh=float(row[6]),
                ))
            except SessionFileError as exc:
                raise SessionFileError(f"{path}:{lineno}: {exc}") from None
            except ValueError as exc:
                raise SessionFileError(f"{path}:{lineno}: malformed row: {exc}") from None
    return SessionSet(sessions=tuple(sessions), T=int(T))


def save_sessions(path, sessions: SessionSet) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SESSION_HEADER)
        writer.writerows(sessions.to_rows())


# ---------------------------------------------------------------------------
# Model specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpaceSpec:
    """Feasible state/action sets.

    Box mode uses per-coordinate state bounds; nonneg-simplex mode encodes
    e >= 0 together with 0 <= b_i <= per_charger_limit and
    sum(b) <= line_limit. Actions are always a per-coordinate box.
    """

    m: int
    mode: str = BOX
    action_lo: float = -2.0
    action_hi: float = 2.0
    state_lo: np.ndarray | None = None   # box mode, length 2m
    state_hi: np.ndarray | None = None
    line_limit: float = math.inf         # simplex mode
    per_charger_limit: float = math.inf

    def __post_init__(self):
        if self.mode not in (BOX, NONNEG_SIMPLEX):
            raise SpecError(f"unknown space mode {self.mode!r}")
        if not self.action_lo <= self.action_hi:
            raise SpecError("action bounds must satisfy lo <= hi")
        n = 2 * self.m
        if self.mode == BOX:
            lo = np.asarray(self.state_lo if self.state_lo is not None
                            else np.full(n, -np.inf), dtype=float)
            hi = np.asarray(self.state_hi if self.state_hi is not None
                            else np.full(n, np.inf), dtype=float)
            if lo.shape != (n,) or hi.shape != (n,):
                raise SpecError(f"state bounds must have length {n}")
            if np.any(lo > hi):
                raise SpecError("state bounds must satisfy lo <= hi")
            object.__setattr__(self, "state_lo", lo)
            object.__setattr__(self, "state_hi", hi)
        else:
            if self.line_limit <= 0 or self.per_charger_limit <= 0:
                raise SpecError("simplex limits must be positive")

    @property
    def n(self) -> int:
        return 2 * self.m

    def contains_action(self, a, tol: float = 0.0) -> bool:
        a = np.asarray(a, dtype=float)
        return bool(np.all(a >= self.action_lo - tol) and np.all(a <= self.action_hi + tol))

    def contains_state(self, s, tol: float = 1e-9) -> bool:
        s = np.asarray(s, dtype=float)
        if self.mode == BOX:
            return bool(np.all(s >= self.state_lo - tol) and np.all(s <= self.state_hi + tol))
        e, b = s[:self.m], s[self.m:]
        return bool(np.all(e >= -tol)
                    and np.all(b >= -tol)
                    and np.all(b <= self.per_charger_limit + tol)
                    and np.sum(b) <= self.line_limit + tol)


def default_box_space(m: int, e_bound: float = 100.0, b_bound: float = 6.6,
                      action_bound: float = 2.0) -> SpaceSpec:
    """The experiment hyper-rectangles: e in [-100,100], b in [-6.6,6.6], a in [-2,2]."""
    lo = np.concatenate([np.full(m, -e_bound), np.full(m, -b_bound)])
    return SpaceSpec(m=m, mode=BOX, action_lo=-action_bound, action_hi=action_bound,
                     state_lo=lo, state_hi=-lo)


def _as_sequence(value, T: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(T, float(arr))
    if arr.shape != (T,):
        raise SpecError(f"{name} must be a scalar or length-{T} sequence")
    return arr


@dataclass(frozen=True)
class DynamicsSpec:
    """Battery dynamics parameters.

    delta_hours is the time span between consecutive controls; mu_eff and
    beta_ctrl are the charging- and control-efficiency sequences in [0, 1].
    """

    m: int
    T: int
    delta_hours: float
    mu_eff: np.ndarray
    beta_ctrl: np.ndarray

    def __post_init__(self):
        if self.m < 1 or self.T < 1:
            raise SpecError("m and T must be positive")
        mu = _as_sequence(self.mu_eff, self.T, "mu_eff")
        beta = _as_sequence(self.beta_ctrl, self.T, "beta_ctrl")
        if np.any(mu < 0) or np.any(mu > 1):
            raise SpecError("charging efficiency must lie in [0, 1]")
        if np.any(beta < 0) or np.any(beta > 1):
            raise SpecError("control efficiency must lie in [0, 1]")
        object.__setattr__(self, "mu_eff", mu)
        object.__setattr__(self, "beta_ctrl", beta)

    @property
    def n(self) -> int:
        return 2 * self.m


def assemble_dynamics(spec: DynamicsSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Block system matrices at step t.

    A_t = [[I_m, -delta*mu_t*I_m], [0, I_m]] couples rates into the remaining
    demand; B_t = [[0], [beta_t*I_m]] injects rate changes.
    """
    if not 0 <= t < spec.T:
        raise IndexError(f"step {t} outside [0, {spec.T})")
    m = spec.m
    eye = np.eye(m)
    A = np.zeros((2 * m, 2 * m))
    A[:m, :m] = eye
    A[:m, m:] = -spec.delta_hours * spec.mu_eff[t] * eye
    A[m:, m:] = eye
    B = np.zeros((2 * m, m))
    B[m:, :] = spec.beta_ctrl[t] * eye
    return A, B


@dataclass(frozen=True)
class CostSpec:
    """Quadratic stage costs and terminal matrix; all matrices must be PD.

    q and r_cost may be a single matrix (time-invariant) or a (T, ., .) stack.
    """

    T: int
    q: np.ndarray
    r_cost: np.ndarray
    p_term: np.ndarray
    mu_lb: float = field(init=False, default=0.0)
    xi_ub: float = field(init=False, default=0.0)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r_cost, dtype=float)
        p = np.asarray(self.p_term, dtype=float)
        if q.ndim == 2:
            q = np.broadcast_to(q, (self.T,) + q.shape).copy()
        if r.ndim == 2:
            r = np.broadcast_to(r, (self.T,) + r.shape).copy()
        eigs = []
        for name, stack in (("Q", q), ("R_cost", r)):
            for t in range(self.T):
                w = np.linalg.eigvalsh(stack[t])
                if w.min() <= 0:
                    raise SpecError(f"{name}[{t}] is not positive definite "
                                    f"(min eigenvalue {w.min():.3e})")
                eigs.append(w)
        w = np.linalg.eigvalsh(p)
        if w.min() <= 0:
            raise SpecError(f"terminal matrix is not positive definite "
                            f"(min eigenvalue {w.min():.3e})")
        eigs.append(w)
        allw = np.concatenate(eigs)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r_cost", r)
        object.__setattr__(self, "p_term", p)
        object.__setattr__(self, "mu_lb", float(allw.min()))
        object.__setattr__(self, "xi_ub", float(allw.max()))

    def stage_cost(self, t: int, s, a) -> float:
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        return 0.5 * float(s @ self.q[t] @ s + a @ self.r_cost[t] @ a)


def uniform_cost(T: int, m: int, alpha_cost: float = 0.1) -> CostSpec:
    """Q = I_n, R = alpha*I_m, terminal = I_n (the experiment costs)."""
    n = 2 * m
    return CostSpec(T=T, q=np.eye(n), r_cost=alpha_cost * np.eye(m), p_term=np.eye(n))


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment grid: episode schedule, shift schedule, tuning grid, seeds."""

    episodes: int = 1200
    shift_episode: int = 800
    T: int = 144
    m: int = 2
    delta_hours: float = 1.0 / 6.0
    mu_eff: float = 0.8
    beta_ctrl: float = 0.2
    alpha_cost: float = 0.1
    beta_ood_grid: tuple = (0.0, 0.1, 1.0, 10.0, math.inf)
    seeds: tuple = (0, 1, 2, 3, 4)
    solar_pre_mean: float = 10.0
    solar_pre_sd: float = 0.05
    solar_post_mean: float = 0.0
    solar_post_sd: float = 0.05
    sessions_pre: str = "sessions_pre.csv"
    sessions_post: str = "sessions_post.csv"
    horizon_mode: str = "fixed:12"
    solar_forecast: str = "regime"
    qp_tol: float = 1e-8
    lr: float = 1e-3
    batch: int = 128
    buffer: int = 1_000_000
    tau_soft: float = 0.005
    cost_scale: float = 1e-3
    learn_every: int = 1
    normalize_rewards: bool = True
    out_dir: str = "out"

    def __post_init__(self):
        if self.shift_episode > self.episodes:
            raise SpecError("shift_episode must not exceed episodes")
        for b in self.beta_ood_grid:
            if not (b >= 0 or math.isinf(b)):
                raise SpecError(f"beta_ood value {b} must be >= 0 or inf")
        if not self.seeds:
            raise SpecError("at least one seed is required")

    def config_hash(self) -> str:
        payload = repr(sorted(self.__dict__.items())).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]


def parse_beta(text) -> float:
    """Parse a tuning-grid entry; 'inf' selects the pure-baseline sentinel."""
    if isinstance(text, (int, float)):
        return float(text)
    text = str(text).strip().lower()
    if text in ("inf", "infinity", "+inf"):
        return math.inf
    return float(text)


def format_beta(beta: float) -> str:
    if math.isinf(beta):
        return "inf"
    return f"{beta:g}"
