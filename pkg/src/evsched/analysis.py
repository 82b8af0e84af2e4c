"""Executable theory: stabilizability verification, the baseline
performance-ratio bound constants, an exact value-error metric on small
tabular MDPs, and experiment metric aggregation.

Everything here is a pure function over its inputs and parallel-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import qp as qpmod
from .core import DynamicsSpec, assemble_dynamics, format_beta


class BoundDomainError(ValueError):
    """The bound constants left their square-root domain; not clamped."""


# ---------------------------------------------------------------------------
# Stabilizability (singular-value floor of the dynamics constraint matrix)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StabilizabilityReport:
    entries: tuple            # ((t, t_prime, sigma_min), ...)
    min_sigma: float
    floor: float
    passed: bool


def sigma_min_phi(dyn: DynamicsSpec, t: int, t_prime: int) -> float:
    """Smallest singular value of the stacked dynamics constraint matrix."""
    if not 0 <= t <= t_prime < dyn.T:
        raise IndexError(f"require 0 <= t <= t' < T, got ({t}, {t_prime})")
    if t_prime == t:
        return 1.0
    A_seq, B_seq = [], []
    for tau in range(t, t_prime):
        A, B = assemble_dynamics(dyn, tau)
        A_seq.append(A)
        B_seq.append(B)
    phi = qpmod.build_phi(A_seq, B_seq)
    return float(np.linalg.svd(phi, compute_uv=False)[-1])


def verify_stabilizability(dyn: DynamicsSpec, sigma_floor: float,
                           pairs=None, window: int = 10) -> StabilizabilityReport:
    """Check sigma_min over a set of (t, t') pairs against the floor.

    Default pair set: every start t with the maximal span that fits
    min(window, T-1-t), plus the full-horizon pair when it is affordable.
    """
    if pairs is None:
        pairs = []
        for t in range(dyn.T):
            tp = min(t + window, dyn.T - 1)
            pairs.append((t, tp))
    entries = []
    for t, tp in pairs:
        entries.append((t, tp, sigma_min_phi(dyn, t, tp)))
    min_sigma = min(e[2] for e in entries)
    return StabilizabilityReport(entries=tuple(entries), min_sigma=min_sigma,
                                 floor=sigma_floor,
                                 passed=min_sigma >= sigma_floor)


# ---------------------------------------------------------------------------
# Baseline performance-ratio bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    a_bar: float      # norm bound on the A matrices
    b_bar: float      # norm bound on the B matrices
    w_bar: float      # uniform perturbation bound
    mu_lb: float      # cost-curvature floor
    xi_ub: float      # cost-curvature ceiling
    sigma_lb: float   # stabilizability floor

    def __post_init__(self):
        if self.mu_lb <= 0 or self.xi_ub <= 0 or self.sigma_lb <= 0:
            raise ValueError("curvature and singular-value floors must be positive")
        if self.mu_lb > self.xi_ub:
            raise ValueError("mu_lb must not exceed xi_ub")
        if self.a_bar < 0 or self.b_bar < 0 or self.w_bar < 0:
            raise ValueError("norm bounds must be nonnegative")


@dataclass(frozen=True)
class RoeBound:
    sigma_lo: float
    sigma_hi: float
    lam_bar: float
    C: float
    bound: float


def roe_mpc_bound(inp: BoundInputs, lam: float | None = None) -> RoeBound:
    """Closed-form constants of the baseline's expected-cost ratio bound.

    sigma_lo = min(mu,1)(A+B+1) sqrt(xi / (2 mu xi + mu sigma^2)),
    sigma_hi = sqrt(2)(xi + A + B + 1),
    lam_bar = sqrt((sigma_hi - sigma_lo)/(sigma_hi + sigma_lo)),
    C = 4(xi + 1 + A + B) / (sigma_lo^2 * lam),
    bound = 2 xi C^2 (1 + C^2)(1 + A^2 + B^2) / (mu (1 - lam_bar)^2).

    The scale factor inside C is an explicit input (default lam_bar); domain
    violations raise rather than clamp.
    """
    A, B = inp.a_bar, inp.b_bar
    mu, xi, sig = inp.mu_lb, inp.xi_ub, inp.sigma_lb
    sigma_lo = min(mu, 1.0) * (A + B + 1.0) * math.sqrt(
        xi / (2.0 * mu * xi + mu * sig ** 2))
    sigma_hi = math.sqrt(2.0) * (xi + A + B + 1.0)
    if sigma_lo >= sigma_hi:
        raise BoundDomainError(
            f"sigma_lo {sigma_lo:.6g} >= sigma_hi {sigma_hi:.6g}: "
            f"lam_bar leaves its square-root domain")
    lam_bar = math.sqrt((sigma_hi - sigma_lo) / (sigma_hi + sigma_lo))
    if lam_bar >= 1.0:
        raise BoundDomainError(f"lam_bar {lam_bar:.6g} >= 1: bound diverges")
    scale = lam_bar if lam is None else lam
    if scale <= 0:
        raise BoundDomainError("the scale factor inside C must be positive")
    C = 4.0 * (xi + 1.0 + A + B) / (sigma_lo ** 2 * scale)
    bound = (2.0 * xi * C ** 2 * (1.0 + C ** 2) * (1.0 + A ** 2 + B ** 2)
             / (mu * (1.0 - lam_bar) ** 2))
    return RoeBound(sigma_lo=sigma_lo, sigma_hi=sigma_hi, lam_bar=lam_bar,
                    C=C, bound=bound)


# ---------------------------------------------------------------------------
# Exact value error on toy tabular MDPs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyMdp:
    """Finite-horizon tabular MDP: cost (T,S,A), transitions (T,S,A,S)."""

    cost: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        cost = np.asarray(self.cost, dtype=float)
        trans = np.asarray(self.trans, dtype=float)
        T, S, A = cost.shape
        if trans.shape != (T, S, A, S):
            raise ValueError("transition tensor must be (T, S, A, S)")
        if np.any(cost < 0):
            raise ValueError("costs must be nonnegative")
        rows = trans.sum(axis=3)
        if not np.allclose(rows, 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to one")
        if np.any(trans < 0):
            raise ValueError("transition probabilities must be nonnegative")
        object.__setattr__(self, "cost", cost)
        object.__setattr__(self, "trans", trans)

    @property
    def shape(self):
        return self.cost.shape


def optimal_q(mdp: ToyMdp) -> np.ndarray:
    """Exact Q tables by backward induction over the horizon."""
    T, S, A = mdp.shape
    q = np.zeros((T, S, A))
    v_next = np.zeros(S)
    for t in range(T - 1, -1, -1):
        q[t] = mdp.cost[t] + mdp.trans[t] @ v_next
        v_next = q[t].min(axis=1)
    return q


def optimal_v(mdp: ToyMdp) -> np.ndarray:
    """Value recursion computed directly (cross-check for the Q recursion)."""
    T, S, A = mdp.shape
    v = np.zeros((T + 1, S))
    for t in range(T - 1, -1, -1):
        v[t] = (mdp.cost[t] + mdp.trans[t] @ v[t + 1]).min(axis=1)
    return v[:-1]


def q_error_epsilon(q_fn, mdp: ToyMdp, max_pairs: int = 10_000) -> float:
    """Time-averaged sup-norm gap between q_fn(t, s, a) and the exact tables.

    The MDP must be small enough for exact dynamic programming.
    """
    T, S, A = mdp.shape
    if S * A > max_pairs:
        raise ValueError(f"{S * A} state-action pairs exceed the exact-DP "
                         f"guard of {max_pairs}")
    qstar = optimal_q(mdp)
    total = 0.0
    for t in range(T):
        gap = 0.0
        for s in range(S):
            for a in range(A):
                gap = max(gap, abs(q_fn(t, s, a) - qstar[t, s, a]))
        total += gap
    return total / T


# ---------------------------------------------------------------------------
# Experiment metric aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryRow:
    beta: float
    avg_reward_pre: float
    avg_reward_post: float
    sd_pre: float
    sd_post: float
    avg_lambda: float
    avg_abs_td: float


def _window_stats(rewards, lo, hi):
    vals = [r["reward"] for r in rewards if lo <= r["episode"] < hi]
    if not vals:
        raise ValueError(f"no episodes in window [{lo}, {hi})")
    arr = np.asarray(vals, dtype=float)
    # Population standard deviation over every (seed, episode) sample.
    return float(arr.mean()), float(arr.std())


def aggregate_metrics(reward_rows, trust_rows, pre_window=(600, 800),
                      post_window=(1000, 1200), use_norm: bool = True):
    """Per-beta summary: windowed reward mean/sd plus averaged trust
    coefficient and |TD| over all steps and seeds. Output is sorted by beta
    and independent of input row order."""
    key = "reward_norm" if use_norm else "reward_raw"
    by_beta: dict[float, list] = {}
    for row in reward_rows:
        by_beta.setdefault(float(row["beta"]), []).append(
            {"episode": int(row["episode"]), "reward": float(row[key])})
    trust_by_beta: dict[float, list] = {}
    for row in trust_rows:
        trust_by_beta.setdefault(float(row["beta"]), []).append(row)
    out = []
    for beta in sorted(by_beta):
        rows = by_beta[beta]
        mean_pre, sd_pre = _window_stats(rows, *pre_window)
        mean_post, sd_post = _window_stats(rows, *post_window)
        trust = trust_by_beta.get(beta, [])
        lams = np.asarray([float(r["lambda"]) for r in trust], dtype=float)
        tds = np.asarray([float(r["td_abs"]) for r in trust], dtype=float)
        out.append(SummaryRow(
            beta=beta,
            avg_reward_pre=mean_pre, avg_reward_post=mean_post,
            sd_pre=sd_pre, sd_post=sd_post,
            avg_lambda=float(lams.mean()) if lams.size else math.nan,
            avg_abs_td=float(tds.mean()) if tds.size else math.nan,
        ))
    return out


SUMMARY_HEADER = ["beta", "avg_reward_pre", "avg_reward_post", "sd_pre",
                  "sd_post", "avg_lambda", "avg_abs_td"]


def summary_to_csv_rows(summary) -> list[list[str]]:
    """Format summary rows; a constant pure-baseline reward reports '-' sd."""
    rows = [SUMMARY_HEADER]
    for row in summary:
        def fmt_sd(sd):
            if math.isinf(row.beta) and sd == 0.0:
                return "-"
            return repr(sd)
        rows.append([format_beta(row.beta), repr(row.avg_reward_pre),
                     repr(row.avg_reward_post), fmt_sd(row.sd_pre),
                     fmt_sd(row.sd_post), repr(row.avg_lambda),
                     repr(row.avg_abs_td)])
    return rows
