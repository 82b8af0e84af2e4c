"""Numerical core: equality-constrained KKT solves and box-constrained convex QP.

Both solvers are pure functions of their inputs (no global state) and are
deterministic, so they are safe to call concurrently from experiment cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


class SingularSystemError(np.linalg.LinAlgError):
    """The KKT system could not be solved to the required residual."""


class InfeasibleError(ValueError):
    """The QP's constraint set is empty; the message carries the certificate."""


# ---------------------------------------------------------------------------
# Stacked-variable layout and the dynamics constraint matrix
# ---------------------------------------------------------------------------

def var_layout(K: int, n: int, m: int):
    """Offsets of s_0..s_K and a_0..a_{K-1} in the stacked vector.

    Layout: (s_0, a_0, s_1, a_1, ..., a_{K-1}, s_K), total (K+1)*n + K*m.
    """
    s_off = [k * (n + m) for k in range(K + 1)]
    a_off = [k * (n + m) + n for k in range(K)]
    return s_off, a_off, (K + 1) * n + K * m


def build_phi(A_seq, B_seq) -> np.ndarray:
    """Block lower-bidiagonal dynamics constraint matrix.

    Row block 0 pins s_0 (identity); row block r encodes
    s_r - A_{r-1} s_{r-1} - B_{r-1} a_{r-1}. With zero transitions the result
    is the single identity block.
    """
    A_seq = [np.asarray(A, dtype=float) for A in A_seq]
    B_seq = [np.asarray(B, dtype=float) for B in B_seq]
    if len(A_seq) != len(B_seq):
        raise ValueError("need one B per A")
    K = len(A_seq)
    if K == 0:
        raise ValueError("build_phi needs at least the initial block; "
                         "pass n via a dummy? use build_phi_n instead")
    n = A_seq[0].shape[0]
    m = B_seq[0].shape[1]
    s_off, a_off, width = var_layout(K, n, m)
    phi = np.zeros(((K + 1) * n, width))
    phi[:n, :n] = np.eye(n)
    for r in range(1, K + 1):
        rows = slice(r * n, (r + 1) * n)
        phi[rows, s_off[r - 1]:s_off[r - 1] + n] = -A_seq[r - 1]
        phi[rows, a_off[r - 1]:a_off[r - 1] + m] = -B_seq[r - 1]
        phi[rows, s_off[r]:s_off[r] + n] = np.eye(n)
    return phi


def build_phi_n(n: int) -> np.ndarray:
    """Degenerate single-block case (t == t'): just the identity on s_t."""
    return np.eye(n)


# ---------------------------------------------------------------------------
# Equality-constrained KKT solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KktSystem:
    """min 1/2 z' Gamma z + linear' z  s.t.  Phi z = rhs.

    gamma_blocks are the diagonal blocks of Gamma in stacked-variable order;
    every block must be PD so the Schur complement of the saddle system is SPD.
    """

    gamma_blocks: tuple
    phi: np.ndarray
    rhs: np.ndarray
    linear: np.ndarray | None = None

    def __post_init__(self):
        width = sum(b.shape[0] for b in self.gamma_blocks)
        if self.phi.shape[1] != width:
            raise ValueError(f"Gamma width {width} != Phi columns {self.phi.shape[1]}")
        if self.rhs.shape != (self.phi.shape[0],):
            raise ValueError("rhs length must match Phi rows")

    def gamma_dense(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.gamma_blocks)


def solve_kkt(sys: KktSystem) -> tuple[np.ndarray, np.ndarray]:
    """Solve the saddle-point system via the Schur complement on the duals.

    Returns (primal z, dual eta). The residual of the full KKT system is
    checked against 1e-9 * (1 + ||rhs||); failure raises SingularSystemError
    with a condition estimate.
    """
    phi = sys.phi
    c = (np.zeros(phi.shape[1]) if sys.linear is None
         else np.asarray(sys.linear, dtype=float))
    # Block-diagonal Gamma inverts blockwise.
    ginv_blocks = []
    for blk in sys.gamma_blocks:
        try:
            ginv_blocks.append(np.linalg.inv(blk))
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError(f"singular cost block: {exc}") from None
    offs = np.cumsum([0] + [b.shape[0] for b in sys.gamma_blocks])

    def ginv_mul(mat):
        out = np.empty_like(mat)
        for blk, lo, hi in zip(ginv_blocks, offs[:-1], offs[1:]):
            out[lo:hi] = blk @ mat[lo:hi]
        return out

    ginv_phit = ginv_mul(phi.T)
    schur = phi @ ginv_phit
    try:
        cho = scipy.linalg.cho_factor(schur, check_finite=False)
        eta = -scipy.linalg.cho_solve(cho, sys.rhs + phi @ ginv_mul(c[:, None])[:, 0],
                                      check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        cond = np.linalg.cond(schur)
        raise SingularSystemError(
            f"KKT Schur complement not SPD (cond estimate {cond:.3e})") from None
    z = -ginv_mul((c + phi.T @ eta)[:, None])[:, 0]

    stat = sys.gamma_dense() @ z + c + phi.T @ eta
    feas = phi @ z - sys.rhs
    resid = np.sqrt(stat @ stat + feas @ feas)
    limit = 1e-9 * (1.0 + np.linalg.norm(sys.rhs))
    if not np.isfinite(resid) or resid > limit:
        cond = np.linalg.cond(schur)
        raise SingularSystemError(
            f"KKT residual {resid:.3e} exceeds {limit:.3e} "
            f"(Schur cond estimate {cond:.3e})")
    return z, eta


# ---------------------------------------------------------------------------
# Box-constrained QP via operator splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxQp:
    """min 1/2 x'Hx + g'x  s.t.  lb <= x <= ub, equality rows, sum rows.

    `eq` is an optional (A_eq, b_eq) pair (used for dynamics chains and
    departure resets); `sum_rows` holds (indices, limit) pairs encoding
    sum(x[indices]) <= limit line-capacity constraints.
    """

    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    eq: tuple | None = None
    sum_rows: tuple = ()

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        nvar = H.shape[0]
        g = np.asarray(self.g, dtype=float)
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        if H.shape != (nvar, nvar) or g.shape != (nvar,):
            raise ValueError("H must be square and g must match")
        if lb.shape != (nvar,) or ub.shape != (nvar,):
            raise ValueError("bounds must match the variable count")
        if np.any(lb > ub):
            i = int(np.argmax(lb > ub))
            raise InfeasibleError(f"bound crossing at variable {i}: "
                                  f"lb {lb[i]} > ub {ub[i]}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        if self.eq is not None:
            aeq = np.asarray(self.eq[0], dtype=float)
            beq = np.asarray(self.eq[1], dtype=float)
            if aeq.ndim != 2 or aeq.shape[1] != nvar or beq.shape != (aeq.shape[0],):
                raise ValueError("equality rows must be (k, nvar) with length-k rhs")
            object.__setattr__(self, "eq", (aeq, beq))
            # Certificate check: single-variable equality rows must agree with
            # the bounds; general inconsistency surfaces as a solver stall.
            for k in range(aeq.shape[0]):
                nz = np.nonzero(aeq[k])[0]
                if len(nz) == 1:
                    j = int(nz[0])
                    val = beq[k] / aeq[k, j]
                    if val < lb[j] - 1e-12 or val > ub[j] + 1e-12:
                        raise InfeasibleError(
                            f"equality row {k} pins variable {j} to {val}, "
                            f"outside its bounds [{lb[j]}, {ub[j]}]")
        for idx, limit in self.sum_rows:
            low = lb[list(idx)]
            if np.sum(low) > limit + 1e-12:
                raise InfeasibleError(
                    f"sum row over {tuple(idx)} cannot reach limit {limit}: "
                    f"lower bounds already sum to {np.sum(low)}")

    @property
    def nvar(self) -> int:
        return self.H.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ self.H @ x) + float(self.g @ x)


@dataclass
class QpResult:
    x: np.ndarray
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    fp_residuals: np.ndarray
    duals: np.ndarray = field(default=None, repr=False)


def _constraint_bands(qp: BoxQp):
    """(l, u) bands in constraint-row order, without building the matrix.

    Cheap enough to recompute per solve, which keeps cached factorizations
    valid when only the right-hand data of a problem family changes.
    """
    lows = [qp.lb]
    highs = [qp.ub]
    if qp.eq is not None:
        lows.insert(0, qp.eq[1])
        highs.insert(0, qp.eq[1])
    for _, limit in qp.sum_rows:
        lows.append(np.array([-np.inf]))
        highs.append(np.array([float(limit)]))
    return np.concatenate(lows), np.concatenate(highs)


def _constraint_rows(qp: BoxQp):
    """Stack [equality rows; identity box rows; sum rows] with (l, u) bands."""
    nvar = qp.nvar
    blocks, lows, highs, kinds = [], [], [], []
    if qp.eq is not None:
        aeq, beq = qp.eq
        blocks.append(aeq)
        lows.append(beq)
        highs.append(beq)
        kinds += ["eq"] * aeq.shape[0]
    blocks.append(np.eye(nvar))
    lows.append(qp.lb)
    highs.append(qp.ub)
    kinds += ["box"] * nvar
    for idx, limit in qp.sum_rows:
        row = np.zeros((1, nvar))
        row[0, list(idx)] = 1.0
        blocks.append(row)
        lows.append(np.array([-np.inf]))
        highs.append(np.array([float(limit)]))
        kinds.append("sum")
    C = np.vstack(blocks)
    return C, np.concatenate(lows), np.concatenate(highs), kinds


class BoxQpFactorization:
    """Reusable KKT factorization for a family of QPs sharing (H, C) structure.

    The receding-horizon loop re-solves the same problem shape every step with
    new rhs data; factoring once and warm-starting makes those solves cheap.
    """

    SIGMA = 1e-6
    ALPHA = 1.6
    RHO_EQ = 1e2
    RHO_INEQ = 1e-1

    def __init__(self, qp: BoxQp):
        self.C, self.l, self.u, kinds = _constraint_rows(qp)
        nvar, nrow = qp.nvar, self.C.shape[0]
        # Fixed per-row stepsizes chosen by row kind, not by the current (l, u)
        # values, so the factorization survives bound updates (pins toggle).
        self.rho = np.where(np.array(kinds) == "eq", self.RHO_EQ, self.RHO_INEQ)
        kkt = np.zeros((nvar + nrow, nvar + nrow))
        kkt[:nvar, :nvar] = qp.H + self.SIGMA * np.eye(nvar)
        kkt[:nvar, nvar:] = self.C.T
        kkt[nvar:, :nvar] = self.C
        kkt[nvar:, nvar:] = -np.diag(1.0 / self.rho)
        self.lu = scipy.linalg.lu_factor(kkt, check_finite=False)
        self.nvar = nvar
        self.nrow = nrow


def solve_box_qp(qp: BoxQp, tol: float = 1e-8, max_iter: int = 50_000,
                 warm_start=None, factorization: BoxQpFactorization | None = None,
                 polish: bool = True, check_every: int = 10) -> QpResult:
    """Operator-splitting solve with over-relaxation and an active-set polish.

    Deterministic given inputs. Returns the best iterate with status
    "max_iter" when the iteration budget runs out; infeasible problems are
    rejected at construction where detectable.
    """
    fac = factorization if factorization is not None else BoxQpFactorization(qp)
    C, rho = fac.C, fac.rho
    l, u = _constraint_bands(qp)
    nvar, nrow = fac.nvar, fac.nrow
    g = qp.g

    if warm_start is not None:
        x = np.array(warm_start[0], dtype=float)
        y = np.array(warm_start[1], dtype=float)
        z = np.clip(C @ x, l, u)
        if polish:
            # A receding-horizon warm start usually lands on the optimal
            # active set; one equality solve then finishes the job with no
            # iterations at all. A wrong guess is rejected and we iterate.
            pre = _polish(qp, C, l, u, x, y, tol)
            if pre is not None:
                xs, ys = pre
                cxs = C @ xs
                prim = float(np.max(np.abs(np.clip(cxs, l, u) - cxs)))
                dual = float(np.max(np.abs(qp.H @ xs + g + C.T @ ys)))
                return QpResult(x=xs, status="solved", iterations=0,
                                prim_res=prim, dual_res=dual,
                                fp_residuals=np.zeros(0), duals=ys)
    else:
        x = np.zeros(nvar)
        y = np.zeros(nrow)
        z = np.clip(np.zeros(nrow), l, u)

    rhs = np.empty(nvar + nrow)
    fp_hist = []
    best = None
    status = "max_iter"
    iters = max_iter
    last_polish = -10_000

    for k in range(1, max_iter + 1):
        rhs[:nvar] = fac.SIGMA * x - g
        rhs[nvar:] = z - y / rho
        sol = scipy.linalg.lu_solve(fac.lu, rhs, check_finite=False)
        xt = sol[:nvar]
        zt = z + (sol[nvar:] - y) / rho
        x = fac.ALPHA * xt + (1.0 - fac.ALPHA) * x
        z_prev = z
        z_relaxed = fac.ALPHA * zt + (1.0 - fac.ALPHA) * z_prev
        z = np.clip(z_relaxed + y / rho, l, u)
        y = y + rho * (z_relaxed - z)

        # Douglas-Rachford displacement in the rho-weighted metric; the DR
        # variable is v = z + y/rho and its step telescopes to
        # z_relaxed - z_prev. This is the monotone quantity reported to callers.
        dw = z_relaxed - z_prev
        fp_hist.append(float(np.sqrt(np.sum(rho * dw * dw))))

        if k % check_every == 0 or k == max_iter:
            cx = C @ x
            prim = float(np.max(np.abs(cx - z))) if nrow else 0.0
            dual_vec = qp.H @ x + g + C.T @ y
            dual = float(np.max(np.abs(dual_vec)))
            prim_ref = max(np.max(np.abs(cx)), np.max(np.abs(z)), 1.0)
            dual_ref = max(np.max(np.abs(qp.H @ x)), np.max(np.abs(g)),
                           np.max(np.abs(C.T @ y)), 1.0)
            best = (x.copy(), y.copy(), prim, dual)
            ok_prim = prim <= tol * prim_ref + tol
            ok_dual = dual <= tol * dual_ref + tol
            near = prim <= 1e-1 * prim_ref and dual <= 1e-3 * dual_ref
            if ok_prim and ok_dual:
                status = "solved"
                iters = k
                break
            if polish and near and k - last_polish >= 20:
                last_polish = k
                polished = _polish(qp, C, l, u, x, y, tol)
                if polished is not None:
                    x, y = polished
                    cx = C @ x
                    prim = float(np.max(np.abs(np.clip(cx, l, u) - cx)))
                    dual = float(np.max(np.abs(qp.H @ x + g + C.T @ y)))
                    best = (x.copy(), y.copy(), prim, dual)
                    status = "solved"
                    iters = k
                    break

    x, y, prim, dual = best
    return QpResult(x=x, status=status, iterations=iters, prim_res=prim,
                    dual_res=dual, fp_residuals=np.asarray(fp_hist), duals=y)


def _polish(qp: BoxQp, C, l, u, x, y, tol, rounds: int = 3):
    """Equality re-solve on a dual-guessed active set, with a few repair
    rounds (drop wrong-signed actives, add violated rows). Accepts only a
    feasible point with clean stationarity and multiplier signs; anything
    else returns None and the splitting iteration simply continues."""
    cx = C @ x
    eps_y = 1e-8 + 1e-4 * float(np.max(np.abs(y), initial=0.0))
    band = l == u
    act_lo = ((y < -eps_y) | (np.abs(cx - l) < 1e-4 * (1 + np.abs(l)))) \
        & np.isfinite(l) & ~band
    act_hi = ((y > eps_y) | (np.abs(cx - u) < 1e-4 * (1 + np.abs(u)))) \
        & np.isfinite(u) & ~band
    act_lo &= ~act_hi
    nvar = qp.nvar
    scale = max(1.0, float(np.max(np.abs(qp.g), initial=0.0)))
    sign_tol = tol * scale
    for _ in range(rounds):
        fixed = act_lo | act_hi | band
        ys = np.zeros(C.shape[0])
        if np.any(fixed):
            A = C[fixed]
            b = np.where(band[fixed], l[fixed],
                         np.where(act_hi[fixed], u[fixed], l[fixed]))
            nact = A.shape[0]
            kkt = np.zeros((nvar + nact, nvar + nact))
            kkt[:nvar, :nvar] = qp.H
            kkt[:nvar, nvar:] = A.T
            kkt[nvar:, :nvar] = A
            rhs = np.concatenate([-qp.g, b])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                try:
                    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
                except np.linalg.LinAlgError:
                    return None
            xs = sol[:nvar]
            ys[fixed] = sol[nvar:]
        else:
            try:
                xs = np.linalg.solve(qp.H, -qp.g)
            except np.linalg.LinAlgError:
                return None
        cxs = C @ xs
        lo_viol = (cxs < l - tol * (1 + np.abs(np.where(np.isfinite(l), l, 0.0)))) \
            & np.isfinite(l) & ~act_lo & ~band
        hi_viol = (cxs > u + tol * (1 + np.abs(np.where(np.isfinite(u), u, 0.0)))) \
            & np.isfinite(u) & ~act_hi & ~band
        bad_hi = act_hi & (ys < -sign_tol)
        bad_lo = act_lo & (ys > sign_tol)
        if not (np.any(lo_viol) or np.any(hi_viol) or np.any(bad_hi)
                or np.any(bad_lo)):
            kkt_res = np.max(np.abs(qp.H @ xs + qp.g + C.T @ ys))
            if np.isfinite(kkt_res) and kkt_res <= tol * scale:
                return xs, ys
            return None
        act_hi = (act_hi & ~bad_hi) | hi_viol
        act_lo = (act_lo & ~bad_lo) | lo_viol
        act_lo &= ~act_hi
    return None
