"""Small dense numerical kernels: convex QP, Lyapunov equation, prioritized least squares.

Everything here works on plain numpy arrays and keeps no state between calls.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

FEAS_TOL = 1e-9
KKT_TOL = 1e-6


class QPError(Exception):
    pass


class Infeasible(QPError):
    pass


class Unbounded(QPError):
    pass


class MaxIterations(QPError):
    pass


class NotHurwitz(ValueError):
    pass


def _as2d(A, d):
    if A is None:
        return np.zeros((0, d))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((0, d))
    return A


def _as1d(b, m):
    if b is None:
        return np.zeros(m)
    return np.atleast_1d(np.asarray(b, dtype=float)).reshape(-1)


@dataclass
class QuadraticProgram:
    """min ½xᵀHx + gᵀx  s.t.  Aeq x = beq,  Ain x ≤ bin."""

    H: np.ndarray
    g: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        d = self.H.shape[0]
        if self.H.shape != (d, d):
            raise ValueError("H must be square")
        if not np.allclose(self.H, self.H.T, atol=1e-10 * (1.0 + np.abs(self.H).max())):
            raise ValueError("H must be symmetric")
        self.H = 0.5 * (self.H + self.H.T)
        self.g = _as1d(self.g, d)
        self.Aeq = _as2d(self.Aeq, d)
        self.beq = _as1d(self.beq, self.Aeq.shape[0])
        self.Ain = _as2d(self.Ain, d)
        self.bin = _as1d(self.bin, self.Ain.shape[0])
        if self.g.shape != (d,):
            raise ValueError("g has wrong length")
        for A, b, tag in ((self.Aeq, self.beq, "eq"), (self.Ain, self.bin, "in")):
            if A.shape[1] != d or b.shape != (A.shape[0],):
                raise ValueError(f"inconsistent {tag} constraint dimensions")

    @property
    def dim(self) -> int:
        return self.H.shape[0]


@dataclass
class QPResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    active: list
    iterations: int
    stationarity: float = 0.0
    primal: float = 0.0
    dual: float = 0.0
    complementarity: float = 0.0

    @property
    def objective_parts(self):
        return self.stationarity, self.primal, self.dual, self.complementarity


def kkt_residuals(qp: QuadraticProgram, x, lam_eq, lam_in):
    """Stationarity, primal infeasibility, dual infeasibility, complementarity (all ∞-norms)."""
    grad = qp.H @ x + qp.g + qp.Aeq.T @ lam_eq + qp.Ain.T @ lam_in
    stat = float(np.abs(grad).max()) if grad.size else 0.0
    prim = 0.0
    if qp.Aeq.shape[0]:
        prim = max(prim, float(np.abs(qp.Aeq @ x - qp.beq).max()))
    slack = qp.Ain @ x - qp.bin
    if slack.size:
        prim = max(prim, float(max(slack.max(), 0.0)))
    dual = float(max(-lam_in.min(), 0.0)) if lam_in.size else 0.0
    comp = float(np.abs(lam_in * slack).max()) if lam_in.size else 0.0
    return stat, prim, dual, comp


def _nullspace(A, d, rtol=1e-10):
    if A.shape[0] == 0:
        return np.eye(d)
    u, s, vt = np.linalg.svd(A, full_matrices=True)
    tol = rtol * max(1.0, s[0] if s.size else 0.0)
    rank = int((s > tol).sum())
    return vt[rank:].T


def _independent_rows(A, b, rtol=1e-10):
    """Row-reduce a consistent equality system; raise Infeasible if inconsistent."""
    if A.shape[0] == 0:
        return A, b
    u, s, vt = np.linalg.svd(A, full_matrices=False)
    tol = rtol * max(1.0, s[0])
    rank = int((s > tol).sum())
    x_ls = vt[:rank].T @ ((u[:, :rank].T @ b) / s[:rank])
    res = np.abs(A @ x_ls - b).max()
    if res > 1e-8 * (1.0 + np.abs(b).max()):
        raise Infeasible(f"equality constraints inconsistent (residual {res:.3e})")
    # rotated equivalent system with full row rank
    return s[:rank, None] * vt[:rank], u[:, :rank].T @ b


def _active_set(H, g, E, e, C, c, x, W, max_iter, tol=FEAS_TOL):
    """Primal active-set core. x must be feasible; W a list of active inequality rows.

    Returns x, W, multipliers (eq, in over W), iterations.
    Raises Unbounded / MaxIterations.
    """
    d = x.size
    W = list(W)
    at_min = False   # a full unblocked step lands on the working-set minimizer
    for it in range(1, max_iter + 1):
        AW = np.vstack([E, C[W]]) if W else E
        grad = H @ x + g
        Z = _nullspace(AW, d)
        p = np.zeros(d)
        descent_ray = False
        if Z.shape[1] and not at_min:
            rg = Z.T @ grad
            Hr = Z.T @ H @ Z
            w, V = np.linalg.eigh(Hr)
            wtol = 1e-12 * max(1.0, np.abs(w).max())
            pos = w > wtol
            coef = V.T @ rg
            if np.any(~pos) and np.abs(coef[~pos]).max() > 1e-12 * (1.0 + np.abs(grad).max()):
                p = -Z @ (V[:, ~pos] @ coef[~pos])
                descent_ray = True
            else:
                p = -Z @ (V[:, pos] @ (coef[pos] / w[pos]))
        pnorm = np.abs(p).max()
        if pnorm <= 1e-13 * (1.0 + np.abs(x).max()):
            if AW.shape[0]:
                lam, *_ = np.linalg.lstsq(AW.T, -grad, rcond=None)
            else:
                lam = np.zeros(0)
            lam_W = lam[E.shape[0]:]
            if lam_W.size == 0 or lam_W.min() >= -1e-10 * (1.0 + np.abs(lam_W).max()):
                return x, W, lam[: E.shape[0]], lam_W, it
            W.pop(int(np.argmin(lam_W)))
            at_min = False
            continue
        # ratio test over inactive inequalities
        step = np.inf if descent_ray else 1.0
        block = -1
        if C.shape[0]:
            Cp = C @ p
            inactive = np.ones(C.shape[0], dtype=bool)
            inactive[W] = False
            cand = np.where(inactive & (Cp > 1e-14 * (1.0 + np.abs(C).max() * pnorm)))[0]
            if cand.size:
                ratios = (c[cand] - C[cand] @ x) / Cp[cand]
                ratios = np.maximum(ratios, 0.0)
                j = int(np.argmin(ratios))
                if ratios[j] < step:
                    step = ratios[j]
                    block = int(cand[j])
        if not np.isfinite(step):
            raise Unbounded("objective decreases without bound along a feasible ray")
        x = x + step * p
        if block >= 0:
            W.append(block)
        else:
            at_min = not descent_ray
    raise MaxIterations(f"active-set did not converge in {max_iter} iterations")


def _phase_one(E, e, C, c, x0, max_iter):
    """Feasible point via min 1ᵀs  s.t.  Ex = e, Cx - s ≤ c, s ≥ 0."""
    d, m = x0.size, C.shape[0]
    s0 = np.maximum(C @ x0 - c, 0.0)
    H = np.zeros((d + m, d + m))
    g = np.concatenate([np.zeros(d), np.ones(m)])
    E1 = np.hstack([E, np.zeros((E.shape[0], m))])
    C1 = np.vstack([np.hstack([C, -np.eye(m)]), np.hstack([np.zeros((m, d)), -np.eye(m)])])
    c1 = np.concatenate([c, np.zeros(m)])
    z0 = np.concatenate([x0, s0])
    W0 = [m + i for i in range(m) if s0[i] <= 0.0]
    # drop rows of W0 dependent on E1 (never happens: s-bounds are independent of x-equalities)
    z, *_ = _active_set(H, g, E1, e, C1, c1, z0, W0, max_iter)
    x, s = z[:d], z[d:]
    viol = max(float((C @ x - c).max(initial=0.0)), 0.0)
    # roundoff in Cx grows with the size of its terms, not with c
    scale = 1.0 + np.abs(c).max(initial=0.0) + (np.abs(C) @ np.abs(x)).max(initial=0.0)
    if viol > 1e-7 * scale:
        raise Infeasible(f"no point satisfies the inequality constraints (violation {viol:.3e})")
    return x


def solve_qp(qp: QuadraticProgram, x0=None, working_set=None, max_iter=500) -> QPResult:
    """Primal active-set solve of a convex QP (H positive semidefinite).

    ``x0`` / ``working_set`` hot-start the solver; both are optional and only
    used when they are consistent with the constraints.
    """
    d = qp.dim
    E, e = _independent_rows(qp.Aeq, qp.beq)
    C, c = qp.Ain, qp.bin
    scale_c = 1.0 + (np.abs(c).max() if c.size else 0.0)

    def feasible(x):
        ok = True
        if E.shape[0]:
            ok = np.abs(E @ x - e).max() <= 1e-9 * (1.0 + np.abs(e).max())
        if ok and C.shape[0]:
            ok = (C @ x - c).max() <= FEAS_TOL * scale_c
        return ok

    x_start, W = None, []
    # hot start: equality-constrained minimizer on the guessed working set
    if working_set:
        W_try = sorted({int(i) for i in working_set if 0 <= int(i) < C.shape[0]})
        try:
            AW = np.vstack([E, C[W_try]])
            bW = np.concatenate([e, c[W_try]])
            AWr, bWr = _independent_rows(AW, bW)
            xg = _eqp_point(qp.H, qp.g, AWr, bWr)
            if xg is not None and feasible(xg):
                x_start = xg
                W = _prune_dependent(E, C, W_try)
        except (Infeasible, np.linalg.LinAlgError):
            pass
    if x_start is None and x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape == (d,) and feasible(x0):
            x_start = x0.copy()
            W = _tight_rows(E, C, c, x_start)
    if x_start is None:
        xg = _eqp_point(qp.H, qp.g, E, e)
        if xg is not None and feasible(xg):
            x_start = xg
        else:
            x_ls = np.linalg.lstsq(E, e, rcond=None)[0] if E.shape[0] else np.zeros(d)
            if xg is not None:
                x_ls = xg
            x_start = _phase_one(E, e, C, c, x_ls, max_iter) if C.shape[0] else x_ls
            W = _tight_rows(E, C, c, x_start)
    x, W, lam_e_red, lam_W, iters = _active_set(qp.H, qp.g, E, e, C, c, x_start, W, max_iter)
    # multipliers w.r.t. the original (unreduced) equality rows
    lam_in = np.zeros(C.shape[0])
    if W:
        lam_in[W] = np.maximum(lam_W, 0.0)
    lam_eq = np.zeros(qp.Aeq.shape[0])
    if qp.Aeq.shape[0]:
        rhs = -(qp.H @ x + qp.g + C.T @ lam_in)
        lam_eq = np.linalg.lstsq(qp.Aeq.T, rhs, rcond=None)[0]
    res = QPResult(x=x, lam_eq=lam_eq, lam_in=lam_in, active=sorted(W), iterations=iters)
    res.stationarity, res.primal, res.dual, res.complementarity = kkt_residuals(qp, x, lam_eq, lam_in)
    return res


def _eqp_point(H, g, A, b):
    """Minimizer of ½xᵀHx+gᵀx on {Ax=b}; None when unbounded there."""
    d = H.shape[0]
    if A.shape[0]:
        xp = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        xp = np.zeros(d)
    Z = _nullspace(A, d)
    if Z.shape[1] == 0:
        return xp
    Hr = Z.T @ H @ Z
    rg = Z.T @ (H @ xp + g)
    w, V = np.linalg.eigh(Hr)
    wtol = 1e-12 * max(1.0, np.abs(w).max())
    pos = w > wtol
    coef = V.T @ rg
    if np.any(~pos) and np.abs(coef[~pos]).max() > 1e-12 * (1.0 + np.abs(rg).max()):
        return None
    return xp - Z @ (V[:, pos] @ (coef[pos] / w[pos]))


def _tight_rows(E, C, c, x):
    if C.shape[0] == 0:
        return []
    tight = np.where(np.abs(C @ x - c) <= FEAS_TOL * (1.0 + np.abs(c).max()))[0]
    return _prune_dependent(E, C, list(tight))


def _prune_dependent(E, C, rows):
    keep = []
    base = E
    r0 = np.linalg.matrix_rank(base) if base.shape[0] else 0
    for i in rows:
        trial = np.vstack([base, C[i]])
        r1 = np.linalg.matrix_rank(trial, tol=1e-10 * max(1.0, np.abs(trial).max()))
        if r1 > r0:
            keep.append(i)
            base, r0 = trial, r1
    return keep


class EqQpFactor:
    """One sparse KKT factorization of min ½xᵀHx + gᵀx s.t. Ax = b, reusable across right-hand sides.

    ``reg`` puts a small negative diagonal on the dual block so redundant
    constraint rows do not make the system singular; iterative refinement
    against the unregularized matrix removes the resulting O(reg·λ) bias.
    """

    def __init__(self, H, A, reg=1e-10, perm=None):
        H = sp.csc_matrix(H)
        A = sp.csc_matrix(A)
        self.n, self.m = H.shape[0], A.shape[0]
        K = sp.bmat([[H, A.T], [A, -reg * sp.identity(self.m)]], format="csc")
        self.K0 = sp.bmat([[H, A.T], [A, None]], format="csc") if self.m else K
        # ``perm`` orders the unknowns (primal then dual) into a banded, stage-wise layout
        self.perm = None if perm is None else np.asarray(perm, dtype=np.int64)
        if self.perm is None:
            self.lu = spla.splu(K)
        else:
            self.lu = spla.splu(K[self.perm][:, self.perm].tocsc(), permc_spec="NATURAL")

    def _lu_solve(self, rhs):
        if self.perm is None:
            return self.lu.solve(rhs)
        out = np.empty_like(rhs)
        out[self.perm] = self.lu.solve(rhs[self.perm])
        return out

    def solve(self, g, b):
        rhs = np.concatenate([-np.asarray(g, float), np.asarray(b, float)])
        sol = self._lu_solve(rhs)
        for _ in range(3):
            res = rhs - self.K0 @ sol
            if np.abs(res).max() <= 1e-13 * (1.0 + np.abs(rhs).max()):
                break
            sol = sol + self._lu_solve(res)
        return sol[:self.n], sol[self.n:]


def solve_eq_qp_sparse(H, g, A, b, reg=1e-10):
    """Equality-constrained QP through one sparse KKT factorization (large banded MPC subproblems)."""
    return EqQpFactor(H, A, reg).solve(g, b)


def solve_lyapunov(A) -> np.ndarray:
    """P with AᵀP + PA = -I by Kronecker vectorization (A Hurwitz)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("A must be square")
    eig = np.linalg.eigvals(A)
    if np.any(eig.real >= 0.0):
        raise NotHurwitz(f"A has eigenvalue with nonnegative real part: {eig[eig.real >= 0][0]}")
    I = np.eye(n)
    # column-major vec: vec(AᵀP) = (I⊗Aᵀ)vec(P), vec(PA) = (Aᵀ⊗I)vec(P)
    K = np.kron(I, A.T) + np.kron(A.T, I)
    p = np.linalg.solve(K, -I.reshape(-1, order="F"))
    P = p.reshape(n, n, order="F")
    return 0.5 * (P + P.T)


# ---------------------------------------------------------------------------
# prioritized least squares

@dataclass
class TaskLevel:
    """One priority level: equality tasks A x ≈ b (least squares), inequalities C x ≤ d (hard)."""

    A: np.ndarray | None = None
    b: np.ndarray | None = None
    C: np.ndarray | None = None
    d: np.ndarray | None = None
    name: str = ""


@dataclass
class TaskStack:
    dim: int
    levels: list = field(default_factory=list)

    def add(self, A=None, b=None, C=None, d=None, name=""):
        self.levels.append(TaskLevel(A, b, C, d, name))
        return self


@dataclass
class HierarchicalResult:
    x: np.ndarray
    residuals: list
    working_sets: list


def solve_hierarchical(stack: TaskStack, reg=1e-10, level1_tol=1e-6, warm=None) -> HierarchicalResult:
    """Strict-priority solve.

    Each level minimizes its equality residual over the optimal set of all higher
    levels.  That set is represented exactly by freezing the achieved task value
    A_k x (unique for a least-squares objective) through a nullspace
    parametrization x = x_k + Z z; inequalities of every level seen so far stay hard.
    """
    if not stack.levels:
        raise ValueError("task stack needs at least one level")
    d = stack.dim
    x = np.zeros(d)
    Z = np.eye(d)
    C_acc = np.zeros((0, d))
    d_acc = np.zeros(0)
    residuals, wsets = [], []
    for k, lvl in enumerate(stack.levels):
        A = _as2d(lvl.A, d)
        b = _as1d(lvl.b, A.shape[0])
        C = _as2d(lvl.C, d)
        dd = _as1d(lvl.d, C.shape[0])
        if A.shape[1] != d or C.shape[1] != d:
            raise ValueError(f"level {k} has wrong decision dimension")
        C_acc = np.vstack([C_acc, C])
        d_acc = np.concatenate([d_acc, dd])
        nz = Z.shape[1]
        if nz == 0:
            residuals.append(_level_residual(A, b, x))
            wsets.append([])
            continue
        AZ = A @ Z
        r0 = b - A @ x
        H = AZ.T @ AZ
        H = H + reg * max(1.0, np.trace(H) / max(nz, 1)) * np.eye(nz)
        qp = QuadraticProgram(H, -AZ.T @ r0, Ain=C_acc @ Z, bin=d_acc - C_acc @ x)
        ws = warm[k] if warm is not None and k < len(warm) else None
        try:
            sol = solve_qp(qp, working_set=ws)
        except Infeasible as exc:
            raise Infeasible(f"level {k + 1} ({lvl.name}) infeasible: {exc}") from exc
        x = x + Z @ sol.x
        wsets.append(sol.active)
        res = _level_residual(A, b, x)
        if k == 0 and A.shape[0] and res > level1_tol * (1.0 + np.abs(b).max()):
            raise Infeasible(f"level 1 ({lvl.name}) tasks cannot be met (residual {res:.3e})")
        residuals.append(res)
        if A.shape[0]:
            Z = Z @ _nullspace(AZ, nz, rtol=1e-9)
    return HierarchicalResult(x=x, residuals=residuals, working_sets=wsets)


def _level_residual(A, b, x):
    if A.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm(A @ x - b))
