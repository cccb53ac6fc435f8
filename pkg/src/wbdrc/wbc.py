"""Disturbance-rejecting whole-body control: desired wrench, GRF redistribution,
prioritized whole-body QP and the joint-level PD law."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numsolve import Infeasible, QuadraticProgram, TaskStack, solve_hierarchical, solve_qp

MU = 0.7


class ControllerFault(RuntimeError):
    """Raised when the controller cannot produce a command for too long."""


def friction_pyramid(nc: int, cdim: int, mu: float = MU) -> np.ndarray:
    """C_f with C_f F ≤ 0: four edges |F_t| ≤ μF_z per tangent plus F_z ≥ 0 (planar: two edges)."""
    if cdim == 3:
        block = np.array([[1.0, 0.0, -mu], [-1.0, 0.0, -mu], [0.0, 1.0, -mu], [0.0, -1.0, -mu], [0.0, 0.0, -1.0]])
    elif cdim == 2:
        block = np.array([[1.0, -mu], [-1.0, -mu], [0.0, -1.0]])
    else:
        raise ValueError("contact dimension must be 2 or 3")
    return np.kron(np.eye(nc), block)


def desired_wrench(f_filter, F_ref, tau_ref, J_ref, S) -> np.ndarray:
    """W*_d = f̂_filter + J(q_ref)ᵀF_ref + Sᵀτ_ref."""
    W = np.array(f_filter, dtype=float) + S.T @ np.asarray(tau_ref, float)
    if J_ref.size:
        W += J_ref.T @ np.asarray(F_ref, float)
    return W


@dataclass
class Redistribution:
    F_r: np.ndarray
    tau_r: np.ndarray
    f_w: np.ndarray
    wrench_residual: float


def redistribute_grf(W, F_ref, f_filter, J_ref, S, Q1, Q2, mu: float = MU, cdim: int = 3) -> Redistribution:
    """min ½‖F_r − F_ref‖²_Q₁ + ½‖J(q_ref)ᵀF_r + Sᵀτ_r − W*_d‖²_Q₂  s.t. C_f F_r ≤ 0.

    Returns F*_r, τ*_r and f̂ʷ_filter = f̂_filter − J(q_ref)ᵀ(F*_r − F_ref).
    """
    m = J_ref.shape[0]
    n = S.shape[0]
    F_ref = np.asarray(F_ref, float)
    Q1 = np.atleast_2d(Q1) if np.ndim(Q1) == 2 else float(Q1) * np.eye(m)
    Q2 = np.atleast_2d(Q2) if np.ndim(Q2) == 2 else float(Q2) * np.eye(S.shape[1])
    M = np.hstack([J_ref.T, S.T])
    H = M.T @ Q2 @ M
    H[:m, :m] += Q1
    g = -M.T @ Q2 @ W
    g[:m] -= Q1 @ F_ref
    Cf = friction_pyramid(m // cdim, cdim, mu) if m else np.zeros((0, 0))
    Ain = np.hstack([Cf, np.zeros((Cf.shape[0], n))])
    sol = solve_qp(QuadraticProgram(H, g, Ain=Ain, bin=np.zeros(Ain.shape[0])))
    F_r, tau_r = sol.x[:m], sol.x[m:]
    f_w = np.asarray(f_filter, float) - J_ref.T @ (F_r - F_ref)
    return Redistribution(F_r, tau_r, f_w, float(np.linalg.norm(M @ sol.x - W)))


@dataclass
class WbcSolution:
    qdd: np.ndarray
    F: np.ndarray          # stance-contact forces (swing contacts carry exactly zero)
    tau: np.ndarray
    residuals: list = field(default_factory=list)
    working_sets: list = field(default_factory=list)


def solve_wbc(D, bias, J, Jdqd, S, qdd_ref, F_r, f_w, torque_limit, mu: float = MU, cdim: int = 3,
              warm=None) -> WbcSolution:
    """Three-level prioritized whole-body QP with decision x = [q̈_d; F_d(stance)].

    τ_d is eliminated through the actuated rows of the dynamics, so the
    unactuated rows remain as the level-1 equality and torque limits become
    inequalities on x.  Swing forces are not decision variables, hence zero.
    Dynamics terms must be evaluated at the measured state.
    """
    nq = D.shape[0]
    n, nb = S.shape[0], nq - S.shape[0]
    m = J.shape[0]
    dim = nq + m
    # generalized force balance  D q̈ − JᵀF = −bias + f_w  (+ Sᵀτ)
    Adyn = np.hstack([D, -J.T]) if m else D.copy()
    rhs = -bias + f_w
    tau_map = Adyn[nb:]            # τ = tau_map x − rhs[nb:]
    lim = np.broadcast_to(np.asarray(torque_limit, float), (n,))
    stack = TaskStack(dim)
    C1 = [tau_map, -tau_map]
    d1 = [lim + rhs[nb:], lim - rhs[nb:]]
    if m:
        Cf = friction_pyramid(m // cdim, cdim, mu)
        C1.append(np.hstack([np.zeros((Cf.shape[0], nq)), Cf]))
        d1.append(np.zeros(Cf.shape[0]))
    stack.add(A=Adyn[:nb], b=rhs[:nb], C=np.vstack(C1), d=np.concatenate(d1), name="dynamics")
    stack.add(A=np.hstack([np.eye(nq), np.zeros((nq, m))]), b=np.asarray(qdd_ref, float), name="acceleration")
    if m:
        A3 = np.vstack([np.hstack([J, np.zeros((m, m))]), np.hstack([np.zeros((m, nq)), np.eye(m)])])
        stack.add(A=A3, b=np.concatenate([-Jdqd, F_r]), name="contacts")
    res = solve_hierarchical(stack, warm=warm)
    x = res.x
    tau = tau_map @ x - rhs[nb:]
    return WbcSolution(x[:nq], x[nq:], tau, res.residuals, res.working_sets)


def joint_torque_command(tau_d, q_ref, qd_ref, q, qd, Kp, Kd, torque_limit=np.inf) -> np.ndarray:
    """u_d = τ*_d + K_p(q_ref − q) + K_d(q̇_ref − q̇), clamped to the torque limits."""
    e = np.asarray(q_ref, float) - q
    ed = np.asarray(qd_ref, float) - qd
    if np.ndim(Kp) == 2:
        u = np.asarray(tau_d, float) + Kp @ e + Kd @ ed
    else:
        u = np.asarray(tau_d, float) + np.asarray(Kp) * e + np.asarray(Kd) * ed
    return np.clip(u, -np.asarray(torque_limit), np.asarray(torque_limit))


@dataclass
class TickOutput:
    u: np.ndarray
    W: np.ndarray
    redistribution: Redistribution
    solution: WbcSolution | None
    fault: bool = False


class WholeBodyController:
    """Per-tick low-level controller.  ``use_estimate=False`` gives the standard WBC:
    the identical code path with the disturbance estimate replaced by zero."""

    def __init__(self, model, Q1=100.0, Q2=1.0, Kp=0.0, Kd=3.0, torque_limit=None, mu: float = MU,
                 use_estimate: bool = True, max_fault_ticks: int = 10):
        self.model = model
        self.Q1, self.Q2 = Q1, Q2
        self.Kp = np.broadcast_to(np.asarray(Kp, float), (model.n,)).copy()
        self.Kd = np.broadcast_to(np.asarray(Kd, float), (model.n,)).copy()
        self.torque_limit = model.torque_limit if torque_limit is None else float(torque_limit)
        self.mu = mu
        self.use_estimate = use_estimate
        self._held = None
        self._fault_ticks = 0
        self.max_fault_ticks = max_fault_ticks
        self.fault_count = 0
        self._warm = {}

    def tick(self, terms, q, qd, ref, stance, J_ref, f_filter) -> TickOutput:
        """``terms`` at the measured state for the stance contacts; ``ref`` a reference sample
        whose force vector is already restricted to the stance contacts."""
        model = self.model
        nb = model.nb
        f = np.asarray(f_filter, float) if self.use_estimate else np.zeros(model.nq)
        W = desired_wrench(f, ref.F, ref.tau, J_ref, model.S)
        red = redistribute_grf(W, ref.F, f, J_ref, model.S, self.Q1, self.Q2, self.mu, model.cdim)
        key = tuple(stance)
        try:
            sol = solve_wbc(terms.D, terms.bias, terms.J, terms.Jdqd, model.S, ref.qdd, red.F_r, red.f_w,
                            self.torque_limit, self.mu, model.cdim, warm=self._warm.get(key))
        except Infeasible:
            self._fault_ticks += 1
            self.fault_count += 1
            if self._fault_ticks > self.max_fault_ticks:
                raise ControllerFault(f"whole-body QP infeasible for {self._fault_ticks} consecutive ticks")
            u = self._held if (self._held is not None and self._fault_ticks == 1) else np.zeros(model.n)
            self._held = u
            return TickOutput(u, W, red, None, fault=True)
        self._warm[key] = sol.working_sets
        self._fault_ticks = 0
        u = joint_torque_command(sol.tau, ref.q[nb:], ref.qd[nb:], q[nb:], qd[nb:], self.Kp, self.Kd,
                                 self.torque_limit)
        self._held = u
        return TickOutput(u, W, red, sol)
