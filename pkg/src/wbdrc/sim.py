"""Ground-truth simulator: full rigid-body dynamics with schedule-driven pinned contacts
and injectable disturbances (payload, external base wrench, actuator torque scaling)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model.robot import RobotModel, UnknownLink

log = logging.getLogger(__name__)

GROUND_HEIGHT = 0.0   # flat terrain; stance contacts are anchored on this plane


class SingularKKT(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Payload:
    mass: float
    link: str
    start: float = 0.0


@dataclass(frozen=True)
class ExternalWrench:
    """World-frame [force (N); torque (N·m)] acting at the base origin during [start, stop)."""

    wrench: tuple
    start: float = 0.0
    stop: float = float("inf")

    def active(self, t: float) -> bool:
        return self.start <= t < self.stop


@dataclass(frozen=True)
class TorqueScale:
    """Multiplicative actuator factors (joint name → factor in [0, 1]) during [start, stop)."""

    factors: dict
    start: float = 0.0
    stop: float = float("inf")

    def __post_init__(self):
        for k, v in self.factors.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"torque scale for {k} must lie in [0, 1]")

    def active(self, t: float) -> bool:
        return self.start <= t < self.stop


@dataclass(frozen=True)
class DisturbanceSpec:
    payloads: tuple = ()
    wrenches: tuple = ()
    torque_scales: tuple = ()

    @property
    def empty(self) -> bool:
        return not (self.payloads or self.wrenches or self.torque_scales)


def apply_payload(model: RobotModel, payload: Payload) -> RobotModel:
    """Model with the payload as a point mass at the attachment link's COM."""
    if payload.link not in model.link_names:
        raise UnknownLink(payload.link)
    return model.with_point_mass(payload.link, payload.mass)


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray
    t: float = 0.0
    F: np.ndarray | None = None         # contact forces, all contacts (cdim each), zero in swing
    qdd: np.ndarray | None = None
    anchors: dict = field(default_factory=dict)   # contact index → pinned world position

    def copy(self):
        return SimState(self.q.copy(), self.qd.copy(), self.t, None if self.F is None else self.F.copy(),
                        None if self.qdd is None else self.qdd.copy(), dict(self.anchors))


def contact_dynamics(D, rhs, J, Jdqd, pos_err, vel, omega):
    """Accelerations and forces for D q̈ = rhs + JᵀF with Baumgarte-stabilized
    J q̈ + J̇q̇ = −2ω ṗ − ω² p_err.  Rank-deficient contact sets use the pseudo-inverse
    (minimum-norm forces)."""
    if J.shape[0] == 0:
        return np.linalg.solve(D, rhs), np.zeros(0), True
    L = np.linalg.cholesky(D)
    Dinv_rhs = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    Dinv_JT = np.linalg.solve(L.T, np.linalg.solve(L, J.T))
    K = J @ Dinv_JT
    target = -Jdqd - 2.0 * omega * vel - omega * omega * pos_err
    s = np.linalg.svd(K, compute_uv=False)
    full_rank = s[-1] > 1e-10 * s[0]
    if full_rank:
        F = np.linalg.solve(K, target - J @ Dinv_rhs)
    else:
        F = np.linalg.pinv(K, rcond=1e-10) @ (target - J @ Dinv_rhs)
    return Dinv_rhs + Dinv_JT @ F, F, full_rank


class Simulator:
    """Semi-implicit Euler integration of D q̈ + C q̇ + G = Sᵀ(s∘u) + JᵀF + Q_ext.

    Stance contacts follow the schedule and are pinned on the flat ground plane below
    the point where they touched down; at touchdown the velocity is projected onto the constraint
    (perfectly plastic impact).
    """

    def __init__(self, model: RobotModel, schedule, disturbance: DisturbanceSpec | None = None,
                 dt: float = 1e-3, substeps: int = 4, baumgarte: float = 100.0):
        self.nominal = model
        self.schedule = schedule
        self.disturbance = disturbance or DisturbanceSpec()
        self.dt = dt
        self.substeps = substeps
        self.omega = baumgarte
        self._models = {}
        self.unilateral_violations = 0
        self.rank_warnings = 0
        self._scale_idx = [
            (ts, np.array([model.actuated_index(k) for k in ts.factors]), np.array(list(ts.factors.values()), float))
            for ts in self.disturbance.torque_scales]
        self.state: SimState | None = None

    # ------------------------------------------------------------------ disturbances
    def model_at(self, t: float) -> RobotModel:
        active = tuple(p for p in self.disturbance.payloads if t >= p.start)
        m = self._models.get(active)
        if m is None:
            m = self.nominal
            for p in active:
                m = apply_payload(m, p)
            self._models[active] = m
        return m

    def torque_scale(self, t: float) -> np.ndarray:
        s = np.ones(self.nominal.n)
        for ts, idx, f in self._scale_idx:
            if ts.active(t):
                s[idx] *= f
        return s

    def external_force(self, model: RobotModel, q, t: float) -> np.ndarray:
        Q = np.zeros(model.nq)
        for w in self.disturbance.wrenches:
            if w.active(t):
                wr = np.asarray(w.wrench, float)
                Jw = model.wrench_jacobian(q)
                spatial = np.concatenate([wr[3:][model.ang_axes], wr[:3][model.lin_axes]])
                Q += Jw.T @ spatial
        return Q

    # ------------------------------------------------------------------ stepping
    def reset(self, q, qd=None, t: float = 0.0) -> SimState:
        q = np.array(q, dtype=float)
        qd = np.zeros_like(q) if qd is None else np.array(qd, dtype=float)
        self.state = SimState(q, qd, t, np.zeros(self.nominal.cdim * len(self.nominal.contacts)))
        self._update_contacts(self.state, project=False)
        return self.state

    def stance_contacts(self, t: float) -> np.ndarray:
        return self.nominal.leg_contacts(self.schedule.contact_state(t))

    def _update_contacts(self, st: SimState, project=True):
        model = self.model_at(st.t)
        stance = self.stance_contacts(st.t)
        new = [i for i in stance if i not in st.anchors]
        for i in list(st.anchors):
            if i not in stance:
                del st.anchors[i]
        if new:
            P = model.contact_positions(st.q, new)
            for i, p in zip(new, P):
                anchor = p.copy()
                anchor[2] = GROUND_HEIGHT
                st.anchors[int(i)] = anchor
            if project:
                terms = model.evaluate(st.q, st.qd, stance)
                J = terms.J
                v = J @ st.qd
                if np.abs(v).max() > 0:
                    Dinv_JT = np.linalg.solve(terms.D, J.T)
                    lam = np.linalg.pinv(J @ Dinv_JT, rcond=1e-10) @ v
                    st.qd = st.qd - Dinv_JT @ lam
        return stance

    def step(self, u) -> SimState:
        st = self.state.copy()
        u = np.asarray(u, dtype=float)
        h = self.dt / self.substeps
        model_nom = self.nominal
        cd = model_nom.cdim
        for k in range(self.substeps):
            stance = self._update_contacts(st)
            model = self.model_at(st.t)
            terms = model.evaluate(st.q, st.qd, stance)
            tau = self.torque_scale(st.t) * u
            rhs = model.S.T @ tau - terms.bias + self.external_force(model, st.q, st.t)
            if stance.size:
                anchors = np.array([st.anchors[int(i)] for i in stance])
                pos_err = (terms.P - anchors)[:, model.lin_axes].reshape(-1)
            else:
                pos_err = np.zeros(0)
            vel = terms.J @ st.qd
            qdd, F, full = contact_dynamics(terms.D, rhs, terms.J, terms.Jdqd, pos_err, vel, self.omega)
            if not full:
                self.rank_warnings += 1
                if self.rank_warnings == 1:
                    log.debug("contact Jacobian rank-deficient at t=%.4f; using minimum-norm forces", st.t)
            Ffull = np.zeros(cd * len(model_nom.contacts))
            for j, i in enumerate(stance):
                Ffull[cd * i:cd * i + cd] = F[cd * j:cd * j + cd]
                if F[cd * j + cd - 1] < 0:
                    self.unilateral_violations += 1
            if k == 0:
                st.F = Ffull
                st.qdd = qdd
            st.qd = st.qd + h * qdd
            st.q = st.q + h * st.qd
            st.t = st.t + h
        # keep the clock on the control grid
        st.t = round(self.state.t + self.dt, 12)
        self.state = st
        return st


def sim_step(model: RobotModel, state: SimState, u, schedule, disturbance: DisturbanceSpec | None = None,
             dt: float = 1e-3, substeps: int = 4) -> SimState:
    """Functional form of :meth:`Simulator.step` for one control tick."""
    sim = Simulator(model, schedule, disturbance, dt, substeps)
    sim.state = state.copy()
    if not sim.state.anchors:
        sim._update_contacts(sim.state, project=False)
    if sim.state.F is None:
        sim.state.F = np.zeros(model.cdim * len(model.contacts))
    return sim.step(u)
