"""Nonlinear centroidal MPC and whole-body reference reconstruction.

State x = [h; L; q] (momentum about the COM plus generalized position), input
u = [F (all contacts); q̇ʲ].  The horizon is transcribed with explicit-Euler
defects x_{i+1} − x_i − δt f(x_i, u_i) = 0 and solved by a Gauss-Newton SQP with
Levenberg-Marquardt damping.  The model is always the nominal one: nothing in
this module accepts a disturbance estimate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .gait import ContactSchedule, swing_height
from .model import kernels as K
from .model.robot import RobotModel, SingularBaseBlock
from .numsolve import EqQpFactor
from .wbc import friction_pyramid, MU

log = logging.getLogger(__name__)


class SqpDiverged(RuntimeError):
    pass


class SingularD11(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Command:
    """Desired planar velocity (world frame, m/s), yaw rate (rad/s) and base height (m)."""

    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    height: float | None = None


@dataclass
class MpcSettings:
    horizon: float = 1.0
    nodes: int = 30
    w_momentum: float = 10.0
    w_pose: float = 100.0
    w_input: float = 1e-3
    terminal_scale: float = 10.0
    w_friction: float = 1e2
    w_clearance: float = 1e4
    w_swing_joint: float = 1.0
    lift_height: float = 0.08
    mu: float = MU
    max_iter: int = 15
    constraint_tol: float = 1e-6
    rel_tol: float = 1e-3
    lm_init: float = 1e-6
    max_rejects: int = 12
    fd_step: float = 1e-7

    @property
    def dt(self) -> float:
        return self.horizon / (self.nodes - 1)


class CentroidalLayout:
    """Index bookkeeping shared by the dynamics and the transcription."""

    def __init__(self, model: RobotModel):
        self.model = model
        self.md = model.mdim
        self.nq = model.nq
        self.nb = model.nb
        self.n = model.n
        self.nc = len(model.contacts)
        self.cd = model.cdim
        self.nx = self.md + self.nq
        self.nF = self.cd * self.nc
        self.nu = self.nF + self.n
        self.mrows = model._mrows
        self.lin = model.lin_axes
        self.ang = model.ang_axes
        # velocity constraint per leg: single-point legs pin the point, multi-point feet pin the foot twist
        self.leg_kind, fb, fp = [], [], []
        for leg in model.leg_names:
            idx = model.legs[leg]
            if len(idx) == 1:
                self.leg_kind.append(("point", idx[0]))
            else:
                c = model.contacts[idx[0]]
                self.leg_kind.append(("twist", len(fb)))
                fb.append(model.body_of_link[c.link])
                fp.append(c.position)
        self.fbody = np.asarray(fb, dtype=np.int64)
        self.fpoint = np.asarray(fp, dtype=float).reshape(-1, 3)
        self.twist_rows = np.concatenate([self.ang, 3 + self.lin])
        self.gravity = model.gravity[self.lin] * model.total_mass
        self.ntrans = {"floating": 3, "planar": 2}.get(model.base_type, 0)

    def leg_rows(self, leg: int) -> int:
        kind, _ = self.leg_kind[leg]
        return self.cd if kind == "point" else self.md

    def batch(self, Q):
        m = self.model
        return K.centroidal_batch(np.ascontiguousarray(Q), m.parent, m.jtype, m.axis, m.Rtree, m.ptree,
                                  m.mass, m.com, m.inertia, m.cbody, m.cpoint, self.fbody, self.fpoint)


def _rates(lay: CentroidalLayout, A, C, P, Jp, Jf, hL, qdj, F):
    """Row-wise q̇, L̇, point velocities and foot twists for batched configurations and inputs.

    ``hL`` is (k, md), ``qdj`` is (k, n) and ``F`` is (k, nc, cd).
    """
    Am = A[:, lay.mrows, :]
    Ab, Aj = Am[:, :, :lay.nb], Am[:, :, lay.nb:]
    try:
        Abinv = np.linalg.inv(Ab)
    except np.linalg.LinAlgError as exc:
        raise SingularBaseBlock("centroidal base block is singular") from exc
    qdb = np.einsum("kij,kj->ki", Abinv, hL - np.einsum("kij,kj->ki", Aj, qdj))
    qd = np.concatenate([qdb, qdj], axis=1)
    F3 = np.zeros(F.shape[:2] + (3,))
    F3[:, :, lay.lin] = F
    Ldot = np.cross(P - C[:, None, :], F3).sum(axis=1)[:, lay.ang]
    vp = np.einsum("kij,kj->ki", Jp, qd)
    vf = np.einsum("kij,kj->ki", Jf, qd)
    return qd, Ldot, vp, vf, Abinv, Aj


def centroidal_derivative(model: RobotModel, x, u, contacts=None) -> np.ndarray:
    """ẋ = [Σf_i + m g; Σ(p_i − c)×f_i; q̇] with q̇ recovered from the momentum partition.

    Forces of contacts outside ``contacts`` (when given) are treated as zero.
    """
    lay = CentroidalLayout(model)
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    F = u[:lay.nF].copy()
    if contacts is not None:
        mask = np.zeros(lay.nc, bool)
        mask[model.contact_indices(contacts)] = True
        F.reshape(lay.nc, lay.cd)[~mask] = 0.0
    A, C, P, Jp, Jf = lay.batch(x[None, lay.md:])
    qd, Ldot, _, _, _, _ = _rates(lay, A, C, P, Jp, Jf, x[None, :lay.md], u[None, lay.nF:],
                                  F.reshape(1, lay.nc, lay.cd))
    hdot = F.reshape(lay.nc, lay.cd).sum(axis=0) + lay.gravity
    return np.concatenate([hdot, Ldot[0], qd[0]])


@dataclass
class RefSample:
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    F: np.ndarray
    tau: np.ndarray

    def restricted(self, model: RobotModel, stance) -> "RefSample":
        cd = model.cdim
        idx = (cd * np.asarray(stance, dtype=np.int64)[:, None] + np.arange(cd)[None, :]).reshape(-1)
        return RefSample(self.q, self.qd, self.qdd, self.F[idx], self.tau)


@dataclass
class ReferenceTrajectory:
    """Node values on a uniform grid, linearly interpolated in between."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    F: np.ndarray
    tau: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def sample(self, t: float) -> RefSample:
        s = (t - self.t[0]) / self.dt
        s = min(max(s, 0.0), len(self.t) - 1.0)
        i = min(int(np.floor(s)), len(self.t) - 2)
        a = s - i
        lerp = lambda arr: (1.0 - a) * arr[i] + a * arr[i + 1]  # noqa: E731
        return RefSample(lerp(self.q), lerp(self.qd), lerp(self.qdd), lerp(self.F), lerp(self.tau))


@dataclass
class MpcSolution:
    t0: float
    X: np.ndarray
    U: np.ndarray
    times: np.ndarray
    stance: list
    iterations: int
    cost: float
    defect: float
    constraint: float
    history: list = field(default_factory=list)


def static_forces(model: RobotModel, q, stance) -> np.ndarray:
    """Minimum-norm contact forces (all contacts, swing = 0) with Σf = −mg and Σ(p−c)×f = 0."""
    lay = CentroidalLayout(model)
    Fall = np.zeros(lay.nF)
    stance = np.asarray(stance, dtype=np.int64)
    if stance.size == 0:
        return Fall
    A, c, J, P = model.centroidal_terms(q, stance)
    rows = []
    for p in P:
        r = p - c
        G = np.zeros((6, 3))
        G[:3] = np.eye(3)
        G[3:] = K._skew(r)
        rows.append(G[np.ix_(model._mrows, lay.lin)])
    G = np.hstack(rows)
    target = np.zeros(lay.md)
    target[:len(lay.lin)] = -lay.gravity
    f = np.linalg.lstsq(G, target, rcond=None)[0]
    for j, i in enumerate(stance):
        Fall[lay.cd * i:lay.cd * i + lay.cd] = f[lay.cd * j:lay.cd * j + lay.cd]
    return Fall


class CentroidalMPC:
    """Receding-horizon planner over the nominal centroidal dynamics."""

    def __init__(self, model: RobotModel, schedule: ContactSchedule, settings: MpcSettings | None = None,
                 nominal_height: float | None = None):
        self.model = model
        self.schedule = schedule
        self.cfg = settings or MpcSettings()
        self.lay = CentroidalLayout(model)
        self.q_nominal = model.standing_pose(nominal_height)
        self._pose_cache = {}
        self._force_cache = {}
        self.previous: MpcSolution | None = None
        lay = self.lay
        # momentum is weighted in mass-normalized form (velocity units) so the two weights are commensurate
        wm = self.cfg.w_momentum / model.total_mass ** 2
        wx = np.concatenate([np.full(lay.md, wm), np.full(lay.nq, self.cfg.w_pose)])
        self.sq_Qs = np.sqrt(wx)
        self.sq_Qt = np.sqrt(wx * self.cfg.terminal_scale)
        self.sq_R = np.sqrt(np.full(lay.nu, self.cfg.w_input))
        self.Cf1 = friction_pyramid(1, lay.cd, self.cfg.mu)
        self.leg_joints = [self._joints_of_leg(leg) for leg in model.leg_names]

    def _joints_of_leg(self, leg):
        """Actuated joints on the path from the base to the leg's contact links."""
        model = self.model
        idx = set()
        for ci in model.legs[leg]:
            j = int(model.cbody[ci])
            while j >= model.nb:
                idx.add(j - model.nb)
                j = int(model.parent[j])
        return np.array(sorted(idx), dtype=np.int64)

    # ------------------------------------------------------------------ references
    def nominal_pose(self, height):
        key = round(float(height), 9)
        if key not in self._pose_cache:
            self._pose_cache[key] = self.model.standing_pose(height)
        return self._pose_cache[key]

    def desired(self, x_m, t0, times, command: Command):
        lay, model = self.lay, self.model
        height = model.default_height if command.height is None else command.height
        qn = self.nominal_pose(height)
        q_m = x_m[lay.md:]
        Xd = np.zeros((len(times), lay.nx))
        for i, ti in enumerate(times):
            tau = ti - t0
            q = qn.copy()
            if model.base_type == "floating":
                yaw = q_m[3] + command.yaw_rate * tau
                q[0] = q_m[0] + command.vx * tau
                q[1] = q_m[1] + command.vy * tau
                q[3] = yaw
                v = np.array([command.vx, command.vy, 0.0])
            elif model.base_type == "planar":
                q[0] = q_m[0] + command.vx * tau
                v = np.array([command.vx, 0.0, 0.0])
            else:
                v = np.zeros(3)
            Xd[i, :len(lay.lin)] = model.total_mass * v[lay.lin]
            Xd[i, lay.md:] = q
        return Xd

    def desired_input(self, q_m, stance_idx):
        key = tuple(int(i) for i in stance_idx)
        if key not in self._force_cache:
            self._force_cache[key] = static_forces(self.model, self.q_nominal, key)
        u = np.zeros(self.lay.nu)
        u[:self.lay.nF] = self._force_cache[key]
        return u

    # ------------------------------------------------------------------ transcription
    def _node_info(self, times):
        stance_legs, stance_idx, swing = [], [], []
        for ti in times:
            flags = self.schedule.contact_state(ti)
            legs = [j for j, f in enumerate(flags) if f]
            stance_legs.append(legs)
            stance_idx.append(self.model.leg_contacts(flags))
            sw = []
            for j, f in enumerate(flags):
                if not f:
                    s = self.schedule.swing_phase(j, ti)
                    sw.append((j, swing_height(s, self.cfg.lift_height)))
            swing.append(sw)
        return stance_legs, stance_idx, swing

    def _prepare(self, info):
        """Per-solve index tables for the vectorized residual evaluation."""
        lay, cfg, N = self.lay, self.cfg, self.cfg.nodes
        stance_legs, stance_idx, swing = info
        sqQ = np.array([self.sq_Qt if i == N - 1 else self.sq_Qs for i in range(N)])
        clear_node, clear_contact, clear_z = [], [], []
        for i in range(N):
            for leg, zdes in swing[i]:
                sqQ[i, lay.md + lay.nb + self.leg_joints[leg]] = np.sqrt(cfg.w_swing_joint)
                if i > 0:
                    for ci in self.model.legs[self.model.leg_names[leg]]:
                        clear_node.append(i)
                        clear_contact.append(ci)
                        clear_z.append(zdes)
        fric_node, fric_contact = [], []
        for i in range(N - 1):
            for ci in stance_idx[i]:
                fric_node.append(i)
                fric_contact.append(int(ci))
        # constraint layout per node: [defect (nx), stance-leg velocities], gathered from
        # [defect, all point velocities (3nc), all foot twists (6nf)]
        width = lay.nx + 3 * lay.nc + 6 * len(lay.fbody)
        gather = []
        for i in range(N - 1):
            base = i * width
            gather.append(base + np.arange(lay.nx))
            for leg in stance_legs[i]:
                kind, j = lay.leg_kind[leg]
                if kind == "point":
                    gather.append(base + lay.nx + 3 * j + lay.lin)
                else:
                    gather.append(base + lay.nx + 3 * lay.nc + 6 * j + lay.twist_rows)
        self._tables = dict(sqQ=sqQ, clear=(np.array(clear_node, dtype=np.int64), np.array(clear_contact, dtype=np.int64),
                                           np.array(clear_z)),
                            fric=(np.array(fric_node, dtype=np.int64), np.array(fric_contact, dtype=np.int64)),
                            width=width, gather=np.concatenate(gather))

    def _residuals(self, X, U, want_jac=False):
        """Residuals r and constraints c of the whole horizon from one batched kernel call.

        With ``want_jac`` the sparse Jacobians over z = [X; U] are returned as well; derivatives
        with respect to the joint configuration are forward differences, the rest are exact.
        """
        lay, cfg, tb = self.lay, self.cfg, self._tables
        N, md, nx, nu, nq, nb = cfg.nodes, lay.md, lay.nx, lay.nu, lay.nq, lay.nb
        nt, eps, dt = lay.ntrans, cfg.fd_step, cfg.dt
        # base translation shifts every point rigidly, so its derivative columns vanish
        nfd = (nq - nt) if want_jac else 0
        stride = 1 + nfd
        Q = np.repeat(X[:, md:], stride, axis=0)[:(N - 1) * stride + 1]
        if nfd:
            pert = Q[:(N - 1) * stride].reshape(N - 1, stride, nq)
            pert[:, 1:, nt:] += eps * np.eye(nfd)
        A, C, P, Jp, Jf = lay.batch(Q)
        node = np.arange(N) * stride
        wc, wf = np.sqrt(cfg.w_clearance), np.sqrt(cfg.w_friction)
        parts = [(tb["sqQ"] * (X - self.Xd)).ravel(), (self.sq_R * (U - self.Ud)).ravel()]
        cn, cc, cz = tb["clear"]
        g_cl = cz - P[node[cn], cc, 2]
        act_cl = g_cl > 0
        parts.append(wc * g_cl[act_cl])
        fn, fc = tb["fric"]
        F = U[:, :lay.nF].reshape(N - 1, lay.nc, lay.cd)
        g_fr = F[fn, fc] @ self.Cf1.T
        act_fr = g_fr > 0
        parts.append(wf * g_fr[act_fr])
        r = np.concatenate(parts)
        # dynamics over nodes 0..N-2, each repeated for its perturbed configurations
        qdj = U[:, lay.nF:]
        qd, Ldot, vp, vf, Abinv, Aj = _rates(
            lay, A[:-1], C[:-1], P[:-1], Jp[:-1], Jf[:-1], np.repeat(X[:-1, :md], stride, axis=0),
            np.repeat(qdj, stride, axis=0), np.repeat(F, stride, axis=0))
        hdot = F.sum(axis=1) + lay.gravity
        f = np.concatenate([hdot, Ldot[::stride], qd[::stride]], axis=1)
        defect = X[1:] - X[:-1] - dt * f
        comb = np.concatenate([defect, vp[::stride], vf[::stride]], axis=1)
        c = comb.ravel()[tb["gather"]]
        if not want_jac:
            return r, c
        nz = N * nx + (N - 1) * nu
        # residual Jacobian: diagonal tracking terms, then the active hinge rows
        ncl, nfr = int(act_cl.sum()), int(act_fr.sum())
        r_clear = N * nx + (N - 1) * nu
        rows = [np.arange(r_clear), np.repeat(r_clear + np.arange(ncl), nq)]
        cols = [np.arange(r_clear), ((cn[act_cl] * nx + md)[:, None] + np.arange(nq)).ravel()]
        vals = [tb["sqQ"].ravel(), np.tile(self.sq_R, N - 1),
                (-wc * Jp[node[cn[act_cl]], 3 * cc[act_cl] + 2, :]).ravel()]
        fi, fk = np.nonzero(act_fr)
        rows.append(np.repeat(r_clear + ncl + np.arange(nfr), lay.cd))
        cols.append(((N * nx + fn[fi] * nu + lay.cd * fc[fi])[:, None] + np.arange(lay.cd)).ravel())
        vals.append((wf * self.Cf1[fk]).ravel())
        Jr = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(r_clear + ncl + nfr, nz))
        # constraint Jacobian, one dense block per node over [x_i, u_i, x_{i+1}]
        M = N - 1
        width = tb["width"]
        blk = np.zeros((M, width, 2 * nx + nu))
        ux = slice(nx, nx + nu)
        Ab_inv = Abinv[::stride]
        Aj0 = Aj[::stride]
        dqd_dqdj = np.zeros((M, nq, lay.n))
        dqd_dqdj[:, :nb] = -Ab_inv @ Aj0
        dqd_dqdj[:, nb:] = np.eye(lay.n)
        dfdx = np.zeros((M, nx, nx))
        dfdx[:, md:md + nb, :md] = Ab_inv
        base = qd[::stride]
        dfdx[:, md:, md + nt:] = ((qd.reshape(M, stride, nq)[:, 1:] - base[:, None]) / eps).transpose(0, 2, 1)
        nL = len(lay.ang)
        Lb = Ldot[::stride]
        dfdx[:, md - nL:md, md + nt:] = ((Ldot.reshape(M, stride, nL)[:, 1:] - Lb[:, None]) / eps).transpose(0, 2, 1)
        dfdu = np.zeros((M, nx, nu))
        dfdu[:, :len(lay.lin), :lay.nF] = np.tile(np.eye(lay.cd), lay.nc)
        rel = P[:-1:stride] - C[:-1:stride, None, :]
        sk = np.zeros(rel.shape + (3,))
        sk[..., 0, 1], sk[..., 0, 2], sk[..., 1, 2] = -rel[..., 2], rel[..., 1], -rel[..., 0]
        sk[..., 1, 0], sk[..., 2, 0], sk[..., 2, 1] = rel[..., 2], -rel[..., 1], rel[..., 0]
        sk = sk[:, :, lay.ang][:, :, :, lay.lin]                     # (M, nc, nL, cd)
        dfdu[:, len(lay.lin):md, :lay.nF] = sk.transpose(0, 2, 1, 3).reshape(M, nL, lay.nF)
        dfdu[:, md:, lay.nF:] = dqd_dqdj
        blk[:, :nx, :nx] = -np.eye(nx) - dt * dfdx
        blk[:, :nx, ux] = -dt * dfdu
        blk[:, :nx, nx + nu:] = np.eye(nx)
        # point velocities and foot twists
        Jv = np.concatenate([Jp[:-1:stride], Jf[:-1:stride]], axis=1)
        vel = np.concatenate([vp, vf], axis=1)
        nv = vel.shape[1]
        blk[:, nx:, :md] = Jv[:, :, :nb] @ Ab_inv
        blk[:, nx:, md + nt:nx] = ((vel.reshape(M, stride, nv)[:, 1:] - vel[::stride][:, None]) / eps
                                   ).transpose(0, 2, 1)
        blk[:, nx:, nx + lay.nF:nx + nu] = Jv @ dqd_dqdj
        blk = blk.reshape(M * width, 2 * nx + nu)[tb["gather"]]
        rsel = tb["gather"] // width
        colmap = np.concatenate([np.arange(nx)[None, :] + (np.arange(M) * nx)[:, None],
                                 np.arange(nu)[None, :] + (N * nx + np.arange(M) * nu)[:, None],
                                 np.arange(nx)[None, :] + (np.arange(1, N) * nx)[:, None]], axis=1)
        R, Cc = np.nonzero(blk)
        Jc = sp.csr_matrix((blk[R, Cc], (R, colmap[rsel[R], Cc])), shape=(len(c), nz))
        return r, c, Jr, Jc

    def _free_columns(self, info):
        """Decision columns: every node but the first, and inputs without swing forces."""
        lay, N = self.lay, self.cfg.nodes
        keep = [np.arange(N * lay.nx)[lay.nx:]]
        for i in range(N - 1):
            base = N * lay.nx + i * lay.nu
            mask = np.zeros(lay.nu, bool)
            mask[lay.nF:] = True
            for ci in info[1][i]:
                mask[lay.cd * ci:lay.cd * ci + lay.cd] = True
            keep.append(base + np.nonzero(mask)[0])
        return np.concatenate(keep)

    def _stage_order(self, info, cols):
        """KKT permutation interleaving each node's states, inputs and constraints."""
        lay, N = self.lay, self.cfg.nodes
        Nx = N * lay.nx
        key_v = np.where(cols < Nx, (cols // lay.nx) * 2.0, ((cols - Nx) // lay.nu) * 2.0 + 1.0)
        key_c = []
        for i in range(N - 1):
            nv = sum(lay.leg_rows(leg) for leg in info[0][i])
            key_c.append(np.full(lay.nx + nv, 2.0 * i + 1.5))
        keys = np.concatenate([key_v] + key_c)
        return np.argsort(keys, kind="stable")

    # ------------------------------------------------------------------ solve
    def initial_guess(self, x_m, times, info):
        N, lay = self.cfg.nodes, self.lay
        X = np.repeat(x_m[None, :], N, axis=0)
        U = self.Ud.copy()
        prev = self.previous
        if prev is not None:
            for i, ti in enumerate(times):
                X[i] = _interp(prev.times, prev.X, ti)
                if i < N - 1:
                    U[i] = _interp(prev.times[:-1], prev.U, ti)
        X[0] = x_m
        for i in range(N - 1):
            mask = np.ones(lay.nc, bool)
            mask[info[1][i]] = False
            U[i, :lay.nF].reshape(lay.nc, lay.cd)[mask] = 0.0
        return X, U

    def solve(self, x_m, t0: float, command: Command | None = None) -> MpcSolution:
        cfg, lay = self.cfg, self.lay
        command = command or Command()
        x_m = np.asarray(x_m, float)
        if not np.all(np.isfinite(x_m)):
            raise ValueError("measured state must be finite")
        N = cfg.nodes
        times = t0 + cfg.dt * np.arange(N)
        info = self._node_info(times)
        self._info = info
        self.Xd = self.desired(x_m, t0, times, command)
        self.Ud = np.array([self.desired_input(x_m[lay.md:], info[1][i]) for i in range(N - 1)])
        X, U = self.initial_guess(x_m, times, info)
        cols = self._free_columns(info)
        perm = self._perm = self._stage_order(info, cols)
        N_x = N * lay.nx

        def unpack(z):
            return z[:N_x].reshape(N, lay.nx), z[N_x:].reshape(N - 1, lay.nu)

        z = np.concatenate([X.ravel(), U.ravel()])
        self._prepare(info)
        r, c, Jr, Jc = self._residuals(X, U, want_jac=True)

        def evaluate(z_try):
            return self._residuals(*unpack(z_try))

        # Levenberg-Marquardt damped Gauss-Newton SQP on the l1 merit ½‖r‖² + ρ‖c‖₁,
        # with a second-order correction when curvature of the constraints spoils a step
        cost = 0.5 * r @ r
        mu = cfg.lm_init
        rho = 0.0
        rejects = 0
        it = 0
        history = []
        stalled = False
        while it < cfg.max_iter and not stalled:
            it += 1
            Jr_f = Jr[:, cols]
            Jc_f = Jc[:, cols]
            H = (Jr_f.T @ Jr_f).tocsc()
            g = Jr_f.T @ r
            c1 = float(np.abs(c).sum())
            while True:
                kkt = EqQpFactor(H + mu * sp.identity(len(cols), format="csc"), Jc_f, perm=perm)
                dz, lam = kkt.solve(g, -c)
                rho = max(rho, 1.1 * float(np.abs(lam).max(initial=0.0)) + 1e-6)
                pred = -(g @ dz) - 0.5 * dz @ (H @ dz) + rho * c1
                merit = cost + rho * c1
                z_new = z.copy()
                z_new[cols] += dz
                r_n, c_n = evaluate(z_new)
                merit_n = 0.5 * r_n @ r_n + rho * float(np.abs(c_n).sum())
                if merit_n > merit - 1e-4 * pred and c_n.size:
                    soc, _ = kkt.solve(np.zeros(len(cols)), -c_n)
                    z_soc = z_new.copy()
                    z_soc[cols] += soc
                    r_s, c_s = evaluate(z_soc)
                    merit_s = 0.5 * r_s @ r_s + rho * float(np.abs(c_s).sum())
                    if merit_s < merit_n:
                        z_new, r_n, c_n, merit_n, dz = z_soc, r_s, c_s, merit_s, dz + soc
                actual = merit - merit_n
                ratio = actual / pred if pred > 0 else (1.0 if actual >= 0 else -1.0)
                if ratio > 1e-4 or (pred <= 1e-14 * (1.0 + merit) and actual >= -1e-14 * (1.0 + merit)):
                    rejects = 0
                    if ratio > 0.75:
                        mu = max(mu / 3.0, 1e-10)
                    elif ratio < 0.25:
                        mu *= 4.0
                    break
                # damping leaves the range-space (constraint) step untouched, so shorten it too
                alpha, gdz, dHd = 0.5, float(g @ dz), float(dz @ (H @ dz))
                while alpha >= 1.0 / 64.0:
                    z_a = z.copy()
                    z_a[cols] += alpha * dz
                    r_a, c_a = evaluate(z_a)
                    merit_a = 0.5 * r_a @ r_a + rho * float(np.abs(c_a).sum())
                    pred_a = -alpha * gdz - 0.5 * alpha ** 2 * dHd + alpha * rho * c1
                    if merit - merit_a > 1e-4 * pred_a:
                        break
                    alpha *= 0.5
                if alpha >= 1.0 / 64.0:
                    z_new, r_n, c_n, dz = z_a, r_a, c_a, alpha * dz
                    rejects = 0
                    mu *= 4.0
                    break
                rejects += 1
                mu *= 10.0
                if rejects >= cfg.max_rejects:
                    # no damping yields descent: the iterate is stationary for the merit, so
                    # keep it and let the feasibility projection decide
                    stalled = True
                    break
            if stalled:
                log.info("SQP stalled after %d rejected trials at iteration %d", rejects, it)
                break
            step = float(np.abs(dz).max()) if dz.size else 0.0
            new_cost = 0.5 * r_n @ r_n
            history.append((new_cost, float(np.abs(c_n).max()) if c_n.size else 0.0, step))
            z = z_new
            X, U = unpack(z)
            small = abs(cost - new_cost) <= cfg.rel_tol * (1.0 + cost) or step <= 1e-8
            cost = new_cost
            r, c = r_n, c_n
            feasible = c.size == 0 or np.abs(c).max() <= cfg.constraint_tol
            if feasible and (small or it >= cfg.max_iter):
                break
            r, c, Jr, Jc = self._residuals(X, U, want_jac=True)
            if small:
                break
        if c.size and np.abs(c).max() > cfg.constraint_tol:
            z, r, c = self._project_feasible(z, c, Jc, cols, unpack)
            X, U = unpack(z)
            cost = 0.5 * r @ r
        cmax = float(np.abs(c).max()) if c.size else 0.0
        if cmax > cfg.constraint_tol:
            raise SqpDiverged(f"constraints not met after {it} iterations (max residual {cmax:.2e})")
        defect = self._defect_residual(X, U)
        sol = MpcSolution(t0, X, U, times, info[1], it, cost, defect, cmax, history)
        self.previous = sol
        return sol

    def _project_feasible(self, z, c, Jc, cols, unpack, max_steps=6):
        """Minimum-norm Newton steps onto the constraint manifold (quadratic convergence near it)."""
        r = None
        for _ in range(max_steps):
            Jc_f = Jc[:, cols]
            kkt = EqQpFactor(sp.identity(len(cols), format="csc"), Jc_f, perm=self._perm)
            dz, _ = kkt.solve(np.zeros(len(cols)), -c)
            z = z.copy()
            z[cols] += dz
            X, U = unpack(z)
            r, c, _, Jc = self._residuals(X, U, want_jac=True)
            if np.abs(c).max() <= self.cfg.constraint_tol:
                break
        return z, r, c

    def _defect_residual(self, X, U):
        worst = 0.0
        for i in range(self.cfg.nodes - 1):
            f = centroidal_derivative(self.model, X[i], U[i])
            worst = max(worst, float(np.abs(X[i + 1] - X[i] - self.cfg.dt * f).max()))
        return worst

    def state_from(self, q, qd) -> np.ndarray:
        """Centroidal state [h; L; q] from a whole-body state."""
        A, _, _, _ = self.model.centroidal_terms(q, [])
        return np.concatenate([A @ qd, q])

    def reference(self, sol: MpcSolution) -> ReferenceTrajectory:
        return reconstruct_reference(self.model, sol.X, sol.U, sol.times, sol.stance)


def _interp(times, arr, t):
    s = (t - times[0]) / (times[1] - times[0])
    s = min(max(s, 0.0), len(times) - 1.0)
    i = min(int(np.floor(s)), len(times) - 2)
    a = s - i
    return (1.0 - a) * arr[i] + a * arr[i + 1]


def reconstruct_reference(model: RobotModel, X, U, times, stance=None) -> ReferenceTrajectory:
    """Whole-body references from MPC node values.

    q̇ᵇ from the momentum partition, q̈ʲ by forward differences of q̇ʲ, q̈ᵇ from the
    unactuated rows of the dynamics and τ from the actuated rows.
    """
    lay = CentroidalLayout(model)
    N = X.shape[0]
    dt = float(times[1] - times[0])
    Uf = np.vstack([U, U[-1:]])           # the final node holds the last input
    Q = X[:, lay.md:]
    QD = np.zeros_like(Q)
    for i in range(N):
        A, _, _, _ = model.centroidal_terms(Q[i], [])
        qdj = Uf[i, lay.nF:]
        Ab, Aj = A[:, :lay.nb], A[:, lay.nb:]
        try:
            QD[i, :lay.nb] = np.linalg.solve(Ab, X[i, :lay.md] - Aj @ qdj)
        except np.linalg.LinAlgError as exc:
            raise SingularBaseBlock("centroidal base block is singular") from exc
        QD[i, lay.nb:] = qdj
    QDD = np.zeros_like(Q)
    QDD[:-1, lay.nb:] = (QD[1:, lay.nb:] - QD[:-1, lay.nb:]) / dt
    QDD[-1, lay.nb:] = QDD[-2, lay.nb:] if N > 1 else 0.0
    TAU = np.zeros((N, lay.n))
    Fall = Uf[:, :lay.nF]
    for i in range(N):
        t = model.evaluate(Q[i], QD[i], None)
        rhs = -t.bias + t.J.T @ Fall[i]
        D11, D12 = t.D[:lay.nb, :lay.nb], t.D[:lay.nb, lay.nb:]
        try:
            np.linalg.cholesky(D11)
        except np.linalg.LinAlgError as exc:
            raise SingularD11("base block of the mass matrix is singular") from exc
        QDD[i, :lay.nb] = np.linalg.solve(D11, rhs[:lay.nb] - D12 @ QDD[i, lay.nb:])
        TAU[i] = (t.D @ QDD[i] + t.bias - t.J.T @ Fall[i])[lay.nb:]
    return ReferenceTrajectory(np.asarray(times, float), Q, QD, QDD, Fall.copy(), TAU)
