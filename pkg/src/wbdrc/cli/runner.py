"""Closed-loop scenario execution: MPC → estimator → WBC → simulator on a 1 kHz grid."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..estimator import DisturbanceEstimator, EstimatorGains, regressor
from ..gait import make_schedule
from ..model import load_model
from ..mpc import CentroidalMPC, Command, MpcSettings, SqpDiverged
from ..sim import Simulator
from ..wbc import ControllerFault, WholeBodyController
from .scenario import Scenario

log = logging.getLogger(__name__)

TRACE_VERSION = "wbdrc-trace v1"
DT = 1e-3
MAX_MPC_REUSE = 3
FALL_FRACTION = 0.5


@dataclass
class RunReport:
    scenario: Scenario
    metrics: dict
    trace: dict
    csv_path: Path | None = None
    figures: list = field(default_factory=list)


class Pipeline:
    """All components of one scenario run, wired at the profile's rates."""

    def __init__(self, scen: Scenario):
        self.scen = scen
        self.model = load_model(scen.robot)
        g = scen.gains
        m = self.model
        self.height = scen.height if scen.height is not None else m.default_height
        velocity = (scen.command.get("vx", 0.0), scen.command.get("vy", 0.0), scen.command.get("yaw_rate", 0.0))
        self.schedule = make_schedule(scen.gait, m.leg_names, start=scen.gait_start, velocity=velocity)
        self.command = Command(velocity[0], velocity[1], velocity[2], self.height)
        self.sim = Simulator(m, self.schedule, scen.disturbance, dt=DT)
        self.mpc = CentroidalMPC(m, self.schedule, MpcSettings(**scen.mpc), nominal_height=self.height)
        gains = EstimatorGains.uniform(m.n, g.omega0, g.gamma, g.theta_bound, g.maf_window)
        self.estimator = DisturbanceEstimator(m, gains, DT)
        self.controller = WholeBodyController(m, Q1=g.Q1, Q2=g.Q2, Kp=g.Kp, Kd=g.Kd,
                                              use_estimate=scen.variant == "wbdrc")
        self.mpc_every = max(1, int(round(1.0 / (g.mpc_rate * DT))))
        self.reference = None
        self.mpc_failures = 0
        self.mpc_iterations = []

    def replan(self, q, qd, t):
        try:
            sol = self.mpc.solve(self.mpc.state_from(q, qd), t, self.command)
        except (SqpDiverged, np.linalg.LinAlgError) as exc:
            self.mpc_failures += 1
            log.warning("MPC failed at t=%.3f (%s); reusing the previous trajectory", t, exc)
            if self.reference is None or self.mpc_failures > MAX_MPC_REUSE:
                raise ControllerFault(f"MPC unavailable at t={t:.3f}: {exc}") from exc
            return
        self.mpc_failures = 0
        self.mpc_iterations.append(sol.iterations)
        self.reference = self.mpc.reference(sol)

    def true_disturbance(self, q, qd, u, st) -> np.ndarray:
        """Lumped generalized disturbance of the plant relative to the nominal model."""
        m = self.model
        terms = m.evaluate(q, qd, None)
        return terms.D @ st.qdd + terms.bias - m.S.T @ u - terms.J.T @ st.F


def _columns(model) -> list:
    names = model.joint_names
    axes = "xyz" if model.cdim == 3 else "xz"
    forces = [f"{c}_{a}" for c in model.contact_names for a in axes]
    cols = ["t"]
    cols += [f"q_{n}" for n in names] + [f"qd_{n}" for n in names] + ["base_height"]
    cols += [f"fhat_{n}" for n in names]
    cols += [f"theta_{i + 1}" for i in range(2 * model.n)]
    cols += [f"x3_{n}" for n in names]
    cols += [f"F_{f}" for f in forces] + [f"Fr_{f}" for f in forces]
    cols += [f"u_{n}" for n in model.actuated_names] + [f"d_{n}" for n in names]
    return cols


def run_scenario(scen: Scenario, out_dir=None, write_csv: bool = True) -> RunReport:
    """Run ``scen`` and return metrics plus the full trace; writes CSV when ``out_dir`` is given."""
    pipe = Pipeline(scen)
    model, sim, est, ctrl = pipe.model, pipe.sim, pipe.estimator, pipe.controller
    nb, cd = model.nb, model.cdim
    q0 = pipe.mpc.nominal_pose(pipe.height)
    st = sim.reset(q0)
    est.reset(q0, np.zeros(model.nq))
    steps = int(round(scen.duration / DT))
    rows = []
    heights = []
    fell_at = None
    wrench_residual = 0.0
    F_r_full = np.zeros(cd * len(model.contacts))
    for k in range(steps):
        t = st.t
        q, qd = st.q, st.qd
        if k % pipe.mpc_every == 0:
            pipe.replan(q, qd, t)
        stance = sim.stance_contacts(t)
        ref = pipe.reference.sample(t).restricted(model, stance)
        terms = model.evaluate(q, qd, stance)
        J_ref = model.evaluate(ref.q, ref.qd, stance).J
        E_q = regressor(ref.q[nb:] - q[nb:], ref.qd[nb:] - qd[nb:])
        f_filter = est.filtered_estimate(terms.D, E_q)
        out = ctrl.tick(terms, q, qd, ref, stance, J_ref, f_filter)
        red = out.redistribution
        wrench_residual = max(wrench_residual, float(np.abs(
            J_ref.T @ red.F_r + model.S.T @ ref.tau + red.f_w - out.W).max()))
        F_r_full[:] = 0.0
        for j, i in enumerate(stance):
            F_r_full[cd * i:cd * i + cd] = red.F_r[cd * j:cd * j + cd]
        x3 = est.state.x3.copy()
        theta = est.state.theta.copy()
        est.update(q, qd, terms.D, terms.bias, terms.J, out.u, ref.F, E_q)
        st = sim.step(out.u)
        d_true = pipe.true_disturbance(q, qd, sim.torque_scale(t) * out.u, st)
        h = model.base_height(q)
        heights.append(h)
        rows.append(np.concatenate([[t], q, qd, [h], f_filter, theta, x3, st.F, F_r_full, out.u, d_true]))
        if not np.all(np.isfinite(st.q)) or model.base_height(st.q) < FALL_FRACTION * pipe.height:
            fell_at = st.t
            log.info("fall detected at t=%.3f", st.t)
            break
    data = np.array(rows)
    cols = _columns(model)
    metrics = _metrics(pipe, data, cols, fell_at, wrench_residual)
    trace = {"columns": cols, "data": data}
    report = RunReport(scen, metrics, trace)
    if out_dir is not None and write_csv:
        report.csv_path = write_trace(Path(out_dir) / f"{scen.name}-{scen.variant}.csv", scen, cols, data)
    return report


def _metrics(pipe: Pipeline, data, cols, fell_at, wrench_residual) -> dict:
    h = data[:, cols.index("base_height")]
    err = h - pipe.height
    model = pipe.model
    metrics = {
        "height_rmse": float(np.sqrt(np.mean(err ** 2))),
        "max_height_deviation": float(np.abs(err).max()),
        "fell": fell_at is not None,
        "fall_time": fell_at,
        "ticks": int(data.shape[0]),
        "mpc_mean_iterations": float(np.mean(pipe.mpc_iterations)) if pipe.mpc_iterations else 0.0,
        "wbc_faults": pipe.controller.fault_count,
        "unilateral_violations": pipe.sim.unilateral_violations,
        "wrench_residual": wrench_residual,
    }
    th = data[:, [i for i, c in enumerate(cols) if c.startswith("theta_")]]
    metrics["theta_max_abs"] = float(np.abs(th).max()) if th.size else 0.0
    # estimator steady state over the last 20 % of the run, against the injected truth
    tail = slice(int(0.8 * data.shape[0]), None)
    fcols = [i for i, c in enumerate(cols) if c.startswith("fhat_")][:model.nb]
    dcols = [i for i, c in enumerate(cols) if c.startswith("d_")][:model.nb]
    f_ss = data[tail][:, fcols].mean(axis=0)
    d_ss = data[tail][:, dcols].mean(axis=0)
    err = float(np.linalg.norm(f_ss - d_ss))
    size = float(np.linalg.norm(d_ss))
    metrics["estimator_error"] = err
    # the relative figure is only meaningful when something was injected
    metrics["estimator_relative_error"] = err / size if size > 1e-6 else None
    return metrics


def write_trace(path: Path, scen: Scenario, cols, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TRACE_VERSION} scenario={scen.name} robot={scen.robot} variant={scen.variant} "
                 f"seed={scen.seed}\n")
        w = csv.writer(fh)
        w.writerow(cols)
        for row in data:
            w.writerow([repr(float(v)) for v in row])
    return path
