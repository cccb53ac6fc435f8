"""Shared oracles and fixtures for the test suite."""
from dataclasses import replace
from functools import lru_cache
import time

import numpy as np

from wbdrc.cli import load_scenario, run_scenario
from wbdrc.model import load_model
from wbdrc.numsolve import QuadraticProgram
from wbdrc.wbc import ControllerFault


ACCEPTANCE_LINES = []


def verdict(number, ok, detail):
    """Record and print one acceptance line, then fail the test if the criterion is not met."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_state(model, rng, spread=0.6, speed=1.0):
    """A generic configuration and velocity away from the symmetric poses."""
    q = model.standing_pose() + spread * rng.uniform(-1, 1, model.nq)
    qd = speed * rng.uniform(-1, 1, model.nq)
    return q, qd


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector function."""
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def planar_plant():
    return load_model("planar3")


@lru_cache(maxsize=None)
def scenario_run(name, variant="wbdrc", duration=None):
    """Run a bundled scenario once per test session; returns (report, wall seconds)."""
    scen = load_scenario(name).with_variant(variant)
    if duration is not None:
        scen = replace(scen, duration=duration)
    t0 = time.perf_counter()
    rep = run_scenario(scen, write_csv=False)
    return rep, time.perf_counter() - t0


@lru_cache(maxsize=None)
def scenario_outcome(name, variant="wbdrc"):
    """"fell", "fault" (ControllerFault raised) or "ok" for a bundled scenario, run once per session."""
    try:
        rep, _ = scenario_run(name, variant)
    except ControllerFault:
        return "fault"
    return "fell" if rep.metrics["fell"] else "ok"


def column_block(report, prefix):
    cols = report.trace["columns"]
    idx = [i for i, c in enumerate(cols) if c.startswith(prefix)]
    return report.trace["data"][:, idx]


def random_qp(rng, d=None, n_eq=None, n_in=None, singular=False):
    """Feasible, bounded convex QP built around a known interior point."""
    d = d or int(rng.integers(2, 9))
    k = d - 1 if singular else d
    M = rng.normal(size=(k, d))
    H = M.T @ M + (0.0 if singular else 1e-3) * np.eye(d)
    g = rng.normal(size=d) * 3
    x0 = rng.normal(size=d)
    n_eq = int(rng.integers(0, d)) if n_eq is None else n_eq
    n_in = int(rng.integers(1, 2 * d + 1)) if n_in is None else n_in
    Aeq = rng.normal(size=(n_eq, d))
    Ain = rng.normal(size=(n_in, d))
    # a box keeps singular instances bounded
    Ain = np.vstack([Ain, np.eye(d), -np.eye(d)])
    bin_ = Ain @ x0 + rng.uniform(0.0, 1.0, Ain.shape[0])
    bin_[n_in:] = np.abs(x0).max() + 3.0
    return QuadraticProgram(H, g, Aeq, Aeq @ x0, Ain, bin_)


class PlanarEsoRun:
    """Open-loop planar3 plant in flight driven alongside the estimator.

    The plant is ẋ₁ = x₂, ẋ₂ = f₀ + g₀u + SᵀE_qθ + d₂ stepped with the same explicit
    Euler rule as the observer, so the recorded error η is the exact discrete error.
    ``u_fn(t)`` is the applied torque, ``ut_fn(t)`` the mismatch ũ = u − û and
    ``eq_fn(t)`` returns (e_q, ė_q) for the regressor.
    """

    def __init__(self, gains, dt, d2=None, theta=None, u_fn=None, ut_fn=None, eq_fn=None):
        from wbdrc import estimator as est
        self.est = est
        self.model = planar_plant()
        self.gains = gains
        self.dt = dt
        m = self.model
        self.d2 = np.zeros(m.nq) if d2 is None else np.asarray(d2, float)
        self.theta = np.zeros(2 * m.n) if theta is None else np.asarray(theta, float)
        self.u_fn = u_fn or (lambda t: np.array([3.0 * np.sin(5.0 * t), 2.0 * np.cos(3.0 * t)]))
        self.ut_fn = ut_fn or (lambda t: np.zeros(m.n))
        self.eq_fn = eq_fn or (lambda t: (np.zeros(m.n), np.zeros(m.n)))

    def initial(self, dq=0.01, dqd=-0.2, x3=0.0):
        m = self.model
        q = np.zeros(m.nq)
        q[1] = 0.5
        q[m.nb:] = [0.6, -1.2]
        qd = np.zeros(m.nq)
        state = self.est.EstimatorState(q + dq, qd + dqd, np.full(m.nq, float(x3)), np.zeros(2 * m.n))
        return q, qd, state

    def eta(self, state, q, qd):
        w = self.gains.omega0
        return np.concatenate([q - state.x1, (qd - state.x2) / w, (self.d2 - state.x3) / w ** 2])

    def lyapunov(self, eta, theta_hat):
        P = self.gains.full_P(self.model.nq)
        tt = self.theta - theta_hat
        inv_gamma = np.divide(1.0, self.gains.gamma, out=np.zeros_like(self.gains.gamma), where=self.gains.gamma > 0)
        return eta @ P @ eta + tt @ (inv_gamma * tt)

    def run(self, steps, q=None, qd=None, state=None, stop=None):
        """Yield per-step records; ``stop(record)`` ends the run early."""
        est, m, g, dt = self.est, self.model, self.gains, self.dt
        if state is None:
            q, qd, state = self.initial()
        rec = dict(t=[], eta=[], V=[], x3=[], theta=[], fhat=[], Dd2=[], g0ut=[], u_tilde=[], e_q=[])
        for k in range(steps + 1):
            t = k * dt
            e_q, e_qd = self.eq_fn(t)
            E_q = est.regressor(e_q, e_qd)
            terms = m.evaluate(q, qd, [])
            eta = self.eta(state, q, qd)
            rec["t"].append(t)
            rec["eta"].append(eta)
            rec["V"].append(self.lyapunov(eta, state.theta))
            rec["x3"].append(state.x3.copy())
            rec["theta"].append(state.theta.copy())
            rec["fhat"].append(est.estimate_disturbance(state, terms.D, E_q, m.nb))
            rec["Dd2"].append(terms.D @ self.d2)
            ut = self.ut_fn(t)
            g0ut = np.linalg.solve(terms.D, m.S.T @ ut)
            rec["g0ut"].append(g0ut)
            rec["u_tilde"].append(np.linalg.norm(g0ut))
            rec["e_q"].append(np.linalg.norm(E_q, 2))
            if k == steps or (stop is not None and stop(rec)):
                break
            u = self.u_fn(t)
            alpha = est.adaptation_function(g, E_q, est.eta_bar(state, q, qd, g.omega0), m.nb)
            new = est.eso_step(state, g, q, qd, terms.D, terms.bias, m.S.T @ (u - ut), E_q, m.nb, dt)
            new.theta = est.adapt_step(state.theta, g, alpha, dt)
            acc = np.linalg.solve(terms.D, m.S.T @ u - terms.bias)
            acc[m.nb:] += E_q @ self.theta
            acc += self.d2
            q, qd, state = q + dt * qd, qd + dt * acc, new
        return {k: np.array(v) for k, v in rec.items()}
