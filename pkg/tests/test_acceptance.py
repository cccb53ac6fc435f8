"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np

from helpers import (PlanarEsoRun, column_block, fd_jacobian, random_qp, random_state, scenario_outcome, scenario_run,
                     verdict)
from wbdrc.cli import load_scenario, run_scenario
from wbdrc.cli.scenario import bundled_scenarios
from wbdrc.estimator import A0, DisturbanceEstimator, EstimatorGains, observer_matrices, project
from wbdrc.gait import make_schedule
from wbdrc.model import load_model
from wbdrc.mpc import CentroidalMPC, Command, MpcSettings, static_forces
from wbdrc.numsolve import TaskStack, kkt_residuals, solve_hierarchical, solve_lyapunov, solve_qp
from wbdrc.sim import DisturbanceSpec, ExternalWrench
from wbdrc.wbc import friction_pyramid

MODELS = ("planar3", "quad12", "biped12")
PAYLOAD_SCENARIOS = ("step-in-place+8kg", "walk+5kg", "walk+6kg")


def test_criterion_1_observer_error_decays_with_lyapunov_rate():
    t0 = time.perf_counter()
    w, dt = 100.0, 1e-5
    gains = EstimatorGains.uniform(2, w, 1e3)
    run = PlanarEsoRun(gains, dt)
    q, qd, state = run.initial()
    eta0 = np.linalg.norm(run.eta(state, q, qd))
    lam_max = np.linalg.eigvalsh(gains.P0).max()
    deadline = 10 * 2 * lam_max / w
    rec = run.run(int(np.ceil(deadline / dt)), q, qd, state,
                  stop=lambda r: np.linalg.norm(r["eta"][-1]) < 1e-6 * eta0)
    norms = np.linalg.norm(rec["eta"], axis=1)
    decayed = norms[-1] < 1e-6 * eta0
    t_decay = rec["t"][-1]
    # trapezoidal comparison of the Lyapunov difference quotient with −ω₀‖η‖²
    dV = np.diff(rec["V"]) / dt
    target = -w * 0.5 * (norms[:-1] ** 2 + norms[1:] ** 2)
    rel = np.abs(dV - target) / np.abs(target)
    elapsed = time.perf_counter() - t0
    ok = decayed and t_decay <= deadline and rel.max() <= 0.01 and elapsed < 10.0
    verdict(1, ok, f"decay to 1e-6 at {t_decay:.4f} s (limit {deadline:.4f} s), "
                   f"max |dV/dt + w0|eta|^2| rel {rel.max():.2e}, {elapsed:.1f} s")


def test_criterion_2_error_stays_under_ultimate_bound():
    t0 = time.perf_counter()
    w, dt, gamma, bound = 100.0, 1e-4, 1e4, 100.0
    gains = EstimatorGains.uniform(2, w, gamma, bound)
    d_b = 40.0
    direction = np.array([1.0, -2.0, 0.5, 1.5, -1.0])
    d2 = d_b * direction / np.linalg.norm(direction)
    theta = np.array([20.0, -35.0, 5.0, -8.0])

    def eq_fn(t):
        return (np.array([0.05 * np.sin(7 * t), 0.04 * np.cos(9 * t)]),
                np.array([0.35 * np.cos(7 * t), -0.36 * np.sin(9 * t)]))

    run = PlanarEsoRun(gains, dt, d2=d2, theta=theta, eq_fn=eq_fn,
                       ut_fn=lambda t: np.array([0.5 * np.sin(40 * t), 0.3]))
    rec = run.run(int(0.5 / dt))
    dim = run.model.nq
    P = gains.full_P(dim)
    _, C1, C2 = observer_matrices(dim)
    S = np.zeros((run.model.n, dim))
    S[:, run.model.nb:] = np.eye(run.model.n)
    lam = np.linalg.eigvalsh(P)
    lam_min, lam_max = lam.min(), lam.max()
    rate = w / (2 * lam_max)
    # constants measured from the run
    u_b = rec["u_tilde"].max()
    e_b = rec["e_q"].max()
    h_b = 0.0
    theta_b = np.linalg.norm(gains.theta_max - gains.theta_min)
    inv_gamma = 1.0 / gains.gamma.max()
    nC1 = np.linalg.norm(C1.T @ P, 2)
    nC2 = np.linalg.norm(C2.T @ P, 2)
    nSC1 = np.linalg.norm(S @ C1.T @ P, 2)
    delta_V = (2 * (w * u_b * nC1 + h_b * nC2) ** 2 / (rate * w ** 5)
               + 2 * nSC1 * e_b * d_b * theta_b / (rate * w ** 3)
               + inv_gamma * theta_b)
    V0 = rec["V"][0]
    limit = np.sqrt((V0 * np.exp(-rate * rec["t"]) + delta_V) / lam_min)
    norms = np.linalg.norm(rec["eta"], axis=1)
    margin = (norms / limit).max()
    elapsed = time.perf_counter() - t0
    ok = margin <= 1.0 and elapsed < 10.0
    verdict(2, ok, f"max |eta|/bound {margin:.3f} over {len(norms)} samples, delta_V {delta_V:.3e}, {elapsed:.1f} s")


def test_criterion_3_parameter_estimates_stay_in_the_box():
    worst = 0.0
    inside = True
    for name in sorted(bundled_scenarios()):
        rep, _ = scenario_run(name)
        scen = rep.scenario
        th = column_block(rep, "theta_")
        inside &= bool(np.all(np.abs(th) <= scen.gains.theta_bound))
        worst = max(worst, float(np.abs(th).max()))
    # the corrected projection inequality (θ − θ̂)ᵀ(α − Γ⁻¹Proj(Γα)) ≤ 0 on 10⁵ draws
    rng = np.random.default_rng(7)
    n, k = 100_000, 4
    lo, hi = -rng.uniform(1, 100, (n, k)), rng.uniform(1, 100, (n, k))
    gamma = rng.uniform(0.1, 1e5, (n, k))
    theta = rng.uniform(lo, hi)
    face = rng.random((n, k))
    theta_hat = np.where(face < 0.3, lo, np.where(face < 0.6, hi, rng.uniform(lo, hi)))
    alpha = rng.normal(scale=10.0, size=(n, k))
    lhs = np.einsum("ij,ij->i", theta - theta_hat, alpha - project(theta_hat, gamma * alpha, lo, hi) / gamma)
    ok = inside and lhs.max() <= 1e-9
    verdict(3, ok, f"max |theta_hat| {worst:.3g} over all bundled scenarios, max projection lhs {lhs.max():.2e}")


def test_criterion_4_constant_wrench_is_reconstructed():
    direction = np.array([0.6, -0.3, 0.7, 0.1, 0.15, 0.05])
    wrench = tuple(20.0 * direction / np.linalg.norm(direction))
    scen = replace(load_scenario("stand"), name="stand+wrench20", duration=2.0,
                   disturbance=DisturbanceSpec(wrenches=(ExternalWrench(wrench),)))
    rep = run_scenario(scen, write_csv=False)
    model = load_model("quad12")
    data = rep.trace["data"]
    tail = slice(int(0.8 * len(data)), None)
    fhat = column_block(rep, "fhat_")[tail, :model.nb].mean(axis=0)
    d = column_block(rep, "d_")[tail, :model.nb].mean(axis=0)
    rel = np.linalg.norm(fhat - d) / np.linalg.norm(d)
    ok = rel <= 0.05 and not rep.metrics["fell"]
    verdict(4, ok, f"steady-state base-row error {100 * rel:.1f} % of |d_base| = {np.linalg.norm(d):.2f}, "
                   f"|fhat_base| = {np.linalg.norm(fhat):.2f}")


def test_criterion_5_payload_comparison():
    ours, t_ours = scenario_run("step-in-place+8kg", "wbdrc")
    base, t_std = scenario_run("step-in-place+8kg", "standard")
    ratio = ours.metrics["height_rmse"] / base.metrics["height_rmse"]
    std = {n: scenario_outcome(n, "standard") for n in PAYLOAD_SCENARIOS}
    ours_out = {n: scenario_outcome(n, "wbdrc") for n in PAYLOAD_SCENARIOS}
    std_falls = [n for n, o in std.items() if o == "fell"]
    # a controller fault is a failed run, never counted as staying up
    our_failures = [n for n, o in ours_out.items() if o != "ok"]
    ok = ratio <= 0.5 and bool(std_falls) and not our_failures and max(t_ours, t_std) < 60.0
    verdict(5, ok, f"RMSE ratio {ratio:.3f}, standard outcomes {std}, WB-DRC outcomes {ours_out}, "
                   f"runs {t_ours:.0f} s / {t_std:.0f} s")


def test_criterion_6_knee_torque_cut():
    ours, _ = scenario_run("knee-cut-50", "wbdrc")
    std, _ = scenario_run("knee-cut-50", "standard")
    a, b = ours.metrics["max_height_deviation"], std.metrics["max_height_deviation"]
    th = np.abs(column_block(ours, "theta_")).max()
    ok = a < b and th <= 100.0
    verdict(6, ok, f"max height deviation {a * 1000:.2f} mm vs {b * 1000:.2f} mm, max |theta_hat| {th:.3g}")


def rk4_flight(model, q, qd, dt, steps):
    def acc(q_, qd_):
        t = model.evaluate(q_, qd_, [])
        return np.linalg.solve(t.D, -t.bias)

    for _ in range(steps):
        k1q, k1v = qd, acc(q, qd)
        k2q, k2v = qd + 0.5 * dt * k1v, acc(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v)
        k3q, k3v = qd + 0.5 * dt * k2v, acc(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v)
        k4q, k4v = qd + dt * k3v, acc(q + dt * k3q, qd + dt * k3v)
        q = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
        qd = qd + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return q, qd


def test_criterion_7_dynamics_kernels():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    pd_ok, fd_err, drift = True, 0.0, 0.0
    for name in MODELS:
        model = load_model(name)
        for _ in range(1000):
            q, qd = random_state(model, rng)
            D = model.evaluate(q, qd, []).D
            pd_ok &= bool(np.abs(D - D.T).max() <= 1e-12 and np.linalg.eigvalsh(D).min() > 0)
        contacts = list(range(len(model.contacts)))
        for _ in range(100):
            q, qd = random_state(model, rng)
            t = model.evaluate(q, qd, contacts)
            pos = lambda x: model.contact_positions(x)[:, model.lin_axes].reshape(-1)  # noqa: E731
            fd_err = max(fd_err, np.abs(t.J - fd_jacobian(pos, q)).max())
            # A(q): momentum rate along the full dynamics equals the external wrench about the COM
            F = rng.normal(scale=20.0, size=t.J.shape[0])
            qdd = np.linalg.solve(t.D, t.J.T @ F - t.bias)
            h = 1e-6
            mom = lambda s: model.centroidal_terms(q + s * qd + 0.5 * s * s * qdd, [])[0] @ (qd + s * qdd)  # noqa: E731
            rate = (mom(h) - mom(-h)) / (2 * h)
            c = model.com_position(q)
            P = model.contact_positions(q)
            F3 = np.zeros((len(contacts), 3))
            F3[:, model.lin_axes] = F.reshape(len(contacts), -1)
            wrench = np.concatenate([F3.sum(axis=0) + model.total_mass * model.gravity,
                                     np.cross(P - c, F3).sum(axis=0)])
            expected = np.concatenate([wrench[:3][model.lin_axes], wrench[3:][model.ang_axes]])
            fd_err = max(fd_err, np.abs(rate - expected).max() / (1 + np.abs(expected).max()))
        # passive flight: total energy over 1 s of RK4 at 1e-4 s
        q, qd = random_state(model, rng, spread=0.3, speed=0.5)
        E0 = sum(model.energy(q, qd))
        q1, qd1 = rk4_flight(model, q, qd, 1e-4, 10_000)
        drift = max(drift, abs(sum(model.energy(q1, qd1)) - E0) / abs(E0))
    elapsed = time.perf_counter() - t0
    ok = pd_ok and fd_err <= 1e-4 and drift <= 1e-4 and elapsed < 30.0
    verdict(7, ok, f"D sym/PD {'ok' if pd_ok else 'violated'}, worst FD error {fd_err:.2e}, "
                   f"energy drift {drift:.2e}, {elapsed:.1f} s")


def test_criterion_8_optimization_kernels():
    rng = np.random.default_rng(13)
    worst_kkt = 0.0
    for i in range(1000):
        qp = random_qp(rng, singular=bool(i % 5 == 0))
        res = solve_qp(qp)
        worst_kkt = max(worst_kkt, *kkt_residuals(qp, res.x, res.lam_eq, res.lam_in))
    P0 = solve_lyapunov(A0)
    worst_lyap = np.abs(A0.T @ P0 + P0 @ A0 + np.eye(3)).max()
    for _ in range(200):
        n = int(rng.integers(1, 7))
        M = rng.normal(size=(n, n))
        A = M - (np.linalg.eigvals(M).real.max() + rng.uniform(0.2, 2.0)) * np.eye(n)
        P = solve_lyapunov(A)
        worst_lyap = max(worst_lyap, np.abs(A.T @ P + P @ A + np.eye(n)).max() / max(1.0, np.abs(P).max()))
    worst_mono = 0.0
    for _ in range(200):
        d = int(rng.integers(3, 8))
        levels = []
        for j in range(3):
            k = int(rng.integers(1, d))
            A = rng.normal(size=(k, d))
            levels.append((A, A @ rng.uniform(-1, 1, d) if j == 0 else rng.normal(size=k)))
        C, dd = np.vstack([np.eye(d), -np.eye(d)]), np.full(2 * d, 2.0)
        partial = []
        for m in range(1, 4):
            stack = TaskStack(d)
            for j, (A, b) in enumerate(levels[:m]):
                stack.add(A, b, *((C, dd) if j == 0 else (None, None)))
            partial.append(solve_hierarchical(stack).residuals)
        for m, res in enumerate(partial[:-1]):
            for j in range(m + 1):
                worst_mono = max(worst_mono, abs(partial[-1][j] - res[j]) / (1.0 + res[j]))
    ok = worst_kkt <= 1e-6 and worst_lyap <= 1e-10 and worst_mono <= 1e-9
    verdict(8, ok, f"worst KKT {worst_kkt:.2e}, worst Lyapunov {worst_lyap:.2e}, worst priority drift {worst_mono:.2e}")


def test_criterion_9_pipeline_identity(monkeypatch):
    worst = max(scenario_run(n)[0].metrics["wrench_residual"] for n in sorted(bundled_scenarios()))
    # zero the estimate: the WB-DRC code path must collapse onto the standard controller
    monkeypatch.setattr(DisturbanceEstimator, "filtered_estimate",
                        lambda self, D, E_q: np.zeros(self.model.nq))
    short = replace(load_scenario("step-in-place+8kg"), duration=0.4, disturbance=DisturbanceSpec())
    a = run_scenario(short.with_variant("wbdrc"), write_csv=False)
    b = run_scenario(short.with_variant("standard"), write_csv=False)
    gap = np.abs(column_block(a, "u_") - column_block(b, "u_")).max()
    ok = worst <= 1e-8 and gap <= 1e-9
    verdict(9, ok, f"max wrench-equivalence residual {worst:.2e}, zero-estimate torque gap {gap:.2e}")


def test_criterion_10_mpc():
    model = load_model("quad12")
    mpc = CentroidalMPC(model, make_schedule("stand", model.leg_names))
    q = mpc.nominal_pose(model.default_height)
    sol = mpc.solve(mpc.state_from(q, np.zeros(model.nq)), 0.0, Command(height=model.default_height))
    # analytic optimum: least-norm forces with zero net wrench about the COM
    c = model.com_position(q)
    P = model.contact_positions(q)
    G = np.zeros((6, 12))
    for i, p in enumerate(P):
        r = p - c
        G[:3, 3 * i:3 * i + 3] = np.eye(3)
        G[3:, 3 * i:3 * i + 3] = [[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]]
    b = np.concatenate([[0, 0, model.total_mass * 9.81], np.zeros(3)])
    F_star = G.T @ np.linalg.solve(G @ G.T, b)
    force_gap = np.abs(sol.U[:, :12] - F_star).max()
    trot = CentroidalMPC(model, make_schedule("trot", model.leg_names))
    moving = trot.solve(trot.state_from(q, np.zeros(model.nq)), 0.0, Command(vx=0.2, height=model.default_height))
    defect = max(sol.defect, moving.defect)
    # two-node planar problem against a grid search over the single contact force
    planar = load_model("planar3")
    cfg = MpcSettings(horizon=0.1, nodes=2)
    toy = CentroidalMPC(planar, make_schedule("stand", planar.leg_names), cfg)
    qn = toy.nominal_pose(planar.default_height)
    x = toy.state_from(qn, np.zeros(planar.nq))
    x[:3] += [0.8, -1.5, 0.05]
    tsol = toy.solve(x, 0.0, Command())
    _, com, _, Pp = planar.centroidal_terms(qn, [0])
    r = Pp[0] - com
    Fs = static_forces(planar, qn, [0])
    Cf = friction_pyramid(1, 2, cfg.mu)
    m, dt = planar.total_mass, cfg.dt
    wm = cfg.w_momentum / m ** 2 * cfg.terminal_scale

    def cost(Fx, Fz):
        h1x, h1z = x[0] + dt * Fx, x[1] + dt * (Fz - m * 9.81)
        L1 = x[2] + dt * (r[2] * Fx - r[0] * Fz)
        hinge = np.maximum(np.stack([Fx, Fz], -1) @ Cf.T, 0.0)
        return (0.5 * wm * (h1x ** 2 + h1z ** 2 + L1 ** 2) + 0.5 * cfg.w_input * ((Fx - Fs[0]) ** 2 + (Fz - Fs[1]) ** 2)
                + 0.5 * cfg.w_friction * (hinge ** 2).sum(-1))

    cx, cz, half = 0.0, 50.0, 200.0
    for _ in range(8):
        gx, gz = np.meshgrid(np.linspace(cx - half, cx + half, 201), np.linspace(cz - half, cz + half, 201))
        k = np.argmin(cost(gx, gz))
        cx, cz, half = gx.flat[k], gz.flat[k], half / 10
    toy_gap = np.abs(tsol.U[0, :2] - [cx, cz]).max()
    ok = force_gap <= 1e-4 and defect <= 1e-6 and toy_gap <= 1e-2
    verdict(10, ok, f"stand force gap {force_gap:.2e} N, worst defect {defect:.2e}, two-node gap {toy_gap:.2e}")
