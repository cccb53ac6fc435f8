import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import random_state
from wbdrc.gait import make_schedule
from wbdrc.model import load_model
from wbdrc.mpc import (CentroidalMPC, Command, MpcSettings, centroidal_derivative, reconstruct_reference,
                       static_forces)
from wbdrc.wbc import friction_pyramid

seeds = st.integers(0, 2 ** 32 - 1)


def input_vector(model, F, qdj):
    return np.concatenate([F, qdj])


def test_free_fall_momentum_rate_is_weight():
    model = load_model("quad12")
    q = model.standing_pose()
    x = np.concatenate([np.zeros(model.mdim), q])
    xd = centroidal_derivative(model, x, np.zeros(12 + model.n))
    assert np.allclose(xd[:3], [0, 0, -model.total_mass * 9.81])
    assert np.allclose(xd[3:6], 0.0)
    assert np.allclose(xd[6:], 0.0)


def test_static_forces_balance_the_body():
    model = load_model("quad12")
    q = model.standing_pose()
    F = static_forces(model, q, range(4))
    x = np.concatenate([np.zeros(model.mdim), q])
    xd = centroidal_derivative(model, x, input_vector(model, F, np.zeros(model.n)))
    assert np.abs(xd[:6]).max() <= 1e-9


@given(st.sampled_from(["quad12", "biped12", "planar3"]), seeds)
@settings(max_examples=20)
def test_momentum_rate_matches_whole_body_motion(name, seed):
    # the centroidal rates must equal the time derivative of A(q)q̇ along the full dynamics
    rng = np.random.default_rng(seed)
    model = load_model(name)
    q, qd = random_state(model, rng, spread=0.3)
    contacts = list(range(len(model.contacts)))
    F = rng.normal(scale=20.0, size=model.cdim * len(contacts))
    tau = rng.normal(scale=5.0, size=model.n)
    t = model.evaluate(q, qd, contacts)
    qdd = np.linalg.solve(t.D, model.S.T @ tau + t.J.T @ F - t.bias)
    h = 1e-6
    A = lambda s: model.centroidal_terms(q + s * qd + 0.5 * s * s * qdd, [])[0]  # noqa: E731
    hq = lambda s: A(s) @ (qd + s * qdd)  # noqa: E731
    fd = (hq(h) - hq(-h)) / (2 * h)
    x = np.concatenate([A(0.0) @ qd, q])
    xd = centroidal_derivative(model, x, input_vector(model, F, qd[model.nb:]))
    assert np.allclose(xd[:model.mdim], fd, atol=1e-4 * (1 + np.abs(fd).max()))
    # the configuration rate is the whole-body velocity recovered from the momentum
    assert np.allclose(xd[model.mdim:], qd, atol=1e-8)


@given(seeds)
def test_angular_rate_is_sum_of_force_moments(seed):
    rng = np.random.default_rng(seed)
    model = load_model("quad12")
    q, _ = random_state(model, rng)
    F = rng.normal(scale=30.0, size=12)
    x = np.concatenate([rng.normal(size=6), q])
    xd = centroidal_derivative(model, x, input_vector(model, F, rng.normal(size=12)))
    c = model.com_position(q)
    P = model.contact_positions(q)
    L = sum(np.cross(P[i] - c, F[3 * i:3 * i + 3]) for i in range(4))
    assert np.allclose(xd[3:6], L, atol=1e-9)
    # swing contacts contribute nothing
    xd_sw = centroidal_derivative(model, x, input_vector(model, F, np.zeros(12)), contacts=[0])
    assert np.allclose(xd_sw[:3], F[:3] + [0, 0, -model.total_mass * 9.81])


def stand_solution(name="quad12"):
    model = load_model(name)
    mpc = CentroidalMPC(model, make_schedule("stand", model.leg_names))
    q = mpc.nominal_pose(model.default_height)
    x = mpc.state_from(q, np.zeros(model.nq))
    return model, mpc, q, mpc.solve(x, 0.0, Command(height=model.default_height))


def test_static_stand_shares_weight_and_holds_pose():
    model, mpc, q, sol = stand_solution()
    mg = model.total_mass * 9.81
    F = sol.U[:, :12].reshape(len(sol.U), 4, 3)
    assert np.allclose(F[..., 2], mg / 4, rtol=1e-3)
    assert np.abs(F[..., :2]).max() <= 1e-6
    assert np.abs(sol.X[:, model.mdim:] - q).max() <= 1e-9
    assert sol.defect <= 1e-6


def test_trot_plan_respects_dynamics_and_contacts():
    model = load_model("quad12")
    sched = make_schedule("trot", model.leg_names)
    mpc = CentroidalMPC(model, sched)
    q = mpc.nominal_pose(model.default_height)
    sol = mpc.solve(mpc.state_from(q, np.zeros(model.nq)), 0.0, Command(vx=0.2, height=model.default_height))
    assert sol.defect <= 1e-6
    assert sol.constraint <= 1e-6
    ref = mpc.reference(sol)
    for i, stance in enumerate(sol.stance[:-1]):
        J = model.evaluate(ref.q[i], ref.qd[i], stance).J
        assert np.abs(J @ ref.qd[i]).max() <= 1e-5
        swing = sorted(set(range(4)) - set(stance))
        assert np.abs(sol.U[i, :12].reshape(4, 3)[swing]).max() <= 1e-9


def test_two_node_problem_matches_grid_search():
    model = load_model("planar3")
    cfg = MpcSettings(horizon=0.1, nodes=2)
    mpc = CentroidalMPC(model, make_schedule("stand", model.leg_names), cfg)
    qn = mpc.nominal_pose(model.default_height)
    x = mpc.state_from(qn, np.zeros(model.nq))
    x[0] += 0.8
    x[1] -= 1.5
    x[2] += 0.05
    sol = mpc.solve(x, 0.0, Command())
    # with one interval the plan reduces to the contact force; score it directly
    A, c, J, P = model.centroidal_terms(qn, [0])
    Fs = static_forces(model, qn, [0])
    Cf = friction_pyramid(1, 2, cfg.mu)
    m, dt = model.total_mass, cfg.dt
    wm = cfg.w_momentum / m ** 2 * cfg.terminal_scale
    r = P[0] - c

    def cost(Fx, Fz):
        h1x = x[0] + dt * Fx
        h1z = x[1] + dt * (Fz - m * 9.81)
        L1 = x[2] + dt * (r[2] * Fx - r[0] * Fz)
        hinge = np.maximum(np.stack([Fx, Fz], -1) @ Cf.T, 0.0)
        return (0.5 * wm * (h1x ** 2 + h1z ** 2 + L1 ** 2)
                + 0.5 * cfg.w_input * ((Fx - Fs[0]) ** 2 + (Fz - Fs[1]) ** 2)
                + 0.5 * cfg.w_friction * (hinge ** 2).sum(-1))

    cx, cz, half = 0.0, 50.0, 200.0
    for _ in range(8):
        gx, gz = np.meshgrid(np.linspace(cx - half, cx + half, 201), np.linspace(cz - half, cz + half, 201))
        k = np.argmin(cost(gx, gz))
        cx, cz, half = gx.flat[k], gz.flat[k], half / 10
    assert np.allclose(sol.U[0, :2], [cx, cz], atol=1e-2)
    # joint rates must keep the foot still while realizing the measured momentum
    qd = np.linalg.solve(np.vstack([A, J]), np.concatenate([x[:model.mdim], np.zeros(J.shape[0])]))
    assert np.allclose(sol.U[0, 2:], qd[model.nb:], atol=1e-6)


def test_reference_satisfies_floating_base_dynamics(rng):
    model = load_model("quad12")
    mpc = CentroidalMPC(model, make_schedule("trot", model.leg_names))
    q = mpc.nominal_pose(model.default_height)
    sol = mpc.solve(mpc.state_from(q, np.zeros(model.nq)), 0.0, Command(vx=0.2, height=model.default_height))
    ref = reconstruct_reference(model, sol.X, sol.U, sol.times, sol.stance)
    nb = model.nb
    for i in range(len(sol.times)):
        t = model.evaluate(ref.q[i], ref.qd[i], None)
        res = t.D @ ref.qdd[i] + t.bias - t.J.T @ ref.F[i]
        assert np.abs(res[:nb]).max() <= 1e-8
        assert np.allclose(res[nb:], ref.tau[i], atol=1e-8)
    dt = sol.times[1] - sol.times[0]
    fd = np.diff(ref.qd[:, nb:], axis=0) / dt
    assert np.allclose(ref.qdd[:-1, nb:], fd, atol=1e-9)


def test_warm_restart_converges_quickly():
    model = load_model("quad12")
    mpc = CentroidalMPC(model, make_schedule("stand", model.leg_names))
    q = mpc.nominal_pose(model.default_height)
    qd = np.zeros(model.nq)
    qd[:3] = [0.05, -0.03, 0.02]
    cmd = Command(height=model.default_height)
    first = mpc.solve(mpc.state_from(q, qd), 0.0, cmd)
    again = mpc.solve(first.X[1], mpc.cfg.dt, cmd)
    assert again.iterations <= 5
    assert again.defect <= 1e-6


def test_stand_plan_is_deterministic():
    _, _, _, a = stand_solution()
    _, _, _, b = stand_solution()
    assert np.array_equal(a.U, b.U) and np.array_equal(a.X, b.X)


def test_biped_stand_plan_is_feasible():
    model, mpc, q, sol = stand_solution("biped12")
    assert sol.defect <= 1e-6
    F = sol.U[0, :model.cdim * len(model.contacts)].reshape(-1, 3)
    assert F[:, 2].sum() == pytest.approx(model.total_mass * 9.81, rel=1e-6)
