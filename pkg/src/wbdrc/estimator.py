"""Adaptive extended-state disturbance estimator.

The plant is written as ẋ₁ = x₂, ẋ₂ = f₀ + g₀u + SᵀE_qθ + x₃ with the extended
state x₃ collecting the unstructured disturbance.  A linear ESO with gains
3ω₀, 3ω₀², ω₀³ tracks (x₁, x₂, x₃) while θ̂ is adapted through a box
projection.  The reconstructed generalized force is f̂ = D(x̂₃ + SᵀE_qθ̂).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .numsolve import solve_lyapunov

A0 = np.array([[-3.0, 1.0, 0.0], [-3.0, 0.0, 1.0], [-1.0, 0.0, 0.0]])
C1_0 = np.array([[0.0], [1.0], [0.0]])
C2_0 = np.array([[0.0], [0.0], [1.0]])
# explicit-Euler margin for the observer: the discrete error map has spectral radius < 1 up to here
MAX_STEP_BANDWIDTH = 0.35


class GainTooHighForStep(ValueError):
    pass


def observer_matrices(dim: int):
    """A, C₁, C₂ of the scaled estimation-error dynamics for a ``dim``-dimensional plant."""
    I = np.eye(dim)
    return np.kron(A0, I), np.kron(C1_0, I), np.kron(C2_0, I)


def lyapunov_block() -> np.ndarray:
    return solve_lyapunov(A0)


@dataclass
class EstimatorGains:
    omega0: float
    gamma: np.ndarray                 # diagonal of Γ (2n)
    theta_min: np.ndarray
    theta_max: np.ndarray
    maf_window: int = 1
    P0: np.ndarray = field(default_factory=lyapunov_block)

    @classmethod
    def uniform(cls, n: int, omega0: float, gamma: float, bound: float = 100.0, maf_window: int = 1):
        return cls(omega0, np.full(2 * n, float(gamma)), np.full(2 * n, -bound), np.full(2 * n, bound), maf_window)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        self.theta_min = np.asarray(self.theta_min, dtype=float)
        self.theta_max = np.asarray(self.theta_max, dtype=float)
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if np.any(self.gamma < 0):
            raise ValueError("adaptation rates must be nonnegative")
        if np.any(self.theta_min > self.theta_max):
            raise ValueError("theta_min must not exceed theta_max")
        if self.maf_window < 1:
            raise ValueError("MAF window must be at least 1")

    def full_P(self, dim: int) -> np.ndarray:
        return np.kron(self.P0, np.eye(dim))


@dataclass
class EstimatorState:
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    theta: np.ndarray

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.x1.copy(), self.x2.copy(), self.x3.copy(), self.theta.copy())


def regressor(e_q, e_qd) -> np.ndarray:
    """E_q = [diag(e_q), diag(ė_q)]."""
    return np.hstack([np.diag(np.asarray(e_q, float)), np.diag(np.asarray(e_qd, float))])


def project(theta_hat, v, theta_min, theta_max) -> np.ndarray:
    """Zero the components of ``v`` that push θ̂ outward from a bound it sits on."""
    v = np.array(v, dtype=float)
    v[(theta_hat >= theta_max) & (v > 0)] = 0.0
    v[(theta_hat <= theta_min) & (v < 0)] = 0.0
    return v


def eta_bar(state: EstimatorState, q, qd, omega0: float) -> np.ndarray:
    """Measurable error vector: the true x₃ replaced by zero."""
    return np.concatenate([q - state.x1, (qd - state.x2) / omega0, -state.x3 / omega0 ** 2])


def adaptation_function(gains: EstimatorGains, E_q, eta, nb: int) -> np.ndarray:
    """α = E_qᵀ S C₁ᵀ P η / ω₀ using the Kronecker structure of P."""
    dim = eta.size // 3
    e1, e2, e3 = eta[:dim], eta[dim:2 * dim], eta[2 * dim:]
    c1p = gains.P0[1, 0] * e1 + gains.P0[1, 1] * e2 + gains.P0[1, 2] * e3   # C₁ᵀPη
    return np.asarray(E_q).T @ c1p[nb:] / gains.omega0


def adapt_step(theta, gains: EstimatorGains, alpha, dt: float) -> np.ndarray:
    rate = project(theta, gains.gamma * alpha, gains.theta_min, gains.theta_max)
    return np.clip(theta + dt * rate, gains.theta_min, gains.theta_max)


def check_step(omega0: float, dt: float):
    if dt * omega0 > MAX_STEP_BANDWIDTH * (1.0 + 1e-9):
        raise GainTooHighForStep(f"dt*omega0 = {dt * omega0:.4g} exceeds {MAX_STEP_BANDWIDTH}")


def eso_step(state: EstimatorState, gains: EstimatorGains, q, qd, D, bias, g0u, E_q, nb: int, dt: float) -> EstimatorState:
    """One explicit-Euler step of the ESO.

    ``D`` and ``bias`` are evaluated at the measured state; ``g0u`` is the
    generalized input force Sᵀτ + JᵀF_ref before multiplication by D⁻¹.
    """
    check_step(gains.omega0, dt)
    w = gains.omega0
    err = q - state.x1
    acc = np.linalg.solve(D, g0u - bias)        # f₀ + g₀û
    acc[nb:] += np.asarray(E_q) @ state.theta
    x1 = state.x1 + dt * (state.x2 + 3.0 * w * err)
    x2 = state.x2 + dt * (acc + state.x3 + 3.0 * w * w * err)
    x3 = state.x3 + dt * (w ** 3 * err)
    return EstimatorState(x1, x2, x3, state.theta)


def estimate_disturbance(state: EstimatorState, D, E_q, nb: int) -> np.ndarray:
    """f̂ = D(x̂₃ + SᵀE_qθ̂)."""
    v = state.x3.copy()
    v[nb:] += np.asarray(E_q) @ state.theta
    return D @ v


class MovingAverage:
    """Componentwise mean of the last ``window`` samples."""

    def __init__(self, window: int):
        if window < 1:
            raise ValueError("window must be at least 1")
        self.window = int(window)
        self._buf: deque = deque(maxlen=self.window)

    def __call__(self, x) -> np.ndarray:
        self._buf.append(np.array(x, dtype=float))
        return np.mean(np.array(self._buf), axis=0)

    def reset(self):
        self._buf.clear()


def maf_filter(window: int, samples) -> np.ndarray:
    """Filter a sequence of samples (rows) and return the filtered sequence."""
    f = MovingAverage(window)
    return np.array([f(s) for s in np.atleast_2d(samples)])


class DisturbanceEstimator:
    """Estimator state plus the per-tick update used by the control loop."""

    def __init__(self, model, gains: EstimatorGains, dt: float = 1e-3):
        check_step(gains.omega0, dt)
        if gains.gamma.size != 2 * model.n:
            raise ValueError("adaptation-rate dimension must be 2n")
        self.model = model
        self.gains = gains
        self.dt = dt
        self.nb = model.nb
        dim = model.nq
        self.state = EstimatorState(np.zeros(dim), np.zeros(dim), np.zeros(dim), np.zeros(2 * model.n))
        self.maf = MovingAverage(gains.maf_window)

    def reset(self, q, qd, theta=None):
        self.state = EstimatorState(np.array(q, float), np.array(qd, float), np.zeros(self.model.nq),
                                    np.zeros(2 * self.model.n) if theta is None else np.array(theta, float))
        self.maf.reset()

    def estimate(self, D, E_q) -> np.ndarray:
        return estimate_disturbance(self.state, D, E_q, self.nb)

    def filtered_estimate(self, D, E_q) -> np.ndarray:
        return self.maf(self.estimate(D, E_q))

    def update(self, q, qd, D, bias, J, tau, F_ref, E_q):
        """Advance θ̂ and (x̂₁, x̂₂, x̂₃) by one tick with û = [F_ref, τ]."""
        g0u = self.model.S.T @ np.asarray(tau, float)
        if J is not None and J.size:
            g0u = g0u + J.T @ np.asarray(F_ref, float)
        alpha = adaptation_function(self.gains, E_q, eta_bar(self.state, q, qd, self.gains.omega0), self.nb)
        new = eso_step(self.state, self.gains, q, qd, D, bias, g0u, E_q, self.nb, self.dt)
        new.theta = adapt_step(self.state.theta, self.gains, alpha, self.dt)
        self.state = new
        return new
