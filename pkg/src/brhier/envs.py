"""Control environments and oracles.

A piecewise-linear scalar plant with quadratic cost (gain scheduling) and a
torque-driven two-link pendulum balance task.  Both expose the same
interface consumed by the training engine: reset(rng) -> state,
step(action) -> (next_state, reward, terminal), plus state_dim/action_dim.
Costs are reported as rewards (negated), so the engine maximizes uniformly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import RngStream
from .engine import RNG_EVAL_ENV, RNG_EVAL_POLICY
from .errors import ContractViolation, NumericFault, RiccatiError


# ---------------------------------------------------------------------------
# Piecewise-linear plant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlantSpec:
    """dx = (A_i x + B_i u) dt + noise, regime 0 iff x >= 0."""

    a_coeffs: tuple[float, float] = (0.0, 0.0)
    b_coeffs: tuple[float, float] = (1.0, -1.0)
    noise_std: float = 0.5          # std of the continuous-time noise source
    dt: float = 0.005
    q_weight: float = 1.0
    r_weight: float = 0.01
    horizon: int = 64
    x0_range: float = 10.0          # reset draws x0 ~ Uniform(-x0_range, x0_range)

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractViolation("dt must be positive")
        if self.r_weight <= 0:
            raise ContractViolation("r_weight must be positive")
        if len(self.a_coeffs) != 2 or len(self.b_coeffs) != 2:
            raise ContractViolation("exactly two regimes")


def plant_regime(x: float) -> int:
    return 0 if x >= 0.0 else 1


def plant_step(spec: PlantSpec, x: float, u: float, rng: RngStream | None):
    """One Euler step with sqrt(dt)-scaled Gaussian noise.

    Reward is the negated quadratic stage cost -(Q x^2 + R u^2)/2 at the
    current state and control.  Pass rng=None for a noise-free step.
    """
    if not (math.isfinite(x) and math.isfinite(u)):
        raise ContractViolation("state and control must be finite")
    i = plant_regime(x)
    drift = spec.a_coeffs[i] * x + spec.b_coeffs[i] * u
    noise = 0.0
    if rng is not None and spec.noise_std > 0.0:
        noise = spec.noise_std * math.sqrt(spec.dt) * float(rng.gen.standard_normal())
    x_next = x + spec.dt * drift + noise
    reward = -0.5 * (spec.q_weight * x * x + spec.r_weight * u * u)
    if not math.isfinite(x_next):
        raise NumericFault("plant state diverged")
    return x_next, reward


class PlantEnv:
    """Episode wrapper: terminal after `horizon` steps."""

    def __init__(self, spec: PlantSpec):
        self.spec = spec
        self.state_dim = 1
        self.action_dim = 1
        self._x = 0.0
        self._steps = 0
        self._done = True
        self._rng: RngStream | None = None

    def reset(self, rng: RngStream) -> np.ndarray:
        self._rng = rng
        self._x = float(rng.uniform(-self.spec.x0_range, self.spec.x0_range))
        self._steps = 0
        self._done = False
        return np.array([self._x])

    def step(self, action):
        if self._done:
            raise ContractViolation("step after terminal")
        u = float(np.asarray(action).reshape(-1)[0])
        self._x, reward = plant_step(self.spec, self._x, u, self._rng)
        self._steps += 1
        self._done = self._steps >= self.spec.horizon
        return np.array([self._x]), reward, self._done


@dataclass
class LQRResult:
    gains: tuple[float, float]          # u = -K_i x on regime i
    riccati_value: tuple[float, float]
    expected_cost: float                # mean episode reward (negated cost) of
                                        # the switched controller under noise


def _scalar_dare(a: float, b: float, q: float, r: float) -> float:
    """Positive root of the scalar discrete-time algebraic Riccati equation.

    b^2 P^2 + (r(1 - a^2) - q b^2) P - q r = 0; this is the unique attracting
    fixed point of the Riccati iteration, solved exactly so extreme control
    weights stay cheap.
    """
    if b == 0.0:
        if abs(a) >= 1.0:
            raise RiccatiError("uncontrollable and unstable regime")
        return q / (1.0 - a * a)
    bb = b * b
    lin = r * (1.0 - a * a) - q * bb
    disc = lin * lin + 4.0 * bb * q * r
    p = (-lin + math.sqrt(disc)) / (2.0 * bb)
    if not (math.isfinite(p) and p > 0.0):
        raise RiccatiError("Riccati equation has no positive solution")
    return p


def lqr_oracle(spec: PlantSpec, episodes: int = 1000, seed: int = 0) -> LQRResult:
    """Per-regime discrete-time LQR gains for the Euler-discretized plant.

    Discretization: A_d = 1 + dt·A_i, B_d = dt·B_i, stage cost (Q x² + R u²)/2.
    Also simulates the switched controller over noisy episodes and reports
    its mean episode reward.
    """
    gains = []
    values = []
    for i in range(2):
        a_d = 1.0 + spec.dt * spec.a_coeffs[i]
        b_d = spec.dt * spec.b_coeffs[i]
        p = _scalar_dare(a_d, b_d, spec.q_weight, spec.r_weight)
        k = b_d * p * a_d / (spec.r_weight + b_d * b_d * p)
        if abs(a_d - b_d * k) >= 1.0:
            raise RiccatiError(f"regime {i} not stabilized by the Riccati gain")
        gains.append(k)
        values.append(p)

    policy = make_switched_lqr_policy(tuple(gains))
    env = PlantEnv(spec)
    mean_reward, _ = evaluate_policy(env, policy, episodes, seed)
    return LQRResult(gains=(gains[0], gains[1]),
                     riccati_value=(values[0], values[1]),
                     expected_cost=mean_reward)


def make_switched_lqr_policy(gains: tuple[float, float]):
    def policy(state, rng=None):
        x = float(np.asarray(state).reshape(-1)[0])
        k = gains[plant_regime(x)]
        return np.array([-k * x])
    return policy


# ---------------------------------------------------------------------------
# Two-link pendulum balance (torque on the central joint)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PendulumSpec:
    """Underactuated two-link pendulum; the elbow joint is driven.

    Angles follow the convention of the classic swing-up literature:
    theta1 is the shoulder angle measured from hanging straight down,
    theta2 the relative elbow angle; the goal configuration is both links
    upright (theta1 = pi, theta2 = 0).  Actions are clamped to [-1, 1] and
    scaled by `max_torque`.
    """

    m1: float = 1.0
    m2: float = 1.0
    l1: float = 1.0
    l2: float = 1.0
    lc1: float = 0.5
    lc2: float = 0.5
    i1: float = 1.0
    i2: float = 1.0
    gravity: float = 9.8
    max_torque: float = 15.0
    dt: float = 0.02
    integrator: str = "rk4"
    c_dist: float = 1.0
    c_vel: float = 0.05
    terminal_cone: float = 0.35       # rad around straight down, both links
    tip_height_threshold: float = -1.5  # terminal when the tip drops below this
    max_steps: int = 1000
    reset_angle_spread: float = 0.4
    reset_vel_spread: float = 0.3

    def __post_init__(self):
        if min(self.m1, self.m2, self.l1, self.l2, self.lc1, self.lc2,
               self.i1, self.i2, self.gravity, self.dt) <= 0:
            raise ContractViolation("physical parameters must be positive")
        if self.integrator != "rk4":
            raise ContractViolation("only rk4 integration is supported")


def pendulum_derivatives(spec: PendulumSpec, state: np.ndarray, tau: float) -> np.ndarray:
    """Equations of motion for torque tau applied at the elbow joint."""
    th1, th2, w1, w2 = state
    m1, m2 = spec.m1, spec.m2
    l1 = spec.l1
    lc1, lc2 = spec.lc1, spec.lc2
    i1, i2 = spec.i1, spec.i2
    g = spec.gravity

    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(th2)) + i1 + i2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(th2)) + i2
    phi2 = m2 * lc2 * g * math.cos(th1 + th2 - math.pi / 2)
    phi1 = (-m2 * l1 * lc2 * w2 * (w2 + 2 * w1) * math.sin(th2)
            + (m1 * lc1 + m2 * l1) * g * math.cos(th1 - math.pi / 2) + phi2)
    a2 = ((tau + (d2 / d1) * phi1 - m2 * l1 * lc2 * w1 * w1 * math.sin(th2) - phi2)
          / (m2 * lc2 ** 2 + i2 - d2 * d2 / d1))
    a1 = -(d2 * a2 + phi1) / d1
    return np.array([w1, w2, a1, a2])


def rk4_step(spec: PendulumSpec, state: np.ndarray, tau: float, dt: float) -> np.ndarray:
    k1 = pendulum_derivatives(spec, state, tau)
    k2 = pendulum_derivatives(spec, state + 0.5 * dt * k1, tau)
    k3 = pendulum_derivatives(spec, state + 0.5 * dt * k2, tau)
    k4 = pendulum_derivatives(spec, state + dt * k3, tau)
    return state + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def pendulum_energy(spec: PendulumSpec, state: np.ndarray) -> float:
    """Kinetic plus potential energy; conserved under zero torque."""
    th1, th2, w1, w2 = state
    m1, m2 = spec.m1, spec.m2
    l1 = spec.l1
    lc1, lc2 = spec.lc1, spec.lc2
    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(th2)) + spec.i1 + spec.i2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(th2)) + spec.i2
    kinetic = 0.5 * d1 * w1 * w1 + d2 * w1 * w2 + 0.5 * (m2 * lc2 ** 2 + spec.i2) * w2 * w2
    potential = (-(m1 * lc1 + m2 * l1) * spec.gravity * math.cos(th1)
                 - m2 * lc2 * spec.gravity * math.cos(th1 + th2))
    return kinetic + potential


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _up_angles(state: np.ndarray) -> tuple[float, float]:
    """Absolute angular distance of each link from upright, in [0, pi]."""
    th1, th2 = state[0], state[1]
    return abs(wrap_angle(th1 - math.pi)), abs(wrap_angle(th1 + th2 - math.pi))


def pendulum_tip_height(spec: PendulumSpec, state: np.ndarray) -> float:
    """Height of the end of the second link above the pivot; l1+l2 upright."""
    th1, th2 = state[0], state[1]
    return -spec.l1 * math.cos(th1) - spec.l2 * math.cos(th1 + th2)


def pendulum_step(spec: PendulumSpec, state: np.ndarray, action) -> tuple[np.ndarray, float, bool]:
    """One control step: clamp the action, integrate, score the new state.

    Reward: 10 - c_dist·(sum of both links' angular distance to upright)
    - c_vel·(w1² + w2²), so the per-step reward never exceeds 10.  Terminal
    when both links fall within `terminal_cone` of hanging straight down or
    the tip drops below `tip_height_threshold`.
    """
    a = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -1.0, 1.0))
    tau = a * spec.max_torque
    new_state = rk4_step(spec, np.asarray(state, dtype=float), tau, spec.dt)
    if not np.all(np.isfinite(new_state)):
        raise NumericFault("pendulum state diverged")
    d1, d2 = _up_angles(new_state)
    vel = new_state[2] ** 2 + new_state[3] ** 2
    reward = 10.0 - spec.c_dist * (d1 + d2) - spec.c_vel * vel
    terminal = ((d1 > math.pi - spec.terminal_cone) and (d2 > math.pi - spec.terminal_cone)) \
        or pendulum_tip_height(spec, new_state) < spec.tip_height_threshold
    return new_state, reward, terminal


def pendulum_observe(state: np.ndarray) -> np.ndarray:
    """Deviation-from-upright coordinates (d1, d2, w1, w2).

    d1 wraps the shoulder angle around the upright so the goal state is the
    origin; d2 is the relative elbow angle.
    """
    th1, th2, w1, w2 = state
    return np.array([wrap_angle(th1 - math.pi), wrap_angle(th2), w1, w2])


class PendulumEnv:
    """Balance episodes: reset near upright, fall into the down cone ends it."""

    def __init__(self, spec: PendulumSpec):
        self.spec = spec
        self.state_dim = 4
        self.action_dim = 1
        self._state = np.zeros(4)
        self._steps = 0
        self._done = True

    def reset(self, rng: RngStream) -> np.ndarray:
        s = self.spec
        self._state = np.array([
            math.pi + rng.uniform(-s.reset_angle_spread, s.reset_angle_spread),
            rng.uniform(-s.reset_angle_spread, s.reset_angle_spread),
            rng.uniform(-s.reset_vel_spread, s.reset_vel_spread),
            rng.uniform(-s.reset_vel_spread, s.reset_vel_spread),
        ])
        self._steps = 0
        self._done = False
        return pendulum_observe(self._state)

    def step(self, action):
        if self._done:
            raise ContractViolation("step after terminal")
        self._state, reward, terminal = pendulum_step(self.spec, self._state, action)
        self._steps += 1
        if self._steps >= self.spec.max_steps:
            terminal = True
        self._done = terminal
        return pendulum_observe(self._state), reward, terminal


# ---------------------------------------------------------------------------
# Policy evaluation
# ---------------------------------------------------------------------------

def evaluate_policy(env, policy, episodes: int, seed: int) -> tuple[float, float]:
    """(mean episode reward, mean episode length), deterministic given seed.

    `policy` is a callable (state, rng) -> action.
    """
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    root = RngStream(seed)
    totals = []
    lengths = []
    for ep in range(episodes):
        state = env.reset(root.child(RNG_EVAL_ENV, ep))
        prng = root.child(RNG_EVAL_POLICY, ep)
        total = 0.0
        steps = 0
        while True:
            state, reward, terminal = env.step(policy(state, prng))
            total += reward
            steps += 1
            if terminal:
                break
        totals.append(total)
        lengths.append(steps)
    return float(np.mean(totals)), float(np.mean(lengths))
