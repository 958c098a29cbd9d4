"""6-DOF rigid-body integrator for a quadrotor driven by net thrust and body torques.

States and commands are batched: every array carries a leading environment axis
(or none, for a single body). Each body is integrated independently, so slicing
a batch and stepping the pieces gives bit-identical results to stepping the
whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import quat_integrate, rotate_body_to_world

# Newton iterations for the implicit-midpoint gyroscopic solve.
GYRO_NEWTON_ITERS = 3


class SimulationDivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, message: str, env_indices=None, state=None):
        super().__init__(message)
        self.env_indices = env_indices
        self.state = state


@dataclass
class BodyParams:
    """Crazyflie-class defaults; the values are a modelling choice, override freely."""

    mass: float = 0.033
    inertia_diag: tuple[float, float, float] = (1.4e-5, 1.4e-5, 2.17e-5)
    gravity: float = 9.81

    def __post_init__(self):
        self.inertia_diag = tuple(float(v) for v in self.inertia_diag)
        if self.mass <= 0 or min(self.inertia_diag) <= 0:
            raise ValueError("mass and inertia must be positive")

    @property
    def weight(self) -> float:
        return self.mass * self.gravity


@dataclass
class RigidBodyState:
    position: np.ndarray  # world frame, m
    orientation: np.ndarray  # body->world, (w, x, y, z)
    lin_vel: np.ndarray  # world frame, m/s
    ang_vel: np.ndarray  # body frame, rad/s

    @classmethod
    def at_rest(cls, n: int | None = None, position=None, orientation=None) -> "RigidBodyState":
        shape = () if n is None else (n,)
        pos = np.zeros(shape + (3,)) if position is None else np.array(position, dtype=np.float64)
        quat = np.zeros(shape + (4,)) if orientation is None else np.array(orientation, dtype=np.float64)
        if orientation is None:
            quat[..., 0] = 1.0
        return cls(pos, quat, np.zeros(shape + (3,)), np.zeros(shape + (3,)))

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(
            self.position.copy(), self.orientation.copy(), self.lin_vel.copy(), self.ang_vel.copy()
        )

    def take(self, idx) -> "RigidBodyState":
        return RigidBodyState(
            self.position[idx], self.orientation[idx], self.lin_vel[idx], self.ang_vel[idx]
        )

    def put(self, idx, other: "RigidBodyState") -> None:
        self.position[idx] = other.position
        self.orientation[idx] = other.orientation
        self.lin_vel[idx] = other.lin_vel
        self.ang_vel[idx] = other.ang_vel

    def finite_mask(self) -> np.ndarray:
        return (
            np.isfinite(self.position).all(axis=-1)
            & np.isfinite(self.orientation).all(axis=-1)
            & np.isfinite(self.lin_vel).all(axis=-1)
            & np.isfinite(self.ang_vel).all(axis=-1)
        )


@dataclass
class WrenchCommand:
    thrust: np.ndarray  # N, along body +z
    torque: np.ndarray  # N·m, body frame
    disturbance_world: np.ndarray = field(default=None)  # N, world frame

    def __post_init__(self):
        self.thrust = np.asarray(self.thrust, dtype=np.float64)
        self.torque = np.asarray(self.torque, dtype=np.float64)
        if self.disturbance_world is None:
            self.disturbance_world = np.zeros_like(self.torque)
        else:
            self.disturbance_world = np.asarray(self.disturbance_world, dtype=np.float64)

    def take(self, idx) -> "WrenchCommand":
        return WrenchCommand(self.thrust[idx], self.torque[idx], self.disturbance_world[idx])


def angular_velocity_update(omega, torque, inertia, dt: float) -> np.ndarray:
    """Advance Euler's rotation equations by one step.

    Torque enters as a plain Euler impulse; the gyroscopic term ``ω × Iω`` is
    evaluated at the midpoint ``(ω + ω')/2`` and solved with a fixed number of
    Newton iterations. The midpoint rule makes the gyroscopic term exactly
    work-free, so torque-free rotational energy does not drift.
    """
    ix, iy, iz = (float(v) for v in inertia)
    omega = np.asarray(omega, dtype=np.float64)
    torque = np.asarray(torque, dtype=np.float64)
    o0, o1, o2 = omega[..., 0], omega[..., 1], omega[..., 2]
    t0, t1, t2 = torque[..., 0], torque[..., 1], torque[..., 2]
    # ω × Iω for a diagonal inertia, component by component
    kx, ky, kz = iz - iy, ix - iz, iy - ix

    n0 = o0 + dt * (t0 - kx * o1 * o2) / ix
    n1 = o1 + dt * (t1 - ky * o2 * o0) / iy
    n2 = o2 + dt * (t2 - kz * o0 * o1) / iz
    h = 0.5 * dt
    for _ in range(GYRO_NEWTON_ITERS):
        m0, m1, m2 = 0.5 * (o0 + n0), 0.5 * (o1 + n1), 0.5 * (o2 + n2)
        r0 = ix * (n0 - o0) - dt * (t0 - kx * m1 * m2)
        r1 = iy * (n1 - o1) - dt * (t1 - ky * m2 * m0)
        r2 = iz * (n2 - o2) - dt * (t2 - kz * m0 * m1)
        # Jacobian of the residual w.r.t. the new rate; solved via its adjugate
        a01, a02 = h * kx * m2, h * kx * m1
        a10, a12 = h * ky * m2, h * ky * m0
        a20, a21 = h * kz * m1, h * kz * m0
        c00 = iy * iz - a12 * a21
        c01 = a02 * a21 - a01 * iz
        c02 = a01 * a12 - a02 * iy
        c10 = a12 * a20 - a10 * iz
        c11 = ix * iz - a02 * a20
        c12 = a02 * a10 - ix * a12
        c20 = a10 * a21 - iy * a20
        c21 = a01 * a20 - ix * a21
        c22 = ix * iy - a01 * a10
        inv_det = 1.0 / (ix * c00 + a01 * c10 + a02 * c20)
        n0 = n0 - (c00 * r0 + c01 * r1 + c02 * r2) * inv_det
        n1 = n1 - (c10 * r0 + c11 * r1 + c12 * r2) * inv_det
        n2 = n2 - (c20 * r0 + c21 * r1 + c22 * r2) * inv_det
    return np.stack([n0, n1, n2], axis=-1)


def step_rigid_body(
    state: RigidBodyState, cmd: WrenchCommand, params: BodyParams, dt: float
) -> RigidBodyState:
    """One semi-implicit Euler step: velocities first, then poses from the new velocities."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    thrust_body = np.zeros(state.position.shape)
    thrust_body[..., 2] = cmd.thrust
    force = rotate_body_to_world(state.orientation, thrust_body) + cmd.disturbance_world
    # summing weight as a force keeps thrust == m*g an exact fixed point
    force[..., 2] -= params.mass * params.gravity
    lin_vel = state.lin_vel + (force / params.mass) * dt
    position = state.position + lin_vel * dt

    ang_vel = angular_velocity_update(state.ang_vel, cmd.torque, params.inertia_diag, dt)
    orientation = quat_integrate(state.orientation, ang_vel, dt)

    new = RigidBodyState(position, orientation, lin_vel, ang_vel)
    ok = new.finite_mask()
    if not np.all(ok):
        bad = np.flatnonzero(~np.atleast_1d(ok))
        raise SimulationDivergenceError(
            f"non-finite rigid-body state for env(s) {bad.tolist()}", env_indices=bad, state=state
        )
    return new
