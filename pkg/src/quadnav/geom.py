"""Quaternion algebra and world/body frame transforms.

Conventions used everywhere in the package:

- quaternions are scalar-first ``(w, x, y, z)`` and use the Hamilton product;
- a unit quaternion ``q`` describes the body attitude, i.e. its rotation
  matrix ``R(q)`` maps body-frame vectors into the world frame;
- ``a ⊗ b`` rotates by ``b`` first (in the body frame of ``a``), then by ``a``,
  so ``R(a ⊗ b) = R(a) R(b)``.

All functions broadcast over leading axes: quaternions have shape ``(..., 4)``
and vectors ``(..., 3)``. Everything is computed in float64.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

NORM_FLOOR = 1e-12


class DegenerateQuaternionError(ValueError):
    """Raised when normalizing a quaternion whose norm is (numerically) zero."""


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def quat_normalize(q) -> np.ndarray:
    q = _as_f64(q)
    norm = np.sqrt(np.sum(q * q, axis=-1, keepdims=True))
    if np.any(norm <= NORM_FLOOR):
        raise DegenerateQuaternionError(f"cannot normalize quaternion with norm <= {NORM_FLOOR}")
    return q / norm


def quat_conj(q) -> np.ndarray:
    q = _as_f64(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    a = _as_f64(a)
    b = _as_f64(b)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis (cheaper than ``np.cross`` for 3-vectors)."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def _rotate(q: np.ndarray, v: np.ndarray, sign: float) -> np.ndarray:
    # v' = v + 2w(u x v) + 2u x (u x v), with u negated for the inverse rotation
    w = q[..., :1]
    u = sign * q[..., 1:]
    t = 2.0 * cross(u, v)
    return v + w * t + cross(u, t)


def rotate_body_to_world(q, v_body) -> np.ndarray:
    """Return ``R(q) v``."""
    return _rotate(_as_f64(q), _as_f64(v_body), 1.0)


def rotate_world_to_body(q, v_world) -> np.ndarray:
    """Return ``R(q)ᵀ v``."""
    return _rotate(_as_f64(q), _as_f64(v_world), -1.0)


def subtract_frame_transforms(p_robot, q_robot, p_goal) -> np.ndarray:
    """Goal position expressed in the robot's body frame."""
    return rotate_world_to_body(q_robot, _as_f64(p_goal) - _as_f64(p_robot))


def quat_integrate(q, omega_body, dt: float) -> np.ndarray:
    """First-order attitude update ``normalize(q + dt/2 · q ⊗ (0, ω))``.

    ``omega_body`` is the body-frame angular velocity in rad/s.
    """
    q = _as_f64(q)
    omega_body = _as_f64(omega_body)
    omega_q = np.concatenate([np.zeros(omega_body.shape[:-1] + (1,)), omega_body], axis=-1)
    return quat_normalize(q + (0.5 * dt) * quat_mul(q, omega_q))


def yaw_quat(yaw) -> np.ndarray:
    """Rotation by ``yaw`` radians about the world z axis."""
    half = 0.5 * _as_f64(yaw)
    zeros = np.zeros_like(half)
    return np.stack([np.cos(half), zeros, zeros, np.sin(half)], axis=-1)
