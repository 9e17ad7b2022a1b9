"""Gaze representations, the angular error metric and the vector loss.

Angles are (pitch, yaw) in radians along the last axis. Vectors are unit
line-of-sight directions under the convention

    g = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw))

so that a zero gaze looks down the negative z axis.
"""
from __future__ import annotations

import numpy as np

POLE_MARGIN = 1e-9
_MIN_NORM = 1e-12


class GazeDomainError(ValueError):
    """An angle or cosine argument lies outside its admissible interval."""


class DegenerateVectorError(ValueError):
    """A gaze vector is too short to define a direction."""


def angles_to_vector(angles, check: bool = True) -> np.ndarray:
    """Convert ``(..., 2)`` pitch/yaw angles to ``(..., 3)`` unit vectors.

    With ``check=False`` the formula is applied to any finite pitch; the
    trainer uses this for raw network outputs.
    """
    a = np.asarray(angles, dtype=np.float64)
    pitch, yaw = a[..., 0], a[..., 1]
    if check and np.any(np.abs(pitch) >= np.pi / 2):
        raise GazeDomainError("pitch must lie strictly inside (-pi/2, pi/2)")
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def angles_to_vector_jacobian(angles) -> np.ndarray:
    """d vector / d (pitch, yaw), shape ``(..., 3, 2)``."""
    a = np.asarray(angles, dtype=np.float64)
    p, y = a[..., 0], a[..., 1]
    cp, sp, cy, sy = np.cos(p), np.sin(p), np.cos(y), np.sin(y)
    jac = np.empty(a.shape[:-1] + (3, 2))
    jac[..., 0, 0] = sp * sy
    jac[..., 0, 1] = -cp * cy
    jac[..., 1, 0] = -cp
    jac[..., 1, 1] = 0.0
    jac[..., 2, 0] = sp * cy
    jac[..., 2, 1] = cp * sy
    return jac


def _norms(g, what="vector"):
    n = np.linalg.norm(g, axis=-1)
    if np.any(n < _MIN_NORM):
        raise DegenerateVectorError(f"{what} norm below {_MIN_NORM}")
    return n


def vector_to_angles(vectors) -> np.ndarray:
    """Inverse of :func:`angles_to_vector` for any nonzero direction.

    Pitch is clamped to ``pi/2 - 1e-9`` in magnitude so exact poles map back
    into the open domain of the forward conversion.
    """
    g = np.asarray(vectors, dtype=np.float64)
    n = _norms(g)
    g = g / n[..., None]
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    # arctan2 form is well conditioned near the poles, unlike arcsin(-gy)
    pitch = np.arctan2(-gy, np.hypot(gx, gz))
    pitch = np.clip(pitch, -(np.pi / 2 - POLE_MARGIN), np.pi / 2 - POLE_MARGIN)
    yaw = np.arctan2(-gx, -gz)
    yaw = np.where(yaw == -np.pi, np.pi, yaw)
    return np.stack([pitch, yaw], axis=-1)


def cosine_similarity(gp, gt) -> np.ndarray:
    gp = np.asarray(gp, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    npn = _norms(gp, "predicted vector")
    ntn = _norms(gt, "true vector")
    return np.sum(gp * gt, axis=-1) / (npn * ntn)


def angular_error(gp, gt) -> np.ndarray:
    """Angle between two gaze directions in degrees, in [0, 180]."""
    cos = np.clip(cosine_similarity(gp, gt), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def angular_error_from_angles(pred_angles, true_angles) -> np.ndarray:
    return angular_error(
        angles_to_vector(pred_angles, check=False), angles_to_vector(true_angles, check=False)
    )


def vector_loss(gp, gt) -> np.ndarray:
    """Sum of squared componentwise differences between two gaze vectors."""
    d = np.asarray(gp, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sum(d * d, axis=-1)


def angular_grad_magnitude(x):
    """Derivative magnitude of arccos at cosine ``x``: 1/sqrt(1 - x^2)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) >= 1.0):
        raise GazeDomainError("cosine argument must satisfy |x| < 1")
    out = 1.0 / np.sqrt(1.0 - x * x)
    return float(out) if out.ndim == 0 else out


def vector_loss_grad_angles(pred_angles, true_angles):
    """Mean vector loss over a batch and its gradient w.r.t. predicted angles."""
    pred = np.asarray(pred_angles, dtype=np.float64)
    gp = angles_to_vector(pred, check=False)
    gt = angles_to_vector(true_angles, check=False)
    diff = gp - gt
    n = pred.shape[0]
    loss = float(np.sum(diff * diff) / n)
    dg = 2.0 * diff / n
    grad = np.einsum("bk,bkj->bj", dg, angles_to_vector_jacobian(pred))
    return loss, grad


def angular_loss_grad_angles(pred_angles, true_angles):
    """Mean angular loss (radians) and its gradient w.r.t. predicted angles.

    Offered for experiments only; the gradient blows up as the error goes to
    zero, which is why training defaults to :func:`vector_loss_grad_angles`.
    """
    pred = np.asarray(pred_angles, dtype=np.float64)
    gp = angles_to_vector(pred, check=False)
    gt = angles_to_vector(true_angles, check=False)
    # both are unit vectors, so the cosine is a plain dot product
    x = np.sum(gp * gt, axis=-1)
    n = pred.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        loss = float(np.mean(np.arccos(np.clip(x, -1.0, 1.0))))
        dx = -1.0 / np.sqrt(1.0 - x * x) / n
    dg = dx[:, None] * gt
    grad = np.einsum("bk,bkj->bj", dg, angles_to_vector_jacobian(pred))
    return loss, grad
