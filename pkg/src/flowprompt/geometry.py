"""Rotation representations for the aligned action space.

Rotations are carried through training as 6 numbers: the first two columns
of the rotation matrix, packed column-major.  Decoding orthonormalizes with
Gram-Schmidt, so any pair of non-degenerate, non-parallel 3-vectors maps
back onto SO(3) continuously.  All functions are pure and accept stacked
inputs (leading batch dimensions).
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

ORTHO_TOL = 1e-9
DEGENERACY_EPS = 1e-8  # norms below this are treated as degenerate, not noise


def rot_from_axis_angle(axis, angle):
    """Rodrigues' formula: rotation by `angle` radians about unit `axis`.

    Supports stacking: axis (..., 3), angle (...,) -> (..., 3, 3).
    """
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    norms = np.linalg.norm(axis, axis=-1)
    if not np.allclose(norms, 1.0, atol=ORTHO_TOL, rtol=0.0):
        raise InputError(f"axis must be unit length within {ORTHO_TOL:g}, got |axis|={norms}")
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    eye = np.broadcast_to(np.eye(3), k.shape)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return eye + s * k + (1.0 - c) * (k @ k)


def rot_about_z(angle):
    """Planar heading -> 3D rotation about the z axis."""
    angle = np.asarray(angle, dtype=np.float64)
    axis = np.zeros(angle.shape + (3,))
    axis[..., 2] = 1.0
    return rot_from_axis_angle(axis, angle)


def heading_from_rot(r):
    """Extract the z-axis heading angle from a rotation matrix (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    return np.arctan2(r[..., 1, 0], r[..., 0, 0])


def is_rotation_matrix(r, tol=ORTHO_TOL):
    """True when columns are orthonormal and the determinant is +1 within tol."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        return False
    gram = np.swapaxes(r, -1, -2) @ r
    eye = np.broadcast_to(np.eye(3), gram.shape)
    ortho = np.all(np.abs(gram - eye) <= tol, axis=(-1, -2))
    det = np.abs(np.linalg.det(r) - 1.0) <= tol
    return bool(np.all(ortho & det))


def rot6d_encode(r):
    """Pack the first two columns of a rotation matrix, column-major.

    (..., 3, 3) -> (..., 6) as (c1x, c1y, c1z, c2x, c2y, c2z).
    """
    r = np.asarray(r, dtype=np.float64)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def rot6d_decode(v):
    """Gram-Schmidt reconstruction of a rotation matrix from 6 numbers.

    b1 = normalize(a1); b2 = normalize(a2 - (b1.a2) b1); b3 = b1 x b2.
    Raises InputError on degenerate input (near-zero or near-parallel
    columns) instead of emitting NaN.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 6:
        raise InputError(f"rot6d vector must have 6 components, got shape {v.shape}")
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= DEGENERACY_EPS):
        raise InputError("degenerate rot6d input: first column norm below eps")
    b1 = a1 / n1
    proj = np.sum(b1 * a2, axis=-1, keepdims=True)
    u2 = a2 - proj * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= DEGENERACY_EPS):
        raise InputError("degenerate rot6d input: second column parallel to first")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def geodesic_dist(r1, r2):
    """Angle in [0, pi] between two rotations: arccos((tr(R1^T R2) - 1) / 2)."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    prod = np.swapaxes(r1, -1, -2) @ r2
    tr = np.trace(prod, axis1=-2, axis2=-1)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
