"""6D rotation parameterization.

Rotations are carried as the first two columns of the rotation matrix,
flattened to 6 numbers (column 0 then column 1). Gram-Schmidt restores the
matrix; the third column is the cross product of the first two.
"""

import numpy as np

from .errors import DegenerateRotation

# Below this the 6D input cannot be orthonormalized reliably in f64.
_NORM_EPS = 1e-8
_PARALLEL_COS_LIMIT = 1.0 - 1e-8


def rot6d_to_matrix(r, check=True):
    """Decode 6D rotation(s) to rotation matrices via Gram-Schmidt.

    Args:
        r: (..., 6) array; r[..., :3] and r[..., 3:] are the two basis vectors.
        check: validate the degeneracy preconditions and raise on violation.

    Returns:
        (..., 3, 3) proper rotation matrices (columns b1, b2, b1 x b2).
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise DegenerateRotation(f"expected trailing dim 6, got {r.shape}")
    a = r[..., :3]
    b = r[..., 3:]
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if check:
        if np.any(na < _NORM_EPS) or np.any(nb < _NORM_EPS):
            raise DegenerateRotation("near-zero basis vector in 6D rotation")
        cos = np.abs(np.einsum("...i,...i->...", a, b)) / np.maximum(na * nb, _NORM_EPS)
        if np.any(cos >= _PARALLEL_COS_LIMIT):
            raise DegenerateRotation("near-parallel basis vectors in 6D rotation")
    b1 = a / na[..., None]
    d = np.einsum("...i,...i->...", b1, b)
    u = b - d[..., None] * b1
    nu = np.linalg.norm(u, axis=-1)
    b2 = u / nu[..., None]
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_to_matrix_vjp(r, grad_matrix):
    """Vector-Jacobian product of rot6d_to_matrix.

    Args:
        r: (..., 6) input used in the forward pass.
        grad_matrix: (..., 3, 3) upstream gradient w.r.t. the output matrix.

    Returns:
        (..., 6) gradient w.r.t. r.
    """
    r = np.asarray(r, dtype=np.float64)
    a = r[..., :3]
    b = r[..., 3:]
    na = np.linalg.norm(a, axis=-1)[..., None]
    b1 = a / na
    d = np.einsum("...i,...i->...", b1, b)[..., None]
    u = b - d * b1
    nu = np.linalg.norm(u, axis=-1)[..., None]
    b2 = u / nu

    g1 = grad_matrix[..., :, 0]
    g2 = grad_matrix[..., :, 1]
    g3 = grad_matrix[..., :, 2]

    # b3 = b1 x b2
    db1 = g1 + np.cross(b2, g3)
    db2 = g2 + np.cross(g3, b1)
    # b2 = u / ||u||
    du = (db2 - np.einsum("...i,...i->...", b2, db2)[..., None] * b2) / nu
    # u = b - (b1.b) b1
    db = du - np.einsum("...i,...i->...", b1, du)[..., None] * b1
    db1 = db1 - np.einsum("...i,...i->...", b1, du)[..., None] * b - d * du
    # b1 = a / ||a||
    da = (db1 - np.einsum("...i,...i->...", b1, db1)[..., None] * b1) / na
    return np.concatenate([da, db], axis=-1)


def matrix_to_rot6d(m):
    """Encode rotation matrices as 6D (first two columns)."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def orthonormalize_rot6d(r, check=True):
    """Project raw 6D coordinates back onto the manifold (GS then re-encode)."""
    return matrix_to_rot6d(rot6d_to_matrix(r, check=check))


def orthonormalize_rot6d_vjp(r, grad_out):
    """VJP of orthonormalize_rot6d: route the 6D gradient through GS."""
    grad_matrix = np.zeros(r.shape[:-1] + (3, 3), dtype=np.float64)
    grad_matrix[..., :, 0] = grad_out[..., :3]
    grad_matrix[..., :, 1] = grad_out[..., 3:]
    return rot6d_to_matrix_vjp(r, grad_matrix)


def identity_rot6d(shape=()):
    """6D encoding of the identity rotation, broadcast to the leading shape."""
    r = np.zeros(shape + (6,), dtype=np.float64)
    r[..., 0] = 1.0
    r[..., 4] = 1.0
    return r


def random_rotation_matrix(rng, shape=()):
    """Uniformly distributed random rotation matrices (QR of Gaussian)."""
    n = int(np.prod(shape)) if shape else 1
    mats = np.empty((n, 3, 3))
    for i in range(n):
        q, rr = np.linalg.qr(rng.standard_normal((3, 3)))
        q = q * np.sign(np.diag(rr))
        if np.linalg.det(q) < 0:
            q[:, 2] = -q[:, 2]
        mats[i] = q
    return mats.reshape(shape + (3, 3)) if shape else mats[0]


def axis_angle_to_matrix(axis, angle):
    """Rodrigues formula for a unit axis and an angle in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )
