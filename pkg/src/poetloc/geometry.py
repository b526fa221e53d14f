"""Rigid-body pose math: quaternions, SE(3) transforms, pinhole projection.

A camera pose is a 7-vector everywhere in this package: three meters of
translation followed by a unit quaternion in [qw, qx, qy, qz] order.  The
helpers here convert between that representation and 4x4 homogeneous
matrices, which is where composition actually happens, and provide the
projection model used by the depth renderer.

Conventions that the rest of the package relies on:

- Quaternions are canonicalized so qw >= 0 at construction.  A quaternion
  and its negation encode the same rotation, so this costs nothing and
  makes round trips exact.
- A pose maps world coordinates into the camera frame.  Refinement
  composes a correction on the left: the corrected matrix is
  H(delta) @ H(initial), converted back to a 7-vector.
- The camera looks down +z.  Points at or behind ``Z_NEAR`` do not
  project.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, absolute, atan2, sqrt

# Points closer than this (meters) are treated as behind the camera.
Z_NEAR = 0.05


@dataclass(eq=False)
class Pose7D:
    """Translation (meters) plus unit quaternion [qw, qx, qy, qz].

    The quaternion is normalized and sign-flipped so qw >= 0 when the
    pose is built, so two poses holding the same rotation compare equal
    componentwise.
    """

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).reshape(3)
        q = np.array(self.q, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(q))
        if norm < 1e-8:
            raise ValueError("quaternion norm too small to normalize")
        q = q / norm
        if q[0] < 0.0:
            q = -q
        self.t = t
        self.q = q

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_vector(cls, v):
        """Build a pose from a flat [tx, ty, tz, qw, qx, qy, qz] array."""
        v = np.asarray(v, dtype=np.float64).reshape(7)
        return cls(v[:3], v[3:])

    def to_vector(self):
        return np.concatenate([self.t, self.q])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera model: focal lengths, principal point, image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width):
            raise ValueError("cx must lie inside the image")
        if not (0 <= self.cy < self.height):
            raise ValueError("cy must lie inside the image")


# -- quaternion algebra ------------------------------------------------------


def quaternion_multiply(a, b):
    """Hamilton product a * b, both in [qw, qx, qy, qz] order."""
    aw, ax, ay, az = (float(x) for x in a)
    bw, bx, by, bz = (float(x) for x in b)
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quaternion_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quaternion_from_axis_angle(axis, angle):
    """Unit quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(axis))
    if n < 1e-12:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * float(angle)
    out = np.empty(4)
    out[0] = math.cos(half)
    out[1:] = math.sin(half) * axis / n
    return out


def quaternion_to_matrix(q):
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(r):
    """Unit quaternion of a rotation matrix.

    Uses the largest of the four squared components to pick the division
    branch, which keeps the result stable for rotations near 180 degrees.
    """
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [
                0.25 * s,
                (r[2, 1] - r[1, 2]) / s,
                (r[0, 2] - r[2, 0]) / s,
                (r[1, 0] - r[0, 1]) / s,
            ]
        )
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [
                (r[2, 1] - r[1, 2]) / s,
                0.25 * s,
                (r[0, 1] + r[1, 0]) / s,
                (r[0, 2] + r[2, 0]) / s,
            ]
        )
    elif r[1, 1] >= r[2, 2]:
        s = math.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
        q = np.array(
            [
                (r[0, 2] - r[2, 0]) / s,
                (r[0, 1] + r[1, 0]) / s,
                0.25 * s,
                (r[1, 2] + r[2, 1]) / s,
            ]
        )
    else:
        s = math.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
        q = np.array(
            [
                (r[1, 0] - r[0, 1]) / s,
                (r[0, 2] + r[2, 0]) / s,
                (r[1, 2] + r[2, 1]) / s,
                0.25 * s,
            ]
        )
    return q / np.linalg.norm(q)


# -- pose <-> matrix ---------------------------------------------------------


def pose_to_homogeneous(p: Pose7D) -> np.ndarray:
    """4x4 homogeneous matrix of a pose.

    The quaternion must already be unit length; anything off by more than
    1e-6 is rejected so a bad caller fails loudly instead of producing a
    slightly scaled rotation.
    """
    q = np.asarray(p.q, dtype=np.float64)
    if abs(float(np.linalg.norm(q)) - 1.0) > 1e-6:
        raise ValueError("pose quaternion must be unit length")
    m = np.eye(4)
    m[:3, :3] = quaternion_to_matrix(q)
    m[:3, 3] = np.asarray(p.t, dtype=np.float64)
    return m


def homogeneous_to_pose(m) -> Pose7D:
    """Pose of a 4x4 rigid transform; inverse of pose_to_homogeneous."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError("expected a 4x4 matrix, got shape %s" % (m.shape,))
    if not np.array_equal(m[3], np.array([0.0, 0.0, 0.0, 1.0])):
        raise ValueError("bottom row must be [0, 0, 0, 1]")
    r = m[:3, :3]
    if float(np.max(np.abs(r.T @ r - np.eye(3)))) > 1e-4:
        raise ValueError("rotation block is not orthonormal")
    if float(np.linalg.det(r)) < 0.0:
        raise ValueError("rotation block must not be a reflection")
    return Pose7D(m[:3, 3].copy(), matrix_to_quaternion(r))


def pose_inverse(p: Pose7D) -> Pose7D:
    """Pose whose matrix is the inverse of H(p)."""
    m = pose_to_homogeneous(p)
    r = m[:3, :3]
    inv = np.eye(4)
    inv[:3, :3] = r.T
    inv[:3, 3] = -r.T @ m[:3, 3]
    return homogeneous_to_pose(inv)


def compose_refined_pose(p0: Pose7D, delta: Pose7D) -> Pose7D:
    """Apply a correction on the left of an initial pose.

    Returns the pose of H(delta) @ H(p0).  When ``delta`` is what a
    refinement step predicted for an image rendered at ``p0``, the result
    is the corrected absolute pose.
    """
    return homogeneous_to_pose(pose_to_homogeneous(delta) @ pose_to_homogeneous(p0))


# -- projection --------------------------------------------------------------


def transform_points(points, p: Pose7D):
    """Map world points into the camera frame of ``p``.

    Accepts anything shaped (N, 3); returns an (N, 3) float array with one
    row per input point.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = pose_to_homogeneous(p)
    return pts @ m[:3, :3].T + m[:3, 3]


def project_point(pv, k: CameraIntrinsics):
    """Project one camera-frame point through a pinhole model.

    Returns (u, v, depth) in continuous pixel coordinates, or None when
    the point sits behind the near plane or lands outside the span of
    pixel centers [0, width-1] x [0, height-1].
    """
    x, y, z = (float(v) for v in pv)
    if z <= Z_NEAR:
        return None
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    if u < 0.0 or u > k.width - 1 or v < 0.0 or v > k.height - 1:
        return None
    return (u, v, z)


def project_points(pts_cam, k: CameraIntrinsics):
    """Vectorized projection of many camera-frame points.

    Returns (u, v, depth, valid); entries where ``valid`` is False may
    hold garbage and must not be read.  Agrees elementwise with
    project_point.
    """
    pts = np.asarray(pts_cam, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pts[:, 0] / z + k.cx
        v = k.fy * pts[:, 1] / z + k.cy
    valid = (
        (z > Z_NEAR)
        & (u >= 0.0)
        & (u <= k.width - 1)
        & (v >= 0.0)
        & (v <= k.height - 1)
    )
    return u, v, z, valid


def unproject_pixel(u, v, depth, k: CameraIntrinsics):
    """Camera-frame point of a pixel with known depth; inverse of projection."""
    x = (float(u) - k.cx) * float(depth) / k.fx
    y = (float(v) - k.cy) * float(depth) / k.fy
    return np.array([x, y, float(depth)])


# -- rotation distance -------------------------------------------------------


def quaternion_distance(q, qhat) -> float:
    """Half-angle gap between two unit quaternions, in [0, pi/2] radians.

    Computed as atan2 of the vector norm against |qw| of the relative
    quaternion, so negating either input changes nothing.  The full
    geodesic rotation angle is twice this value.  Identical rotations
    report exactly zero: the product terms cancel only up to round-off,
    so bit-equal (or bit-negated) inputs are recognized up front.
    """
    q = np.asarray(q, dtype=np.float64)
    qhat = np.asarray(qhat, dtype=np.float64)
    if np.array_equal(qhat, q) or np.array_equal(qhat, -q):
        return 0.0
    rel = quaternion_multiply(qhat, quaternion_conjugate(q))
    return math.atan2(math.sqrt(rel[1] ** 2 + rel[2] ** 2 + rel[3] ** 2), abs(rel[0]))


def quaternion_distance_graph(qhat: Tensor, q) -> Tensor:
    """Differentiable version of quaternion_distance for training losses.

    ``qhat`` is a length-4 prediction node; ``q`` is a constant reference.
    The relative quaternion is a linear map of ``qhat`` (right
    multiplication by the conjugate of ``q``), so the whole expression
    stays inside the graph.  At the zero-rotation point the gradient is
    zero rather than undefined.
    """
    c = quaternion_conjugate(q)
    m = np.array(
        [
            [c[0], -c[1], -c[2], -c[3]],
            [c[1], c[0], c[3], -c[2]],
            [c[2], -c[3], c[0], c[1]],
            [c[3], c[2], -c[1], c[0]],
        ]
    )
    mat = Tensor(m.astype(qhat.data.dtype))
    rel = mat.matmul(qhat.reshape(4, 1)).reshape(4)
    vec = rel[1:4]
    mag = sqrt((vec * vec).sum())
    return atan2(mag, absolute(rel[0]))
