"""Small tuple-based vector helpers for the per-tick hot path.

The simulator and expert run millions of 3-vector operations on a single core;
plain float tuples are several times faster than tiny numpy arrays and give
exact equality and hashing for free.
"""

from __future__ import annotations

import math

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]

ZERO: Vec3 = (0.0, 0.0, 0.0)
IDENTITY: Quat = (1.0, 0.0, 0.0, 0.0)
# gripper pointing straight down: 180 degrees about x
TOP_DOWN: Quat = (0.0, 1.0, 0.0, 0.0)


def add(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2])


def sub(a: Vec3, b: Vec3) -> Vec3:
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def scale(a: Vec3, s: float) -> Vec3:
    return (a[0] * s, a[1] * s, a[2] * s)


def norm(a: Vec3) -> float:
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def dist(a: Vec3, b: Vec3) -> float:
    return norm(sub(a, b))


def hdist(a: Vec3, b: Vec3) -> float:
    """Distance in the table (x, y) plane."""
    return math.hypot(a[0] - b[0], a[1] - b[1])


def clamp_box(p: Vec3, lo: Vec3, hi: Vec3) -> Vec3:
    return (
        min(max(p[0], lo[0]), hi[0]),
        min(max(p[1], lo[1]), hi[1]),
        min(max(p[2], lo[2]), hi[2]),
    )


def in_box(p: Vec3, lo: Vec3, hi: Vec3) -> bool:
    return lo[0] <= p[0] <= hi[0] and lo[1] <= p[1] <= hi[1] and lo[2] <= p[2] <= hi[2]


def rotate_z(v: Vec3, angle: float) -> Vec3:
    c, s = math.cos(angle), math.sin(angle)
    return (c * v[0] - s * v[1], s * v[0] + c * v[1], v[2])


def quat_mul(a: Quat, b: Quat) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_normalize(q: Quat) -> Quat:
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if n == 0.0:
        return IDENTITY
    return (q[0] / n, q[1] / n, q[2] / n, q[3] / n)


def quat_integrate(q: Quat, omega: Vec3, dt: float) -> Quat:
    """Propagate orientation by a body-rate ``omega`` held for ``dt``."""
    speed = norm(omega)
    if speed == 0.0:
        return q
    half = 0.5 * speed * dt
    s = math.sin(half) / speed
    dq = (math.cos(half), omega[0] * s, omega[1] * s, omega[2] * s)
    return quat_normalize(quat_mul(q, dq))


def as_vec3(values) -> Vec3:
    x, y, z = values
    return (float(x), float(y), float(z))


def as_quat(values) -> Quat:
    w, x, y, z = values
    return (float(w), float(x), float(y), float(z))
