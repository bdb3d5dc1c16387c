"""Denavit-Hartenberg forward kinematics, continuous quaternions, parameter Jacobians.

Poses are 7-vectors ``[qw, qx, qy, qz, px, py, pz]`` (scalar-first quaternion, then
position). Quaternion signs are made continuous over the joint box by aligning the
extracted quaternion with the product of per-link half-angle quaternions, which is a
continuous function of the joint vector.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DomainError

REVOLUTE = "revolute"
PRISMATIC = "prismatic"
JOINT_KINDS = (REVOLUTE, PRISMATIC)

# Column order of the parameter Jacobian within each link block.
JACOBIAN_PARAMS = ("alpha", "d", "a")
FD_STEP = 1e-6


def wrap_angle(x: float) -> float:
    """Map an angle into (-pi, pi]."""
    y = math.remainder(float(x), 2.0 * math.pi)
    if y <= -math.pi:
        y += 2.0 * math.pi
    return y


@dataclass(frozen=True)
class DHLink:
    joint_kind: str = REVOLUTE
    theta0: float = 0.0
    alpha: float = 0.0
    a: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if self.joint_kind not in JOINT_KINDS:
            raise DomainError(f"unknown joint kind {self.joint_kind!r}")
        vals = (self.theta0, self.alpha, self.a, self.d)
        if not all(math.isfinite(float(v)) for v in vals):
            raise DomainError(f"non-finite DH parameter in {vals}")
        object.__setattr__(self, "theta0", wrap_angle(self.theta0))
        object.__setattr__(self, "alpha", wrap_angle(self.alpha))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "d", float(self.d))


def _check_rigid(T: np.ndarray, tol: float = 1e-9) -> None:
    R = T[:3, :3]
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        raise DomainError("transform must be a finite 4x4 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise DomainError("transform rotation is not a proper orthonormal matrix")
    if np.any(T[3] != (0.0, 0.0, 0.0, 1.0)):
        raise DomainError("transform bottom row must be [0, 0, 0, 1]")


@dataclass(frozen=True, eq=False)
class DHTable:
    links: tuple
    joint_limits: np.ndarray
    tool: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        links = tuple(self.links)
        if not links:
            raise DomainError("a DH table needs at least one link")
        limits = np.array(self.joint_limits, dtype=float).reshape(len(links), 2)
        if not np.all(limits[:, 0] < limits[:, 1]):
            raise DomainError("joint limits must satisfy lo < hi for every joint")
        tool = np.array(self.tool, dtype=float)
        _check_rigid(tool)
        limits.flags.writeable = False
        tool.flags.writeable = False
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "joint_limits", limits)
        object.__setattr__(self, "tool", tool)

    @property
    def n(self) -> int:
        return len(self.links)

    def __eq__(self, other):
        if not isinstance(other, DHTable):
            return NotImplemented
        return (
            self.links == other.links
            and np.array_equal(self.joint_limits, other.joint_limits)
            and np.array_equal(self.tool, other.tool)
        )

    __hash__ = None

    def phi(self) -> np.ndarray:
        """Calibration parameters ``(alpha_i, d_i, a_i)`` stacked link by link."""
        return np.array([[lk.alpha, lk.d, lk.a] for lk in self.links]).ravel()

    def with_phi(self, phi) -> "DHTable":
        phi = np.asarray(phi, dtype=float).reshape(self.n, 3)
        links = tuple(
            replace(lk, alpha=p[0], d=p[1], a=p[2]) for lk, p in zip(self.links, phi)
        )
        return replace(self, links=links)

    def within_limits(self, q) -> bool:
        q = np.asarray(q, dtype=float)
        lo, hi = self.joint_limits.T
        return bool(np.all(q >= lo) and np.all(q <= hi))


@dataclass(frozen=True, eq=False)
class Pose7:
    quat: np.ndarray
    pos: np.ndarray

    @classmethod
    def from_vector(cls, v) -> "Pose7":
        v = np.asarray(v, dtype=float)
        return cls(v[:4].copy(), v[4:7].copy())

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.quat, self.pos])


# ---------------------------------------------------------------------------
# Link transforms


def _effective(link: DHLink, q):
    q = np.asarray(q, dtype=float)
    if link.joint_kind == REVOLUTE:
        return link.theta0 + q, np.full_like(q, link.d)
    return np.full_like(q, link.theta0), link.d + q


def _dh_matrices(theta, alpha, a, d) -> np.ndarray:
    """Stack of DH matrices; all arguments broadcast to a common shape ``S``."""
    theta, alpha, a, d = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (theta, alpha, a, d))
    )
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    T = np.zeros(theta.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def link_transform(link: DHLink, q: float) -> np.ndarray:
    """Homogeneous transform of one DH link at joint value ``q``."""
    if not math.isfinite(float(q)):
        raise DomainError(f"joint value must be finite, got {q!r}")
    theta, d = _effective(link, float(q))
    return _dh_matrices(theta, link.alpha, link.a, d)


# ---------------------------------------------------------------------------
# Quaternions


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def _shepperd(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to unit quaternions, sign unspecified."""
    R = np.asarray(R, dtype=float)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    tr = m00 + m11 + m22
    choice = np.argmax(np.stack([tr, m00, m11, m22], axis=1), axis=1)
    out = np.empty((R.shape[0], 4))

    i = choice == 0
    s = 2.0 * np.sqrt(1.0 + tr[i])
    out[i] = np.stack(
        [0.25 * s, (R[i, 2, 1] - R[i, 1, 2]) / s, (R[i, 0, 2] - R[i, 2, 0]) / s,
         (R[i, 1, 0] - R[i, 0, 1]) / s], axis=1)
    i = choice == 1
    s = 2.0 * np.sqrt(1.0 + m00[i] - m11[i] - m22[i])
    out[i] = np.stack(
        [(R[i, 2, 1] - R[i, 1, 2]) / s, 0.25 * s, (R[i, 0, 1] + R[i, 1, 0]) / s,
         (R[i, 0, 2] + R[i, 2, 0]) / s], axis=1)
    i = choice == 2
    s = 2.0 * np.sqrt(1.0 + m11[i] - m00[i] - m22[i])
    out[i] = np.stack(
        [(R[i, 0, 2] - R[i, 2, 0]) / s, (R[i, 0, 1] + R[i, 1, 0]) / s, 0.25 * s,
         (R[i, 1, 2] + R[i, 2, 1]) / s], axis=1)
    i = choice == 3
    s = 2.0 * np.sqrt(1.0 + m22[i] - m00[i] - m11[i])
    out[i] = np.stack(
        [(R[i, 1, 0] - R[i, 0, 1]) / s, (R[i, 0, 2] + R[i, 2, 0]) / s,
         (R[i, 1, 2] + R[i, 2, 1]) / s, 0.25 * s], axis=1)

    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out.reshape(shape + (4,))


def _canonical_sign(q: np.ndarray, tie_tol: float = 1e-12) -> np.ndarray:
    """Flip rows so that w >= 0; when w is zero the first nonzero component is positive."""
    q = np.array(q, dtype=float, copy=True)
    flat = q.reshape(-1, 4)
    for row in flat:
        for c in row:
            if abs(c) > tie_tol:
                if c < 0:
                    row *= -1.0
                break
    return q


def align_hemisphere(q: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Negate quaternions whose dot product with ``ref`` is negative."""
    q = np.asarray(q, dtype=float)
    dots = np.sum(q * np.asarray(ref, dtype=float), axis=-1, keepdims=True)
    return np.where(dots < 0.0, -q, q)


def continuous_quat(R, ref=None) -> np.ndarray:
    """Quaternion of rotation ``R`` on the hemisphere of ``ref``.

    Without a reference the scalar part is made non-negative (first nonzero
    component positive when the scalar part vanishes).
    """
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        raise DomainError("rotation must be a finite 3x3 matrix")
    RtR = np.swapaxes(R, -1, -2) @ R
    if np.max(np.abs(RtR - np.eye(3))) > 1e-6 or np.max(np.abs(np.linalg.det(R) - 1.0)) > 1e-6:
        raise DomainError("rotation matrix is not orthonormal within 1e-6")
    q = _canonical_sign(_shepperd(R))
    if ref is None:
        return q
    ref = np.asarray(ref, dtype=float)
    dots = np.sum(q * ref, axis=-1, keepdims=True)
    return np.where(dots < 0.0, -q, q)


def rotation_to_quat_unchecked(R: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return align_hemisphere(_shepperd(R), ref)


def _lift_quats(table: DHTable, Q: np.ndarray) -> np.ndarray:
    """Product of half-angle link quaternions; continuous in the joint vector."""
    M = Q.shape[0]
    out = np.zeros((M, 4))
    out[:, 0] = 1.0
    for i, link in enumerate(table.links):
        theta, _ = _effective(link, Q[:, i])
        qz = np.zeros((M, 4))
        qz[:, 0] = np.cos(0.5 * theta)
        qz[:, 3] = np.sin(0.5 * theta)
        qx = np.array([math.cos(0.5 * link.alpha), math.sin(0.5 * link.alpha), 0.0, 0.0])
        out = quat_multiply(quat_multiply(out, qz), qx)
    tool_q = _canonical_sign(_shepperd(table.tool[:3, :3]))
    return quat_multiply(out, tool_q)


# ---------------------------------------------------------------------------
# Forward kinematics


def _as_batch(table: DHTable, Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.ndim != 2 or Q.shape[1] != table.n:
        raise DomainError(f"expected joint vectors of length {table.n}, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise DomainError("joint values must be finite")
    return Q


def chain_transforms(table: DHTable, Q) -> np.ndarray:
    """Base-to-tool transforms for a batch of joint vectors, shape (M, 4, 4)."""
    Q = _as_batch(table, Q)
    T = np.broadcast_to(np.eye(4), (Q.shape[0], 4, 4)).copy()
    for i, link in enumerate(table.links):
        theta, d = _effective(link, Q[:, i])
        T = T @ _dh_matrices(theta, link.alpha, link.a, d)
    return T @ table.tool


def fk_vectors(table: DHTable, Q, ref=None) -> np.ndarray:
    """Vectorised forward kinematics returning an (M, 7) array of pose vectors.

    ``ref`` may be one quaternion or one per row; by default each row is aligned
    with its joint-space lift.
    """
    Q = _as_batch(table, Q)
    T = chain_transforms(table, Q)
    if ref is None:
        ref = _lift_quats(table, Q)
    quat = align_hemisphere(_shepperd(T[:, :3, :3]), ref)
    return np.concatenate([quat, T[:, :3, 3]], axis=1)


def forward_kinematics(table: DHTable, q, ref=None) -> Pose7:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.shape[0] != table.n:
        raise DomainError(f"expected {table.n} joint values, got shape {q.shape}")
    if not table.within_limits(q):
        warnings.warn("joint vector outside joint limits", RuntimeWarning, stacklevel=2)
    return Pose7.from_vector(fk_vectors(table, q, ref)[0])


def parameter_jacobian_batch(table: DHTable, Q, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobians d(pose)/d(alpha_i, d_i, a_i), shape (M, 7, 3n)."""
    Q = _as_batch(table, Q)
    base = fk_vectors(table, Q)
    ref = base[:, :4]
    phi = table.phi()
    J = np.empty((Q.shape[0], 7, phi.size))
    for k in range(phi.size):
        step = np.zeros_like(phi)
        step[k] = h
        fp = fk_vectors(_shift_phi(table, phi + step), Q, ref=ref)
        fm = fk_vectors(_shift_phi(table, phi - step), Q, ref=ref)
        J[:, :, k] = (fp - fm) / (2.0 * h)
    return J


def parameter_jacobian(table: DHTable, q, h: float = FD_STEP) -> np.ndarray:
    """7 x 3n Jacobian of the pose vector with respect to ``(alpha_i, d_i, a_i)``."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise DomainError("parameter_jacobian expects a single joint vector")
    return parameter_jacobian_batch(table, q, h)[0]


def _shift_phi(table: DHTable, phi: np.ndarray) -> DHTable:
    # Bypasses angle wrapping so that +h and -h stay on the same branch.
    phi = phi.reshape(table.n, 3)
    links = []
    for lk, p in zip(table.links, phi):
        new = object.__new__(DHLink)
        object.__setattr__(new, "joint_kind", lk.joint_kind)
        object.__setattr__(new, "theta0", lk.theta0)
        object.__setattr__(new, "alpha", float(p[0]))
        object.__setattr__(new, "d", float(p[1]))
        object.__setattr__(new, "a", float(p[2]))
        links.append(new)
    out = object.__new__(DHTable)
    object.__setattr__(out, "links", tuple(links))
    object.__setattr__(out, "joint_limits", table.joint_limits)
    object.__setattr__(out, "tool", table.tool)
    return out


def is_rigid(T: np.ndarray, tol: float = 1e-9) -> bool:
    try:
        _check_rigid(np.asarray(T, dtype=float), tol)
    except DomainError:
        return False
    return True


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(0.5 * angle)], math.sin(0.5 * angle) * axis])
