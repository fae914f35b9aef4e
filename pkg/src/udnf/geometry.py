"""Camera parameterizations and pinhole ray generation.

Conventions: cameras look down their local -z axis with +y up, and the
camera-to-world transform is ``T_wc = [R | t]`` where ``t`` is the camera
center.  Pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)`` and image
rows grow downward, so camera-space ray directions are
``((u + .5 - cx) / f, -(v + .5 - cy) / f, -1)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

Tensor = torch.Tensor

_EPS = 1e-8


class GeometryError(ValueError):
    """Degenerate camera configuration (parallel or coincident directions)."""


@dataclass
class CameraPose:
    """Camera-to-world rotation ``R`` (3x3) and translation ``t`` (3,)."""

    R: Tensor
    t: Tensor

    def matrix(self) -> Tensor:
        return torch.cat([self.R, self.t[:, None]], dim=1)

    @property
    def center(self) -> Tensor:
        return self.t

    @classmethod
    def from_matrix(cls, m) -> "CameraPose":
        m = torch.as_tensor(m)
        return cls(m[:3, :3], m[:3, 3])

    def detach(self) -> "CameraPose":
        return CameraPose(self.R.detach(), self.t.detach())

    def check(self, tol: float = 1e-5) -> None:
        R = self.R.detach().double()
        if (R.T @ R - torch.eye(3, dtype=R.dtype)).abs().max() > tol:
            raise GeometryError("rotation is not orthonormal")
        if abs(torch.linalg.det(R).item() - 1.0) > tol:
            raise GeometryError("rotation determinant is not +1")


@dataclass
class Intrinsics:
    focal: float
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("image must be at least 2x2")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0


@dataclass
class RayBatch:
    origins: Tensor  # (N, 3)
    directions: Tensor  # (N, 3), unit length
    near: float
    far: float

    def __len__(self):
        return self.origins.shape[0]


@dataclass
class CandidateSpec:
    eye_candidates: Tensor  # (K, 3) sign / direction seeds
    radius: float = 4.0
    up: tuple = (0.0, 1.0, 0.0)
    target: tuple = (0.0, 0.0, 0.0)

    @property
    def K(self) -> int:
        return self.eye_candidates.shape[0]


# --------------------------------------------------------------------------
# rotations
# --------------------------------------------------------------------------


def skew(w: Tensor) -> Tensor:
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack(
        [
            torch.stack([z, -w[2], w[1]]),
            torch.stack([w[2], z, -w[0]]),
            torch.stack([-w[1], w[0], z]),
        ]
    )


def rodrigues(omega: Tensor) -> Tensor:
    """Axis-angle 3-vector to rotation matrix; the angle is ``|omega|``."""
    omega = torch.as_tensor(omega)
    if not omega.is_floating_point():
        omega = omega.double()
    eye = torch.eye(3, dtype=omega.dtype)
    phi = torch.linalg.norm(omega)
    if phi.item() < _EPS:
        return eye + skew(omega)
    K = skew(omega / phi)
    return eye + torch.sin(phi) * K + (1.0 - torch.cos(phi)) * (K @ K)


def euler_xyz(angles: Tensor) -> Tensor:
    """Rotation ``Rx(a0) @ Ry(a1) @ Rz(a2)`` (intrinsic XYZ Euler angles)."""
    a = torch.as_tensor(angles)
    one, zero = torch.ones((), dtype=a.dtype), torch.zeros((), dtype=a.dtype)
    c, s = torch.cos(a), torch.sin(a)
    rx = torch.stack([torch.stack([one, zero, zero]),
                      torch.stack([zero, c[0], -s[0]]),
                      torch.stack([zero, s[0], c[0]])])
    ry = torch.stack([torch.stack([c[1], zero, s[1]]),
                      torch.stack([zero, one, zero]),
                      torch.stack([-s[1], zero, c[1]])])
    rz = torch.stack([torch.stack([c[2], -s[2], zero]),
                      torch.stack([s[2], c[2], zero]),
                      torch.stack([zero, zero, one])])
    return rx @ ry @ rz


def _normalize(v: Tensor, what: str) -> Tensor:
    n = torch.linalg.norm(v)
    if n.item() < _EPS:
        raise GeometryError(f"degenerate direction: {what} vanishes")
    return v / n


def rotation_from_position(xyz: Tensor, in_plane: Tensor | None = None) -> Tensor:
    """Rows ``[right, up, forward]`` for a camera at ``xyz`` facing away from the origin."""
    xyz = torch.as_tensor(xyz)
    dtype = xyz.dtype
    tmp = torch.tensor([0.0, 1.0, 0.0], dtype=dtype)
    forward = _normalize(xyz, "position")
    right = _normalize(torch.linalg.cross(tmp, forward), "tmp x forward")
    up = torch.linalg.cross(forward, right)
    R = torch.stack([right, up, forward])
    if in_plane is None:
        return R
    return euler_xyz(torch.as_tensor(in_plane, dtype=dtype)) @ R


def lookat(eye: Tensor, target: Tensor, up: Tensor) -> Tensor:
    """4x4 stack: columns ``[side, up', -forward]`` over the row of eye dot products."""
    eye = torch.as_tensor(eye)
    dtype = eye.dtype
    target = torch.as_tensor(target, dtype=dtype)
    up = torch.as_tensor(up, dtype=dtype)
    forward = _normalize(target - eye, "target - eye")
    side = _normalize(torch.linalg.cross(forward, up), "forward x up")
    up2 = _normalize(torch.linalg.cross(side, forward), "side x forward")
    zero = torch.zeros(1, dtype=dtype)
    one = torch.ones(1, dtype=dtype)
    rows = [torch.cat([side[i : i + 1], up2[i : i + 1], -forward[i : i + 1], zero]) for i in range(3)]
    rows.append(
        torch.cat([-torch.dot(side, eye)[None], -torch.dot(up2, eye)[None], torch.dot(forward, eye)[None], one])
    )
    return torch.stack(rows)


def c2w_from_lookat(look_at: Tensor, checked: bool = False) -> CameraPose:
    R = look_at[:3, :3]
    if checked:
        Rd = R.detach().double()
        if (Rd.T @ Rd - torch.eye(3, dtype=Rd.dtype)).abs().max() > 1e-5:
            raise GeometryError("look-at rotation is not orthonormal")
    return CameraPose(R, -R @ look_at[3, :3])


def lookat_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> CameraPose:
    return c2w_from_lookat(lookat(torch.as_tensor(eye), target, up))


# --------------------------------------------------------------------------
# candidates
# --------------------------------------------------------------------------

_SEMI4 = [[1, 1, 1], [1, -1, 1], [-1, 1, 1], [-1, -1, 1]]


def init_candidates(mode: str = "semi12", K: int | None = None, table=None,
                    radius: float = 4.0) -> CandidateSpec:
    """Candidate sign tables.

    ``sphere8`` covers all eight octants, ``semi12`` repeats the four
    ``z > 0`` octants three times, ``semi4`` uses them once, and ``custom``
    takes an explicit ``K x 3`` table.
    """
    if mode == "sphere8":
        rows = [[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)]
    elif mode == "semi12":
        rows = _SEMI4 * 3
    elif mode == "semi4":
        rows = list(_SEMI4)
    elif mode == "custom":
        if table is None:
            raise ValueError("custom candidate mode needs a table")
        rows = [list(map(float, r)) for r in table]
        if K is not None and len(rows) != K:
            raise ValueError(f"custom table has {len(rows)} rows, expected K={K}")
    else:
        raise ValueError(f"unknown candidate mode {mode!r}")
    eye = torch.tensor(rows, dtype=torch.float64)
    if (eye.abs().sum(dim=1) == 0).any():
        raise ValueError("candidate rows must be nonzero")
    if radius <= 0:
        raise ValueError("radius must be positive")
    return CandidateSpec(eye, radius=radius)


def candidate_pose(h1: Tensor, index: int, spec: CandidateSpec) -> CameraPose:
    """Pose of candidate ``index`` from the raw pose-head output ``h1`` (3K,)."""
    if not 0 <= index < spec.K:
        raise IndexError(f"candidate index {index} outside [0, {spec.K})")
    dtype = h1.dtype
    v = torch.sigmoid(h1[3 * index : 3 * index + 3])
    v = torch.diag(spec.eye_candidates[index].to(dtype)) @ v
    v = v / torch.linalg.norm(v)
    R1 = rotation_from_position(v)
    eye = R1 @ torch.tensor([0.0, 0.0, spec.radius], dtype=dtype)
    return c2w_from_lookat(lookat(eye, torch.tensor(spec.target, dtype=dtype),
                                  torch.tensor(spec.up, dtype=dtype)))


def candidate_poses(h1: Tensor, spec: CandidateSpec) -> list[CameraPose]:
    return [candidate_pose(h1, i, spec) for i in range(spec.K)]


# --------------------------------------------------------------------------
# rays
# --------------------------------------------------------------------------


def pixel_directions(intr: Intrinsics, dtype=torch.float32) -> Tensor:
    """Camera-space (unnormalized) directions, shape (H*W, 3), row-major."""
    v, u = torch.meshgrid(
        torch.arange(intr.height, dtype=dtype), torch.arange(intr.width, dtype=dtype), indexing="ij"
    )
    x = (u + 0.5 - intr.cx) / intr.focal
    y = -(v + 0.5 - intr.cy) / intr.focal
    return torch.stack([x, y, -torch.ones_like(x)], dim=-1).reshape(-1, 3)


def generate_rays(pose: CameraPose, intr: Intrinsics, near: float = 2.0, far: float = 6.0) -> RayBatch:
    dirs = pixel_directions(intr, pose.R.dtype) @ pose.R.T
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = pose.t.expand(dirs.shape[0], 3)
    return RayBatch(origins, dirs, near, far)


def sphere_points(n: int, rng: np.random.Generator, hemisphere: str | None = None,
                  max_abs_y: float = 1.0) -> np.ndarray:
    """Unit vectors uniform in solid angle, optionally restricted by rejection."""
    out = []
    while len(out) < n:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        if hemisphere == "z+" and v[2] <= 0.05:
            continue
        if abs(v[1]) > max_abs_y:
            continue
        out.append(v)
    return np.array(out)
