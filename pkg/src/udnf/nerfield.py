"""Radiance field MLP, volume rendering and point-cloud export."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import CameraPose, Intrinsics, RayBatch, generate_rays

Tensor = torch.Tensor


def positional_encoding(x: Tensor, L: int) -> Tensor:
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]``."""
    if L < 0:
        raise ValueError("L must be >= 0")
    out = [x]
    for k in range(L):
        xk = (2.0**k * math.pi) * x
        out += [torch.sin(xk), torch.cos(xk)]
    return torch.cat(out, dim=-1)


class RadianceField(nn.Module):
    """Positional-encoded MLP returning density and color.

    Density goes through softplus (or relu) so it is non-negative; color goes
    through a sigmoid.  With ``view_dependent`` the encoded ray direction is
    concatenated to the feature vector before the color layer.
    """

    def __init__(self, hidden: int = 64, depth: int = 4, L_pos: int = 6, L_dir: int = 4,
                 view_dependent: bool = False, sigma_activation: str = "softplus"):
        super().__init__()
        self.L_pos, self.L_dir = L_pos, L_dir
        self.view_dependent = view_dependent
        if sigma_activation not in ("softplus", "relu"):
            raise ValueError(f"unknown sigma activation {sigma_activation!r}")
        self.sigma_activation = sigma_activation
        layers, width = [], 3 + 6 * L_pos
        for _ in range(depth):
            layers.append(nn.Linear(width, hidden))
            width = hidden
        self.layers = nn.ModuleList(layers)
        self.sigma_out = nn.Linear(hidden, 1)
        color_in = hidden + (3 + 6 * L_dir if view_dependent else 0)
        self.rgb_out = nn.Linear(color_in, 3)

    def forward(self, points: Tensor, dirs: Tensor | None = None):
        h = positional_encoding(points, self.L_pos)
        for layer in self.layers:
            h = torch.relu(layer(h))
        raw = self.sigma_out(h)[..., 0]
        sigma = F.softplus(raw) if self.sigma_activation == "softplus" else torch.relu(raw)
        if self.view_dependent:
            if dirs is None:
                raise ValueError("view-dependent field needs ray directions")
            h = torch.cat([h, positional_encoding(dirs, self.L_dir)], dim=-1)
        return sigma, torch.sigmoid(self.rgb_out(h))


class ConstantField(nn.Module):
    """Homogeneous medium; a test stand-in for :class:`RadianceField`."""

    def __init__(self, sigma: float, rgb=(0.5, 0.5, 0.5)):
        super().__init__()
        self.sigma = float(sigma)
        self.register_buffer("rgb", torch.tensor(rgb, dtype=torch.float32))

    def forward(self, points, dirs=None):
        n = points.shape[:-1]
        sigma = torch.full(n, self.sigma, dtype=points.dtype)
        return sigma, self.rgb.to(points.dtype).expand(*n, 3)


class SphereField(nn.Module):
    """Solid ball of constant density and color; zero density outside."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius: float = 1.0, sigma: float = 10.0,
                 rgb=(1.0, 0.0, 0.0)):
        super().__init__()
        self.register_buffer("center", torch.tensor(center, dtype=torch.float32))
        self.radius, self.sigma = float(radius), float(sigma)
        self.register_buffer("rgb", torch.tensor(rgb, dtype=torch.float32))

    def forward(self, points, dirs=None):
        inside = torch.linalg.norm(points - self.center.to(points.dtype), dim=-1) <= self.radius
        sigma = inside.to(points.dtype) * self.sigma
        return sigma, self.rgb.to(points.dtype).expand(*points.shape[:-1], 3)


@dataclass
class RenderOutput:
    rgb: Tensor  # (..., 3)
    depth: Tensor  # (...)
    acc: Tensor  # (...)

    def reshape(self, h: int, w: int) -> "RenderOutput":
        return RenderOutput(self.rgb.reshape(h, w, 3), self.depth.reshape(h, w), self.acc.reshape(h, w))


def sample_depths(n_rays: int, near: float, far: float, n_samples: int, stratified: bool,
                  generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    """Sample depths, one per equal-width bin: bin midpoints, or uniform within bins."""
    edges = torch.linspace(near, far, n_samples + 1, dtype=dtype)
    lo, width = edges[:-1], edges[1:] - edges[:-1]
    if stratified:
        u = torch.rand(n_rays, n_samples, generator=generator, dtype=dtype)
    else:
        u = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    return lo + u * width


def interval_lengths(t: Tensor, near: float, far: float) -> Tensor:
    """Length of each sample's share of ``[near, far]``.

    Boundaries sit halfway between consecutive samples and the outermost
    boundaries are ``near`` and ``far``, so the lengths always sum to
    ``far - near``.  For bin midpoints this is the bin width.
    """
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    lo = torch.cat([torch.full_like(t[..., :1], near), mids], dim=-1)
    hi = torch.cat([mids, torch.full_like(t[..., :1], far)], dim=-1)
    return hi - lo


def composite(sigma: Tensor, rgb: Tensor, t: Tensor, deltas: Tensor, background) -> RenderOutput:
    tau = sigma * deltas
    alpha = -torch.expm1(-tau)
    # transmittance before each sample: exp(-sum_{j<i} sigma_j delta_j)
    trans = torch.exp(-torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau, dim=-1)[..., :-1]], dim=-1))
    w = alpha * trans
    acc = w.sum(-1)
    bg = torch.as_tensor(background, dtype=rgb.dtype)
    color = (w[..., None] * rgb).sum(-2) + (1.0 - acc)[..., None] * bg
    return RenderOutput(color, (w * t).sum(-1), acc)


def render_rays(field, rays: RayBatch, n_samples: int = 64, stratified: bool = False,
                generator: torch.Generator | None = None, background=(1.0, 1.0, 1.0),
                t_vals: Tensor | None = None, chunk: int = 1 << 16, bound: float | None = None) -> RenderOutput:
    """Volume-render ``rays`` through ``field`` by quadrature.

    ``t_vals`` may be given to reuse sample depths across several renders.
    With ``bound`` set, the field is only evaluated at samples inside the
    ball of that radius and density is zero outside it.
    """
    if rays.near >= rays.far:
        raise ValueError(f"near ({rays.near}) must be < far ({rays.far})")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    n = len(rays)
    dtype = rays.directions.dtype
    if t_vals is None:
        t_vals = sample_depths(n, rays.near, rays.far, n_samples, stratified, generator, dtype)
    t_vals = t_vals.to(dtype)
    deltas = interval_lengths(t_vals, rays.near, rays.far)
    pts = rays.origins[:, None, :] + rays.directions[:, None, :] * t_vals[..., None]
    dirs = rays.directions[:, None, :].expand_as(pts)
    flat_p, flat_d = pts.reshape(-1, 3), dirs.reshape(-1, 3)
    if bound is None:
        sigma, rgb = _eval_chunked(field, flat_p, flat_d, chunk)
    else:
        # field support restricted to the ball |p| <= bound; empty space elsewhere
        inside = (flat_p.detach() ** 2).sum(-1) <= bound * bound
        sel = inside.nonzero()[:, 0]
        s_in, c_in = _eval_chunked(field, flat_p[sel], flat_d[sel], chunk)
        sigma = flat_p.new_zeros(flat_p.shape[0]).index_put((sel,), s_in)
        rgb = flat_p.new_zeros(flat_p.shape).index_put((sel,), c_in)
    return composite(sigma.reshape(n, -1), rgb.reshape(n, -1, 3), t_vals, deltas, background)


def _eval_chunked(field, p, d, chunk):
    if p.shape[0] <= chunk:
        return field(p, d)
    parts = [field(p[i : i + chunk], d[i : i + chunk]) for i in range(0, p.shape[0], chunk)]
    return torch.cat([q[0] for q in parts]), torch.cat([q[1] for q in parts])


def render_image(field, pose: CameraPose, intr: Intrinsics, n_samples: int = 64, near: float = 2.0,
                 far: float = 6.0, stratified: bool = False, generator: torch.Generator | None = None,
                 background=(1.0, 1.0, 1.0), t_vals: Tensor | None = None,
                 bound: float | None = None) -> RenderOutput:
    rays = generate_rays(pose, intr, near, far)
    out = render_rays(field, rays, n_samples, stratified, generator, background, t_vals, bound=bound)
    return out.reshape(intr.height, intr.width)


# --------------------------------------------------------------------------
# point clouds
# --------------------------------------------------------------------------


@torch.no_grad()
def export_pointcloud(field, grid_extent: float = 1.5, resolution: int = 64, sigma_threshold: float = 1.0,
                      chunk: int = 1 << 16):
    """Evaluate ``field`` on a regular grid and keep points with density above the threshold.

    Returns ``(xyz, rgb, sigma)`` numpy arrays.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axis = torch.linspace(-grid_extent, grid_extent, resolution)
    grid = torch.stack(torch.meshgrid(axis, axis, axis, indexing="ij"), dim=-1).reshape(-1, 3)
    sig, col = [], []
    for i in range(0, grid.shape[0], chunk):
        p = grid[i : i + chunk]
        d = torch.zeros_like(p)
        d[:, 2] = -1.0
        s, c = field(p, d)
        sig.append(s.float())
        col.append(c.float())
    sigma = torch.cat(sig).numpy()
    rgb = torch.cat(col).numpy()
    keep = sigma > sigma_threshold
    return grid.numpy()[keep], rgb[keep], sigma[keep]


def write_ply(path, xyz: np.ndarray, rgb: np.ndarray) -> None:
    """ASCII PLY with ``x y z red green blue`` vertex properties."""
    colors = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "w", newline="\n") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(xyz)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for p, c in zip(xyz, colors):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path):
    with open(path) as f:
        lines = f.read().splitlines()
    if lines[0] != "ply":
        raise ValueError("not a PLY file")
    n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
    start = lines.index("end_header") + 1
    rows = np.array([l.split() for l in lines[start : start + n]], dtype=np.float64).reshape(n, 6)
    return rows[:, :3], rows[:, 3:].astype(np.uint8)
