"""Procedural analytic scenes and posed multiview datasets rendered from them."""

from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .geometry import CameraPose, Intrinsics, lookat_pose, sphere_points
from .nerfield import render_image

MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    pass


@dataclass
class Primitive:
    kind: str  # "sphere" or "box"
    center: tuple
    size: float | tuple  # radius, or box half-extents
    rgb: tuple
    sigma: float = 50.0


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    extent: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        for p in self.primitives:
            if p.sigma <= 0:
                raise ValueError("primitive density must be positive")
            reach = np.abs(np.asarray(p.center)) + np.asarray(p.size)
            if (reach > self.extent).any():
                raise ValueError(f"primitive at {p.center} leaves the scene extent {self.extent}")
            if p.kind not in ("sphere", "box"):
                raise ValueError(f"unknown primitive kind {p.kind!r}")


def default_scene() -> SceneSpec:
    """Three differently sized and colored spheres with no symmetry axis."""
    return SceneSpec(
        primitives=[
            Primitive("sphere", (0.45, 0.10, -0.20), 0.40, (0.9, 0.1, 0.1)),
            Primitive("sphere", (-0.40, 0.35, 0.20), 0.30, (0.1, 0.8, 0.2)),
            Primitive("sphere", (0.05, -0.40, 0.45), 0.25, (0.1, 0.2, 0.9)),
        ]
    )


class AnalyticScene(nn.Module):
    """Field-compatible evaluation of a :class:`SceneSpec`.

    Where primitives overlap, the one whose center is nearest wins.
    """

    def __init__(self, spec: SceneSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        n = len(spec.primitives)
        self.register_buffer("centers", torch.tensor([p.center for p in spec.primitives], dtype=torch.float64).reshape(n, 3))
        self.register_buffer("rgbs", torch.tensor([p.rgb for p in spec.primitives], dtype=torch.float64).reshape(n, 3))
        self.register_buffer("sigmas", torch.tensor([p.sigma for p in spec.primitives], dtype=torch.float64))
        sizes = [np.broadcast_to(np.asarray(p.size, dtype=np.float64), 3) for p in spec.primitives]
        self.register_buffer("sizes", torch.tensor(np.array(sizes).reshape(n, 3)))
        self.is_sphere = [p.kind == "sphere" for p in spec.primitives]

    def forward(self, points, dirs=None):
        dtype = points.dtype
        n = points.shape[:-1]
        bg = torch.tensor(self.spec.background, dtype=dtype)
        if not self.is_sphere:
            return torch.zeros(n, dtype=dtype), bg.expand(*n, 3)
        p = points.double()
        diff = p[..., None, :] - self.centers  # (..., P, 3)
        dist = torch.linalg.norm(diff, dim=-1)
        inside = []
        for i, sph in enumerate(self.is_sphere):
            if sph:
                inside.append(dist[..., i] <= self.sizes[i, 0])
            else:
                inside.append((diff[..., i, :].abs() <= self.sizes[i]).all(-1))
        inside = torch.stack(inside, dim=-1)
        dist = torch.where(inside, dist, torch.full_like(dist, math.inf))
        nearest = dist.argmin(-1)
        hit = inside.any(-1)
        sigma = torch.where(hit, self.sigmas[nearest], torch.zeros_like(dist[..., 0]))
        rgb = torch.where(hit[..., None], self.rgbs[nearest], bg.double())
        return sigma.to(dtype), rgb.to(dtype)


def build_scene(spec: SceneSpec) -> AnalyticScene:
    return AnalyticScene(spec)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def sample_centers(n_views: int, pose_mode: str, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Camera centers on the radius-r sphere.

    ``semisphere`` is the ``z > 0`` half, the region reachable by the
    ``semi12`` candidate family; ``sphere`` is the full sphere; and
    ``forward_facing`` is a 20 degree cone around +z.  Directions closer than
    about 18 degrees to the look-at up axis (+y) are rejected.
    """
    if pose_mode == "semisphere":
        dirs = sphere_points(n_views, rng, hemisphere="z+", max_abs_y=0.95)
    elif pose_mode == "sphere":
        dirs = sphere_points(n_views, rng, max_abs_y=0.95)
    elif pose_mode == "forward_facing":
        cos_max = math.cos(math.radians(20.0))
        z = rng.uniform(cos_max, 1.0, size=n_views)
        phi = rng.uniform(0, 2 * math.pi, size=n_views)
        s = np.sqrt(1 - z**2)
        dirs = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
    else:
        raise ValueError(f"unknown pose mode {pose_mode!r}")
    return dirs * radius


def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def generate_dataset(spec: SceneSpec, n_views: int, pose_mode: str, seed: int, out_dir,
                     image_size: int = 32, focal: float | None = None, radius: float = 4.0,
                     near: float = 2.0, far: float = 6.0, test_fraction: float = 0.1,
                     gt_samples: int = 256, candidate_mode: str | None = None) -> dict:
    """Render ``n_views`` posed views of ``spec`` and write a dataset directory.

    Output is written to a temporary sibling directory and renamed into place.
    """
    if n_views < 2:
        raise ValueError("n_views must be >= 2")
    rng = np.random.default_rng(seed)
    centers = sample_centers(n_views, pose_mode, radius, rng)
    focal = float(focal if focal is not None else 1.5 * image_size)
    intr = Intrinsics(focal, image_size, image_size)
    scene = build_scene(spec)

    n_test = max(1, math.ceil(test_fraction * n_views))
    order = rng.permutation(n_views)
    test = sorted(int(i) for i in order[:n_test])
    train = sorted(int(i) for i in order[n_test:])
    if candidate_mode is None:
        candidate_mode = {"semisphere": "semi12", "sphere": "sphere8"}.get(pose_mode, "semi12")

    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".tmp-", dir=out_dir.parent))
    try:
        (tmp / "images").mkdir()
        views = []
        for i, c in enumerate(centers):
            pose = lookat_pose(torch.tensor(c, dtype=torch.float64))
            with torch.no_grad():
                img = render_image(scene, pose, intr, gt_samples, near, far, background=spec.background)
            name = f"images/view_{i:03d}.png"
            save_png(tmp / name, img.rgb.numpy())
            views.append({
                "file": name,
                "pose": [round(float(x), 10) for x in pose.matrix().reshape(-1).tolist()],
                "split": "test" if i in test else "train",
            })
        manifest = {
            "version": MANIFEST_VERSION,
            "image_size": [image_size, image_size],
            "focal": focal,
            "near": near,
            "far": far,
            "radius": radius,
            "pose_mode": pose_mode,
            "candidate_mode": candidate_mode,
            "background": list(spec.background),
            "seed": seed,
            "scene": [asdict(p) for p in spec.primitives],
            "train": train,
            "test": test,
            "views": views,
        }
        with open(tmp / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1)
            f.write("\n")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


@dataclass
class Dataset:
    root: Path
    manifest: dict
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    intrinsics: Intrinsics
    poses: np.ndarray | None  # (N, 3, 4), only when loaded for evaluation

    def split(self, name: str) -> list[int]:
        if name == "all":
            return list(range(len(self.images)))
        if name not in ("train", "test"):
            raise DatasetError(f"unknown split {name!r}")
        return list(self.manifest[name])

    @property
    def radius(self) -> float:
        return float(self.manifest["radius"])

    @property
    def near(self) -> float:
        return float(self.manifest["near"])

    @property
    def far(self) -> float:
        return float(self.manifest["far"])

    def pose(self, i: int) -> CameraPose:
        if self.poses is None:
            raise DatasetError("dataset was loaded without ground-truth poses")
        return CameraPose.from_matrix(torch.tensor(self.poses[i], dtype=torch.float64))


def load_dataset(root, with_poses: bool = False) -> Dataset:
    """Load a dataset directory.

    Ground-truth poses are only attached when ``with_poses`` is set; the
    unposed training loops load without them.
    """
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json in {root}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('version')}")
    h, w = manifest["image_size"]
    imgs = []
    for v in manifest["views"]:
        p = root / v["file"]
        if not p.exists():
            raise DatasetError(f"missing image {p}")
        img = load_png(p)
        if img.shape != (h, w, 3):
            raise DatasetError(f"{p} has shape {img.shape}, expected {(h, w, 3)}")
        imgs.append(img)
    train, test = set(manifest["train"]), set(manifest["test"])
    if train & test:
        raise DatasetError("train and test splits overlap")
    poses = None
    if with_poses:
        poses = np.array([np.reshape(v["pose"], (3, 4)) for v in manifest["views"]])
    intr = Intrinsics(float(manifest["focal"]), w, h)
    return Dataset(root, manifest, np.stack(imgs), intr, poses)
