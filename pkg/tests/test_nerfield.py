import math

import numpy as np
import pytest
import torch

from udnf.geometry import Intrinsics, RayBatch, generate_rays, lookat_pose
from udnf.nerfield import (
    ConstantField,
    RadianceField,
    SphereField,
    export_pointcloud,
    interval_lengths,
    positional_encoding,
    read_ply,
    render_image,
    render_rays,
    sample_depths,
    write_ply,
)
from udnf.tensorcore import finite_diff_grad, relative_error

D = torch.float64


def slab_rays(n=4, near=2.0, far=6.0):
    o = torch.zeros(n, 3, dtype=D)
    d = torch.zeros(n, 3, dtype=D)
    d[:, 2] = -1.0
    return RayBatch(o, d, near, far)


class LinearColorField(torch.nn.Module):
    """Uniform density; color varies along z so sample order is visible."""

    def __init__(self, sigma):
        super().__init__()
        self.sigma = sigma

    def forward(self, p, d=None):
        c = torch.sigmoid(p[..., 2:3]).expand(*p.shape[:-1], 3)
        return torch.full(p.shape[:-1], self.sigma, dtype=p.dtype), c


# -- positional encoding -----------------------------------------------------


def test_positional_encoding_at_origin():
    out = positional_encoding(torch.zeros(1, 3), 4)
    assert out.shape == (1, 27)
    expected = [0.0] * 3 + ([0.0] * 3 + [1.0] * 3) * 4
    assert out[0].tolist() == expected


def test_positional_encoding_lengths():
    x = torch.randn(5, 3)
    assert torch.equal(positional_encoding(x, 0), x)
    assert positional_encoding(x, 10).shape == (5, 63)


def test_positional_encoding_frequencies():
    x = torch.tensor([[0.25, 0.0, 0.0]], dtype=D)
    out = positional_encoding(x, 2)
    assert out[0, 3].item() == pytest.approx(math.sin(math.pi * 0.25))
    assert out[0, 9].item() == pytest.approx(math.sin(2 * math.pi * 0.25))
    assert out[0, 12].item() == pytest.approx(math.cos(2 * math.pi * 0.25), abs=1e-15)


# -- field -------------------------------------------------------------------


def test_fresh_field_outputs():
    torch.manual_seed(0)
    f = RadianceField()
    pts = torch.randn(100, 3)
    sigma, rgb = f(pts)
    assert torch.isfinite(sigma).all() and (sigma >= 0).all()
    assert ((rgb > 0) & (rgb < 1)).all()
    s2, c2 = f(pts)
    assert torch.equal(sigma, s2) and torch.equal(rgb, c2)


def test_view_dependent_field_uses_directions():
    torch.manual_seed(0)
    f = RadianceField(view_dependent=True)
    p = torch.zeros(2, 3)
    d = torch.tensor([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    sigma, rgb = f(p, d)
    assert sigma[0] == sigma[1]
    assert not torch.equal(rgb[0], rgb[1])
    with pytest.raises(ValueError):
        f(p)


def test_constant_field_stand_in():
    sigma, _ = ConstantField(2.0)(torch.randn(7, 3))
    assert torch.equal(sigma, torch.full((7,), 2.0))


# -- quadrature ----------------------------------------------------------------


def test_sample_depths_and_intervals():
    t = sample_depths(1, 2.0, 6.0, 4, stratified=False)
    assert t[0].tolist() == [2.5, 3.5, 4.5, 5.5]
    assert interval_lengths(t, 2.0, 6.0)[0].tolist() == [1.0, 1.0, 1.0, 1.0]
    g = torch.Generator().manual_seed(0)
    ts = sample_depths(3, 2.0, 6.0, 8, stratified=True, generator=g, dtype=D)
    edges = torch.linspace(2, 6, 9, dtype=D)
    assert ((ts >= edges[:-1]) & (ts <= edges[1:])).all()
    np.testing.assert_allclose(interval_lengths(ts, 2.0, 6.0).sum(-1).numpy(), 4.0, atol=1e-12)


def test_empty_field_renders_background():
    out = render_rays(ConstantField(0.0), slab_rays(), 32, background=(0.2, 0.4, 0.6))
    np.testing.assert_allclose(out.rgb.numpy(), np.tile([0.2, 0.4, 0.6], (4, 1)))
    assert (out.acc == 0).all()


@pytest.mark.parametrize("sigma", [0.1, 1.0, 5.0])
def test_homogeneous_slab_opacity(sigma):
    out = render_rays(ConstantField(sigma, (0.3, 0.3, 0.3)), slab_rays(), 256)
    expected = 1 - math.exp(-sigma * 4.0)
    assert np.abs(out.acc.numpy() - expected).max() < 1e-3
    # white background composite
    np.testing.assert_allclose(out.rgb.numpy(), 0.3 * expected + (1 - expected), atol=1e-3)


def test_doubling_density_squares_transmittance():
    for sigma in (0.1, 0.4, 1.0):
        t1 = 1 - render_rays(ConstantField(sigma), slab_rays(), 256).acc
        t2 = 1 - render_rays(ConstantField(2 * sigma), slab_rays(), 256).acc
        assert np.abs(t2.numpy() - t1.numpy() ** 2).max() < 1e-3


def test_sample_count_convergence_on_slab():
    a = render_rays(ConstantField(0.7), slab_rays(), 64).acc
    b = render_rays(ConstantField(0.7), slab_rays(), 256).acc
    assert np.abs(a.numpy() - b.numpy()).max() < 1e-3


def test_opaque_first_sample_gives_its_color():
    rays = slab_rays(1)
    out = render_rays(LinearColorField(1e4), rays, 16)
    t0 = sample_depths(1, 2.0, 6.0, 16, False, dtype=D)[0, 0]
    first = torch.sigmoid(rays.origins[0, 2] - t0)
    np.testing.assert_allclose(out.rgb[0].numpy(), [first.item()] * 3, atol=1e-12)
    assert out.depth[0].item() == pytest.approx(t0.item())


def test_weights_sum_in_unit_interval():
    torch.manual_seed(1)
    f = RadianceField()
    with torch.no_grad():
        f.sigma_out.bias.fill_(3.0)
    rays = generate_rays(lookat_pose(torch.tensor([0.0, 1.0, 4.0])), Intrinsics(8.0, 8, 8))
    out = render_rays(f, rays, 64, stratified=True, generator=torch.Generator().manual_seed(0))
    assert (out.acc >= 0).all() and (out.acc <= 1 + 1e-6).all()


def test_near_far_validation():
    with pytest.raises(ValueError):
        render_rays(ConstantField(1.0), slab_rays(near=3.0, far=3.0), 8)
    with pytest.raises(ValueError):
        render_rays(ConstantField(1.0), slab_rays(), 1)


def test_bound_restricts_support():
    f = ConstantField(1.0)
    rays = slab_rays()
    rays = RayBatch(rays.origins + torch.tensor([0.0, 0.0, 4.0], dtype=D), rays.directions, 2.0, 6.0)
    out = render_rays(f, rays, 256, bound=1.0)
    # the ray crosses the unit ball along a chord of length 2
    np.testing.assert_allclose(out.acc.numpy(), 1 - math.exp(-2.0), atol=2e-2)
    out = render_rays(f, rays, 256, bound=0.5)
    np.testing.assert_allclose(out.acc.numpy(), 1 - math.exp(-1.0), atol=2e-2)


# -- images --------------------------------------------------------------------


def test_empty_field_image_is_background():
    pose = lookat_pose(torch.tensor([0.0, 0.0, 4.0], dtype=D))
    out = render_image(ConstantField(0.0), pose, Intrinsics(10.0, 6, 6), 16)
    assert out.rgb.shape == (6, 6, 3)
    assert (out.rgb == 1.0).all()


def test_sphere_silhouette_matches_ray_intersection():
    intr = Intrinsics(64.0, 64, 64)
    pose = lookat_pose(torch.tensor([1.0, 1.5, 3.5], dtype=D))
    out = render_image(SphereField(radius=1.0, sigma=200.0), pose, intr, 256)
    rays = generate_rays(pose, intr)
    o, d = rays.origins.numpy(), rays.directions.numpy()
    b = (o * d).sum(1)
    c = (o * o).sum(1) - 1.0
    hits = (b * b - c) > 0
    pred = out.acc.reshape(-1).numpy() > 0.5
    assert (pred == hits).mean() >= 0.99


def test_render_image_deterministic_with_seed():
    torch.manual_seed(0)
    f = RadianceField()
    pose = lookat_pose(torch.tensor([0.0, 0.0, 4.0]))
    intr = Intrinsics(8.0, 4, 4)
    a = render_image(f, pose, intr, 16, stratified=True, generator=torch.Generator().manual_seed(3))
    b = render_image(f, pose, intr, 16, stratified=True, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a.rgb, b.rgb)


def test_render_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    field = RadianceField(hidden=16, depth=2, L_pos=2).double()
    names, params = zip(*field.named_parameters())
    intr = Intrinsics(2.0, 2, 2)
    pose = lookat_pose(torch.tensor([0.3, 0.5, 3.0], dtype=D))
    target = torch.rand(2, 2, 3, dtype=D)

    def render_loss(*ps):
        sd = dict(zip(names, ps))

        def f(p, d):
            return torch.func.functional_call(field, sd, (p, d))

        out = render_image(f, pose, intr, 16, near=2.0, far=4.0)
        return ((out.rgb - target) ** 2).mean()

    leaves = [p.detach().clone().requires_grad_() for p in params]
    grads = torch.autograd.grad(render_loss(*leaves), leaves)
    numeric = finite_diff_grad(render_loss, [p.detach() for p in params], 1e-4)
    for name, a, n in zip(names, grads, numeric):
        err = relative_error(a.numpy(), n)
        assert err.max() < 1e-3, f"{name}: {err.max():.2e}"


# -- point clouds ----------------------------------------------------------------


def test_pointcloud_empty_and_all():
    xyz, rgb, sigma = export_pointcloud(ConstantField(0.0), 1.0, 5, 0.5)
    assert len(xyz) == 0
    xyz, _, _ = export_pointcloud(ConstantField(0.0), 1.0, 5, -1.0)
    assert len(xyz) == 125


def test_pointcloud_fills_ball():
    res, ext = 40, 1.5
    xyz, rgb, sigma = export_pointcloud(SphereField(radius=1.0, sigma=10.0), ext, res, 1.0)
    cell = (2 * ext / (res - 1)) ** 3
    assert abs(len(xyz) * cell - 4 / 3 * math.pi) / (4 / 3 * math.pi) < 0.1
    assert np.linalg.norm(xyz, axis=1).max() <= 1.0
    assert (sigma == 10.0).all()


def test_ply_round_trip(tmp_path):
    xyz = np.array([[0.0, 1.0, 2.0], [-1.5, 0.25, 3.0]])
    rgb = np.array([[1.0, 0.0, 0.5], [0.2, 0.4, 0.6]])
    path = tmp_path / "c.ply"
    write_ply(path, xyz, rgb)
    text = path.read_text().splitlines()
    assert text[:3] == ["ply", "format ascii 1.0", "element vertex 2"]
    assert "property uchar red" in text and text[9] == "end_header"
    pts, cols = read_ply(path)
    np.testing.assert_allclose(pts, xyz, atol=1e-6)
    assert cols.tolist() == [[255, 0, 128], [51, 102, 153]]
