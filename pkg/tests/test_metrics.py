import math

import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from udnf.geometry import lookat_pose
from udnf.metrics import PSNR_CAP, gaussian_window, pose_eval, psnr, rotation_angle_deg, ssim, umeyama


def ssim_loop(a, b, size=11, sigma=1.5):
    """Direct per-window SSIM, the textbook definition."""
    a, b = a.mean(-1), b.mean(-1)
    w = gaussian_window(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 0.01) == pytest.approx(40.0)
    assert psnr(torch.zeros(2, 2), torch.ones(2, 2)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4))


def test_ssim_identity_and_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(16, 16, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-10)
    assert ssim(a, b) < 1.0
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_constant_images_closed_form():
    c1 = 0.01**2
    assert ssim(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(c1 / (1 + c1))


def test_metrics_symmetric():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(size=(2, 14, 14, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
    assert ssim(a, np.clip(a + 1e-3 * rng.normal(size=a.shape), 0, 1)) > 0.9


def test_gaussian_window_normalized():
    w = gaussian_window()
    assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0)
    assert w[5, 5] == w.max()


def test_rotation_angle():
    R = Rotation.from_rotvec([0, 0, math.radians(30)]).as_matrix()
    assert rotation_angle_deg(R) == pytest.approx(30.0)
    assert rotation_angle_deg(np.eye(3)) == 0.0


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(10, 3))
    R = Rotation.random(random_state=2).as_matrix()
    dst = 2.5 * src @ R.T + np.array([1.0, -2.0, 0.5])
    s, Rh, t = umeyama(src, dst)
    assert s == pytest.approx(2.5)
    np.testing.assert_allclose(Rh, R, atol=1e-10)
    np.testing.assert_allclose(t, [1.0, -2.0, 0.5], atol=1e-10)
    with pytest.raises(ValueError):
        umeyama(np.ones((4, 3)), dst[:4])


def _poses(n, rng):
    out = []
    for _ in range(n):
        v = rng.normal(size=3)
        v[2] = abs(v[2]) + 0.3
        out.append(lookat_pose(torch.tensor(4 * v / np.linalg.norm(v))).matrix().numpy())
    return np.array(out)


def test_pose_eval_is_gauge_invariant():
    rng = np.random.default_rng(3)
    gt = _poses(8, rng)
    R = Rotation.random(random_state=4).as_matrix()
    s, t = 0.7, np.array([0.3, 1.0, -2.0])
    pred = np.empty_like(gt)
    for i, P in enumerate(gt):
        pred[i, :, :3] = R @ P[:, :3]
        pred[i, :, 3] = s * R @ P[:, 3] + t
    out = pose_eval(pred, gt)
    assert out["mean_center_error"] < 1e-9
    assert out["mean_rotation_deg"] < 1e-5
    assert out["scale"] == pytest.approx(1 / s)


def test_pose_eval_detects_errors_and_degeneracy():
    rng = np.random.default_rng(5)
    gt = _poses(6, rng)
    pred = gt.copy()
    pred[0, :, 3] += np.array([0.0, 0.0, 1.0])
    assert pose_eval(pred, gt)["mean_center_error"] > 0.01
    with pytest.raises(ValueError):
        pose_eval(gt[:2], gt[:2])
    line = np.zeros((4, 3, 4))
    line[:, :, :3] = np.eye(3)
    line[:, 0, 3] = np.arange(4)
    with pytest.raises(ValueError):
        pose_eval(line, line)


def test_antipodal_camera_rotation_error():
    # with many cameras the single outlier barely moves the alignment
    rng = np.random.default_rng(6)
    gt = _poses(100, rng)
    eye = np.array([4.0, 0.0, 0.0])
    gt[0] = lookat_pose(torch.tensor(eye)).matrix().numpy()
    pred = gt.copy()
    pred[0] = lookat_pose(torch.tensor(-eye)).matrix().numpy()
    out = pose_eval(pred, gt)
    assert out["rotation_deg"][0] > 170.0
    assert np.median(out["rotation_deg"][1:]) < 10.0
