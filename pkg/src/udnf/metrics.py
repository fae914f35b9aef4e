"""Image-quality metrics and gauge-aligned pose errors."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import correlate2d

PSNR_CAP = 99.0


def _as_np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    a, b = _as_np(a), _as_np(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over valid windows, computed on the channel-mean luminance."""
    a, b = _as_np(a), _as_np(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(-1), b.mean(-1)
    if min(a.shape) < window:
        raise ValueError(f"ssim needs images at least {window} pixels on a side, got {a.shape}")
    w = gaussian_window(window, sigma)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2

    def filt(x):
        return correlate2d(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def rotation_angle_deg(R: np.ndarray) -> float:
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return math.degrees(math.acos(c))


def umeyama(src: np.ndarray, dst: np.ndarray):
    """Similarity ``(s, R, t)`` minimizing ``sum |s R src_i + t - dst_i|^2``."""
    n = src.shape[0]
    mu_s, mu_d = src.mean(0), dst.mean(0)
    X, Y = src - mu_s, dst - mu_d
    var_s = (X**2).sum() / n
    if var_s < 1e-12:
        raise ValueError("predicted camera centers are degenerate (all coincide)")
    U, D, Vt = np.linalg.svd(Y.T @ X / n)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def _pose_array(poses) -> np.ndarray:
    out = []
    for p in poses:
        if hasattr(p, "matrix"):
            p = p.matrix()
        out.append(_as_np(p).reshape(3, 4))
    return np.array(out)


def pose_eval(pred, gt) -> dict:
    """Rotation (degrees) and camera-center errors after similarity alignment of centers."""
    P, G = _pose_array(pred), _pose_array(gt)
    if P.shape != G.shape:
        raise ValueError("pose_eval: prediction and ground truth differ in length")
    if len(G) < 3:
        raise ValueError("pose_eval needs at least 3 poses")
    gc = G[:, :, 3] - G[:, :, 3].mean(0)
    sv = np.linalg.svd(gc, compute_uv=False)
    if sv[1] < 1e-9 * max(sv[0], 1e-12):
        raise ValueError("ground-truth camera centers are collinear")
    s, R, t = umeyama(P[:, :, 3], G[:, :, 3])
    centers = (s * (R @ P[:, :, 3].T)).T + t
    rot = [rotation_angle_deg(G[i, :, :3].T @ (R @ P[i, :, :3])) for i in range(len(P))]
    trans = np.linalg.norm(centers - G[:, :, 3], axis=1)
    return {
        "rotation_deg": [float(x) for x in rot],
        "center_error": [float(x) for x in trans],
        "mean_rotation_deg": float(np.mean(rot)),
        "mean_center_error": float(np.mean(trans)),
        "scale": s,
        "alignment_rotation": R.tolist(),
        "alignment_translation": t.tolist(),
    }
