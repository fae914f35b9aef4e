"""Training loops for single-pose, multi-pose, autoencoder and supervised modes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
import torch

from . import metrics
from .diffusion import DiffusionSchedule, forward_diffuse, from_diffusion_range, make_schedule, to_diffusion_range
from .geometry import CameraPose, init_candidates
from .model import DenoisingRenderer, RenderSettings, build_model
from .nerfield import sample_depths
from .posenet import EncoderConfig
from .tensorcore import NumericError, adam_step, make_adam

log = logging.getLogger(__name__)

MODES = ("single", "multi", "ae", "supervised")
LOG_COLUMNS = ("iter", "recon_loss", "ce_loss", "selected_idx", "accuracy", "psnr_train")


@dataclass
class TrainConfig:
    mode: str = "multi"
    head: str = "multi"  # pose head used by ae mode
    candidate_mode: str = "semi12"
    K: int = 0  # 0: take K from the candidate mode
    lam: float = 0.1
    lr_nerf: float = 1e-4
    lr_pose: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    lr_decay_steps: int = 0  # >0: exponential decay to 0.1x over this many steps
    iterations: int = 1000
    batch_size: int = 1
    seed: int = 0
    image_size: int = 32
    n_samples: int = 64
    near: float = 2.0
    far: float = 6.0
    scene_bound: float = 0.0  # >0: field evaluated only inside this ball
    radius: float = 4.0
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    base_channels: int = 16
    multipliers: list = field(default_factory=lambda: [1, 1, 2])
    pool: str = "mean"
    field_hidden: int = 64
    field_depth: int = 4
    L_pos: int = 6
    view_dependent: bool = False
    eval_t: int = 1
    log_every: int = 50
    ckpt_every: int = 0
    checked: bool = False

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.head not in ("single", "multi"):
            raise ValueError(f"head must be single or multi, got {self.head!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr_nerf <= 0 or self.lr_pose < 0:
            raise ValueError("learning rates must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.eval_t <= self.T:
            raise ValueError("eval_t must lie in [0, T]")

    @property
    def head_mode(self) -> str:
        if self.mode == "ae":
            return self.head
        return "single" if self.mode == "single" else "multi"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: DenoisingRenderer
    opt_field: torch.optim.Optimizer
    opt_pose: torch.optim.Optimizer
    schedule: DiffusionSchedule
    config: TrainConfig
    generator: torch.Generator
    iteration: int = 0
    history: list = field(default_factory=list)


class TrainingDiverged(NumericError):
    def __init__(self, msg, state):
        super().__init__(msg)
        self.state = state


def make_model(cfg: TrainConfig, focal: float | None = None) -> DenoisingRenderer:
    from .geometry import Intrinsics

    enc = EncoderConfig(cfg.base_channels, list(cfg.multipliers), 2, cfg.image_size, cfg.pool)
    focal = focal if focal is not None else 1.5 * cfg.image_size
    intr = Intrinsics(focal, cfg.image_size, cfg.image_size)
    cands = None
    if cfg.head_mode == "multi":
        cands = init_candidates(cfg.candidate_mode, radius=cfg.radius)
        if cfg.K and cfg.K != cands.K:
            raise ValueError(f"K={cfg.K} disagrees with candidate mode {cfg.candidate_mode} (K={cands.K})")
    render = RenderSettings(cfg.n_samples, cfg.near, cfg.far, bound=cfg.scene_bound or None)
    return build_model(cfg.head_mode, cands.K if cands else 1, cands, enc, intr, render, cfg.field_hidden,
                       cfg.field_depth, cfg.L_pos, cfg.view_dependent, (0.0, 0.0, cfg.radius), cfg.seed)


def init_state(cfg: TrainConfig, focal: float | None = None, model: DenoisingRenderer | None = None) -> TrainState:
    cfg.validate()
    model = model or make_model(cfg, focal)
    betas = (cfg.beta1, cfg.beta2)
    opt_field = make_adam(model.field_parameters(), cfg.lr_nerf, betas)
    opt_pose = make_adam(model.pose_parameters(), cfg.lr_pose, betas)
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(model, opt_field, opt_pose, make_schedule(cfg.T, cfg.beta_start, cfg.beta_end), cfg, gen)


# --------------------------------------------------------------------------
# loss pieces
# --------------------------------------------------------------------------


def select_branch(losses) -> int:
    """Index of the smallest loss, lowest index on ties."""
    arr = np.asarray([float(x) for x in losses], dtype=np.float64)
    if arr.size == 0:
        raise ValueError("select_branch needs at least one loss")
    if np.isnan(arr).any():
        raise NumericError("NaN among candidate losses")
    return int(np.argmin(arr))


def cross_entropy(logits: torch.Tensor, label: int) -> torch.Tensor:
    if not 0 <= label < logits.shape[-1]:
        raise IndexError(f"label {label} outside [0, {logits.shape[-1]})")
    return -torch.log_softmax(logits, dim=-1)[label]


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).mean()


def noised_input(state: TrainState, x0d: torch.Tensor, clean: bool):
    """Draw ``t`` and ``eps`` from the state's generator and noise ``x0d``."""
    if clean:
        return x0d, 0
    g = state.generator
    t = int(torch.randint(1, state.schedule.T + 1, (1,), generator=g).item())
    eps = torch.randn(x0d.shape, generator=g, dtype=x0d.dtype)
    return forward_diffuse(x0d, t, eps, state.schedule), t


def _t_vals(state: TrainState):
    m = state.model
    n = m.intrinsics.width * m.intrinsics.height
    rc = m.render_cfg
    return sample_depths(n, rc.near, rc.far, rc.n_samples, True, state.generator)


def single_loss(model: DenoisingRenderer, x_t, t, x0d, t_vals=None):
    omega, ts = model.head(x_t, t)
    pose = model.pose_from_head(omega, ts)
    out = model.render(pose, t_vals=t_vals)
    return mse(to_diffusion_range(out.rgb), x0d), pose


@dataclass
class MultiLoss:
    total: torch.Tensor
    recon: torch.Tensor
    ce: torch.Tensor
    index: int
    candidate_mse: list
    scores: torch.Tensor
    h1: torch.Tensor


def multi_loss(model: DenoisingRenderer, x_t, t, x0d, lam: float, t_vals=None) -> MultiLoss:
    """Min-over-candidates reconstruction plus ``lam`` times the pseudo-label cross entropy.

    Every candidate is rendered without a graph to pick the best one; only
    the selected candidate is re-rendered with gradients, so the other
    candidates receive no reconstruction gradient.
    """
    h1, scores = model.head(x_t, t)
    K = model.candidates.K
    with torch.no_grad():
        losses = []
        for i in range(K):
            out = model.render(model.pose_from_head(h1.detach(), scores, i), t_vals=t_vals)
            losses.append(float(mse(to_diffusion_range(out.rgb), x0d)))
    idx = select_branch(losses)
    out = model.render(model.pose_from_head(h1, scores, idx), t_vals=t_vals)
    recon = mse(to_diffusion_range(out.rgb), x0d)
    ce = cross_entropy(scores, idx)
    return MultiLoss(recon + lam * ce, recon, ce, idx, losses, scores, h1)


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------


def _lr_scale(state: TrainState) -> float:
    n = state.config.lr_decay_steps
    return 0.1 ** (state.iteration / n) if n > 0 else 1.0


def _step_optimizers(state: TrainState, loss: torch.Tensor, pose_too: bool = True) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at iteration {state.iteration}", state)
    state.opt_field.zero_grad(set_to_none=True)
    state.opt_pose.zero_grad(set_to_none=True)
    loss.backward()
    scale = _lr_scale(state)
    cfg = state.config
    for opt, lr in ((state.opt_field, cfg.lr_nerf), (state.opt_pose, cfg.lr_pose)):
        for g in opt.param_groups:
            g["lr"] = lr * scale
    adam_step(state.opt_field, cfg.checked)
    if pose_too:
        adam_step(state.opt_pose, cfg.checked)
    state.iteration += 1


def train_step_single(state: TrainState, images: torch.Tensor, clean: bool = False) -> dict:
    """Alg. 1 on a batch ``images`` (B, H, W, 3) in [0, 1]; ``clean`` gives the autoencoder variant."""
    losses = []
    for img in images:
        x0d = to_diffusion_range(img)
        x_t, t = noised_input(state, x0d, clean)
        loss, _ = single_loss(state.model, x_t, t, x0d, _t_vals(state))
        losses.append(loss)
    loss = torch.stack(losses).mean()
    _step_optimizers(state, loss)
    return {"recon_loss": float(loss.detach()), "ce_loss": 0.0, "selected_idx": [0] * len(images), "hits": [True] * len(images)}


def train_step_multi(state: TrainState, images: torch.Tensor, clean: bool = False) -> dict:
    """Alg. 2 on a batch: multi-pose rendering, branch selection, joint loss."""
    totals, recons, ces, idxs, hits = [], [], [], [], []
    for img in images:
        x0d = to_diffusion_range(img)
        x_t, t = noised_input(state, x0d, clean)
        ml = multi_loss(state.model, x_t, t, x0d, state.config.lam, _t_vals(state))
        totals.append(ml.total)
        recons.append(float(ml.recon.detach()))
        ces.append(float(ml.ce.detach()))
        idxs.append(ml.index)
        hits.append(int(torch.argmax(ml.scores)) == ml.index)
    _step_optimizers(state, torch.stack(totals).mean())
    return {"recon_loss": float(np.mean(recons)), "ce_loss": float(np.mean(ces)), "selected_idx": idxs, "hits": hits}


def train_step_supervised(state: TrainState, images: torch.Tensor, poses: list[CameraPose]) -> dict:
    """Field-only fit with known poses (calibration oracle; the pose network is bypassed)."""
    losses = []
    for img, pose in zip(images, poses):
        pose = CameraPose(pose.R.float(), pose.t.float())
        out = state.model.render(pose, t_vals=_t_vals(state))
        losses.append(mse(to_diffusion_range(out.rgb), to_diffusion_range(img)))
    loss = torch.stack(losses).mean()
    _step_optimizers(state, loss, pose_too=False)
    return {"recon_loss": float(loss.detach()), "ce_loss": 0.0, "selected_idx": [0] * len(images), "hits": [True] * len(images)}


def train_step(state: TrainState, images: torch.Tensor, poses=None) -> dict:
    mode = state.config.mode
    if mode == "single":
        return train_step_single(state, images)
    if mode == "multi":
        return train_step_multi(state, images)
    if mode == "ae":
        step = train_step_multi if state.config.head_mode == "multi" else train_step_single
        return step(state, images, clean=True)
    return train_step_supervised(state, images, poses)


def psnr_from_diffusion_mse(m: float) -> float:
    # MSE measured in [-1, 1] is 4x the [0, 1] MSE
    return metrics.PSNR_CAP if m <= 0 else min(metrics.PSNR_CAP, 10 * math.log10(4.0 / m))


def train(state: TrainState, dataset, iterations: int | None = None,
          on_log: Callable[[dict], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run the configured training loop over the dataset's train split."""
    cfg = state.config
    train_idx = dataset.split("train")
    images = torch.from_numpy(dataset.images)
    poses = None
    if cfg.mode == "supervised":
        poses = [dataset.pose(i) for i in range(len(dataset.images))]
    end = state.iteration + (iterations if iterations is not None else cfg.iterations)
    window = []
    while state.iteration < end:
        pick = torch.randint(len(train_idx), (cfg.batch_size,), generator=state.generator).tolist()
        ids = [train_idx[j] for j in pick]
        batch_poses = [poses[i] for i in ids] if poses is not None else None
        res = train_step(state, images[ids], batch_poses)
        window.extend(res["hits"])
        if state.iteration % cfg.log_every == 0 or state.iteration == end:
            row = {
                "iter": state.iteration,
                "recon_loss": res["recon_loss"],
                "ce_loss": res["ce_loss"],
                "selected_idx": res["selected_idx"][0],
                "accuracy": float(np.mean(window)) if cfg.head_mode == "multi" and cfg.mode != "supervised" else float("nan"),
                "psnr_train": psnr_from_diffusion_mse(res["recon_loss"]),
            }
            window = []
            state.history.append(row)
            log.info("iter %d recon %.5f ce %.4f acc %.3f psnr %.2f", row["iter"], row["recon_loss"],
                     row["ce_loss"], row["accuracy"], row["psnr_train"])
            if on_log:
                on_log(row)
        if on_checkpoint and cfg.ckpt_every and state.iteration % cfg.ckpt_every == 0:
            on_checkpoint(state)
    return state


def write_log_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{row[k]:.8g}" if isinstance(row[k], float) else row[k]) for k in LOG_COLUMNS})


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    split: str
    per_image: list
    mean_psnr: float
    mean_ssim: float
    accuracy: float | None
    pose: dict | None
    predicted_poses: list

    def to_dict(self) -> dict:
        return asdict(self)


@torch.no_grad()
def evaluate(model: DenoisingRenderer, dataset, split: str = "test", eval_t: int = 1,
             schedule: DiffusionSchedule | None = None, seed: int = 0,
             supervised: bool = False) -> MetricsReport:
    """Reconstruct every image in ``split`` through one denoising step and score it.

    In multi-pose mode the classifier is scored against the argmin
    reconstruction-loss candidate.  Pose errors are reported when the dataset
    carries ground-truth poses and the split has at least three views.
    """
    idx = dataset.split(split)
    if not idx:
        raise ValueError(f"split {split!r} is empty")
    schedule = schedule or make_schedule()
    g = torch.Generator().manual_seed(seed)
    rows, preds, hits = [], [], []
    for i in idx:
        img = torch.from_numpy(dataset.images[i])
        x0d = to_diffusion_range(img)
        eps = torch.randn(x0d.shape, generator=g)
        x_t = forward_diffuse(x0d, eval_t, eps, schedule) if eval_t > 0 else x0d
        row = {"index": i}
        if supervised:
            pose = dataset.pose(i)
            pose = CameraPose(pose.R.float(), pose.t.float())
            rec = model.render(pose).rgb
            sel = 0
        else:
            res = model.denoise(x_t, eval_t)
            rec, pose, sel = res.x0_hat, res.pose, res.index
            if model.mode == "multi":
                cand = [float(mse(model.render(model.pose_from_head(res.h1, res.scores, k)).rgb, img))
                        for k in range(model.candidates.K)]
                label = select_branch(cand)
                row["pseudo_label"] = label
                hits.append(sel == label)
        row.update(selected=sel, psnr=metrics.psnr(rec, img), ssim=metrics.ssim(rec, img) if min(img.shape[:2]) >= 11 else float("nan"))
        rows.append(row)
        preds.append(pose.matrix().detach().double().numpy().tolist())
    pose_report = None
    if dataset.poses is not None and len(idx) >= 3:
        try:
            pose_report = metrics.pose_eval(preds, [dataset.poses[i] for i in idx])
        except ValueError as e:
            log.warning("pose evaluation skipped: %s", e)
    return MetricsReport(
        split=split,
        per_image=rows,
        mean_psnr=float(np.mean([r["psnr"] for r in rows])),
        mean_ssim=float(np.mean([r["ssim"] for r in rows])),
        accuracy=float(np.mean(hits)) if hits else None,
        pose=pose_report,
        predicted_poses=preds,
    )
