"""Command line: dataset generation, training, reconstruction and reports.

Exit codes: 0 success, 2 usage/config error, 3 data or checkpoint error,
4 numeric failure.  Directory outputs are assembled in a temporary sibling
directory and renamed into place when the command succeeds.  Set
``UDNF_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import tomli

from . import ablation, plotting
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import dump_config, load_run_config
from .diffusion import forward_diffuse, make_schedule, sample_from_noise, to_diffusion_range
from .geometry import CameraPose, candidate_poses, lookat_pose
from .metrics import psnr
from .nerfield import export_pointcloud, write_ply
from .scenegen import DatasetError, default_scene, generate_dataset, load_dataset, load_png, save_png
from .tensorcore import NumericError
from .trainer import TrainingDiverged, evaluate, init_state, train, write_log_csv

log = logging.getLogger("udnf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
POSE_COLUMNS = tuple(f"p{r}{c}" for r in range(3) for c in range(4))
DUMP_COLUMNS = ("view", "candidate", "cx", "cy", "cz", "score", "selected")


class UsageError(ValueError):
    pass


@contextlib.contextmanager
def atomic_dir(out):
    """Yield a temp directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out.name + ".tmp-", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(tmp, out)


def _pose_row(pose) -> list[float]:
    m = pose.matrix() if hasattr(pose, "matrix") else torch.as_tensor(pose)
    return [float(x) for x in m.detach().double().reshape(-1)]


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = tomli.loads(f"v = {v}")["v"]
        except tomli.TOMLDecodeError:
            out[k.strip()] = v
    return out


def _load_model(path):
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} not found")
    state = load_checkpoint(path)
    state.model.eval()
    return state


def _check_size(model, img, what):
    h, w = model.intrinsics.height, model.intrinsics.width
    if tuple(img.shape[:2]) != (h, w):
        raise DatasetError(f"{what} is {img.shape[1]}x{img.shape[0]}, model expects {w}x{h}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_scenegen(args) -> int:
    if args.views < 2:
        raise UsageError("--views must be >= 2")
    m = generate_dataset(default_scene(), args.views, args.mode, args.seed, args.out, image_size=args.size,
                         radius=args.radius, test_fraction=args.test_fraction, gt_samples=args.samples)
    print(f"wrote {len(m['views'])} views ({len(m['train'])} train, {len(m['test'])} test) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = _parse_sets(args.set)
    for key, val in (("mode", args.mode), ("iterations", args.iters), ("seed", args.seed)):
        if val is not None:
            overrides[key] = val
    if args.dataset:
        overrides["dataset"] = args.dataset
    if args.out:
        overrides["out"] = args.out
    run = load_run_config(args.config, overrides)
    if not run.dataset or not run.out:
        raise UsageError("train needs a dataset and an output directory (flags or config)")
    cfg = run.train
    ds = load_dataset(run.dataset, with_poses=cfg.mode == "supervised")
    h, w = ds.images.shape[1:3]
    if (h, w) != (cfg.image_size, cfg.image_size):
        raise DatasetError(f"dataset images are {w}x{h}, config image_size is {cfg.image_size}")
    if args.resume:
        state = load_checkpoint(args.resume)
        state.config = replace(state.config, iterations=cfg.iterations)
    else:
        state = init_state(cfg, focal=ds.intrinsics.focal)
    code = EXIT_OK
    with atomic_dir(run.out) as tmp:
        (tmp / "config.toml").write_text(dump_config(state.config, dataset=str(run.dataset)))

        def ckpt(st):
            save_checkpoint(tmp / f"ckpt_{st.iteration:07d}.udnf", st)

        try:
            # iterations is the total target, so a resumed run only does the remainder
            train(state, ds, iterations=max(0, state.config.iterations - state.iteration), on_checkpoint=ckpt)
            save_checkpoint(tmp / "final.udnf", state)
        except TrainingDiverged as e:
            log.error("%s; diagnostic checkpoint written", e)
            save_checkpoint(tmp / "diverged.udnf", e.state)
            code = EXIT_NUMERIC
        write_log_csv(tmp / "log.csv", state.history)
        if state.history:
            plotting.loss_curve(state.history, tmp / "loss.png")
    if state.history:
        last = state.history[-1]
        print(f"iter {last['iter']} recon {last['recon_loss']:.5f} ce {last['ce_loss']:.4f} "
              f"psnr {last['psnr_train']:.2f}")
    return code


def _denoise_inputs(images, t, seed, sched):
    g = torch.Generator().manual_seed(seed)
    for img in images:
        x0d = to_diffusion_range(torch.from_numpy(img))
        eps = torch.randn(x0d.shape, generator=g)
        yield forward_diffuse(x0d, t, eps, sched) if t > 0 else x0d


def cmd_reconstruct(args) -> int:
    state = _load_model(args.ckpt)
    model = state.model
    if args.images:
        names = [Path(p).name for p in args.images]
        for p in args.images:
            if not Path(p).exists():
                raise DatasetError(f"image {p} not found")
        images = [load_png(p) for p in args.images]
    elif args.dataset:
        ds = load_dataset(args.dataset)
        idx = ds.split(args.split)
        names = [Path(ds.manifest["views"][i]["file"]).name for i in idx]
        images = [ds.images[i] for i in idx]
    else:
        raise UsageError("reconstruct needs --dataset or --images")
    for n, img in zip(names, images):
        _check_size(model, img, n)
    rows, recons = [], []
    with atomic_dir(args.out) as tmp, torch.no_grad():
        for k, (name, img, x_t) in enumerate(zip(names, images, _denoise_inputs(images, args.t, args.seed, state.schedule))):
            res = model.denoise(x_t, args.t)
            rec = res.x0_hat.numpy()
            save_png(tmp / f"recon_{k:03d}.png", rec)
            recons.append(rec)
            rows.append({"input": name, "output": f"recon_{k:03d}.png", "selected": res.index,
                         "psnr": psnr(rec, img), "pose": res.pose.matrix().double().tolist()})
        (tmp / "poses.json").write_text(json.dumps(rows, indent=1) + "\n")
        with open(tmp / "reconstruct.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("input", "output", "selected", "psnr") + POSE_COLUMNS)
            for r in rows:
                w.writerow([r["input"], r["output"], r["selected"], f"{r['psnr']:.4f}"]
                           + [f"{x:.8g}" for x in np.ravel(r["pose"])])
        plotting.image_grid(images + recons, tmp / "reconstruct.png",
                            titles=names + [f"{r['psnr']:.1f} dB" for r in rows], ncols=len(images))
    for r in rows:
        print(f"{r['input']}: {r['psnr']:.2f} dB (candidate {r['selected']})")
    return EXIT_OK


def spiral_poses(frames: int, radius: float, turns: float, height_min: float, height_max: float):
    if frames < 1:
        raise UsageError("spiral needs at least one frame")
    if radius <= 0 or max(abs(height_min), abs(height_max)) >= radius:
        raise UsageError("spiral heights must lie strictly inside (-radius, radius)")
    poses = []
    for i in range(frames):
        th = 2 * math.pi * turns * i / frames
        y = height_min + (height_max - height_min) * (i / max(frames - 1, 1))
        rh = math.sqrt(radius**2 - y**2)
        eye = torch.tensor([rh * math.sin(th), y, rh * math.cos(th)], dtype=torch.float64)
        poses.append(lookat_pose(eye))
    return poses


def read_pose_list(path):
    if not Path(path).exists():
        raise DatasetError(f"pose list {path} not found")
    data = json.loads(Path(path).read_text())
    poses = []
    for k, p in enumerate(data):
        arr = np.asarray(p.get("pose") if isinstance(p, dict) else p, dtype=np.float64)
        if arr.size != 12:
            raise UsageError(f"pose {k} in {path} is not a 3x4 matrix")
        poses.append(CameraPose.from_matrix(torch.from_numpy(arr.reshape(3, 4))))
    if not poses:
        raise UsageError(f"{path} holds no poses")
    return poses


def cmd_render_path(args) -> int:
    if args.poses:
        poses = read_pose_list(args.poses)
    else:
        poses = spiral_poses(args.spiral, args.radius, args.turns, args.height_min, args.height_max)
    state = _load_model(args.ckpt)
    model = state.model
    if args.samples:
        model.render_cfg.n_samples = args.samples
    frames = []
    with atomic_dir(args.out) as tmp, torch.no_grad():
        with open(tmp / "path.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("frame",) + POSE_COLUMNS)
            for k, pose in enumerate(poses):
                pose = CameraPose(pose.R.float(), pose.t.float())
                img = model.render(pose).rgb.numpy()
                save_png(tmp / f"frame_{k:04d}.png", img)
                frames.append(img)
                w.writerow([k] + [f"{x:.8g}" for x in _pose_row(pose)])
        plotting.image_grid(frames, tmp / "path.png", titles=list(range(len(frames))))
    print(f"rendered {len(frames)} frames to {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    state = _load_model(args.ckpt)
    traj = sample_from_noise(state.model, state.schedule, seed=args.seed, deterministic=args.deterministic)
    with atomic_dir(args.out) as tmp:
        (tmp / "frames").mkdir()
        with open(tmp / "trajectory.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("step", "t", "selected") + POSE_COLUMNS)
            for k, s in enumerate(traj):
                save_png(tmp / "frames" / f"xprev_{s.t:03d}.png", ((s.x_prev + 1) * 0.5).clamp(0, 1).numpy())
                save_png(tmp / "frames" / f"x0_{s.t:03d}.png", s.x0_hat.numpy())
                w.writerow([k, s.t, s.index] + [f"{x:.8g}" for x in _pose_row(s.pose)])
        save_png(tmp / "final.png", traj[-1].x0_hat.numpy())
        plotting.trajectory(traj, tmp / "trajectory.png", every=max(1, len(traj) // 10))
    print(f"{len(traj)} denoising steps written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_model(args.ckpt)
    ds = load_dataset(args.dataset, with_poses=True)
    _check_size(state.model, ds.images[0], "dataset images")
    rep = evaluate(state.model, ds, args.split, args.t, state.schedule, seed=args.seed, supervised=args.supervised)
    with atomic_dir(args.out) as tmp:
        (tmp / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
        cols = ("index", "selected", "pseudo_label", "psnr", "ssim")
        with open(tmp / "per_image.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore", restval="", lineterminator="\n")
            w.writeheader()
            w.writerows(rep.per_image)
        plotting.per_image_metrics(rep.per_image, tmp / "per_image.png")
        if rep.pose is not None:
            s, R, t = rep.pose["scale"], np.array(rep.pose["alignment_rotation"]), np.array(rep.pose["alignment_translation"])
            pred = np.array(rep.predicted_poses)[:, :, 3]
            aligned = s * pred @ R.T + t
            gt = ds.poses[ds.split(args.split)][:, :, 3]
            plotting.camera_centers(tmp / "cameras.png", selected=aligned, gt=gt, title="aligned")
    print(f"{'view':>5} {'sel':>4} {'psnr':>7} {'ssim':>6}")
    for r in rep.per_image:
        print(f"{r['index']:>5} {r['selected']:>4} {r['psnr']:7.2f} {r['ssim']:6.3f}")
    print(f"mean PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.3f}")
    if rep.accuracy is not None:
        print(f"classifier accuracy {rep.accuracy:.3f}")
    if rep.pose is not None:
        print(f"pose: rotation {rep.pose['mean_rotation_deg']:.2f} deg, "
              f"center {rep.pose['mean_center_error']:.4f} ({rep.pose['mean_center_error'] / ds.radius:.3f} r)")
    return EXIT_OK


def dump_poses(model, ds, t: int, seed: int, T: int = 100):
    """Rows of candidate centers, scores and the selected flag for every training view."""
    idx = ds.split("train")
    rows = []
    sched = make_schedule(T)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for i in idx:
            x0d = to_diffusion_range(torch.from_numpy(ds.images[i]))
            x_t = forward_diffuse(x0d, t, torch.randn(x0d.shape, generator=g), sched) if t > 0 else x0d
            a, b = model.head(x_t, t)
            if model.mode == "multi":
                poses = candidate_poses(a, model.candidates)
                sel = int(torch.argmax(b))
                scores = b.tolist()
            else:
                poses, sel, scores = [model.pose_from_head(a, b)], 0, [0.0]
            for k, p in enumerate(poses):
                c = p.center.tolist()
                rows.append({"view": i, "candidate": k, "cx": c[0], "cy": c[1], "cz": c[2],
                             "score": scores[k], "selected": int(k == sel)})
    return rows


def cmd_dump_poses(args) -> int:
    ds = load_dataset(args.dataset, with_poses=True)
    with atomic_dir(args.out) as tmp:
        for path in args.ckpt:
            state = _load_model(path)
            rows = dump_poses(state.model, ds, args.t, args.seed, state.config.T)
            stem = Path(path).stem
            with open(tmp / f"poses_{stem}.csv", "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=DUMP_COLUMNS, lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})
            cand = np.array([[r["cx"], r["cy"], r["cz"]] for r in rows])
            sel = np.array([[r["cx"], r["cy"], r["cz"]] for r in rows if r["selected"]])
            gt = ds.poses[ds.split("train")][:, :, 3]
            plotting.camera_centers(tmp / f"cameras_{stem}.png", cand, sel, gt, title=f"iter {state.iteration}")
    print(f"dumped {len(args.ckpt)} checkpoint(s) to {args.out}")
    return EXIT_OK


def cmd_pointcloud(args) -> int:
    if args.resolution < 2:
        raise UsageError("--resolution must be >= 2")
    state = _load_model(args.ckpt)
    xyz, rgb, _ = export_pointcloud(state.model.field, args.extent, args.resolution, args.threshold)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=out.name + ".", suffix=".tmp", dir=out.parent)
    os.close(fd)
    try:
        write_ply(tmp, xyz, rgb)
        os.replace(tmp, out)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    print(f"{len(xyz)} points written to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    overrides = _parse_sets(args.set)
    if args.iters is not None:
        overrides["iterations"] = args.iters
    run = load_run_config(args.config, overrides)
    base = run.train
    dataset = args.dataset or run.dataset
    if not dataset:
        raise UsageError("sweep needs --dataset")
    load_dataset(dataset)  # validate before any work
    studies = ["ae", "K", "lambda"] if args.study == "all" else [args.study]
    seeds = tuple(args.seeds)
    rows = []
    with atomic_dir(args.out) as tmp:
        for study in studies:
            if study == "lambda":
                got = ablation.lambda_sweep(base, dataset, seeds=seeds[:1])
                plotting.sweep(got, tmp / "sweep_lambda.png", "lam")
            elif study == "K":
                got = ablation.k_sweep(base, dataset, seeds=seeds)
                plotting.sweep(got, tmp / "sweep_K.png", "K", group="seed")
            else:
                got = ablation.ae_compare(base, dataset, seeds=seeds[:1])
                plotting.sweep(got, tmp / "sweep_ae.png", "mode")
            rows.extend(got)
            ablation.write_rows(tmp / "sweep.csv", rows)
        summary = ablation.directional_summary(rows)
        (tmp / "summary.txt").write_text("\n".join(summary) + "\n")
    for line in summary:
        print(line)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udnf", description=__doc__.split("\n")[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = reproducible)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scenegen", help="render a synthetic posed dataset")
    s.add_argument("--views", type=int, default=24)
    s.add_argument("--mode", choices=("semisphere", "sphere", "forward_facing"), default="semisphere")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--test-fraction", type=float, default=0.1)
    s.add_argument("--samples", type=int, default=256, help="ray samples for ground-truth renders")
    s.set_defaults(func=cmd_scenegen)

    s = sub.add_parser("train", help="train a model (single | multi | ae | supervised)")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.add_argument("--mode", choices=("single", "multi", "ae", "supervised"))
    s.add_argument("--iters", type=int, help="total iterations (including any resumed ones)")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="continue from a checkpoint")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="one-step denoise images and predict their poses")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", default="test", choices=("train", "test", "all"))
    s.add_argument("--images", nargs="+")
    s.add_argument("--t", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("render-path", help="render the learned field along a camera path")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spiral", type=int, metavar="FRAMES")
    g.add_argument("--poses", help="JSON list of 3x4 camera-to-world matrices")
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--turns", type=float, default=1.0)
    s.add_argument("--height-min", type=float, default=0.5)
    s.add_argument("--height-max", type=float, default=2.0)
    s.add_argument("--samples", type=int)
    s.set_defaults(func=cmd_render_path)

    s = sub.add_parser("sample", help="generate a view from Gaussian noise")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--deterministic", action="store_true", help="zero posterior noise")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="PSNR/SSIM, classifier accuracy and aligned pose errors")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=("train", "test", "all"))
    s.add_argument("--t", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--supervised", action="store_true", help="render ground-truth poses instead")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("dump-poses", help="candidate and selected cameras per checkpoint")
    s.add_argument("--ckpt", required=True, nargs="+")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--t", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_dump_poses)

    s = sub.add_parser("pointcloud", help="export field density as a PLY point cloud")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float, default=1.0)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--extent", type=float, default=1.5)
    s.set_defaults(func=cmd_pointcloud)

    s = sub.add_parser("sweep", help="ablations: lambda sweep, K sweep, autoencoder baseline")
    s.add_argument("--dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--study", choices=("lambda", "K", "ae", "all"), default="all")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--iters", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("UDNF_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (UsageError, ValueError, tomli.TOMLDecodeError) as e:
        print(f"udnf {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"udnf {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"udnf {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
