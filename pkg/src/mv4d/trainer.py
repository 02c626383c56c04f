"""Pipeline assembly, optimization loop, checkpointing and ablations.

One training step: mask every frame of a clip, encode the masked views
into per-frame voxel grids, drop one frame's grid at random, reconstruct
it from the remaining frames, and render it against the dropped frame's
supervision pixels with an L1 color+depth loss.  All randomness of a
step derives from one subseed drawn from a master generator whose state
is checkpointed, so runs are bit-reproducible and resumable.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blobio import read_blob, write_blob
from .encoder import (
    VoxelSpec,
    depth_bin_centers,
    encode_clip,
    init_backbone,
)
from .masking import build_mask, select_supervision_pixels
from .renderer import (
    LearnedField,
    init_heads,
    render_loss,
    render_rays,
    supervision_rays,
)
from .scene import (
    default_rig,
    default_scene,
    default_trajectory,
    load_clip,
    render_clip,
    save_clip,
)
from .temporal import choose_drop_index, init_temporal, reconstruct_dropped

CHECKPOINT_FORMAT = 1
DIVERGENCE_LIMIT = 1e6

METRICS_COLUMNS = ("step", "loss", "rgb_term", "depth_term", "grad_norm", "wall_time")


def voxel_spec(cfg):
    return VoxelSpec(
        nx=cfg["voxel.nx"],
        ny=cfg["voxel.ny"],
        nz=cfg["voxel.nz"],
        x_min=cfg["voxel.x_min"],
        x_max=cfg["voxel.x_max"],
        y_min=cfg["voxel.y_min"],
        y_max=cfg["voxel.y_max"],
        z_min=cfg["voxel.z_min"],
        z_max=cfg["voxel.z_max"],
    )


def effective_strategy(cfg):
    """A single-frame window has nothing to reconstruct from."""
    if cfg["temporal.window"] == 1:
        return "none"
    return cfg["temporal.strategy"]


@dataclass
class PipelineParams:
    backbone: object
    temporal: object
    heads: object

    def parameters(self):
        out = {}
        out.update(self.backbone.parameters())
        out.update(self.temporal.parameters())
        out.update(self.heads.parameters())
        return out


def init_pipeline(cfg, seed):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    spec = voxel_spec(cfg)
    channels = cfg["encoder.channels"]
    backbone = init_backbone(
        rng,
        depth_bins=cfg["encoder.depth_bins"],
        voxel_channels=channels,
    )
    temporal = init_temporal(
        rng,
        effective_strategy(cfg),
        cfg["temporal.window"],
        spec,
        bev_channels=channels * cfg["voxel.nz"],
        n_heads=cfg["temporal.heads"],
        n_points=cfg["temporal.points"],
    )
    heads = init_heads(
        rng,
        feat_channels=channels,
        hidden=cfg["renderer.hidden"],
        geo_channels=cfg["renderer.geo_channels"],
        a_init=cfg["renderer.a_init"],
    )
    return PipelineParams(backbone=backbone, temporal=temporal, heads=heads)


def prepare_supervision(clip, cfg, rng):
    """Per-frame supervision sets and masks; draw order is fixed."""
    sup, masks = {}, {}
    h, w = cfg["scene.height"], cfg["scene.width"]
    for t in range(clip.num_frames):
        for v in range(clip.num_views):
            sup_seed = int(rng.integers(2**63))
            mask_seed = int(rng.integers(2**63))
            s = select_supervision_pixels(
                clip, t, v, cfg["masking.tau"], cfg["masking.per_view"], sup_seed
            )
            sup[(t, v)] = s
            masks[(t, v)] = build_mask(
                s, h, w, cfg["masking.s_ray"], cfg["masking.s_fill"], cfg["masking.ratio"], mask_seed
            )
    return sup, masks


def forward_pipeline(clip, cfg, params, rng, drop_index=None, jitter=None):
    """One clip through masking -> encode -> drop/reconstruct -> render.

    Returns (loss tensor, diagnostics, tape).  Any non-finite value
    aborts with the failing stage named.
    """
    if clip.images.shape[2] != cfg["scene.height"] or clip.images.shape[3] != cfg["scene.width"]:
        raise ValueError("clip dimensions do not match config")
    spec = voxel_spec(cfg)
    bins = depth_bin_centers(
        cfg["encoder.depth_bins"], cfg["encoder.lift_near"], cfg["encoder.lift_far"]
    )
    sup, masks = prepare_supervision(clip, cfg, rng)
    if drop_index is None:
        drop_index = choose_drop_index(clip.num_frames, rng)
    if jitter is None:
        jitter = bool(cfg["renderer.jitter"])
    stage = "encoder"
    try:
        with ad.Tape() as tape:
            grids = encode_clip(clip, masks, params.backbone, spec, bins)
            stage = "decoder"
            v_hat = reconstruct_dropped(grids, drop_index, clip.poses, params.temporal)
            stage = "renderer"
            loss, diagnostics = render_loss(
                v_hat,
                params.heads,
                [sup[(drop_index, v)] for v in range(clip.num_views)],
                clip.cameras,
                cfg["renderer.samples"],
                cfg["renderer.near"],
                cfg["renderer.far"],
                cfg["renderer.lambda_rgb"],
                cfg["renderer.lambda_depth"],
                cfg["renderer.eps_normal"],
                jitter=jitter,
                rng=rng,
            )
    except ad.NonFiniteError as exc:
        raise ad.NonFiniteError(f"{stage}: {exc}") from exc
    diagnostics["drop_index"] = drop_index
    diagnostics["masked_fraction"] = float(
        np.mean([m.masked_fraction() for m in masks.values()])
    )
    return loss, diagnostics, tape


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer."""

    def __init__(self, params, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.names = sorted(self.params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(self.params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(self.params[n].data) for n in self.names}

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.names:
            g = grads[name]
            p = self.params[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)


def gradient_by_name(tape, loss, params):
    grads = tape.gradients(loss)
    return {name: tape.grad(grads, tensor) for name, tensor in params.items()}


def save_checkpoint(path, cfg, params, optimizer, master_rng, step):
    arrays = {
        "format": np.array([CHECKPOINT_FORMAT], dtype=np.int64),
        "step": np.array([step], dtype=np.int64),
        "adam.t": np.array([optimizer.t], dtype=np.int64),
        "config_text": np.frombuffer(cfg.to_text().encode("utf-8"), dtype=np.uint8).copy(),
        "rng_state": np.frombuffer(
            json.dumps(master_rng.bit_generator.state, sort_keys=True).encode("utf-8"),
            dtype=np.uint8,
        ).copy(),
    }
    named = params.parameters()
    for name in sorted(named):
        arrays[f"param.{name}"] = named[name].data
    for name in optimizer.names:
        arrays[f"adam.m.{name}"] = optimizer.m[name]
        arrays[f"adam.v.{name}"] = optimizer.v[name]
    tmp = f"{path}.tmp"
    write_blob(tmp, arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    arrays = read_blob(path)
    if int(arrays["format"][0]) != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {arrays['format'][0]}")
    return arrays


def restore_pipeline(path, cfg=None):
    """Rebuild (cfg, params, optimizer, master_rng, step) from a checkpoint."""
    from .config import Config

    arrays = load_checkpoint(path)
    stored_cfg = Config.from_text(bytes(arrays["config_text"]).decode("utf-8"))
    if cfg is not None and cfg.digest() != stored_cfg.digest():
        raise ValueError("checkpoint was written with a different config")
    cfg = stored_cfg
    params = init_pipeline(cfg, seed=0)
    named = params.parameters()
    for name, tensor in named.items():
        stored = arrays[f"param.{name}"]
        if stored.shape != tensor.data.shape:
            raise ValueError(f"checkpoint parameter {name} has shape {stored.shape}, expected {tensor.data.shape}")
        tensor.data = stored.astype(tensor.data.dtype)
    optimizer = AdamW(
        named,
        lr=cfg["optimizer.lr"],
        weight_decay=cfg["optimizer.weight_decay"],
        beta1=cfg["optimizer.beta1"],
        beta2=cfg["optimizer.beta2"],
        eps=cfg["optimizer.eps"],
    )
    optimizer.t = int(arrays["adam.t"][0])
    for name in optimizer.names:
        optimizer.m[name] = arrays[f"adam.m.{name}"].copy()
        optimizer.v[name] = arrays[f"adam.v.{name}"].copy()
    master_rng = np.random.default_rng()
    master_rng.bit_generator.state = json.loads(bytes(arrays["rng_state"]).decode("utf-8"))
    return cfg, params, optimizer, master_rng, int(arrays["step"][0])


def list_clip_dirs(data_dir):
    dirs = sorted(
        os.path.join(data_dir, d)
        for d in os.listdir(data_dir)
        if os.path.isfile(os.path.join(data_dir, d, "manifest.txt"))
    )
    if not dirs:
        raise FileNotFoundError(f"no clip directories under {data_dir}")
    return dirs


def truncate_clip(clip, window):
    """First `window` frames of a clip (for window ablations)."""
    from .scene import MultiViewClip

    if window > clip.num_frames:
        raise ValueError(f"clip has {clip.num_frames} frames, requested window {window}")
    if window == clip.num_frames:
        return clip
    return MultiViewClip(
        images=clip.images[:window],
        lidar_uv=clip.lidar_uv[:window],
        lidar_depth=clip.lidar_depth[:window],
        poses=clip.poses[:window],
        cameras=clip.cameras,
        seed=clip.seed,
        far=clip.far,
    )


def _one_step_forward(args):
    clip, cfg, params, subseed = args
    rng = np.random.default_rng(subseed)
    loss, diagnostics, tape = forward_pipeline(clip, cfg, params, rng)
    grads = gradient_by_name(tape, loss, params.parameters())
    return float(loss.data), diagnostics, grads


def train(cfg, data_dir, out_dir, seed=0, steps=None, threads=1, resume=None):
    """Run the optimization loop; returns the final checkpoint path.

    Writes metrics.csv (one row per step) and periodic checkpoints under
    out_dir.  `resume` restores parameters, optimizer moments and the
    master RNG from an earlier checkpoint of the same config.
    """
    os.makedirs(out_dir, exist_ok=True)
    clips = [load_clip(d) for d in list_clip_dirs(data_dir)]
    clips = [truncate_clip(c, cfg["temporal.window"]) for c in clips]
    if resume:
        cfg, params, optimizer, master_rng, start_step = restore_pipeline(resume, cfg)
    else:
        params = init_pipeline(cfg, seed)
        optimizer = AdamW(
            params.parameters(),
            lr=cfg["optimizer.lr"],
            weight_decay=cfg["optimizer.weight_decay"],
            beta1=cfg["optimizer.beta1"],
            beta2=cfg["optimizer.beta2"],
            eps=cfg["optimizer.eps"],
        )
        master_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
        start_step = 0
    total_steps = cfg["optimizer.steps"] if steps is None else steps
    batch = cfg["optimizer.batch_clips"]
    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if (resume and os.path.exists(metrics_path)) else "w"
    named = params.parameters()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        with open(metrics_path, mode, newline="\n") as metrics:
            if mode == "w":
                metrics.write(",".join(METRICS_COLUMNS) + "\n")
            for step in range(start_step, total_steps):
                started = time.perf_counter()
                subseeds = [int(master_rng.integers(2**63)) for _ in range(batch)]
                batch_clips = [clips[(step * batch + i) % len(clips)] for i in range(batch)]
                work = [(c, cfg, params, s) for c, s in zip(batch_clips, subseeds)]
                if pool is not None:
                    results = list(pool.map(_one_step_forward, work))
                else:
                    results = [_one_step_forward(w) for w in work]
                # fixed-order reduction keeps multi-threaded runs reproducible
                loss_value = sum(r[0] for r in results) / batch
                mean_grads = {}
                for name in sorted(named):
                    acc = results[0][2][name].copy()
                    for r in results[1:]:
                        acc += r[2][name]
                    mean_grads[name] = acc / batch
                if not np.isfinite(loss_value) or loss_value > DIVERGENCE_LIMIT:
                    raise RuntimeError(f"divergence at step {step}: loss {loss_value}")
                grad_norm = float(
                    np.sqrt(sum(float((g**2).sum()) for g in mean_grads.values()))
                )
                optimizer.step(mean_grads)
                rgb = sum(r[1]["rgb_term"] for r in results) / batch
                dep = sum(r[1]["depth_term"] for r in results) / batch
                wall = time.perf_counter() - started
                metrics.write(
                    f"{step},{loss_value!r},{rgb!r},{dep!r},{grad_norm!r},{wall:.3f}\n"
                )
                metrics.flush()
                if (step + 1) % cfg["optimizer.checkpoint_every"] == 0:
                    save_checkpoint(
                        os.path.join(out_dir, f"checkpoint_{step + 1:06d}.blob"),
                        cfg,
                        params,
                        optimizer,
                        master_rng,
                        step + 1,
                    )
    finally:
        if pool is not None:
            pool.shutdown()
    final_path = os.path.join(out_dir, "checkpoint_final.blob")
    save_checkpoint(final_path, cfg, params, optimizer, master_rng, total_steps)
    return final_path


def evaluate_depth(clip, cfg, params, seed=0):
    """Deterministic no-jitter evaluation over every drop index.

    For each drop index m, rebuilds frame m from the rest and renders
    its supervision pixels without jitter.  Returns the mean absolute
    depth error over all rays and drops plus the mean rendering loss.
    """
    spec = voxel_spec(cfg)
    bins = depth_bin_centers(
        cfg["encoder.depth_bins"], cfg["encoder.lift_near"], cfg["encoder.lift_far"]
    )
    lam_rgb, lam_depth = cfg["renderer.lambda_rgb"], cfg["renderer.lambda_depth"]
    errors, losses = [], []
    for m in range(clip.num_frames):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, m)))
        sup, masks = prepare_supervision(clip, cfg, rng)
        with ad.no_grad():
            grids = encode_clip(clip, masks, params.backbone, spec, bins)
            v_hat = reconstruct_dropped(grids, m, clip.poses, params.temporal)
            field = LearnedField(v_hat, params.heads, cfg["renderer.eps_normal"])
            a = params.heads.sharpness()
            c_sum = d_sum = 0.0
            total = 0
            for v, camera in enumerate(clip.cameras):
                s = sup[(m, v)]
                if len(s) == 0:
                    continue
                origins, dirs, t = supervision_rays(
                    camera, s, cfg["renderer.samples"], cfg["renderer.near"], cfg["renderer.far"]
                )
                color, depth, _ = render_rays(field, origins, dirs, t, a)
                errors.append(np.abs(depth.data - s.depths))
                c_sum += float(np.abs(color.data - s.colors).sum())
                d_sum += float(np.abs(depth.data - s.depths).sum())
                total += len(s)
            losses.append((lam_rgb * c_sum + lam_depth * d_sum) / max(total, 1))
    all_err = np.concatenate(errors) if errors else np.zeros(0)
    return {
        "depth_mae": float(all_err.mean()) if all_err.size else float("nan"),
        "loss_mean": float(np.mean(losses)),
    }


WINDOW_AXIS = (1, 3, 4, 5)
STRATEGY_AXIS = ("none", "warp-cat", "short", "long", "both")


def ablate(cfg, axis, data_dir, out_dir, seed=0, steps=None):
    """Train one setting per axis value with shared seeds; emit a CSV.

    Rows report the final training loss and a deterministic evaluation
    (dropped-frame rendering loss and depth error) per setting.
    """
    if axis == "window":
        settings = [("window", w) for w in WINDOW_AXIS]
    elif axis == "strategy":
        settings = [("strategy", s) for s in STRATEGY_AXIS]
    else:
        raise ValueError(f"unknown ablation axis {axis!r} (expected window|strategy)")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for kind, value in settings:
        if kind == "window":
            run_cfg = cfg.with_overrides({"temporal.window": value})
        else:
            overrides = {"temporal.strategy": value}
            if cfg["temporal.window"] < 2 and value != "none":
                raise ValueError("strategy axis needs temporal.window >= 2")
            run_cfg = cfg.with_overrides(overrides)
        run_dir = os.path.join(out_dir, f"{kind}_{value}")
        final = train(run_cfg, data_dir, run_dir, seed=seed, steps=steps)
        with open(os.path.join(run_dir, "metrics.csv")) as f:
            last = f.readlines()[-1].split(",")
        final_loss = float(last[1])
        clip = truncate_clip(load_clip(list_clip_dirs(data_dir)[0]), run_cfg["temporal.window"])
        _, params, _, _, _ = restore_pipeline(final)
        scores = evaluate_depth(clip, run_cfg, params, seed=seed)
        rows.append(
            {
                "axis": kind,
                "value": value,
                "strategy": effective_strategy(run_cfg),
                "window": run_cfg["temporal.window"],
                "final_loss": final_loss,
                "eval_loss": scores["loss_mean"],
                "depth_mae": scores["depth_mae"],
            }
        )
    report = os.path.join(out_dir, f"ablation_{axis}.csv")
    with open(report, "w", newline="\n") as f:
        cols = ("axis", "value", "strategy", "window", "final_loss", "eval_loss", "depth_mae")
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    return report


def generate_dataset(cfg, out_dir, seed=0, ppm=False):
    """Render cfg['scene.clips'] clips of the default scene to out_dir."""
    from .blobio import write_ppm

    os.makedirs(out_dir, exist_ok=True)
    scene = default_scene()
    rig = default_rig(cfg["scene.width"], cfg["scene.height"])
    window = cfg["temporal.window"]
    trajectory = default_trajectory(window, cfg["scene.speed"], cfg["scene.yaw_rate"])
    paths = []
    for i in range(cfg["scene.clips"]):
        clip = render_clip(
            scene,
            rig,
            trajectory,
            window,
            cfg["scene.height"],
            cfg["scene.width"],
            cfg["scene.lidar_per_view"],
            seed=seed + i,
            far=cfg["renderer.far"],
        )
        clip_dir = os.path.join(out_dir, f"clip_{i:03d}")
        save_clip(clip, clip_dir)
        if ppm:
            for t in range(clip.num_frames):
                for v in range(clip.num_views):
                    write_ppm(os.path.join(clip_dir, f"frame_{t:03d}_view{v}.ppm"), clip.images[t, v])
        paths.append(clip_dir)
    return paths
