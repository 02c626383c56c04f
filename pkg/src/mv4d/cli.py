"""Command-line interface.

Subcommands:
  gen        render synthetic clips to a dataset directory
  pretrain   run the drop-and-reconstruct training loop
  gradcheck  finite-difference audit of every differentiable op
  render     dump predicted color/depth maps from a checkpoint
  ablate     train the window or strategy comparison matrix

Metrics CSVs use the fixed column order
step,loss,rgb_term,depth_term,grad_norm,wall_time.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


def _add_common(p, config=True, seed=True, out=True):
    if config:
        p.add_argument("--config", help="key=value config file (defaults when omitted)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="master random seed")
    if out:
        p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="mv4d", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic clips")
    _add_common(p)
    p.add_argument("--ppm", action="store_true", help="also dump frames as PPM images")

    p = sub.add_parser("pretrain", help="run the training loop")
    p.add_argument("data", help="dataset directory produced by gen")
    _add_common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--steps", type=int, help="override optimizer.steps")
    p.add_argument("--threads", type=int, default=1, help="parallel clip workers")

    p = sub.add_parser("gradcheck", help="finite-difference audit of the op set")
    p.add_argument("--all", action="store_true", help="check every registered op")
    p.add_argument("--op", help="check a single op by name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10, help="random instances per op")

    p = sub.add_parser("render", help="dump predicted maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip directory")
    _add_common(p, config=False)

    p = sub.add_parser("ablate", help="train the comparison matrix for one axis")
    p.add_argument("data", help="dataset directory produced by gen")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=("window", "strategy"))
    p.add_argument("--steps", type=int, help="override optimizer.steps per setting")

    return parser


def _load_config(path):
    from .config import Config

    return Config.from_file(path) if path else Config()


def cmd_gen(args):
    from .trainer import generate_dataset

    cfg = _load_config(args.config)
    paths = generate_dataset(cfg, args.out, seed=args.seed, ppm=args.ppm)
    for p in paths:
        print(p)
    return 0


def cmd_pretrain(args):
    from .trainer import train

    cfg = _load_config(args.config)
    final = train(
        cfg,
        args.data,
        args.out,
        seed=args.seed,
        steps=args.steps,
        threads=args.threads,
        resume=args.checkpoint,
    )
    print(final)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import OP_FACTORIES, check_op

    names = sorted(OP_FACTORIES) if (args.all or not args.op) else [args.op]
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    print(f"{'op':<22}{'max rel err':>14}")
    for name in names:
        err = check_op(name, rng, instances=args.instances)
        worst = max(worst, err)
        print(f"{name:<22}{err:>14.3e}")
    print(f"{'worst':<22}{worst:>14.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_render(args):
    from .blobio import write_ppm
    from .renderer import LearnedField, render_image, render_rays, supervision_rays
    from .scene import load_clip
    from .trainer import (
        depth_bin_centers,
        encode_clip,
        prepare_supervision,
        reconstruct_dropped,
        restore_pipeline,
        truncate_clip,
        voxel_spec,
    )
    from . import autodiff as ad
    from .temporal import choose_drop_index

    cfg, params, _, _, _ = restore_pipeline(args.checkpoint)
    clip = truncate_clip(load_clip(args.clip), cfg["temporal.window"])
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed, spawn_key=(4,)))
    sup, masks = prepare_supervision(clip, cfg, rng)
    spec = voxel_spec(cfg)
    bins = depth_bin_centers(cfg["encoder.depth_bins"], cfg["encoder.lift_near"], cfg["encoder.lift_far"])
    with ad.no_grad():
        grids = encode_clip(clip, masks, params.backbone, spec, bins)
        m = choose_drop_index(clip.num_frames, rng)
        v_hat = reconstruct_dropped(grids, m, clip.poses, params.temporal)
        field = LearnedField(v_hat, params.heads, cfg["renderer.eps_normal"])
        a = params.heads.sharpness()
        far = cfg["renderer.far"]
        csv_path = os.path.join(args.out, f"rays_frame{m}.csv")
        with open(csv_path, "w", newline="\n") as f:
            f.write("view,u,v,chat_r,chat_g,chat_b,dhat,c_r,c_g,c_b,d\n")
            for v, camera in enumerate(clip.cameras):
                color_map, depth_map = render_image(
                    field, camera, cfg["renderer.samples"], cfg["renderer.near"], far, a
                )
                write_ppm(os.path.join(args.out, f"pred_color_frame{m}_view{v}.ppm"), color_map)
                write_ppm(
                    os.path.join(args.out, f"pred_depth_frame{m}_view{v}.ppm"),
                    np.repeat((depth_map / far)[:, :, None], 3, axis=2),
                )
                s = sup[(m, v)]
                origins, dirs, t = supervision_rays(
                    camera, s, cfg["renderer.samples"], cfg["renderer.near"], far
                )
                chat, dhat, _ = render_rays(field, origins, dirs, t, a)
                for i in range(len(s)):
                    cu, cv = s.uv[i]
                    cr, cg, cb = chat.data[i]
                    gr, gg, gb = s.colors[i]
                    f.write(
                        f"{v},{cu},{cv},{cr!r},{cg!r},{cb!r},{dhat.data[i]!r},"
                        f"{gr!r},{gg!r},{gb!r},{s.depths[i]!r}\n"
                    )
    print(csv_path)
    return 0


def cmd_ablate(args):
    from .trainer import ablate

    cfg = _load_config(args.config)
    report = ablate(cfg, args.axis, args.data, args.out, seed=args.seed, steps=args.steps)
    print(report)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
    "ablate": cmd_ablate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
