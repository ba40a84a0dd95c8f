#!/usr/bin/env python3
"""
fusionsplat command line.

    python fusionsplat.py generate --scene orbiting_two_ball --out data/orbit
    python fusionsplat.py train --config train.cfg --data data/orbit --out runs/orbit
    python fusionsplat.py evaluate --checkpoint runs/orbit/checkpoint.npz --data data/orbit

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

import argparse
import os
import sys

import numba

from errors import VALIDATION_ERRORS, NumericalError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _scene_spec(args):
    from data_builder import SceneSpec
    spec = SceneSpec(scene=args.scene, speed=args.speed, lighting=args.lighting, width=args.width,
                     height=args.height, contrast_threshold=args.threshold, event_fps=args.event_fps,
                     seed=args.seed)
    for key in ('baseline', 'views', 'timestamps', 'eval_views', 'timestamp_jitter', 'threshold_jitter'):
        value = getattr(args, key, None)
        if value is not None:
            setattr(spec, key, value)
    return spec


def cmd_generate(args):
    from data_builder import generate_tiny_scene
    generate_tiny_scene(_scene_spec(args), args.out)
    return EXIT_OK


def cmd_simulate(args):
    from data_builder import simulate_scene_events
    from dataset_io import write_events

    spec = _scene_spec(args)
    spec.validate()
    print(f"⚡ Simulating '{spec.scene}' events at {spec.event_fps:g} fps, C={spec.contrast_threshold}")
    events = simulate_scene_events(spec, progress=True)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_events(args.out, events)
    print(f"💾 Wrote {len(events)} events to {args.out}")
    return EXIT_OK


def _load_config(args):
    from trainer import load_config
    config = load_config(args.config)
    if args.seed is not None:
        from dataclasses import replace
        config = replace(config, seed=args.seed)
    return config


def cmd_train(args):
    from dataset_io import load_dataset
    from trainer import train

    config = _load_config(args)
    dataset = load_dataset(args.data)
    print(f"📁 Loaded dataset '{dataset.scene}' from {dataset.root}")
    train(dataset, config, args.out, resume=args.resume)
    return EXIT_OK


def cmd_render(args):
    from dataset_io import load_checkpoint, load_dataset, write_depth, write_rgb
    from trainer import render_state

    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    frames = dataset.split(args.split)
    os.makedirs(args.out, exist_ok=True)
    for k, frame in enumerate(frames):
        timestamp = frame.timestamp if args.time is None else args.time
        out = render_state(state, frame.camera, timestamp)
        stem = os.path.join(args.out, f'{args.split}_v{frame.view:02d}_{k:04d}')
        write_rgb(stem + '.png', out.color)
        write_depth(stem + '.dpth', out.depth, out.alpha > 1e-4)
    print(f"🖼️  Rendered {len(frames)} '{args.split}' views to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    from dataset_io import load_dataset
    from metrics import evaluate

    dataset = load_dataset(args.data)
    report = evaluate(args.checkpoint, dataset, args.split, out_dir=args.out)
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args):
    from dataset_io import load_dataset
    from metrics import fusion_ablation

    config = _load_config(args)
    dataset = load_dataset(args.data)
    fusion_ablation(dataset, config, args.out, seeds=tuple(args.seeds))
    return EXIT_OK


def _add_scene_arguments(parser):
    parser.add_argument('--scene', default='orbiting_two_ball')
    parser.add_argument('--speed', type=float, default=1.0)
    parser.add_argument('--lighting', default='bright', choices=['bright', 'dark'])
    parser.add_argument('--width', type=int, default=64)
    parser.add_argument('--height', type=int, default=64)
    parser.add_argument('--threshold', type=float, default=0.2, help='contrast threshold C')
    parser.add_argument('--event-fps', dest='event_fps', type=float, default=500.0)


def build_parser():
    default_threads = os.getenv('FUSIONSPLAT_THREADS')
    default_data = os.getenv('FUSIONSPLAT_DATA')

    parser = argparse.ArgumentParser(prog='fusionsplat', description='RGB + event + depth Gaussian splatting')
    parser.add_argument('--threads', type=int, default=int(default_threads) if default_threads else None,
                        help='numba worker threads (default: $FUSIONSPLAT_THREADS or all cores)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', help='render an analytic scene into a dataset directory')
    _add_scene_arguments(p)
    p.add_argument('--baseline', choices=['large', 'medium', 'small'])
    p.add_argument('--views', type=int)
    p.add_argument('--timestamps', type=int)
    p.add_argument('--eval-views', dest='eval_views', type=int)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser('simulate', help='simulate an event stream for an analytic scene')
    _add_scene_arguments(p)
    p.add_argument('--timestamp-jitter', dest='timestamp_jitter', type=float, default=0.0)
    p.add_argument('--threshold-jitter', dest='threshold_jitter', type=float, default=0.0)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help='event file to write')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('train', help='optimize gaussians and deformation field on a dataset')
    p.add_argument('--config')
    p.add_argument('--data', default=default_data, required=default_data is None)
    p.add_argument('--out', required=True)
    p.add_argument('--resume')
    p.add_argument('--seed', type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('render', help='render a checkpoint at the views of a split')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', default=default_data, required=default_data is None)
    p.add_argument('--split', default='eval')
    p.add_argument('--time', type=float, help='render every view at this time (seconds)')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser('evaluate', help='PSNR / DRMS of a checkpoint on a split')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--data', default=default_data, required=default_data is None)
    p.add_argument('--split', default='eval')
    p.add_argument('--out')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('ablate', help='train RGB / RGB+depth / RGB+depth+event variants and compare')
    p.add_argument('--config')
    p.add_argument('--data', default=default_data, required=default_data is None)
    p.add_argument('--out', required=True)
    p.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2])
    p.add_argument('--seed', type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads:
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as e:
        print(f"❌ Numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
