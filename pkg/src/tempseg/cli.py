"""Command line interface.

Exit codes: 0 success, 2 validation error (bad inputs/files/arguments),
1 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attention, pipeline
from .metrics import DEFAULT_THRESHOLDS, evaluate_all
from .network import ModelConfig, SegmentationModel, count_params_flops, load_checkpoint
from .segments import frames_to_segments, refine_prediction, save_segment_file
from .seqcore import MaskError, ShapeError


def _cmd_synth(args):
    spec = pipeline.load_synth_spec(args.spec) if args.spec else pipeline.SynthSpec()
    os.makedirs(args.out, exist_ok=True)
    data = pipeline.synth_dataset(spec, args.n, args.frames)
    for i, (feats, labels, segs) in enumerate(data):
        stem = os.path.join(args.out, f"seq_{i:03d}")
        pipeline.save_features(feats, stem + ".feat")
        pipeline.save_labels(labels, stem + ".labels")
        save_segment_file(stem + ".segments", segs)
    print(f"wrote {len(data)} sequences of {args.frames} frames to {args.out}")


def _load_dataset(data_dir):
    stems = sorted(
        f[: -len(".feat")] for f in os.listdir(data_dir) if f.endswith(".feat")
    )
    if not stems:
        raise ValueError(f"no .feat files in {data_dir}")
    dataset = []
    for stem in stems:
        feats = pipeline.load_features(os.path.join(data_dir, stem + ".feat"))
        labels = pipeline.load_labels(os.path.join(data_dir, stem + ".labels"))
        if feats.shape[0] != labels.size:
            raise ValueError(f"{stem}: {feats.shape[0]} frames but {labels.size} labels")
        dataset.append((feats, labels, frames_to_segments(labels)))
    return dataset


def _cmd_train(args):
    run = pipeline.load_run_config(args.config) if args.config else pipeline.RunConfig()
    dataset = _load_dataset(args.data)
    d_in = dataset[0][0].shape[1]
    if run.model.d_in != d_in:
        raise ValueError(f"config d_in {run.model.d_in} does not match data dimension {d_in}")
    result = pipeline.train(run, dataset, ckpt_path=args.out, log_fn=print)
    print(f"best epoch {result.best_epoch} loss {result.best_loss:.6f} "
          f"train_acc {result.final_train_accuracy:.4f}")


def _cmd_infer(args):
    cfg, params, _ = load_checkpoint(args.ckpt)
    model = SegmentationModel(cfg, params)
    feats = pipeline.load_features(args.features)
    result = pipeline.infer(model, feats, refine=not args.no_refine)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, os.path.splitext(os.path.basename(args.features))[0])
    pipeline.save_labels(result.raw_labels, stem + ".raw.labels")
    save_segment_file(stem + ".raw.segments", frames_to_segments(result.raw_labels))
    pipeline.save_labels(result.refined_labels, stem + ".refined.labels")
    save_segment_file(stem + ".refined.segments", frames_to_segments(result.refined_labels))
    print(f"{len(result.boundaries)} boundaries detected; outputs under {stem}.*")


def _cmd_eval(args):
    pred = pipeline.load_labels(args.pred)
    gt = pipeline.load_labels(args.gt)
    thresholds = tuple(float(x) for x in args.thresholds.split(","))
    report = evaluate_all(pred, gt, thresholds)
    for line in report.lines(x100=args.x100):
        print(line)
    if args.report:
        with open(args.report, "w") as f:
            f.write("\n".join(report.lines(x100=args.x100)) + "\n")


def _cmd_refine(args):
    probs = pipeline.load_features(args.probs)
    with open(args.boundaries) as f:
        bounds = [int(line.strip()) for line in f if line.strip() and not line.startswith("#")]
    labels = refine_prediction(probs, bounds)
    for v in labels:
        print(v)


def _cmd_inspect_mask(args):
    cfg = ModelConfig.from_dict({}) if not args.config else _read_model(args.config)
    schedule = attention.build_window_schedule(
        cfg.n_blocks, cfg.w_min, cfg.w_max, cfg.rate_max, dilate_shrinking=cfg.dilate_shrinking
    )
    if not 0 <= args.layer < len(schedule):
        raise ValueError(f"layer must be in [0, {len(schedule)}), got {args.layer}")
    for role, spec in zip(("expanding", "shrinking"), schedule[args.layer]):
        mask = attention.build_sparse_mask(args.T, spec)
        print(f"# {role}: width {spec.one_sided_width}, rate {spec.dilation_rate}, "
              f"pairs {attention.attended_pairs_count(mask)}")
        for q, keys in enumerate(mask.allowed):
            print(f"{q}: {' '.join(str(k) for k in keys)}")


def _read_model(path) -> ModelConfig:
    return pipeline.load_run_config(path).model


def _cmd_flops(args):
    cfg = _read_model(args.config) if args.config else ModelConfig()
    n_params, macs = count_params_flops(cfg, args.T)
    print(f"parameters = {n_params} ({n_params / 1e6:.4f} M)")
    print(f"macs = {macs} ({macs / 1e9:.4f} G at T={args.T})")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    s.add_argument("--spec", help="synth spec file ([synth] section)")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--frames", type=int, required=True)
    s.set_defaults(fn=_cmd_synth)

    s = sub.add_parser("train", help="train on a directory of .feat/.labels pairs")
    s.add_argument("--config", help="run config file ([model]/[train] sections)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("infer", help="run a checkpoint over a feature file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-refine", action="store_true")
    s.set_defaults(fn=_cmd_infer)

    s = sub.add_parser("eval", help="score predicted labels against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--thresholds", default=",".join(str(t) for t in DEFAULT_THRESHOLDS))
    s.add_argument("--x100", action="store_true", help="report scores scaled by 100")
    s.add_argument("--report", help="also write a metric=value file")
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("refine", help="center-weighted relabel of probability tracks")
    s.add_argument("--probs", required=True, help="probabilities as a feature file [T, C]")
    s.add_argument("--boundaries", required=True, help="text file, one frame index per line")
    s.set_defaults(fn=_cmd_refine)

    s = sub.add_parser("inspect-mask", help="dump a layer's sparse masks as text")
    s.add_argument("--T", type=int, required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--config")
    s.set_defaults(fn=_cmd_inspect_mask)

    s = sub.add_parser("flops", help="parameter and multiply-accumulate counts")
    s.add_argument("--config")
    s.add_argument("--T", type=int, default=2048)
    s.set_defaults(fn=_cmd_flops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ValueError, ShapeError, MaskError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except pipeline.TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
