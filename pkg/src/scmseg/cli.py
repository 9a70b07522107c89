"""Experiment runner.

Verbs: train, evaluate, ablate, export-correlations, synth. Every command
takes a JSON config (--config) and writes its artifacts under the output
directory: delimited data (CSV/JSON) plus rendered PNG figures. Exit
codes: 0 success, 1 partial ablation failure, 2 configuration error,
3 numerical abort.
"""

import argparse
import csv
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import evaluation, plots
from .backbone import create_backbone
from .config import load_config, normalize_config
from .correlation import (
    FEATURE_ROWS,
    FUSION_MODES,
    PipelineSpec,
    export_level_pngs,
    super_correlation_maps,
    write_correlation_dump,
)
from .episodes import (
    DirectorySampler,
    SyntheticSampler,
    generate_synthetic_episode,
    save_episode_dir,
    split_folds,
)
from .errors import ConfigError, NanLossError
from .evaluation import build_report, write_fold_table
from .masking import mask_area_fraction
from .segmenter import fit, load_checkpoint, predict, save_checkpoint


def _add_common(parser):
    parser.add_argument("--config", help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--workers", type=int, help="episode-level worker count (1 = bitwise reproducible)")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--print-config", action="store_true",
                        help="print the fully resolved config and exit")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scmseg",
        description="Few-shot segmentation experiments over super correlation maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a segmenter and write checkpoint, log, and curves")
    _add_common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test fold")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate (default: <out>/checkpoint.json)")
    p.add_argument("--oracle", action="store_true",
                   help="test-only: score the ground-truth passthrough predictor")

    p = sub.add_parser("ablate", help="run the feature-combination and fusion-mode matrix")
    _add_common(p)
    p.add_argument("--rows", help="comma-separated subset of matrix entries to run")

    p = sub.add_parser("export-correlations",
                       help="dump one episode's correlation maps as PNGs plus a raw binary")
    _add_common(p)
    p.add_argument("--episode", help="episode directory to export (default: synthesize one)")
    p.add_argument("--class-id", type=int, help="class for the synthesized episode")

    p = sub.add_parser("synth", help="generate synthetic episode directories")
    _add_common(p)
    p.add_argument("--count", type=int, default=10, help="number of episodes to write")

    return parser


def _resolve_config(args):
    raw = load_config(args.config) if args.config else None
    return normalize_config(raw, seed=args.seed, workers=args.workers, out_dir=args.out)


def _outdir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_backbone(cfg):
    try:
        return create_backbone(cfg.backbone)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _samplers(cfg):
    """Train sampler over the fold's train classes, val over its test classes."""
    train_classes, test_classes = split_folds(cfg.fold)
    if cfg.data_source == "synthetic":
        train = SyntheticSampler(cfg.synthetic, train_classes, cfg.k,
                                 cfg.stream_seed("train_stream"))
        val = SyntheticSampler(cfg.synthetic, test_classes, cfg.k,
                               cfg.stream_seed("val_stream"))
    else:
        train = DirectorySampler(cfg.data_root, train_classes, cfg.stream_seed("train_stream"))
        val = DirectorySampler(cfg.data_root, test_classes, cfg.stream_seed("val_stream"))
    return train, val


def _test_episodes(cfg):
    _, test_classes = split_folds(cfg.fold)
    if cfg.data_source == "synthetic":
        sampler = SyntheticSampler(cfg.synthetic, test_classes, cfg.k,
                                   cfg.stream_seed("eval_stream"))
        return [sampler(i) for i in range(cfg.eval_episodes)]
    sampler = DirectorySampler(cfg.data_root, test_classes, cfg.stream_seed("eval_stream"))
    return [sampler(i) for i in range(cfg.eval_episodes)]


def cmd_train(cfg):
    out = _outdir(cfg)
    backbone = _build_backbone(cfg)
    train_sampler, val_sampler = _samplers(cfg)
    model, log = fit(train_sampler, val_sampler, cfg.segmenter, backbone, cfg.pipeline)
    save_checkpoint(model, out / "checkpoint.json",
                    backbone_config=cfg.backbone,
                    segmenter_config=cfg.raw["segmenter"])
    log.to_csv(out / "trainlog.csv")
    plots.save_training_curves(log, out / "training_curves.png")
    crossing = evaluation.time_to_threshold(log)
    final_val = log.validations()[-1][1] if log.validations() else None
    print(f"trained {cfg.segmenter.steps} steps; final val mIoU: {final_val}")
    if crossing:
        print(f"reached 0.60 val mIoU at step {crossing[0]}")
    print(f"artifacts: {out / 'checkpoint.json'}, {out / 'trainlog.csv'}, "
          f"{out / 'training_curves.png'}")
    return 0


def _evaluate_episodes(episodes, predictor, workers):
    def run(episode):
        pred = predictor(episode)
        fraction = float(sum(mask_area_fraction(m) for m in episode.support_masks)
                         / episode.k)
        return evaluation.episode_result(pred, episode.query_mask, episode.class_id, fraction)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, episodes))
    return [run(ep) for ep in episodes]


def cmd_evaluate(cfg, checkpoint_path, oracle=False):
    out = _outdir(cfg)
    episodes = _test_episodes(cfg)
    if oracle or cfg.oracle:
        predictor = lambda ep: ep.query_mask  # ground-truth passthrough, test-only
    else:
        backbone = _build_backbone(cfg)
        path = checkpoint_path or out / "checkpoint.json"
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        model, meta = load_checkpoint(path)
        _check_compat(meta, cfg)
        threshold = cfg.segmenter.threshold
        predictor = lambda ep: predict(ep, model, backbone, threshold=threshold,
                                       return_soft=False)
    results = _evaluate_episodes(episodes, predictor, cfg.workers)
    report = build_report(results, cfg.fold.fold_index, cfg.k)
    (out / "report.json").write_text(report.to_json())
    write_fold_table({cfg.fold.fold_index: report}, cfg.fold.num_folds, out / "report.csv")
    plots.save_iou_histogram(results, out / "report.png")
    print(f"fold {cfg.fold.fold_index}: n={report.n} mIoU={report.miou:.4f} "
          f"FB-IoU={report.fb_iou:.4f} "
          f"small-mask n={report.small_mask.n} "
          f"mIoU={report.small_mask.miou if report.small_mask.miou is not None else 'n/a'}")
    print(f"artifacts: {out / 'report.json'}, {out / 'report.csv'}, {out / 'report.png'}")
    return 0


def _check_compat(meta, cfg):
    if meta.get("backbone") is not None and meta["backbone"] != cfg.backbone:
        raise ConfigError(
            "checkpoint backbone config does not match the experiment config: "
            f"{meta['backbone']} vs {cfg.backbone}"
        )
    pl = meta["pipeline"]
    if tuple(pl["row"]) != cfg.pipeline.row or pl["fusion"] != cfg.pipeline.fusion:
        raise ConfigError(
            f"checkpoint pipeline ({'+'.join(pl['row'])}, {pl['fusion']}) does not "
            f"match config ({'+'.join(cfg.pipeline.row)}, {cfg.pipeline.fusion})"
        )


def matrix_entries():
    """The full ablation matrix: 7 feature rows plus 4 fusion modes."""
    entries = [("features", "+".join(row), PipelineSpec(row=row, fusion="concat"))
               for row in FEATURE_ROWS]
    entries += [("fusion", mode, PipelineSpec(fusion=mode)) for mode in FUSION_MODES]
    return entries


def cmd_ablate(cfg, only=None):
    out = _outdir(cfg)
    backbone = _build_backbone(cfg)
    train_sampler, val_sampler = _samplers(cfg)
    episodes = _test_episodes(cfg)  # shared across rows: same seeds, same episodes
    entries = matrix_entries()
    if only:
        requested = {name.strip() for name in only.split(",")}
        unknown = requested - {name for _, name, _ in entries}
        if unknown:
            raise ConfigError(f"unknown matrix entries {sorted(unknown)}")
        entries = [e for e in entries if e[1] in requested]

    rows, logs, failures = [], {}, 0
    for kind, name, spec in entries:
        spec = replace(spec, eps=cfg.pipeline.eps)
        try:
            model, log = fit(train_sampler, val_sampler, cfg.segmenter, backbone, spec)
            threshold = cfg.segmenter.threshold
            results = _evaluate_episodes(
                episodes,
                lambda ep: predict(ep, model, backbone, threshold=threshold,
                                   return_soft=False),
                cfg.workers,
            )
            report = build_report(results, cfg.fold.fold_index, cfg.k)
            crossing = evaluation.time_to_threshold(log)
            rows.append({
                "kind": kind, "name": name, "status": "ok",
                "miou": report.miou, "fb_iou": report.fb_iou,
                "small_mask_miou": report.small_mask.miou,
                "steps_to_060": crossing[0] if crossing else None,
            })
            logs[name] = log
            log.to_csv(out / f"trainlog_{name.replace('+', '_')}.csv")
        except (ValueError, RuntimeError) as exc:
            failures += 1
            rows.append({"kind": kind, "name": name, "status": f"error: {exc}",
                         "miou": None, "fb_iou": None, "small_mask_miou": None,
                         "steps_to_060": None})
        done = rows[-1]
        shown = f"{done['miou']:.4f}" if done["miou"] is not None else done["status"]
        print(f"[{kind}] {name}: {shown}")

    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["kind", "name", "status", "miou",
                                                "fb_iou", "small_mask_miou", "steps_to_060"])
        writer.writeheader()
        writer.writerows(rows)
    plots.save_ablation_bar([(r["name"], r["miou"]) for r in rows], out / "ablation.png")
    if logs:
        plots.save_convergence_comparison(logs, out / "convergence.png")
    print(f"artifacts: {out / 'ablation.csv'}, {out / 'ablation.png'}, "
          f"{out / 'convergence.png'}")
    return 1 if failures else 0


def cmd_export_correlations(cfg, episode_dir=None, class_id=None):
    out = _outdir(cfg)
    backbone = _build_backbone(cfg)
    if episode_dir:
        from .episodes import load_episode_dir

        episode = load_episode_dir(episode_dir)
    else:
        _, test_classes = split_folds(cfg.fold)
        cid = class_id if class_id is not None else sorted(test_classes)[0]
        episode = generate_synthetic_episode(cfg.synthetic, cid, cfg.k)
    stack = super_correlation_maps(
        episode.support_images[0], episode.support_masks[0], episode.query_image,
        backbone, eps=cfg.pipeline.eps,
    )
    paths = export_level_pngs(stack, out)
    raw_path = out / "corr.bin"
    write_correlation_dump(stack, raw_path)
    for p in [*paths, raw_path]:
        print(p)
    return 0


def cmd_synth(cfg, count):
    out = _outdir(cfg)
    if cfg.data_source != "synthetic":
        raise ConfigError("synth requires data.source = 'synthetic'")
    for i in range(count):
        spec = replace(cfg.synthetic, seed=cfg.synthetic.seed + i)
        class_id = i % len(spec.classes)
        episode = generate_synthetic_episode(spec, class_id, cfg.k)
        save_episode_dir(episode, out / f"ep_{i:05d}")
    print(f"wrote {count} episodes under {out}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.print_config:
            print(cfg.to_json())
            return 0
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, oracle=args.oracle)
        if args.command == "ablate":
            return cmd_ablate(cfg, only=args.rows)
        if args.command == "export-correlations":
            return cmd_export_correlations(cfg, args.episode, args.class_id)
        if args.command == "synth":
            return cmd_synth(cfg, args.count)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NanLossError as exc:
        print(f"numerical abort: {exc}; snapshot: {json.dumps(exc.snapshot)}",
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
