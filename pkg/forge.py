"""Command-line entry point: `python forge.py <subcommand> ...`

Exit codes: 0 success, 2 validation error, 3 missing dependency, 4 runtime error.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from charts import dataset_stats_figure, write_figure
from errors import ConfigError, ForgeError, ValidationError
from pipeline import (LOG_LEVELS, PipelineConfig, format_stats, load_pipeline_config, run_pipeline,
                      stats)
from resolution import Mode, resize_image_file
from rlvr import parse_curriculum
from schema import read_manifest, to_training_record, write_jsonl
from utils import setup_logging

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = 'config.yaml'

# subcommand -> {flag dest: artifact it points at}
ARTIFACT_FLAGS = {
    'ingest': {'out': 'ingested', 'reject': 'rejections'},
    'filter': {'manifest': 'ingested', 'out': 'filtered'},
    'entropy': {'manifest': 'filtered', 'out': 'entropy_reports'},
    'synth': {'out': 'synthetic'},
    'resize': {'manifest': 'bucketed', 'out': 'resized'},
    'rl-sim': {'out': 'rl_log'},
}


def _load_config(args):
    if args.config:
        config = load_pipeline_config(args.config)
    elif Path(DEFAULT_CONFIG).exists():
        config = load_pipeline_config(DEFAULT_CONFIG)
    else:
        config = PipelineConfig()
    overrides = {}
    if args.workdir:
        overrides['workdir'] = Path(args.workdir)
    if args.workers:
        overrides['worker_count'] = args.workers
    if args.log_level:
        level = args.log_level.upper()
        if level not in LOG_LEVELS:
            raise ConfigError('--log-level', f"{args.log_level!r} not in {list(LOG_LEVELS)}")
        overrides['log_level'] = level
    return replace(config, **overrides)


def _given(args, **names):
    """Flags the user actually passed, keyed by the config field they set"""
    return {field: getattr(args, dest) for field, dest in names.items() if getattr(args, dest, None) is not None}


def _stage_overrides(args, config):
    """Per-subcommand flags layered over the config file"""
    overrides = {}
    paths = {artifact: Path(getattr(args, dest)) for dest, artifact in ARTIFACT_FLAGS.get(args.command, {}).items()
             if getattr(args, dest, None)}
    if args.command == 'ingest' and args.input:
        overrides['inputs'] = tuple((Path(p), args.adapter) for p in args.input)
    if args.command in ('filter', 'entropy') and args.detections:
        overrides['detections_dir'] = Path(args.detections)
    if args.command == 'filter':
        overrides['filter'] = replace(config.filter, **_given(args, tau='tau', side_l='side_l'))
    if args.command == 'entropy':
        overrides['entropy'] = replace(config.entropy, **_given(args, d='d', b='b', m='m', w_n='w_n',
                                                                w_1d='w_1d', w_2d='w_2d'))
    if args.command == 'synth':
        if args.assets:
            overrides['assets_dir'] = Path(args.assets)
        if args.backgrounds:
            overrides['backgrounds_dir'] = Path(args.backgrounds)
        overrides['synth'] = replace(config.synth, **_given(args, k_windows='k', count='count', seed='seed'))
    if args.command == 'resize':
        overrides['resize_mode'], overrides['resolution'] = _resize_policy(args, config)
    if args.command == 'rl-sim':
        if args.curriculum:
            overrides['curriculum'] = parse_curriculum(args.curriculum, config.curriculum.pass_rate_low,
                                                       config.curriculum.pass_rate_high)
        if args.tasks == 'synthetic' or args.synthetic is not None:
            overrides['rl_tasks'] = 'synthetic'
            if args.synthetic is not None:
                overrides['synthetic_tasks'] = args.synthetic
        elif args.tasks:
            overrides['rl_tasks'] = 'manifest'
            paths['bucketed'] = Path(args.tasks)
        if args.seed is not None:
            overrides['seed'] = args.seed
        overrides['rl'] = replace(config.rl, **_given(args, group_size='g', epsilon='epsilon', steps='steps'))
    if args.command == 'eval':
        if args.bench:
            overrides['bench'] = Path(args.bench)
        if args.preds:
            overrides['preds'] = Path(args.preds)
        if args.report:
            overrides['report_path'] = Path(args.report)
        if args.csv:
            overrides['csv_path'] = Path(args.csv)
    if paths:
        overrides['paths'] = {**config.paths, **paths}
    return replace(config, **overrides)


def _resize_policy(args, config):
    """Active mode and the policy with --cap-w / --cap-h applied to that mode's cap"""
    mode = Mode(args.mode) if args.mode else config.resize_mode
    policy = config.resolution
    cap_w, cap_h = policy.cap_for(mode)
    cap = (args.cap_w or cap_w, args.cap_h or cap_h)
    field_name = 'train_cap' if mode is Mode.TRAIN else 'infer_cap'
    return mode, replace(policy, **{field_name: cap})


def _print_result(result):
    for report in result.reports:
        print(f"{report.stage}: {report.counts}")
    if result.status:
        print(f"error in {result.failed_stage}: {result.error}", file=sys.stderr)
    return result.status


def _run_stage(args, config):
    return _print_result(run_pipeline(_stage_overrides(args, config), [args.command]))


def cmd_pipeline(args, config):
    stages = args.stages.split(',') if args.stages else None
    return _print_result(run_pipeline(config, stages))


def cmd_resize(args, config):
    if args.image:
        if not args.image_out:
            raise ValidationError("--image needs --image-out")
        mode, policy = _resize_policy(args, config)
        size, scale = resize_image_file(args.image, args.image_out, policy.cap_for(mode))
        print(f"{args.image} -> {args.image_out}: {size[0]}x{size[1]} (scale {scale:.6g})")
        return 0
    return _run_stage(args, config)


def cmd_stats(args, config):
    summary = stats(read_manifest(args.manifest))
    print(format_stats(summary), end='')
    if args.html:
        write_figure(dataset_stats_figure(summary), args.html)
    return 0


def cmd_export(args, config):
    manifest = read_manifest(args.manifest)
    write_jsonl((to_training_record(s) for s in manifest), args.out)
    logger.info(f"Exported {len(manifest)} training records to {args.out}")
    return 0


def _global_options(parser, default):
    """Options accepted before or after the subcommand name"""
    parser.add_argument('--config', default=default, help=f"YAML config (default: {DEFAULT_CONFIG} if present)")
    parser.add_argument('--workdir', default=default, help="Directory holding stage artifacts")
    parser.add_argument('--workers', type=int, default=default, help="Thread pool size for parallel stages")
    parser.add_argument('--log-level', default=default, help=f"Override logging.level, one of {list(LOG_LEVELS)}")


def build_parser():
    parser = argparse.ArgumentParser(prog='forge', description="GUI grounding data and RLVR toolkit")
    _global_options(parser, None)
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS so a subcommand only overrides what was given after it
    _global_options(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name, help):
        return sub.add_parser(name, help=help, parents=[common])

    p = command('ingest', "Normalize source datasets into the unified manifest")
    p.add_argument('--input', action='append', help="Source file; repeatable")
    p.add_argument('--adapter', default='flat-list-json')
    p.add_argument('--out', help="Manifest path (default: <workdir>/ingested.jsonl)")
    p.add_argument('--reject', help="Rejection report path (default: <workdir>/rejections.jsonl)")
    p.set_defaults(func=_run_stage)

    p = command('filter', "Coverage-score screening against detections")
    p.add_argument('--manifest', help="Input manifest (default: <workdir>/ingested.jsonl)")
    p.add_argument('--detections-dir', dest='detections')
    p.add_argument('--tau', type=float)
    p.add_argument('--side-l', dest='side_l', type=float)
    p.add_argument('--out', help="Kept samples (default: <workdir>/filtered.jsonl)")
    p.set_defaults(func=_run_stage)

    p = command('entropy', "Layout entropy and difficulty buckets")
    p.add_argument('--manifest', help="Input manifest (default: <workdir>/filtered.jsonl)")
    p.add_argument('--elements-dir', '--detections-dir', dest='detections',
                   help="Detection files whose box centres are the layout elements")
    p.add_argument('--d', type=int, help="Projection directions")
    p.add_argument('--b', type=int, help="Histogram bins per direction")
    p.add_argument('--m', type=int, help="Grid cells per side")
    p.add_argument('--wn', dest='w_n', type=float, help="Element-count exponent")
    p.add_argument('--w1d', dest='w_1d', type=float)
    p.add_argument('--w2d', dest='w_2d', type=float)
    p.add_argument('--out', help="Entropy reports (default: <workdir>/entropy_reports.jsonl)")
    p.set_defaults(func=_run_stage)

    p = command('synth', "GUI-overlay synthesis")
    p.add_argument('--assets-dir', dest='assets')
    p.add_argument('--backgrounds-dir', dest='backgrounds')
    p.add_argument('--k', type=int, help="Windows per composition")
    p.add_argument('--count', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--out', help="Manifest path (default: <workdir>/synthetic.jsonl)")
    p.set_defaults(func=_run_stage)

    p = command('resize', "Apply the resolution cap to a manifest or one image file")
    p.add_argument('--mode', choices=[m.value for m in Mode])
    p.add_argument('--cap-w', dest='cap_w', type=int, help="Override the active mode's cap width")
    p.add_argument('--cap-h', dest='cap_h', type=int, help="Override the active mode's cap height")
    p.add_argument('--manifest', help="Input manifest (default: <workdir>/bucketed.jsonl)")
    p.add_argument('--out', help="Resized manifest (default: <workdir>/resized.jsonl)")
    p.add_argument('--image')
    p.add_argument('--image-out', dest='image_out')
    p.set_defaults(func=cmd_resize)

    p = command('rl-sim', "GRPO training simulation")
    p.add_argument('--tasks', help="Bucketed manifest to train on, or `synthetic`")
    p.add_argument('--synthetic', type=int, help="Train on N synthetic tasks instead of the manifest")
    p.add_argument('--g', type=int, help="Group size G")
    p.add_argument('--epsilon', type=float, help="Clip range")
    p.add_argument('--steps', type=int, help="Step count (default: the curriculum's total)")
    p.add_argument('--curriculum', help="e.g. easy:50,medium:50,hard:100")
    p.add_argument('--seed', type=int)
    p.add_argument('--out', help="Training log CSV (default: <workdir>/rl_log.csv)")
    p.set_defaults(func=_run_stage)

    p = command('eval', "Score predictions against a benchmark")
    p.add_argument('--bench')
    p.add_argument('--preds')
    p.add_argument('--report', help="Text report path (default: <workdir>/eval_report.txt)")
    p.add_argument('--csv', help="CSV report path (default: <workdir>/eval_report.csv)")
    p.set_defaults(func=_run_stage)

    p = command('pipeline', "Run several stages in order")
    p.add_argument('--stages', help="Comma-separated stage list (default: pipeline.stages)")
    p.set_defaults(func=cmd_pipeline)

    p = command('stats', "Composition and image-shape summary of a manifest")
    p.add_argument('--manifest', required=True)
    p.add_argument('--html', help="Also write a plotly chart here")
    p.set_defaults(func=cmd_stats)

    p = command('export', "Write prompt/answer training records")
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        setup_logging(config.log_dir, config.log_level, config.json_logs)
        return args.func(args, config)
    except ForgeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected error")
        return 4


if __name__ == '__main__':
    sys.exit(main())
