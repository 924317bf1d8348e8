"""Pipeline configuration, staged runs over a work directory, and dataset stats.

Each stage reads and writes named artifacts under `workdir`, unless `paths` points
one elsewhere; a stage whose input is missing fails with a DependencyError naming
the producer.
"""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import pandas as pd

from charts import training_curve_figure, write_figure
from detect_filter import FilterConfig, filter_dataset, load_detections
from errors import ConfigError, DependencyError, ForgeError, ValidationError
from eval_harness import load_bench, load_predictions, render_table, score
from ingest import get_adapter, ingest_dataset
from layout_entropy import (EntropyConfig, bucket_dataset, centers_from_annotations,
                            centers_from_detections, layout_entropy, priority_order)
from overlay import SynthConfig, synthesize
from resolution import Mode, ResolutionPolicy, apply_policy
from rlvr import (CurriculumConfig, RLConfig, make_synthetic_tasks, parse_curriculum,
                  simulate_training, tasks_from_manifest)
from schema import DatasetManifest, read_manifest, write_jsonl, write_manifest
from utils import atomic_write, load_yaml, ordered_map

logger = logging.getLogger(__name__)

STAGES = ('ingest', 'filter', 'entropy', 'synth', 'resize', 'rl-sim', 'eval')

# artifact -> (file name, producing stage)
ARTIFACTS = {
    'ingested': ('ingested.jsonl', 'ingest'),
    'rejections': ('rejections.jsonl', 'ingest'),
    'filtered': ('filtered.jsonl', 'filter'),
    'dropped': ('dropped.jsonl', 'filter'),
    'missing': ('missing.jsonl', 'filter'),
    'entropy_reports': ('entropy_reports.jsonl', 'entropy'),
    'bucketed': ('bucketed.jsonl', 'entropy'),
    'synthetic': ('synthetic.jsonl', 'synth'),
    'resized': ('resized.jsonl', 'resize'),
    'rl_log': ('rl_log.csv', 'rl-sim'),
    'rl_curve': ('rl_curve.html', 'rl-sim'),
    'eval_report': ('eval_report.txt', 'eval'),
    'eval_csv': ('eval_report.csv', 'eval'),
}

ASPECT_EDGES = [0.0, 0.8, 1.2, 1.6, 2.0, float('inf')]
ASPECT_LABELS = ['<0.8', '0.8-1.2', '1.2-1.6', '1.6-2.0', '>=2.0']
PIXEL_EDGES = [0, 1_000_000, 2_000_000, 4_000_000, 8_000_000, float('inf')]
PIXEL_LABELS = ['<1MP', '1-2MP', '2-4MP', '4-8MP', '>=8MP']
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


@dataclass(frozen=True)
class PipelineConfig:
    workdir: Path = Path('work')
    seed: int = 7
    worker_count: int = 1
    stages: tuple = ()
    inputs: tuple = ()
    detections_dir: Optional[Path] = None
    filter: FilterConfig = field(default_factory=FilterConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    quantiles: tuple = (1 / 3, 2 / 3)
    centers: str = 'detections'
    assets_dir: Optional[Path] = None
    backgrounds_dir: Optional[Path] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    resolution: ResolutionPolicy = field(default_factory=ResolutionPolicy)
    resize_mode: Mode = Mode.TRAIN
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    rl: RLConfig = field(default_factory=RLConfig)
    rl_tasks: str = 'manifest'
    synthetic_tasks: int = 10
    bench: Optional[Path] = None
    preds: Optional[Path] = None
    axes: Optional[tuple] = None
    model_name: str = 'model'
    report_path: Optional[Path] = None
    csv_path: Optional[Path] = None
    log_dir: str = 'logs'
    log_level: str = 'INFO'
    json_logs: bool = True
    # artifact name -> explicit path, set by per-command --manifest/--out flags
    paths: dict = field(default_factory=dict)

    def artifact(self, name):
        if name in self.paths:
            return Path(self.paths[name])
        return Path(self.workdir) / ARTIFACTS[name][0]


@dataclass(frozen=True)
class StageReport:
    stage: str
    counts: dict
    outputs: tuple

    def to_dict(self):
        return {'stage': self.stage, 'counts': self.counts, 'outputs': [str(p) for p in self.outputs]}


@dataclass(frozen=True)
class PipelineResult:
    status: int
    reports: tuple
    error: Optional[str] = None
    failed_stage: Optional[str] = None


# --- config loading ----------------------------------------------------------

def _names(cls):
    return {f.name for f in fields(cls)}


SECTION_KEYS = {
    'pipeline': {'workdir', 'seed', 'worker_count', 'stages'},
    'ingest': {'inputs'},
    'filter': {'detections_dir'} | _names(FilterConfig),
    'entropy': {'quantiles', 'centers'} | _names(EntropyConfig),
    'synth': {'assets_dir', 'backgrounds_dir', 'k_windows', 'count', 'scale_range'},
    'resolution': {'mode'} | _names(ResolutionPolicy),
    'rl': {'curriculum', 'pass_rate_low', 'pass_rate_high', 'tasks', 'synthetic_tasks'} | _names(RLConfig),
    'eval': {'bench', 'preds', 'axes', 'model_name', 'report', 'csv'},
    'logging': {'dir', 'level', 'json'},
}


def _build(section, cls, values, **fixed):
    """Construct a module config; on failure name the first key that fails alone"""
    try:
        return cls(**fixed, **values)
    except (ValidationError, TypeError, ValueError) as e:
        for key, value in values.items():
            try:
                cls(**fixed, **{key: value})
            except (ValidationError, TypeError, ValueError) as single:
                raise ConfigError(f"{section}.{key}", str(single)) from e
        raise ConfigError(section, str(e)) from e


def _path(value):
    return None if value in (None, '') else Path(value)


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(key, f"{value!r} not in {sorted(allowed)}")
    return value


def _positive_int(key, value, minimum=1):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(key, f"{value!r} must be an integer >= {minimum}")
    return value


def _stages(key, value):
    if isinstance(value, str):
        value = [s.strip() for s in value.split(',') if s.strip()]
    unknown = [s for s in value if s not in STAGES]
    if unknown:
        raise ConfigError(key, f"unknown stages {unknown}; known: {list(STAGES)}")
    return tuple(value)


def _inputs(value):
    if not isinstance(value, list):
        raise ConfigError('ingest.inputs', "must be a list of {path, adapter} entries")
    inputs = []
    for i, item in enumerate(value):
        key = f"ingest.inputs[{i}]"
        if not isinstance(item, dict) or set(item) - {'path', 'adapter'} or 'path' not in item:
            raise ConfigError(key, "entries need `path` and optional `adapter` only")
        adapter = item.get('adapter', 'flat-list-json')
        try:
            get_adapter(adapter)
        except ValidationError as e:
            raise ConfigError(f"{key}.adapter", str(e)) from e
        inputs.append((Path(item['path']), adapter))
    return tuple(inputs)


def pipeline_config_from_dict(raw):
    """Validate a raw config mapping; errors carry the dotted path of the bad key"""
    unknown_sections = sorted(set(raw) - set(SECTION_KEYS))
    if unknown_sections:
        raise ConfigError(unknown_sections[0], "unknown section")
    sections = {}
    for name in SECTION_KEYS:
        section = raw.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(name, "section must be a mapping")
        unknown = sorted(set(section) - SECTION_KEYS[name])
        if unknown:
            raise ConfigError(f"{name}.{unknown[0]}", "unknown key")
        sections[name] = dict(section)

    pipe, rl, entropy = sections['pipeline'], sections['rl'], sections['entropy']
    seed = pipe.get('seed', 7)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError('pipeline.seed', f"{seed!r} must be an integer")

    filter_cfg = _build('filter', FilterConfig,
                        {k: v for k, v in sections['filter'].items() if k != 'detections_dir'})
    entropy_cfg = _build('entropy', EntropyConfig,
                         {k: v for k, v in entropy.items() if k not in ('quantiles', 'centers')})
    quantiles = tuple(entropy.get('quantiles', (1 / 3, 2 / 3)))
    if len(quantiles) != 2 or not 0.0 < quantiles[0] < quantiles[1] < 1.0:
        raise ConfigError('entropy.quantiles', f"{list(quantiles)} must satisfy 0 < q_easy < q_hard < 1")

    synth = sections['synth']
    synth_cfg = _build('synth', SynthConfig, {k: v for k, v in synth.items()
                                              if k in ('k_windows', 'count', 'scale_range')})
    synth_cfg = replace(synth_cfg, seed=seed)

    res = sections['resolution']
    policy = _build('resolution', ResolutionPolicy, {k: v for k, v in res.items() if k != 'mode'})
    mode = Mode(_choice('resolution.mode', res.get('mode', 'train'), {m.value for m in Mode}))

    stages = CurriculumConfig().stages
    if 'curriculum' in rl:
        try:
            stages = parse_curriculum(str(rl['curriculum'])).stages
        except ValidationError as e:
            raise ConfigError('rl.curriculum', str(e)) from e
    window = {k: rl[k] for k in ('pass_rate_low', 'pass_rate_high') if k in rl}
    curriculum = _build('rl', CurriculumConfig, window, stages=stages)
    rl_cfg = _build('rl', RLConfig, {k: v for k, v in rl.items() if k in _names(RLConfig)})

    ev, log = sections['eval'], sections['logging']
    config = PipelineConfig(
        workdir=Path(pipe.get('workdir', 'work')),
        seed=seed,
        worker_count=_positive_int('pipeline.worker_count', pipe.get('worker_count', 1)),
        stages=_stages('pipeline.stages', pipe.get('stages', [])),
        inputs=_inputs(sections['ingest'].get('inputs', [])),
        detections_dir=_path(sections['filter'].get('detections_dir')),
        filter=filter_cfg,
        entropy=entropy_cfg,
        quantiles=quantiles,
        centers=_choice('entropy.centers', entropy.get('centers', 'detections'), {'detections', 'annotations'}),
        assets_dir=_path(synth.get('assets_dir')),
        backgrounds_dir=_path(synth.get('backgrounds_dir')),
        synth=synth_cfg,
        resolution=policy,
        resize_mode=mode,
        curriculum=curriculum,
        rl=rl_cfg,
        rl_tasks=_choice('rl.tasks', rl.get('tasks', 'manifest'), {'manifest', 'synthetic'}),
        synthetic_tasks=_positive_int('rl.synthetic_tasks', rl.get('synthetic_tasks', 10)),
        bench=_path(ev.get('bench')),
        preds=_path(ev.get('preds')),
        axes=tuple(ev['axes']) if ev.get('axes') else None,
        model_name=str(ev.get('model_name', 'model')),
        report_path=_path(ev.get('report')),
        csv_path=_path(ev.get('csv')),
        log_dir=str(log.get('dir', 'logs')),
        log_level=_choice('logging.level', str(log.get('level', 'INFO')).upper(), set(LOG_LEVELS)),
        json_logs=bool(log.get('json', True)),
    )
    return config


def load_pipeline_config(path):
    return pipeline_config_from_dict(load_yaml(path))


# --- stages ------------------------------------------------------------------

def _require(config, name):
    path = config.artifact(name)
    if not path.exists():
        producer = ARTIFACTS[name][1]
        raise DependencyError(f"missing {path}; run the {producer!r} stage first", producer=producer)
    return path


def _require_external(path, key):
    if path is None or not Path(path).exists():
        raise DependencyError(f"{key} is {'not set' if path is None else f'missing: {path}'}", producer=key)
    return Path(path)


def run_ingest(config):
    if not config.inputs:
        raise DependencyError("ingest.inputs lists no source files", producer='ingest.inputs')
    samples, rejections = [], []
    for path, adapter in config.inputs:
        _require_external(path, 'ingest.inputs')
        manifest, rejected = ingest_dataset(adapter, path, workers=config.worker_count)
        samples.extend(manifest)
        rejections.extend({'input': str(path), **r.to_dict()} for r in rejected)
    manifest = DatasetManifest(tuple(samples))
    write_manifest(manifest, config.artifact('ingested'))
    write_jsonl(rejections, config.artifact('rejections'))
    counts = {'records': len(manifest) + len(rejections), 'kept': len(manifest), 'rejected': len(rejections)}
    return StageReport('ingest', counts, (config.artifact('ingested'), config.artifact('rejections')))


def run_filter(config):
    manifest = read_manifest(_require(config, 'ingested'))
    detections = load_detections(_require_external(config.detections_dir, 'filter.detections_dir'))
    result = filter_dataset(manifest, detections, config.filter, workers=config.worker_count)
    write_manifest(result.kept, config.artifact('filtered'))
    write_manifest(result.dropped, config.artifact('dropped'))
    write_manifest(result.missing, config.artifact('missing'))
    counts = {'input': len(manifest), 'kept': len(result.kept),
              'dropped': len(result.dropped), 'missing': len(result.missing)}
    return StageReport('filter', counts, tuple(config.artifact(n) for n in ('filtered', 'dropped', 'missing')))


def _images(manifest):
    groups = {}
    for sample in manifest:
        groups.setdefault(sample.image_id, []).append(sample)
    return groups


def run_entropy(config):
    manifest = read_manifest(_require(config, 'filtered'))
    detections = {}
    if config.centers == 'detections' and config.detections_dir is not None and config.detections_dir.exists():
        detections = load_detections(config.detections_dir)
    groups = _images(manifest)

    def report_for(item):
        image_id, samples = item
        dets = detections.get(image_id)
        centers = centers_from_detections(dets) if dets and dets.boxes else centers_from_annotations(samples)
        return layout_entropy(centers, image_id, samples[0].image_size, config.entropy)

    reports = ordered_map(report_for, list(groups.items()), workers=config.worker_count, desc="entropy")
    reports = bucket_dataset(reports, config.quantiles)
    buckets = {r.image_id: r.bucket for r in reports}
    tagged = []
    for sample in manifest:
        tags = {t for t in sample.stage_tags if not t.startswith('bucket:')}
        tagged.append(replace(sample, stage_tags=frozenset(tags | {f"bucket:{buckets[sample.image_id].value}"})))
    bucketed = DatasetManifest(tuple(tagged))
    write_jsonl((r.to_dict() for r in priority_order(reports)), config.artifact('entropy_reports'))
    write_manifest(bucketed, config.artifact('bucketed'))
    counts = {'input': len(manifest), 'images': len(reports), 'bucketed': len(bucketed),
              **{f"bucket_{k}": v for k, v in sorted(bucketed.stats['bucket'].items())}}
    return StageReport('entropy', counts, (config.artifact('entropy_reports'), config.artifact('bucketed')))


def run_synth(config):
    assets = _require_external(config.assets_dir, 'synth.assets_dir')
    backgrounds = _require_external(config.backgrounds_dir, 'synth.backgrounds_dir')
    manifest = synthesize(assets, backgrounds, config.workdir, config.synth, workers=config.worker_count)
    write_manifest(manifest, config.artifact('synthetic'))
    counts = {'compositions': config.synth.count, 'samples': len(manifest)}
    return StageReport('synth', counts, (config.artifact('synthetic'),))


def run_resize(config):
    samples = list(read_manifest(_require(config, 'bucketed')))
    if config.artifact('synthetic').exists():
        samples.extend(read_manifest(config.artifact('synthetic')))
    resized = [apply_policy(s, config.resize_mode, config.resolution) for s in samples]
    changed = sum(a.image_size != b.image_size for a, b in zip(samples, resized))
    write_manifest(DatasetManifest(tuple(resized)), config.artifact('resized'))
    counts = {'input': len(samples), 'output': len(resized), 'resized': changed}
    return StageReport('resize', counts, (config.artifact('resized'),))


def run_rl_sim(config):
    if config.rl_tasks == 'manifest':
        tasks = tasks_from_manifest(read_manifest(_require(config, 'bucketed')))
        if not tasks:
            raise ValidationError("bucketed manifest holds no box-annotated samples to train on")
    else:
        tasks = make_synthetic_tasks(config.synthetic_tasks, seed=config.seed)
    log = simulate_training(tasks, config.curriculum, config.rl, seed=config.seed)
    with atomic_write(config.artifact('rl_log'), newline='') as handle:
        log.to_csv(handle, index=False)
    write_figure(training_curve_figure(log), config.artifact('rl_curve'))
    counts = {'tasks': len(tasks), 'steps': len(log),
              'first_reward': round(float(log['mean_reward'].iloc[0]), 6),
              'last_reward': round(float(log['mean_reward'].iloc[-1]), 6)}
    return StageReport('rl-sim', counts, (config.artifact('rl_log'), config.artifact('rl_curve')))


def run_eval(config):
    bench = load_bench(_require_external(config.bench, 'eval.bench'))
    preds = load_predictions(_require_external(config.preds, 'eval.preds'))
    table = score(bench, preds, axes=config.axes, workers=config.worker_count)
    text, csv_text = render_table({config.model_name: table})
    report_path = config.report_path or config.artifact('eval_report')
    csv_path = config.csv_path or config.artifact('eval_csv')
    with atomic_write(report_path) as handle:
        handle.write(text)
    with atomic_write(csv_path, newline='') as handle:
        handle.write(csv_text)
    counts = {'records': table.total, 'hits': table.hits,
              'micro': round(table.micro, 6), 'macro': round(table.macro, 6)}
    return StageReport('eval', counts, (report_path, csv_path))


RUNNERS = {
    'ingest': run_ingest,
    'filter': run_filter,
    'entropy': run_entropy,
    'synth': run_synth,
    'resize': run_resize,
    'rl-sim': run_rl_sim,
    'eval': run_eval,
}


def run_pipeline(config, stages=None):
    """Run stages in the given order; the first failure stops the run with its exit code

    Outputs of stages that already finished stay in place.
    """
    stages = config.stages if stages is None else _stages('stages', list(stages))
    Path(config.workdir).mkdir(parents=True, exist_ok=True)
    reports = []
    for stage in stages:
        logger.info(f"Starting stage {stage}", extra={'stage': stage})
        try:
            report = RUNNERS[stage](config)
        except ForgeError as e:
            logger.error(f"Stage {stage} failed: {e}", extra={'stage': stage, 'exit_code': e.exit_code})
            return PipelineResult(e.exit_code, tuple(reports), str(e), stage)
        logger.info(f"Finished stage {stage}: {report.counts}", extra={'stage': stage, 'counts': report.counts})
        reports.append(report)
    return PipelineResult(0, tuple(reports))


# --- stats ------------------------------------------------------------------

def _histogram(values, edges, labels):
    if not values:
        return {label: 0 for label in labels}
    binned = pd.cut(pd.Series(values, dtype=float), bins=edges, labels=labels, right=False)
    counts = binned.value_counts().reindex(labels, fill_value=0)
    return {label: int(counts[label]) for label in labels}


def stats(manifest):
    """Composition per source, task and bucket, plus image-shape histograms over distinct images"""
    total = len(manifest)
    sources = dict(sorted(Counter(s.source for s in manifest).items()))
    images = {}
    for sample in manifest:
        images.setdefault(sample.image_ref, sample.image_size)
    sizes = list(images.values())
    return {
        'samples': total,
        'images': len(images),
        'source': sources,
        'source_pct': {k: 100.0 * v / total for k, v in sources.items()},
        'task': dict(sorted(Counter(s.task.value for s in manifest).items())),
        'bucket': dict(sorted(Counter(s.tag_value('bucket') or 'unbucketed' for s in manifest).items())),
        'aspect_hist': _histogram([w / h for w, h in sizes], ASPECT_EDGES, ASPECT_LABELS),
        'pixel_hist': _histogram([w * h for w, h in sizes], PIXEL_EDGES, PIXEL_LABELS),
    }


def format_stats(summary):
    """Plain-text rendering of a `stats` summary"""
    lines = [f"samples: {summary['samples']}", f"images: {summary['images']}", "sources:"]
    lines += [f"  {k}: {v} ({summary['source_pct'][k]:.1f}%)" for k, v in summary['source'].items()]
    for name in ('task', 'bucket', 'aspect_hist', 'pixel_hist'):
        lines.append(f"{name}:")
        lines += [f"  {k}: {v}" for k, v in summary[name].items()]
    return "\n".join(lines) + "\n"
