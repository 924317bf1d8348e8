import json
from pathlib import Path

import pytest
from PIL import Image

from errors import ConfigError
from forge import _load_config, _stage_overrides, build_parser, main
from helpers import solid_image, write_lines
from pipeline import PipelineConfig
from resolution import Mode
from schema import DatasetManifest, NormBox, NormPoint, read_manifest, write_manifest


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    """Empty working directory, so no config.yaml is picked up"""
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_ingest_then_stats(workspace, capsys):
    source = write_lines(workspace / 'in.jsonl', [
        {'id': 'a', 'image': 'x.png', 'width': 100, 'height': 100, 'instruction': 'ok', 'coords': [0.1, 0.2]},
        {'id': 'b', 'image': 'x.png', 'width': 100, 'height': 100, 'instruction': 'no', 'coords': [0.1]},
    ])
    assert main(['--workdir', 'w', 'ingest', '--input', str(source)]) == 0
    assert "ingest: {'records': 2, 'kept': 1, 'rejected': 1}" in capsys.readouterr().out

    assert main(['stats', '--manifest', 'w/ingested.jsonl', '--html', 'stats.html']) == 0
    out = capsys.readouterr().out
    assert out.startswith("samples: 1\nimages: 1\n")
    assert (workspace / 'stats.html').exists()


def test_exit_codes(workspace):
    assert main(['--workdir', 'w', 'filter']) == 3
    (workspace / 'bad.yaml').write_text("filter:\n  bogus: 1\n")
    assert main(['--config', 'bad.yaml', 'filter']) == 2
    assert main(['stats', '--manifest', 'nowhere.jsonl']) == 4


def test_export_training_records(workspace, make_sample):
    manifest = DatasetManifest((make_sample('a', NormBox(0.1, 0.2, 0.3, 0.4)), make_sample('b', NormPoint(0.5, 0.5))))
    write_manifest(manifest, workspace / 'm.jsonl')
    assert main(['export', '--manifest', 'm.jsonl', '--out', 'train.jsonl']) == 0
    records = [json.loads(line) for line in (workspace / 'train.jsonl').read_text().splitlines()]
    assert [r['id'] for r in records] == ['a', 'b']
    assert records[1]['conversations'][1]['value'] == "(0.500, 0.500)"


def test_resize_single_image(workspace):
    solid_image((400, 300), (9, 9, 9)).save(workspace / 'shot.png')
    assert main(['resize', '--mode', 'infer', '--cap-w', '100', '--image', 'shot.png', '--image-out', 'out.png']) == 0
    with Image.open(workspace / 'out.png') as image:
        assert image.size == (100, 75)
    assert main(['resize', '--image', 'shot.png']) == 2


def test_rl_sim_command(workspace):
    assert main(['--workdir', 'w', 'rl-sim', '--synthetic', '3', '--curriculum', 'easy:2,medium:2', '--seed', '5']) == 0
    lines = (workspace / 'w' / 'rl_log.csv').read_text().splitlines()
    assert len(lines) == 5
    assert (workspace / 'w' / 'rl_curve.html').exists()
    assert (workspace / 'logs' / 'forge.log').exists()


def _configured(argv, config=None):
    args = build_parser().parse_args(argv)
    return _stage_overrides(args, config or PipelineConfig())


def test_documented_flags_reach_the_config():
    config = _configured(['ingest', '--input', 'a.json', '--out', 'm.jsonl', '--reject', 'r.jsonl'])
    assert config.artifact('ingested') == Path('m.jsonl')
    assert config.artifact('rejections') == Path('r.jsonl')

    config = _configured(['filter', '--manifest', 'm.jsonl', '--detections-dir', 'dets', '--tau', '0.5',
                          '--side-l', '0.02'])
    assert config.artifact('ingested') == Path('m.jsonl')
    assert config.detections_dir == Path('dets')
    assert (config.filter.tau, config.filter.side_l) == (0.5, 0.02)

    config = _configured(['entropy', '--manifest', 'f.jsonl', '--elements-dir', 'els', '--d', '8', '--b', '32',
                          '--m', '4', '--wn', '0.25', '--out', 'e.jsonl'])
    assert config.artifact('filtered') == Path('f.jsonl')
    assert config.artifact('entropy_reports') == Path('e.jsonl')
    assert config.detections_dir == Path('els')
    assert (config.entropy.d, config.entropy.b, config.entropy.m, config.entropy.w_n) == (8, 32, 4, 0.25)
    assert config.entropy.w_1d == 0.5

    config = _configured(['synth', '--assets-dir', 'assets', '--backgrounds-dir', 'bgs', '--k', '2',
                          '--count', '5', '--seed', '11'])
    assert (config.assets_dir, config.backgrounds_dir) == (Path('assets'), Path('bgs'))
    assert (config.synth.k_windows, config.synth.count, config.synth.seed) == (2, 5, 11)

    config = _configured(['rl-sim', '--tasks', 'synthetic', '--g', '4', '--epsilon', '0.1', '--steps', '30'])
    assert config.rl_tasks == 'synthetic'
    assert (config.rl.group_size, config.rl.epsilon, config.rl.steps) == (4, 0.1, 30)

    config = _configured(['rl-sim', '--tasks', 'b.jsonl'])
    assert config.rl_tasks == 'manifest'
    assert config.artifact('bucketed') == Path('b.jsonl')

    config = _configured(['resize', '--mode', 'infer', '--cap-w', '640', '--manifest', 'b.jsonl'])
    assert config.resize_mode is Mode.INFER
    assert config.resolution.cap_for(Mode.INFER)[0] == 640
    assert config.artifact('bucketed') == Path('b.jsonl')


def test_unset_flags_keep_config_values():
    config = _configured(['entropy'])
    assert config.entropy == PipelineConfig().entropy
    assert config.paths == {}
    assert config.artifact('filtered') == Path('work') / 'filtered.jsonl'


def test_options_after_the_subcommand(workspace):
    args = build_parser().parse_args(['--workdir', 'outer', 'pipeline', '--workers', '3', '--stages', 'ingest'])
    config = _load_config(args)
    assert config.workdir == Path('outer')
    assert config.worker_count == 3

    (workspace / 'cfg.yaml').write_text("pipeline:\n  workdir: fromfile\n")
    args = build_parser().parse_args(['pipeline', '--config', 'cfg.yaml', '--stages', 'ingest'])
    assert _load_config(args).workdir == Path('fromfile')


def test_documented_invocations_run(workspace):
    source = write_lines(workspace / 'in.jsonl', [
        {'id': 'a', 'image': 'x.png', 'width': 100, 'height': 100, 'instruction': 'ok', 'coords': [0.1, 0.2]},
        {'id': 'b', 'image': 'x.png', 'width': 100, 'height': 100, 'instruction': 'no', 'coords': [0.1]},
    ])
    assert main(['ingest', '--input', str(source), '--out', 'm.jsonl', '--reject', 'r.jsonl']) == 0
    assert read_manifest(workspace / 'm.jsonl').ids == ['a']
    assert len((workspace / 'r.jsonl').read_text().splitlines()) == 1

    dets = workspace / 'dets'
    dets.mkdir()
    (dets / 'x.json').write_text(json.dumps({'image_id': 'x', 'boxes': [[0.0, 0.0, 0.5, 0.5]]}))
    assert main(['filter', '--manifest', 'm.jsonl', '--detections-dir', 'dets', '--out', 'kept.jsonl']) == 0
    assert read_manifest(workspace / 'kept.jsonl').ids == ['a']

    assert main(['rl-sim', '--tasks', 'synthetic', '--g', '4', '--epsilon', '0.2', '--steps', '3',
                 '--curriculum', 'easy:3', '--out', 'log.csv']) == 0
    assert len((workspace / 'log.csv').read_text().splitlines()) == 4


def test_bad_log_level_is_a_validation_error(workspace):
    args = build_parser().parse_args(['--log-level', 'LOUD', 'stats', '--manifest', 'm.jsonl'])
    with pytest.raises(ConfigError):
        _load_config(args)
    assert main(['--log-level', 'LOUD', 'stats', '--manifest', 'm.jsonl']) == 2
    assert _load_config(build_parser().parse_args(['--log-level', 'debug', 'stats', '--manifest', 'm'])).log_level == 'DEBUG'
