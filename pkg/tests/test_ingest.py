import pytest

from errors import FormatError, IngestIOError, OutOfBoundsError, TagParseError, ValidationError
from helpers import write_lines
from ingest import (CoordinateScale, SourceRecord, get_adapter, ingest_dataset, normalize_coords,
                    parse_tagged, parse_tagged_box, reformat_task)
from schema import NormBox, NormPoint, TaskKind, quantize_3dp


def test_parse_tagged_box_examples():
    assert parse_tagged_box("<box>10,20,30,40</box>") == (10, 20, 30, 40)
    assert parse_tagged_box("<box>0.1 0.2 0.9 0.8</box>") == (0.1, 0.2, 0.9, 0.8)
    assert parse_tagged_box("answer: <box>1, 2, 3, 4</box>.") == (1, 2, 3, 4)


def test_parse_tagged_box_arity_error():
    with pytest.raises(TagParseError):
        parse_tagged_box("<box>10,20,30</box>")


def test_parse_tagged_box_reports_byte_offsets():
    with pytest.raises(TagParseError) as info:
        parse_tagged_box("<box>10,abc,30,40</box>")
    assert info.value.offset == 8
    with pytest.raises(TagParseError) as info:
        parse_tagged_box("10,20,30,40")
    assert info.value.offset == 0
    with pytest.raises(TagParseError):
        parse_tagged_box("<box>10,20,30,40")
    with pytest.raises(TagParseError):
        parse_tagged_box("<box>1,2,3,4</box><box>1,2,3,4</box>")


def test_parse_tagged_point():
    assert parse_tagged("<point>50 60</point>", 'point', 2) == (50, 60)


def test_normalize_coords_examples():
    assert normalize_coords((500, 300), CoordinateScale.PIXEL, (1000, 600)) == NormPoint(0.5, 0.5)
    assert normalize_coords((0.25, 0.75), CoordinateScale.NORMALIZED, (1, 1)) == NormPoint(0.25, 0.75)
    assert normalize_coords((30, 40, 10, 20), CoordinateScale.PIXEL, (100, 100)) == NormBox(0.1, 0.2, 0.3, 0.4)


def test_normalize_coords_tolerance_and_rejection():
    assert normalize_coords((1.0000005, 0.5), CoordinateScale.NORMALIZED) == NormPoint(1.0, 0.5)
    with pytest.raises(OutOfBoundsError):
        normalize_coords((1.01, 0.5), CoordinateScale.NORMALIZED)
    with pytest.raises(OutOfBoundsError):
        normalize_coords((1100, 10), CoordinateScale.PIXEL, (1000, 1000))


def test_normalize_coords_is_idempotent_on_quantized_input():
    box = normalize_coords((0.123, 0.456, 0.789, 0.999), CoordinateScale.NORMALIZED)
    assert normalize_coords(box.as_list(), CoordinateScale.NORMALIZED) == box


def _record(raw, scale=CoordinateScale.NORMALIZED):
    return SourceRecord('r1', 'x.png', 'tap here', raw, scale, (100, 100), 'src')


def test_reformat_task_infers_kind_from_arity():
    assert reformat_task(_record([0.1, 0.1, 0.2, 0.2])).task is TaskKind.BOX_PREDICTION
    assert reformat_task(_record([0.1, 0.1])).task is TaskKind.CENTER_POINT
    with pytest.raises(FormatError):
        reformat_task(_record([0.1, 0.1, 0.2]))


def test_pixel_record_needs_image_size():
    with pytest.raises(FormatError):
        SourceRecord('r1', 'x.png', 'tap', [1, 2], CoordinateScale.PIXEL, None, 'src')


def test_unknown_adapter():
    with pytest.raises(ValidationError):
        get_adapter('no-such-format')


FLAT = [
    {'id': 'f1', 'image': 'a.png', 'width': 1000, 'height': 600, 'instruction': 'open menu',
     'coords': [0.1, 0.2, 0.3, 0.4]},
    {'id': 'f2', 'image': 'a.png', 'width': 1000, 'height': 600, 'instruction': 'close', 'coords': [0.25, 0.75]},
    {'id': 'f3', 'image': 'b.png', 'width': 1000, 'height': 600, 'instruction': 'save',
     'coords': [500, 300], 'scale': 'pixel'},
    {'id': 'f4', 'image': 'c.png', 'width': 100, 'height': 100, 'instruction': 'undo',
     'coords': [30, 40, 10, 20], 'scale': 'pixel'},
    {'id': 'f5', 'image': 'c.png', 'width': 100, 'height': 100, 'instruction': 'redo', 'coords': [0.1, 0.2, 0.3]},
    {'id': 'f6', 'image': 'c.png', 'width': 100, 'height': 100, 'instruction': 'zoom', 'coords': [1.2, 0.5]},
    {'id': 'f7', 'image': 'd.png', 'width': 100, 'height': 100, 'instruction': 'edge', 'coords': [1.0000001, 0.5]},
    {'id': 'f8', 'image': 'd.png', 'width': 100, 'height': 100, 'instruction': 'print',
     'coords': [0.3333, 0.6667]},
]

TAGGED = [
    {'id': 't1', 'image': 'e.png', 'width': 100, 'height': 100, 'instruction': 'search',
     'answer': '<box>10,20,30,40</box>'},
    {'id': 't2', 'image': 'e.png', 'width': 100, 'height': 100, 'instruction': 'home',
     'answer': '<point>50 50</point>'},
    {'id': 't3', 'image': 'e.png', 'width': 100, 'height': 100, 'instruction': 'back',
     'answer': '<box>0.1 0.2 0.9 0.8</box>', 'scale': 'normalized'},
    {'id': 't4', 'image': 'e.png', 'width': 100, 'height': 100, 'instruction': 'forward',
     'answer': '<box>10,20,30</box>'},
    {'id': 't5', 'image': 'f.png', 'width': 1920, 'height': 1080, 'instruction': 'play',
     'answer': '<box>960, 540, 1000, 600</box>'},
    {'id': 't6', 'image': 'f.png', 'width': 1920, 'height': 1080, 'instruction': 'pause',
     'answer': '<point>1919,1079</point>'},
]

CSV = """id,image,width,height,instruction,x0,y0,x1,y1
c1,g.png,800,600,open file,80,60,160,120
c2,g.png,800,600,new tab,400,300,,
c3,g.png,800,600,close tab,0,0,800,600
c4,g.png,800,600,reload,abc,10,20,30
c5,h.png,1280,720,bold,640,360,,
c6,h.png,1280,720,italic,100,100,200,150
"""


def _mixed_fixture(tmp_path):
    flat = write_lines(tmp_path / 'flat.jsonl', FLAT)
    tagged = write_lines(tmp_path / 'tagged.jsonl', TAGGED)
    csv_path = tmp_path / 'pixels.csv'
    csv_path.write_text(CSV)
    return [('flat-list-json', flat), ('tagged-string', tagged), ('csv-pixel', csv_path)]


def test_mixed_fixture_conservation(tmp_path):
    samples, rejections = [], []
    for adapter, path in _mixed_fixture(tmp_path):
        manifest, rejected = ingest_dataset(adapter, path)
        samples.extend(manifest)
        rejections.extend(rejected)

    assert len(samples) == 16
    assert len(rejections) == 4
    assert sorted(r.record_id for r in rejections) == ['c4', 'f5', 'f6', 't4']
    for sample in samples:
        for v in sample.annotation.as_list():
            assert 0.0 <= v <= 1.0
            assert quantize_3dp(v) == v
        if isinstance(sample.annotation, NormBox):
            assert sample.annotation.x0 <= sample.annotation.x1
            assert sample.annotation.y0 <= sample.annotation.y1


def test_ingest_preserves_input_order_and_reports_reasons(tmp_path):
    path = write_lines(tmp_path / 'flat.jsonl', FLAT)
    manifest, rejections = ingest_dataset('flat-list-json', path, workers=4)
    assert manifest.ids == ['f1', 'f2', 'f3', 'f4', 'f7', 'f8']
    assert [r.index for r in rejections] == [4, 5]
    assert 'arity' in rejections[0].reason
    assert rejections[1].to_dict() == {'index': 5, 'id': 'f6', 'reason': rejections[1].reason}
    assert manifest.samples[3].annotation == NormBox(0.1, 0.2, 0.3, 0.4)
    assert manifest.samples[4].annotation == NormPoint(1.0, 0.5)


def test_three_valid_one_malformed(tmp_path):
    path = write_lines(tmp_path / 'in.jsonl', FLAT[:3] + ['{"id": "broken", '])
    manifest, rejections = ingest_dataset('flat-list-json', path)
    assert len(manifest) == 3
    assert len(rejections) == 1
    assert rejections[0].index == 3


def test_empty_input(tmp_path):
    path = tmp_path / 'empty.jsonl'
    path.write_text('')
    manifest, rejections = ingest_dataset('flat-list-json', path)
    assert len(manifest) == 0
    assert rejections == []


def test_duplicate_ids_become_rejections(tmp_path):
    path = write_lines(tmp_path / 'dup.jsonl', [FLAT[0], FLAT[0]])
    manifest, rejections = ingest_dataset('flat-list-json', path)
    assert manifest.ids == ['f1']
    assert rejections[0].reason == "duplicate id 'f1'"


def test_screenspot_layout(tmp_path):
    path = tmp_path / 'screenspot.json'
    path.write_text('[{"img_filename": "pc_1.png", "bbox": [100, 50, 300, 150], "img_size": [1000, 500],'
                    ' "instruction": "close window", "data_source": "windows"}]')
    manifest, rejections = ingest_dataset('screenspot', path)
    assert rejections == []
    sample = manifest.samples[0]
    assert sample.annotation == NormBox(0.1, 0.1, 0.3, 0.3)
    assert sample.source == 'windows'


def test_unreadable_input(tmp_path):
    with pytest.raises(IngestIOError):
        ingest_dataset('flat-list-json', tmp_path / 'missing.jsonl')
