"""Source-format adapters and normalization into the unified grounding schema."""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

import pandas as pd

from errors import FormatError, IngestIOError, OutOfBoundsError, TagParseError, ValidationError
from schema import DatasetManifest, GroundingSample, NormBox, NormPoint, TaskKind, quantize_3dp
from utils import ordered_map

logger = logging.getLogger(__name__)

BOUNDS_TOLERANCE = 1e-6


class CoordinateScale(str, Enum):
    NORMALIZED = "normalized"
    PIXEL = "pixel"


@dataclass(frozen=True)
class SourceRecord:
    record_id: str
    image_ref: str
    raw_instruction: str
    raw_annotation: Any
    coordinate_scale: CoordinateScale
    image_size: Optional[tuple]
    source_id: str

    def __post_init__(self):
        if self.coordinate_scale is CoordinateScale.PIXEL and not self.image_size:
            raise FormatError(f"{self.record_id}: pixel-space annotation without image size")


@dataclass(frozen=True)
class Rejection:
    index: int
    record_id: Optional[str]
    reason: str

    def to_dict(self):
        return {'index': self.index, 'id': self.record_id, 'reason': self.reason}


# --- tag parsing ------------------------------------------------------------

_NUMBER = re.compile(r'[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$')


def parse_tagged(s, tag, arity):
    """Extract `arity` numbers wrapped in one <tag>...</tag> pair, in document order"""
    open_tag, close_tag = f"<{tag}>", f"</{tag}>"
    start = s.find(open_tag)
    if start < 0:
        raise TagParseError(0, f"missing {open_tag}")
    body_start = start + len(open_tag)
    end = s.find(close_tag, body_start)
    if end < 0:
        raise TagParseError(len(s.encode()), f"unbalanced tag: no {close_tag}")
    nested = s.find(open_tag, body_start)
    if 0 <= nested < end:
        raise TagParseError(len(s[:nested].encode()), f"nested {open_tag}")
    if s.find(open_tag, end) >= 0:
        raise TagParseError(len(s[:s.find(open_tag, end)].encode()), f"more than one {open_tag} pair")

    values = []
    for m in re.finditer(r'[^,\s]+', s[body_start:end]):
        token = m.group()
        offset = len(s[:body_start + m.start()].encode())
        if not _NUMBER.match(token):
            raise TagParseError(offset, f"non-numeric token {token!r}")
        values.append(float(token))
    if len(values) != arity:
        raise TagParseError(len(s[:body_start].encode()), f"expected {arity} numbers, found {len(values)}")
    return tuple(values)


def parse_tagged_box(s):
    """Four raw numbers from a "<box>x0,y0,x1,y1</box>" string, unscaled"""
    return parse_tagged(s, 'box', 4)


# --- normalization ---------------------------------------------------------

def _to_unit(v, name):
    if -BOUNDS_TOLERANCE <= v < 0.0:
        return 0.0
    if 1.0 < v <= 1.0 + BOUNDS_TOLERANCE:
        return 1.0
    if not 0.0 <= v <= 1.0:
        raise OutOfBoundsError(f"{name}={v!r} outside [0, 1]")
    return v


def normalize_coords(raw, scale, image_size=None):
    """Map raw numbers to a quantized NormPoint (2 values) or NormBox (4 values)"""
    values = [float(v) for v in raw]
    if len(values) not in (2, 4):
        raise FormatError(f"annotation must have 2 or 4 coordinates, got {len(values)}")
    if any(not math.isfinite(v) for v in values):
        raise FormatError(f"non-finite coordinate in {values}")
    scale = CoordinateScale(scale)
    if scale is CoordinateScale.PIXEL:
        if not image_size or image_size[0] <= 0 or image_size[1] <= 0:
            raise FormatError(f"pixel coordinates need a positive image size, got {image_size}")
        width, height = image_size
        values = [v / (width if i % 2 == 0 else height) for i, v in enumerate(values)]

    names = ('x', 'y') if len(values) == 2 else ('x0', 'y0', 'x1', 'y1')
    values = [quantize_3dp(_to_unit(v, n)) for v, n in zip(values, names)]
    if len(values) == 2:
        return NormPoint(*values)
    x0, y0, x1, y1 = values
    return NormBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def reformat_task(rec):
    """Turn a parsed source record into a GroundingSample; task kind follows annotation arity"""
    raw = rec.raw_annotation
    if isinstance(raw, str):
        raise FormatError(f"{rec.record_id}: annotation still a string; the adapter must parse it")
    raw = list(raw)
    if len(raw) not in (2, 4):
        raise FormatError(f"{rec.record_id}: annotation arity {len(raw)} not in {{2, 4}}")
    if not rec.image_size:
        raise FormatError(f"{rec.record_id}: image size unknown")
    if not rec.raw_instruction or not str(rec.raw_instruction).strip():
        raise FormatError(f"{rec.record_id}: empty instruction")
    annotation = normalize_coords(raw, rec.coordinate_scale, rec.image_size)
    return GroundingSample(
        id=rec.record_id,
        image_ref=rec.image_ref,
        image_size=tuple(rec.image_size),
        instruction=str(rec.raw_instruction),
        task=TaskKind.for_annotation(annotation),
        annotation=annotation,
        source=rec.source_id,
    )


# --- adapters ----------------------------------------------------------------

class FormatAdapter:
    """Reads one source family: `iter_raw` yields raw items, `parse` makes a SourceRecord

    Adapters are stateless. `parse` raises a ValidationError subclass for a
    bad item and never drops fields silently.
    """

    name = None

    def iter_raw(self, path):
        with open(path, 'r', encoding='utf-8') as file:
            for line in file:
                if line.strip():
                    yield line

    def parse(self, raw, index):
        raise NotImplementedError

    @staticmethod
    def _load_json_line(raw):
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as e:
            raise FormatError(f"malformed JSON at column {e.colno}: {e.msg}") from e
        if not isinstance(obj, dict):
            raise FormatError("record must be a JSON object")
        return obj

    @staticmethod
    def _require(obj, *keys):
        missing = [k for k in keys if obj.get(k) in (None, '')]
        if missing:
            raise FormatError(f"missing fields {missing}")

    def _record_id(self, obj, index):
        return str(obj.get('id') or f"{self.name}-{index:06d}")

    @staticmethod
    def _size(obj):
        width, height = obj.get('width'), obj.get('height')
        if width is None or height is None:
            return None
        try:
            return (int(width), int(height))
        except (TypeError, ValueError) as e:
            raise FormatError(f"bad image size {width!r}x{height!r}") from e


ADAPTERS = {}


def register_adapter(cls):
    ADAPTERS[cls.name] = cls
    return cls


def get_adapter(name):
    try:
        return ADAPTERS[name]()
    except KeyError:
        raise ValidationError(f"unknown adapter {name!r}; known: {sorted(ADAPTERS)}") from None


@register_adapter
class FlatListJsonAdapter(FormatAdapter):
    """JSONL: {"id", "image", "width", "height", "instruction", "coords": [...], "scale"}

    `coords` holds 2 or 4 numbers; `scale` is "normalized" (default) or "pixel".
    """

    name = 'flat-list-json'

    def parse(self, raw, index):
        obj = self._load_json_line(raw)
        self._require(obj, 'image', 'instruction', 'coords')
        coords = obj['coords']
        if not isinstance(coords, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in coords):
            raise FormatError(f"coords must be a list of numbers, got {coords!r}")
        try:
            scale = CoordinateScale(obj.get('scale', 'normalized'))
        except ValueError as e:
            raise FormatError(f"unknown scale {obj.get('scale')!r}") from e
        return SourceRecord(
            record_id=self._record_id(obj, index),
            image_ref=str(obj['image']),
            raw_instruction=obj['instruction'],
            raw_annotation=coords,
            coordinate_scale=scale,
            image_size=self._size(obj),
            source_id=str(obj.get('source', self.name)),
        )


@register_adapter
class TaggedStringAdapter(FormatAdapter):
    """JSONL: {"id", "image", "width", "height", "instruction", "answer": "<box>..</box>"}

    `answer` wraps 4 numbers in <box> or 2 in <point>; pixel scale unless
    `scale` says "normalized".
    """

    name = 'tagged-string'

    def parse(self, raw, index):
        obj = self._load_json_line(raw)
        self._require(obj, 'image', 'instruction', 'answer')
        answer = str(obj['answer'])
        coords = parse_tagged(answer, 'point', 2) if '<point>' in answer else parse_tagged_box(answer)
        try:
            scale = CoordinateScale(obj.get('scale', 'pixel'))
        except ValueError as e:
            raise FormatError(f"unknown scale {obj.get('scale')!r}") from e
        return SourceRecord(
            record_id=self._record_id(obj, index),
            image_ref=str(obj['image']),
            raw_instruction=obj['instruction'],
            raw_annotation=list(coords),
            coordinate_scale=scale,
            image_size=self._size(obj),
            source_id=str(obj.get('source', self.name)),
        )


@register_adapter
class CsvPixelAdapter(FormatAdapter):
    """CSV with header id,image,width,height,instruction,x0,y0,x1,y1 in pixels

    Point annotations leave x1,y1 empty.
    """

    name = 'csv-pixel'
    columns = ['id', 'image', 'width', 'height', 'instruction', 'x0', 'y0', 'x1', 'y1']

    def iter_raw(self, path):
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        missing = [c for c in self.columns if c not in df.columns]
        if missing:
            raise IngestIOError(f"{path}: CSV missing columns {missing}")
        for row in df.to_dict(orient='records'):
            yield row

    def parse(self, raw, index):
        self._require(raw, 'image', 'instruction', 'x0', 'y0')
        try:
            coords = [float(raw[c]) for c in ('x0', 'y0', 'x1', 'y1') if raw.get(c, '') != '']
        except ValueError as e:
            raise FormatError(f"non-numeric coordinate: {e}") from e
        return SourceRecord(
            record_id=self._record_id(raw, index),
            image_ref=raw['image'],
            raw_instruction=raw['instruction'],
            raw_annotation=coords,
            coordinate_scale=CoordinateScale.PIXEL,
            image_size=self._size(raw),
            source_id=self.name,
        )


@register_adapter
class ScreenSpotAdapter(FormatAdapter):
    """JSON array of {"img_filename", "bbox": [x0, y0, x1, y1] px, "img_size": [w, h], "instruction"}"""

    name = 'screenspot'

    def iter_raw(self, path):
        with open(path, 'r', encoding='utf-8') as file:
            try:
                items = json.load(file)
            except json.JSONDecodeError as e:
                raise IngestIOError(f"{path}: not a JSON array: {e}") from e
        if not isinstance(items, list):
            raise IngestIOError(f"{path}: top level must be a JSON array")
        yield from items

    def parse(self, raw, index):
        if not isinstance(raw, dict):
            raise FormatError("item must be a JSON object")
        self._require(raw, 'img_filename', 'bbox', 'instruction', 'img_size')
        size = raw['img_size']
        if not isinstance(size, list) or len(size) != 2:
            raise FormatError(f"img_size must be [w, h], got {size!r}")
        return SourceRecord(
            record_id=self._record_id(raw, index),
            image_ref=str(raw['img_filename']),
            raw_instruction=raw['instruction'],
            raw_annotation=list(raw['bbox']),
            coordinate_scale=CoordinateScale.PIXEL,
            image_size=(int(size[0]), int(size[1])),
            source_id=str(raw.get('data_source', self.name)),
        )


# --- ingestion ---------------------------------------------------------------

def _ingest_one(adapter, index, raw):
    try:
        return reformat_task(adapter.parse(raw, index)), None
    except (ValidationError, TypeError, ValueError) as e:
        return None, str(e)


def ingest_dataset(adapter, path, workers=1):
    """Parse and normalize every record of one input file

    Every input record lands exactly once in the manifest or the rejection list,
    both in input order.
    """
    if isinstance(adapter, str):
        adapter = get_adapter(adapter)
    try:
        raws = list(adapter.iter_raw(path))
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        raise IngestIOError(f"cannot read {path}: {e}") from e

    results = ordered_map(lambda item: _ingest_one(adapter, *item), list(enumerate(raws)),
                          workers=workers, desc=f"ingest {adapter.name}")

    samples, rejections, seen = [], [], set()
    for index, (sample, reason) in enumerate(results):
        if sample is not None and sample.id in seen:
            sample, reason = None, f"duplicate id {sample.id!r}"
        if sample is None:
            record_id = _peek_id(raws[index])
            rejections.append(Rejection(index, record_id, reason))
            continue
        seen.add(sample.id)
        samples.append(sample)

    logger.info(f"Ingested {len(samples)} samples from {path}, rejected {len(rejections)}",
                extra={'stage': 'ingest', 'adapter': adapter.name,
                       'kept': len(samples), 'rejected': len(rejections)})
    return DatasetManifest(tuple(samples)), rejections


def _peek_id(raw):
    if isinstance(raw, dict):
        return raw.get('id') or None
    try:
        obj = json.loads(raw)
        return obj.get('id') if isinstance(obj, dict) else None
    except (json.JSONDecodeError, TypeError):
        return None
